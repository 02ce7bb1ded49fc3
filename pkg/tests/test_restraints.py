import io
import itertools

import numpy as np
import pytest
from conftest import make_chain, point_chain, random_dimer
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from qfold.errors import ContactFileError, EmptyContactsError, ResidueError
from qfold.geometry import Pose, RigidTransform, random_rotation
from qfold.pdb_io import Residue, Atom
from qfold.restraints import (
    ContactEnergy,
    ContactRestraint,
    ContactSet,
    DistanceKind,
    contact_energy,
    contact_energy_gradient,
    contact_prf,
    extract_true_contacts,
    format_contacts,
    inject_false_contacts,
    min_heavy_atom_distance,
    params_to_pose,
    parse_contacts,
    read_contact_file,
    residue_min_distances,
    restraint_energy,
    restraint_energy_array,
    write_contact_file,
)

R = ContactRestraint(1, 1, 0.0, 6.0, 0.1)


# ---------------------------------------------------------------- energy function


@pytest.mark.parametrize("x, expected", [(5.0, 0.0), (6.05, 0.25), (6.2, 2.0)])
def test_hand_values(x, expected):
    assert abs(restraint_energy(x, R) - expected) <= 1e-12


def test_below_lower_bound():
    r = ContactRestraint(1, 1, 2.0, 6.0, 0.5)
    assert restraint_energy(1.0, r) == pytest.approx(4.0, abs=1e-12)


@pytest.mark.parametrize("b", [0.0, 2.0, 6.0, 6.1])
def test_continuity_at_breakpoints(b):
    r = ContactRestraint(1, 1, 2.0, 6.0, 0.1) if b != 0.0 else R
    eps = 1e-9
    assert abs(restraint_energy(b - eps, r) - restraint_energy(b + eps, r)) < 1e-6


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0.0, 50.0),
    st.floats(0.0, 10.0),
    st.floats(0.0, 10.0),
    st.floats(0.01, 2.0),
)
def test_nonnegative_and_zero_exactly_inside(x, lb, width, sd):
    ub = lb + width
    # gaps below ~1e-150 underflow to zero once squared
    assume(not 0 < lb - x < 1e-100 and not 0 < x - ub < 1e-100)
    e = float(restraint_energy_array(x, lb, ub, sd))
    assert e >= 0.0
    assert (e == 0.0) == (lb <= x <= ub)


@settings(max_examples=100, deadline=None)
@given(st.floats(6.11, 100.0), st.floats(1e-3, 10.0))
def test_tail_strictly_increasing(x, dx):
    assert restraint_energy(x + dx, R) > restraint_energy(x, R)


# ---------------------------------------------------------------- distances and extraction


def test_min_heavy_atom_distance_basics():
    a = Residue(1, "GLY", (Atom("CA", "C", np.zeros(3)),))
    b = Residue(1, "GLY", (Atom("CA", "C", np.array([3.0, 4.0, 0.0])),))
    assert min_heavy_atom_distance(a, b) == 5.0
    assert min_heavy_atom_distance(a, a) == 0.0
    h = Residue(1, "GLY", (Atom("H", "H", np.zeros(3)),))
    with pytest.raises(ResidueError):
        min_heavy_atom_distance(a, h)


def test_min_heavy_atom_distance_brute_force():
    rng = np.random.default_rng(5)
    rec, lig = random_dimer(rng, 4, 4, gap=3.0)
    for ra in rec.residues:
        for rb in lig.residues:
            brute = min(np.linalg.norm(x.coord - y.coord) for x in ra.atoms for y in rb.atoms)
            assert min_heavy_atom_distance(ra, rb) == pytest.approx(brute, abs=1e-12)


@pytest.mark.parametrize("gap, n", [(5.9, 1), (6.1, 0)])
def test_single_residue_threshold(gap, n):
    rec = point_chain("A", [(0.0, 0.0, 0.0)])
    lig = point_chain("B", [(gap, 0.0, 0.0)])
    contacts = extract_true_contacts(rec, lig)
    assert len(contacts) == n
    for r in contacts:
        assert (r.lb, r.ub, r.sd, r.probability) == (0.0, 6.0, 0.1, 1.0)


def test_extraction_matches_brute_force_scan():
    rng = np.random.default_rng(7)
    rec, lig = random_dimer(rng, 3, 3, gap=6.0)
    expected = set()
    for (i, rl), (j, rr) in itertools.product(enumerate(lig.residues, 1), enumerate(rec.residues, 1)):
        d = min(np.linalg.norm(a.coord - b.coord) for a in rl.atoms for b in rr.atoms)
        if d <= 6.0:
            expected.add((i, j))
    assert 0 < len(expected) < 9
    assert extract_true_contacts(rec, lig).pairs == expected


def test_residue_min_distances_matrix():
    rng = np.random.default_rng(8)
    rec, lig = random_dimer(rng, 5, 4)
    d = residue_min_distances(lig, rec)
    assert d.shape == (4, 5)
    for i, j in itertools.product(range(4), range(5)):
        assert d[i, j] == pytest.approx(min_heavy_atom_distance(lig.residues[i], rec.residues[j]), abs=1e-12)


# ---------------------------------------------------------------- contact energy


def three_restraint_fixture():
    rec = point_chain("A", [(0.0, 0.0, 0.0), (0.0, 50.0, 0.0), (0.0, 100.0, 0.0)])
    lig = point_chain("B", [(5.0, 0.0, 0.0), (6.05, 50.0, 0.0), (6.2, 100.0, 0.0)])
    contacts = ContactSet(tuple(ContactRestraint(k, k) for k in (1, 2, 3)), 3, 3)
    return rec, lig, contacts


def test_three_restraint_sum():
    rec, lig, contacts = three_restraint_fixture()
    e = contact_energy(Pose.identity(), rec, lig, contacts)
    assert e == pytest.approx(2.25, abs=1e-12)
    cb = contact_energy(Pose.identity(), rec, lig, contacts, DistanceKind.CB, cb_upper_bound=None)
    assert cb == pytest.approx(2.25, abs=1e-12)


def test_native_pose_zero_and_translated_positive(hx_pair):
    rec, lig = hx_pair
    contacts = extract_true_contacts(rec, lig)
    assert contact_energy(Pose.identity(), rec, lig, contacts) == 0.0
    far = Pose(RigidTransform(np.eye(3), [100.0, 0.0, 0.0]), lig.coords.mean(axis=0))
    ev = ContactEnergy(rec, lig, contacts)
    e = ev.energy(far)
    gaps = ev.distances(far) - 6.0
    assert e > 0 and e >= gaps.max() / 0.1


def test_empty_contacts_rejected():
    rec, lig, _ = three_restraint_fixture()
    with pytest.raises(EmptyContactsError):
        contact_energy(Pose.identity(), rec, lig, ContactSet())


def test_rigid_motion_of_both_chains_leaves_energy_unchanged():
    rng = np.random.default_rng(9)
    rec, lig = random_dimer(rng)
    contacts = ContactSet((ContactRestraint(1, 1), ContactRestraint(2, 3), ContactRestraint(5, 6)), 5, 6)
    t = RigidTransform(random_rotation(rng), rng.normal(size=3) * 20)
    moved_rec, moved_lig = rec.with_coords(t.apply(rec.coords)), lig.with_coords(t.apply(lig.coords))
    for kind in DistanceKind:
        a = contact_energy(Pose.identity(), rec, lig, contacts, kind)
        b = contact_energy(Pose.identity(), moved_rec, moved_lig, contacts, kind)
        assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


def test_prob_weight_scales_terms():
    rec, lig, _ = three_restraint_fixture()
    contacts = ContactSet((ContactRestraint(3, 3, probability=0.5),), 3, 3)
    plain = contact_energy(Pose.identity(), rec, lig, contacts)
    weighted = contact_energy(Pose.identity(), rec, lig, contacts, prob_weight=True)
    assert weighted == pytest.approx(0.5 * plain)


# ---------------------------------------------------------------- gradient


def test_gradient_zero_when_satisfied():
    rec, lig, _ = three_restraint_fixture()
    contacts = ContactSet((ContactRestraint(1, 1),), 3, 3)
    g = contact_energy_gradient(np.zeros(6), Pose.identity(), rec, lig, contacts)
    np.testing.assert_array_equal(g, np.zeros(6))


@pytest.mark.parametrize("side", [1.0, -1.0])
def test_gradient_on_linear_tail(side):
    rec = point_chain("A", [(0.0, 0.0, 0.0)])
    lig = point_chain("B", [(side * 6.2, 0.0, 0.0)])
    contacts = ContactSet((ContactRestraint(1, 1),), 1, 1)
    pose = Pose(RigidTransform(), lig.coords[0])
    g = contact_energy_gradient(np.zeros(6), pose, rec, lig, contacts, cb_upper_bound=None)
    np.testing.assert_allclose(g, [side * 10.0, 0, 0, 0, 0, 0], atol=1e-9)
    # a step against the gradient moves the ligand closer
    assert abs(side * 6.2 - 0.01 * g[0]) < 6.2


def random_gradient_case(seed):
    rng = np.random.default_rng(seed)
    rec, lig = random_dimer(rng, 6, 5, gap=10.0)
    pairs = rng.choice(30, size=4, replace=False)
    restraints = tuple(
        ContactRestraint(int(k // 6) + 1, int(k % 6) + 1, 0.0, float(rng.uniform(3, 7)), float(rng.uniform(0.1, 1.0)))
        for k in pairs
    )
    contacts = ContactSet(restraints, 5, 6)
    base = Pose(RigidTransform(random_rotation(rng), rng.normal(size=3)), lig.coords.mean(axis=0))
    params = np.r_[rng.normal(size=3), rng.normal(scale=0.2, size=3)]
    return rec, lig, contacts, base, params


def central_difference(f, x, h=1e-5):
    g = np.zeros_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def near_breakpoint(ev, pose, margin=1e-3):
    d = ev.distances(pose)
    marks = np.stack([ev.lb, ev.ub, ev.ub + ev.sd])
    return bool(np.any(np.abs(d[None, :] - marks) < margin))


def gradient_relative_error(seed, kind=DistanceKind.CB):
    rec, lig, contacts, base, params = random_gradient_case(seed)
    ev = ContactEnergy(rec, lig, contacts, kind)
    if near_breakpoint(ev, params_to_pose(params, base), margin=1e-2):
        return None
    analytic = ev.gradient(params, base)
    numeric = central_difference(lambda p: ev.energy(params_to_pose(p, base)), params)
    scale = max(np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def test_gradient_matches_finite_differences():
    errors = [e for e in (gradient_relative_error(s) for s in range(130)) if e is not None]
    assert len(errors) >= 100
    assert max(errors) <= 1e-4


def test_min_heavy_gradient_matches_away_from_ties():
    errors = [e for e in (gradient_relative_error(s, DistanceKind.MIN_HEAVY) for s in range(20)) if e is not None]
    assert max(errors) <= 1e-4


def test_params_to_pose_zero_is_base():
    rng = np.random.default_rng(1)
    base = Pose(RigidTransform(random_rotation(rng), rng.normal(size=3)), rng.normal(size=3))
    pts = rng.normal(size=(4, 3))
    np.testing.assert_allclose(params_to_pose(np.zeros(6), base).apply(pts), base.apply(pts), atol=1e-12)


# ---------------------------------------------------------------- contact files


def test_parse_single_line():
    (r,) = parse_contacts("3 17 0.0 6.0 0.92\n").restraints
    assert (r.ligand_res, r.receptor_res, r.lb, r.ub, r.probability, r.sd) == (3, 17, 0.0, 6.0, 0.92, 0.1)


def test_empty_file_gives_empty_set():
    contacts = read_contact_file(io.StringIO(""))
    assert len(contacts) == 0
    with pytest.raises(EmptyContactsError):
        contacts.require_nonempty()


def test_canonical_round_trip(tmp_path):
    canonical = "1 2 0.0 6.0\n3 17 0.0 6.0 0.92\n4 4 2.0 8.0 - 0.5\n5 1 0.0 6.0 1.0 0.2\n"
    path = tmp_path / "c.txt"
    path.write_text(canonical)
    out = tmp_path / "d.txt"
    write_contact_file(read_contact_file(path), out)
    assert out.read_text() == canonical


def test_comments_and_blank_lines():
    contacts = parse_contacts("# header\n\n1 1 0 6  # trailing\n")
    assert contacts.pairs == {(1, 1)}


@pytest.mark.parametrize(
    "text, line",
    [
        ("1 1 0 6\n1 2 0 x\n", 2),
        ("1 1 0 6\n2 2 0\n", 2),
        ("1 1 0 6\n1 1 0 6\n", 2),
        ("1 1 7 6\n", 1),
    ],
)
def test_bad_lines_report_line_numbers(text, line):
    with pytest.raises(ContactFileError) as info:
        parse_contacts(text)
    assert info.value.line == line


def test_ordinal_beyond_chain_rejected():
    with pytest.raises(ContactFileError):
        parse_contacts("9 1 0 6\n", ligand_len=5, receptor_len=5)


def test_format_is_parse_inverse_for_random_sets():
    rng = np.random.default_rng(3)
    rs = tuple(
        ContactRestraint(i, j, 0.0, float(rng.uniform(4, 8)), float(rng.uniform(0.05, 1)), float(rng.uniform()))
        for i, j in {(int(a), int(b)) for a, b in rng.integers(1, 30, size=(20, 2))}
    )
    s = ContactSet(rs)
    assert parse_contacts(format_contacts(s)).restraints == s.restraints


# ---------------------------------------------------------------- accuracy


def cset(pairs):
    return ContactSet(tuple(ContactRestraint(i, j) for i, j in pairs))


def test_prf_cases():
    native = cset([(k, k) for k in range(1, 9)])
    assert contact_prf(native, native) == (1.0, 1.0, 1.0)
    assert contact_prf(cset([(20, 20)]), native) == (0.0, 0.0, 0.0)
    p, r, f = contact_prf(cset([(1, 1), (2, 2), (20, 1), (21, 1)]), native)
    assert (p, r) == (0.5, 0.25)
    assert f == pytest.approx(1.0 / 3.0, abs=1e-15)


@pytest.mark.parametrize("precision", [1.0, 0.7, 0.4])
def test_inject_false_contacts_precision(precision):
    native = cset([(k, k) for k in range(1, 11)])
    noisy = inject_false_contacts(native, precision, np.random.default_rng(0), 20, 20)
    p, r, _ = contact_prf(noisy, native)
    assert r == 1.0
    assert p == pytest.approx(precision, abs=0.05)
    again = inject_false_contacts(native, precision, np.random.default_rng(0), 20, 20)
    assert again == noisy


def test_contact_set_rejects_duplicates():
    with pytest.raises(ValueError):
        cset([(1, 1), (1, 1)])


def test_heavy_atomless_residue_rejected():
    rec = make_chain("A", [("ALA", {"CA": (0, 0, 0)})])
    lig = make_chain("B", [("ALA", {"H": (1, 0, 0)})])
    with pytest.raises(ResidueError):
        ContactEnergy(rec, lig, cset([(1, 1)]))
