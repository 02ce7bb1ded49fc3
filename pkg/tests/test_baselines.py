import io
import json
import math

import numpy as np
import pytest
from conftest import point_chain

from qfold.baselines import OptimizerConfig, Variant, metropolis_accept, optimize, starting_pose
from qfold.environment import InitialPose
from qfold.errors import EmptyContactsError
from qfold.geometry import bounding_radius, centroid
from qfold.restraints import ContactEnergy, ContactRestraint, ContactSet, DistanceKind, extract_true_contacts


@pytest.fixture(scope="module")
def five_contacts(hx_pair):
    rec, lig = hx_pair
    true = extract_true_contacts(rec, lig)
    return ContactSet(true.restraints[::3][:5], lig.length, rec.length)


def single_atom_case(gap=20.0):
    rec = point_chain("A", [(0.0, 0.0, 0.0)])
    lig = point_chain("B", [(gap, 0.0, 0.0)])
    return rec, lig, ContactSet((ContactRestraint(1, 1),), 1, 1)


def test_gd_closes_single_restraint():
    rec, lig, contacts = single_atom_case()
    cfg = OptimizerConfig(Variant.GD, restarts=1, initial_pose=InitialPose.IDENTITY)
    pose, energy, trace = optimize(cfg, rec, lig, contacts)
    assert energy == 0.0
    assert np.linalg.norm(pose.apply(lig.coords)[0]) <= 6.0
    assert trace.initial_energy == pytest.approx(1.0 + (20.0 - 6.1) / 0.1)


def test_gd_solves_bundled_target(hx_pair):
    rec, lig = hx_pair
    contacts = extract_true_contacts(rec, lig)
    result = optimize(OptimizerConfig(Variant.GD, restarts=4, seed=1), rec, lig, contacts)
    assert result.energy == 0.0
    assert result.energy == pytest.approx(ContactEnergy(rec, lig, contacts).energy(result.pose))


def test_gd_converged_restarts_are_stationary(hx_pair):
    rec, lig = hx_pair
    contacts = extract_true_contacts(rec, lig)
    result = optimize(OptimizerConfig(Variant.GD, restarts=4, seed=2), rec, lig, contacts)
    objective = ContactEnergy(rec, lig, contacts)
    for r in result.restarts:
        assert r.status in {"converged", "line_search_stalled", "max_iterations"}
        if r.converged:
            assert np.linalg.norm(objective.gradient(np.zeros(6), r.best_pose)) <= 1e-5


def test_mc_at_zero_temperature_stays_in_zero_set(hx_pair):
    rec, lig = hx_pair
    contacts = extract_true_contacts(rec, lig)
    cfg = OptimizerConfig(Variant.MC, restarts=2, max_iterations=300, temperature=1e-12, initial_pose=InitialPose.IDENTITY)
    result = optimize(cfg, rec, lig, contacts)
    for r in result.restarts:
        assert np.all(r.energies == 0.0)


def test_sa_descends_on_every_restart(hx_pair, five_contacts):
    rec, lig = hx_pair
    cfg = OptimizerConfig(Variant.SA, restarts=8, max_iterations=1500, seed=3)
    result = optimize(cfg, rec, lig, five_contacts)
    assert len(result.restarts) == 8
    for r in result.restarts:
        assert r.final_energy < r.initial_energy


@pytest.mark.parametrize("variant", list(Variant))
def test_best_so_far_and_reported_best(hx_pair, five_contacts, variant):
    rec, lig = hx_pair
    cfg = OptimizerConfig(variant, restarts=2, max_iterations=400, seed=4)
    result = optimize(cfg, rec, lig, five_contacts)
    objective = ContactEnergy(rec, lig, five_contacts)
    for r in result.restarts:
        best = r.best_so_far
        assert np.all(np.diff(best) <= 0)
        assert r.best_energy == best[-1] == r.energies.min()
        assert objective.energy(r.best_pose) == pytest.approx(r.best_energy, abs=1e-9)
    assert result.energy == min(r.best_energy for r in result.restarts)


@pytest.mark.parametrize("variant", list(Variant))
def test_same_seed_same_trace(hx_pair, five_contacts, variant):
    rec, lig = hx_pair
    cfg = OptimizerConfig(variant, restarts=2, max_iterations=200, seed=5)
    a, b = io.StringIO(), io.StringIO()
    optimize(cfg, rec, lig, five_contacts).write_trace(a)
    optimize(cfg, rec, lig, five_contacts).write_trace(b)
    assert a.getvalue() == b.getvalue()
    first = json.loads(a.getvalue().splitlines()[0])
    assert set(first) == {"restart", "iteration", "energy", "accepted"}


def test_metropolis_acceptance_rate():
    rng = np.random.default_rng(0)
    t = 2.0
    n = 100_000
    hits = sum(metropolis_accept(t * math.log(2.0), t, rng) for _ in range(n))
    assert abs(hits - n / 2) <= 5 * math.sqrt(n * 0.25)


def test_metropolis_rules():
    rng = np.random.default_rng(0)
    assert metropolis_accept(-1.0, 1e-9, rng)
    assert metropolis_accept(0.0, 1.0, rng)
    assert not metropolis_accept(1.0, 1e-12, rng)
    with pytest.raises(ValueError):
        metropolis_accept(1.0, 0.0, rng)


def test_starting_pose_shell(hx_pair):
    rec, lig = hx_pair
    radius = bounding_radius(rec.coords) + bounding_radius(lig.coords) + 10.0
    pose = starting_pose(rec, lig, InitialPose.RANDOM_SHELL, np.random.default_rng(0))
    d = np.linalg.norm(centroid(pose.apply(lig.coords)) - centroid(rec.coords))
    assert d == pytest.approx(radius, abs=1e-6)


@pytest.mark.parametrize(
    "kwargs",
    [dict(temperature=0.0), dict(t_start=1.0, t_end=2.0), dict(backtrack=1.0), dict(restarts=0)],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        OptimizerConfig(**kwargs)


def test_empty_contacts_rejected():
    rec, lig, _ = single_atom_case()
    with pytest.raises(EmptyContactsError):
        optimize(OptimizerConfig(), rec, lig, ContactSet())


def test_restarts_use_independent_starts(hx_pair, five_contacts):
    rec, lig = hx_pair
    result = optimize(OptimizerConfig(Variant.MC, restarts=3, max_iterations=5), rec, lig, five_contacts)
    starts = {r.initial_energy for r in result.restarts}
    assert len(starts) == 3


def test_cb_stage_uses_loosened_bound(hx_pair, five_contacts):
    rec, lig = hx_pair
    cb = ContactEnergy(rec, lig, five_contacts, DistanceKind.CB)
    assert np.all(cb.ub == 8.0)
