"""Inter-chain contact restraints and the contact-energy objective.

Each restraint penalises the distance ``x`` between a ligand residue and a
receptor residue with a flat-bottomed function: zero on ``[lb, ub]``,
quadratic just outside, and linear (slope ``1/sd``) once ``x`` exceeds
``ub + sd``.  The linear branch is offset by +1 so the function is
continuous at ``ub + sd``.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ContactFileError, EmptyContactsError, ResidueError
from .geometry import Axis, Pose, RigidTransform, rotation_matrix
from .pdb_io import Residue, Structure

CONTACT_THRESHOLD = 6.0
DEFAULT_SD = 0.1
CB_UPPER_BOUND = 8.0


class DistanceKind(enum.Enum):
    CB = "cb"
    MIN_HEAVY = "min_heavy"


@dataclass(frozen=True)
class ContactRestraint:
    ligand_res: int
    receptor_res: int
    lb: float = 0.0
    ub: float = CONTACT_THRESHOLD
    sd: float = DEFAULT_SD
    probability: float | None = None

    def __post_init__(self):
        if self.ligand_res < 1 or self.receptor_res < 1:
            raise ValueError("residue ordinals are 1-based")
        if not self.lb <= self.ub:
            raise ValueError(f"lb {self.lb} > ub {self.ub}")
        if not self.sd > 0:
            raise ValueError("sd must be positive")
        if self.probability is not None and not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")

    @property
    def pair(self) -> tuple[int, int]:
        return (self.ligand_res, self.receptor_res)


@dataclass(frozen=True)
class ContactSet:
    """Restraints between ligand residue ``i`` and receptor residue ``j``.

    Chain lengths are optional because contact files do not record them;
    :meth:`check_against` validates a set against actual chains.
    """

    restraints: tuple[ContactRestraint, ...] = ()
    ligand_len: int | None = None
    receptor_len: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "restraints", tuple(self.restraints))
        seen = set()
        for r in self.restraints:
            if r.pair in seen:
                raise ValueError(f"duplicate contact {r.pair}")
            seen.add(r.pair)
            if self.ligand_len is not None and r.ligand_res > self.ligand_len:
                raise ValueError(f"ligand residue {r.ligand_res} beyond chain length {self.ligand_len}")
            if self.receptor_len is not None and r.receptor_res > self.receptor_len:
                raise ValueError(f"receptor residue {r.receptor_res} beyond chain length {self.receptor_len}")

    def __len__(self) -> int:
        return len(self.restraints)

    def __iter__(self):
        return iter(self.restraints)

    @property
    def pairs(self) -> set[tuple[int, int]]:
        return {r.pair for r in self.restraints}

    def check_against(self, receptor: Structure, ligand: Structure) -> ContactSet:
        """Return a copy bound to the chain lengths, validating ordinals."""
        return ContactSet(self.restraints, ligand.length, receptor.length)

    def require_nonempty(self) -> None:
        if not self.restraints:
            raise EmptyContactsError(
                "contact set is empty; a dimer without inter-chain contacts cannot be reconstructed"
            )


# ---------------------------------------------------------------- energy terms


def restraint_energy_array(x, lb, ub, sd) -> np.ndarray:
    x, lb, ub, sd = (np.asarray(v, dtype=float) for v in (x, lb, ub, sd))
    below = ((x - lb) / sd) ** 2
    near = ((x - ub) / sd) ** 2
    tail = (x - (ub + sd)) / sd + 1.0
    return np.where(x < lb, below, np.where(x <= ub, 0.0, np.where(x <= ub + sd, near, tail)))


def restraint_energy_slope(x, lb, ub, sd) -> np.ndarray:
    """d(energy)/dx; one-sided (right) values at the breakpoints."""
    x, lb, ub, sd = (np.asarray(v, dtype=float) for v in (x, lb, ub, sd))
    below = 2.0 * (x - lb) / sd**2
    near = 2.0 * (x - ub) / sd**2
    tail = 1.0 / sd
    return np.where(x < lb, below, np.where(x <= ub, 0.0, np.where(x <= ub + sd, near, tail + 0.0 * x)))


def restraint_energy(x: float, r: ContactRestraint) -> float:
    return float(restraint_energy_array(x, r.lb, r.ub, r.sd))


# ---------------------------------------------------------------- distances


def min_heavy_atom_distance(a: Residue, b: Residue) -> float:
    ha, hb = a.heavy_atoms, b.heavy_atoms
    if not ha or not hb:
        raise ResidueError("both residues need at least one heavy atom")
    pa = np.array([x.coord for x in ha])
    pb = np.array([x.coord for x in hb])
    diff = pa[:, None, :] - pb[None, :, :]
    return float(np.sqrt(np.min(np.einsum("ijk,ijk->ij", diff, diff))))


def _heavy_blocks(structure: Structure, coords: np.ndarray | None = None):
    mask = structure.heavy_mask
    owners = structure.atom_residue[mask]
    if len(np.unique(owners)) != structure.length:
        raise ResidueError(f"chain {structure.chain_id} has a residue without heavy atoms")
    pts = (structure.coords if coords is None else coords)[mask]
    starts = np.flatnonzero(np.r_[True, owners[1:] != owners[:-1]])
    return pts, starts


def residue_min_distances(
    ligand: Structure,
    receptor: Structure,
    ligand_coords: np.ndarray | None = None,
    receptor_coords: np.ndarray | None = None,
) -> np.ndarray:
    """``(L1, L2)`` matrix of minimum heavy-atom distances between residues."""
    lp, ls = _heavy_blocks(ligand, ligand_coords)
    rp, rs = _heavy_blocks(receptor, receptor_coords)
    out = np.empty((len(ls), len(rs)))
    # bound the temporary (atoms x atoms) block to a few million entries
    per_chunk = max(1, 4_000_000 // (16 * max(1, len(rp))))
    bounds = np.r_[ls, len(lp)]
    for i in range(0, len(ls), per_chunk):
        j = min(len(ls), i + per_chunk)
        a0, a1 = bounds[i], bounds[j]
        diff = lp[a0:a1, None, :] - rp[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        d2 = np.minimum.reduceat(d2, rs, axis=1)
        d2 = np.minimum.reduceat(d2, ls[i:j] - a0, axis=0)
        out[i:j] = np.sqrt(d2)
    return out


def distance_map(receptor: Structure, ligand: Structure, pose: Pose | None = None) -> np.ndarray:
    """Cβ distance map, entry ``(i, j)`` = ligand residue i to receptor residue j."""
    lig = ligand.cb_coords if pose is None else pose.apply(ligand.cb_coords)
    diff = lig[:, None, :] - receptor.cb_coords[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def extract_true_contacts(
    receptor: Structure, ligand: Structure, threshold: float = CONTACT_THRESHOLD
) -> ContactSet:
    """Residue pairs whose closest heavy atoms are within ``threshold``."""
    d = residue_min_distances(ligand, receptor)
    restraints = [
        ContactRestraint(int(i) + 1, int(j) + 1, 0.0, threshold, DEFAULT_SD, 1.0)
        for i, j in zip(*np.nonzero(d <= threshold))
    ]
    return ContactSet(tuple(restraints), ligand.length, receptor.length)


# ---------------------------------------------------------------- pose parameters


def params_to_pose(params, base: Pose) -> Pose:
    """Pose obtained by perturbing ``base`` with ``(tx, ty, tz, rx, ry, rz)``.

    Translations are in Angstrom; the rotation ``Rz(rz) Ry(ry) Rx(rx)``
    (radians) is applied about the posed ligand centre, in world axes.
    """
    p = np.asarray(params, dtype=float).reshape(6)
    rot = rotation_matrix(Axis.Z, p[5]) @ rotation_matrix(Axis.Y, p[4]) @ rotation_matrix(Axis.X, p[3])
    return Pose(RigidTransform(rot @ base.rotation, base.translation + p[:3]), base.rotation_center)


def _rotation_and_derivatives(angles):
    rx, ry, rz = angles
    mx, my, mz = (rotation_matrix(a, v) for a, v in zip(Axis, (rx, ry, rz)))
    gen = {
        Axis.X: np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
        Axis.Y: np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]),
        Axis.Z: np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
    }
    rot = mz @ my @ mx
    d_rx = mz @ my @ mx @ gen[Axis.X]
    d_ry = mz @ my @ gen[Axis.Y] @ mx
    d_rz = mz @ gen[Axis.Z] @ my @ mx
    return rot, (d_rx, d_ry, d_rz)


# ---------------------------------------------------------------- evaluator


class ContactEnergy:
    """Vectorised contact energy of a fixed receptor/ligand/contact triple.

    This is the single objective shared by the environment, the agent and
    every baseline optimiser.

    Args:
        kind: ``MIN_HEAVY`` uses the closest heavy-atom pair of each residue
            pair; ``CB`` uses Cβ (Cα for glycine) distances.
        cb_upper_bound: in ``CB`` mode each restraint's ``ub`` is raised to
            at least this value, since Cβ atoms of contacting residues sit
            further apart than their closest heavy atoms.
        prob_weight: multiply each term by the restraint's probability.
    """

    def __init__(
        self,
        receptor: Structure,
        ligand: Structure,
        contacts: ContactSet,
        kind: DistanceKind = DistanceKind.MIN_HEAVY,
        *,
        cb_upper_bound: float | None = CB_UPPER_BOUND,
        prob_weight: bool = False,
    ):
        contacts.require_nonempty()
        contacts = contacts.check_against(receptor, ligand)
        self.receptor, self.ligand, self.contacts = receptor, ligand, contacts
        self.kind = DistanceKind(kind)
        rs = contacts.restraints
        self.lb = np.array([r.lb for r in rs])
        ub = np.array([r.ub for r in rs])
        if self.kind is DistanceKind.CB and cb_upper_bound is not None:
            ub = np.maximum(ub, cb_upper_bound)
        self.ub = ub
        self.sd = np.array([r.sd for r in rs])
        if prob_weight:
            self.weight = np.array([1.0 if r.probability is None else r.probability for r in rs])
        else:
            self.weight = np.ones(len(rs))

        if self.kind is DistanceKind.CB:
            self._lig_rows = np.array([r.ligand_res - 1 for r in rs])
            self._lig_source = np.asarray(ligand.cb_coords)
            self._rec_points = np.asarray(receptor.cb_coords)[[r.receptor_res - 1 for r in rs]]
            self._starts = np.arange(len(rs))
        else:
            lig_atoms = _residue_heavy_atom_rows(ligand)
            rec_atoms = _residue_heavy_atom_rows(receptor)
            lig_rows, rec_rows, starts = [], [], []
            for r in rs:
                la, ra = lig_atoms[r.ligand_res - 1], rec_atoms[r.receptor_res - 1]
                starts.append(len(lig_rows))
                lig_rows.extend(np.repeat(la, len(ra)))
                rec_rows.extend(np.tile(ra, len(la)))
            self._lig_rows = np.array(lig_rows, dtype=int)
            self._lig_source = np.asarray(ligand.coords)
            self._rec_points = np.asarray(receptor.coords)[np.array(rec_rows, dtype=int)]
            self._starts = np.array(starts, dtype=int)
        # only the ligand atoms that enter some restraint need to be moved
        self._used, inverse = np.unique(self._lig_rows, return_inverse=True)
        self._pair_slot = inverse.reshape(-1)
        self._used_points = self._lig_source[self._used]

    def __len__(self) -> int:
        return len(self.lb)

    def _pair_distances(self, moved: np.ndarray) -> np.ndarray:
        diff = moved[self._pair_slot] - self._rec_points
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def distances(self, pose: Pose) -> np.ndarray:
        """Per-restraint distance at ``pose`` (one value per restraint)."""
        d = self._pair_distances(pose.apply(self._used_points))
        if self.kind is DistanceKind.CB:
            return d
        return np.minimum.reduceat(d, self._starts)

    def terms(self, pose: Pose) -> np.ndarray:
        return self.weight * restraint_energy_array(self.distances(pose), self.lb, self.ub, self.sd)

    def energy(self, pose: Pose) -> float:
        return float(np.sum(self.terms(pose)))

    def satisfied(self, pose: Pose) -> np.ndarray:
        d = self.distances(pose)
        return (d >= self.lb) & (d <= self.ub)

    def gradient(self, params, base: Pose) -> np.ndarray:
        """Gradient of the energy with respect to :func:`params_to_pose` parameters.

        For ``MIN_HEAVY`` the gradient follows the closest atom pair of each
        restraint, i.e. it is a subgradient where two pairs tie.
        """
        p = np.asarray(params, dtype=float).reshape(6)
        rot, drot = _rotation_and_derivatives(p[3:])
        center = base.center
        rel = base.apply(self._used_points) - center  # v = y - c
        moved = rel @ rot.T + center + p[:3]
        diff = moved[self._pair_slot] - self._rec_points
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        if self.kind is DistanceKind.CB:
            pick = np.arange(len(dist))
        else:
            pick = _segment_argmin(dist, self._starts)
        d = dist[pick]
        slope = self.weight * restraint_energy_slope(d, self.lb, self.ub, self.sd)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(d[:, None] > 0, diff[pick] / d[:, None], 0.0)
        force = slope[:, None] * unit  # dE/dp' per restraint
        grad = np.zeros(6)
        grad[:3] = force.sum(axis=0)
        v = rel[self._pair_slot[pick]]
        for k, dm in enumerate(drot):
            grad[3 + k] = float(np.sum(force * (v @ dm.T)))
        return grad


def _residue_heavy_atom_rows(structure: Structure) -> list[np.ndarray]:
    rows: list[list[int]] = [[] for _ in range(structure.length)]
    for k, (owner, heavy) in enumerate(zip(structure.atom_residue, structure.heavy_mask)):
        if heavy:
            rows[owner].append(k)
    for i, r in enumerate(rows):
        if not r:
            raise ResidueError(f"residue {i + 1} of chain {structure.chain_id} has no heavy atoms")
    return [np.array(r, dtype=int) for r in rows]


def _segment_argmin(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    ends = np.r_[starts[1:], len(values)]
    return np.array([s + int(np.argmin(values[s:e])) for s, e in zip(starts, ends)], dtype=int)


def contact_energy(
    pose: Pose,
    receptor: Structure,
    ligand: Structure,
    contacts: ContactSet,
    distance_kind: DistanceKind = DistanceKind.MIN_HEAVY,
    **kwargs,
) -> float:
    return ContactEnergy(receptor, ligand, contacts, distance_kind, **kwargs).energy(pose)


def contact_energy_gradient(
    pose_params,
    pose: Pose,
    receptor: Structure,
    ligand: Structure,
    contacts: ContactSet,
    distance_kind: DistanceKind = DistanceKind.CB,
    **kwargs,
) -> np.ndarray:
    return ContactEnergy(receptor, ligand, contacts, distance_kind, **kwargs).gradient(pose_params, pose)


# ---------------------------------------------------------------- contact files


def _fmt(x: float) -> str:
    return repr(float(x))


def format_contacts(contacts: ContactSet) -> str:
    """Canonical text form: ``i j lb ub [p [sd]]`` per line.

    ``i`` is the 1-based ligand residue and ``j`` the receptor residue.
    ``p`` is written as ``-`` when absent but an explicit ``sd`` follows.
    """
    lines = []
    for r in contacts.restraints:
        fields = [str(r.ligand_res), str(r.receptor_res), _fmt(r.lb), _fmt(r.ub)]
        custom_sd = r.sd != DEFAULT_SD
        if r.probability is not None or custom_sd:
            fields.append("-" if r.probability is None else _fmt(r.probability))
        if custom_sd:
            fields.append(_fmt(r.sd))
        lines.append(" ".join(fields))
    return "".join(line + "\n" for line in lines)


def parse_contacts(text: str, ligand_len: int | None = None, receptor_len: int | None = None) -> ContactSet:
    restraints, seen = [], set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if not 4 <= len(fields) <= 6:
            raise ContactFileError(f"expected 'i j lb ub [p [sd]]', got {len(fields)} fields", line=lineno)
        try:
            i, j = int(fields[0]), int(fields[1])
            lb, ub = float(fields[2]), float(fields[3])
            p = None
            if len(fields) >= 5 and fields[4] != "-":
                p = float(fields[4])
            sd = float(fields[5]) if len(fields) == 6 else DEFAULT_SD
        except ValueError as exc:
            raise ContactFileError(f"bad number ({exc})", line=lineno) from None
        if not all(math.isfinite(v) for v in (lb, ub, sd)):
            raise ContactFileError("non-finite bound", line=lineno)
        if (i, j) in seen:
            raise ContactFileError(f"duplicate contact {i} {j}", line=lineno)
        seen.add((i, j))
        try:
            restraints.append(ContactRestraint(i, j, lb, ub, sd, p))
        except ValueError as exc:
            raise ContactFileError(str(exc), line=lineno) from None
    try:
        return ContactSet(tuple(restraints), ligand_len, receptor_len)
    except ValueError as exc:
        raise ContactFileError(str(exc)) from None


def read_contact_file(source, ligand_len: int | None = None, receptor_len: int | None = None) -> ContactSet:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="ascii") as fh:
            text = fh.read()
    else:
        text = source.read()
        if isinstance(text, bytes):
            text = text.decode("ascii")
    return parse_contacts(text, ligand_len, receptor_len)


def write_contact_file(contacts: ContactSet, sink) -> None:
    text = format_contacts(contacts)
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
    else:
        try:
            sink.write(text)
        except TypeError:
            sink.write(text.encode("ascii"))


# ---------------------------------------------------------------- accuracy


def contact_prf(predicted: ContactSet, native: ContactSet) -> tuple[float, float, float]:
    """Precision, recall and F1 of predicted residue pairs against native ones."""
    pred, true = predicted.pairs, native.pairs
    hits = len(pred & true)
    precision = hits / len(pred) if pred else 0.0
    recall = hits / len(true) if true else 0.0
    if not pred or not true or precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def inject_false_contacts(
    native: ContactSet,
    precision: float,
    rng: np.random.Generator,
    ligand_len: int,
    receptor_len: int,
    exclude: Iterable[tuple[int, int]] = (),
) -> ContactSet:
    """Keep every native pair and add random non-native pairs.

    The number of false pairs is chosen so that the returned set has the
    requested precision with respect to ``native`` (to the nearest pair).
    """
    if not 0 < precision <= 1:
        raise ValueError("precision must lie in (0, 1]")
    n_true = len(native)
    n_false = int(round(n_true * (1.0 / precision - 1.0)))
    forbidden = native.pairs | set(exclude)
    candidates = [
        (i, j)
        for i in range(1, ligand_len + 1)
        for j in range(1, receptor_len + 1)
        if (i, j) not in forbidden
    ]
    if n_false > len(candidates):
        raise ValueError("not enough non-contact pairs to reach that precision")
    picks = rng.choice(len(candidates), size=n_false, replace=False) if n_false else []
    extra = [ContactRestraint(*candidates[k], 0.0, CONTACT_THRESHOLD, DEFAULT_SD, 0.5) for k in sorted(picks)]
    return ContactSet(tuple(native.restraints) + tuple(extra), ligand_len, receptor_len)
