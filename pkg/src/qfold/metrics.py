"""Structural quality of a reconstructed dimer against its native complex.

Models and natives are ``(receptor, ligand)`` pairs of :class:`Structure`
with matching residue order (identity alignment).  Residue ``i`` of a
model chain is compared with residue ``i`` of the native chain.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import GeometryError, MetricError, ResidueError
from .geometry import kabsch_superpose, rmsd
from .pdb_io import Structure
from .restraints import CONTACT_THRESHOLD, residue_min_distances

Dimer = tuple[Structure, Structure]

CSV_HEADER = ("target", "scenario", "method", "tm_score", "rmsd", "fnat", "i_rmsd", "l_rmsd")
INTERFACE_CUTOFF = 10.0


@dataclass(frozen=True)
class QualityReport:
    tm_score: float
    rmsd: float
    fnat: float
    i_rmsd: float
    l_rmsd: float

    def __post_init__(self):
        values = asdict(self)
        if any(v < 0 for v in values.values()):
            raise MetricError(f"negative metric in {values}")
        if self.tm_score > 1.0 + 1e-12 or self.fnat > 1.0:
            raise MetricError(f"score above 1 in {values}")

    def as_row(self, target: str, scenario: str, method: str) -> list[str]:
        return [target, scenario, method] + [format_value(v) for v in asdict(self).values()]


def format_value(x: float) -> str:
    """Shortest round-trip text of ``x``, as written to every CSV."""
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def _check_pair(model: Dimer, native: Dimer) -> None:
    for m, n, role in zip(model, native, ("receptor", "ligand")):
        if m.length != n.length:
            raise MetricError(f"{role} length mismatch: model {m.length} vs native {n.length}")


def _ca(dimer: Dimer) -> np.ndarray:
    return np.vstack([dimer[0].ca_coords, dimer[1].ca_coords])


def _matched_heavy(model: Structure, native: Structure) -> tuple[np.ndarray, np.ndarray]:
    a, b = [], []
    for rm, rn in zip(model.residues, native.residues):
        for atom in rn.heavy_atoms:
            other = rm.atom(atom.name)
            if other is not None:
                a.append(other.coord)
                b.append(atom.coord)
    return np.array(a, dtype=float).reshape(-1, 3), np.array(b, dtype=float).reshape(-1, 3)


def complex_rmsd(model: Dimer, native: Dimer, all_heavy: bool = False) -> float:
    """RMSD over both chains after optimal superposition of the whole complex.

    Uses Cα atoms unless ``all_heavy`` is set, in which case every heavy
    atom present in both structures contributes.
    """
    _check_pair(model, native)
    if all_heavy:
        pairs = [_matched_heavy(m, n) for m, n in zip(model, native)]
        mob = np.vstack([p[0] for p in pairs])
        ref = np.vstack([p[1] for p in pairs])
    else:
        mob, ref = _ca(model), _ca(native)
    try:
        return kabsch_superpose(mob, ref)[1]
    except GeometryError as exc:
        raise MetricError(str(exc)) from exc


def tm_d0(length: int) -> float:
    return max(0.5, 1.24 * (length - 15) ** (1.0 / 3.0) - 1.8) if length > 15 else 0.5


def _tm_from(mob: np.ndarray, ref: np.ndarray, subset: np.ndarray, d0: float, max_rounds: int = 20) -> float:
    best = 0.0
    seen: set[bytes] = set()
    for _ in range(max_rounds):
        if subset.sum() < 3:
            break
        key = np.packbits(subset).tobytes()
        if key in seen:
            break
        seen.add(key)
        try:
            transform, _ = kabsch_superpose(mob[subset], ref[subset])
        except GeometryError:
            break
        d = np.linalg.norm(transform.apply(mob) - ref, axis=1)
        best = max(best, float(np.sum(1.0 / (1.0 + (d / d0) ** 2))))
        subset = d < d0
    return best


def tm_score(model: Dimer, native: Dimer) -> float:
    """TM-score over Cα atoms, normalised by the native complex length.

    The superposition is refined iteratively: starting from a fit on a
    seed set, it is re-fitted on residues closer than ``d0`` until the set
    stops changing.  Seeds are all residues, each chain alone and
    overlapping windows, and the best score found is returned.
    """
    _check_pair(model, native)
    mob, ref = _ca(model), _ca(native)
    n = len(ref)
    if n < 3:
        raise MetricError("TM-score needs at least 3 residues")
    d0 = tm_d0(n)
    n_rec = model[0].length
    seeds = [np.ones(n, dtype=bool)]
    for lo, hi in ((0, n_rec), (n_rec, n)):
        seg = np.zeros(n, dtype=bool)
        seg[lo:hi] = True
        seeds.append(seg)
    window = max(4, n // 4)
    for start in range(0, max(1, n - window + 1), max(1, window // 2)):
        seg = np.zeros(n, dtype=bool)
        seg[start : start + window] = True
        seeds.append(seg)
    total = max(_tm_from(mob, ref, s, d0) for s in seeds)
    return min(1.0, total / n)


def _contact_pairs(dimer: Dimer, threshold: float) -> set[tuple[int, int]]:
    d = residue_min_distances(dimer[1], dimer[0])
    return {(int(i), int(j)) for i, j in zip(*np.nonzero(d <= threshold))}


def fnat(model: Dimer, native: Dimer, threshold: float = CONTACT_THRESHOLD) -> float:
    """Fraction of native inter-chain residue contacts present in the model."""
    _check_pair(model, native)
    ref = _contact_pairs(native, threshold)
    if not ref:
        raise MetricError("native complex has no inter-chain contacts")
    return len(ref & _contact_pairs(model, threshold)) / len(ref)


def interface_residues(dimer: Dimer, cutoff: float = INTERFACE_CUTOFF) -> tuple[np.ndarray, np.ndarray]:
    """0-based receptor and ligand residues with a heavy atom within ``cutoff`` of the other chain."""
    d = residue_min_distances(dimer[1], dimer[0])
    close = d <= cutoff
    return np.flatnonzero(close.any(axis=0)), np.flatnonzero(close.any(axis=1))


def _backbone(structure: Structure, residues) -> np.ndarray:
    try:
        return structure.backbone_coords(residues)
    except ResidueError as exc:
        raise MetricError(str(exc)) from exc


def interface_rmsd(model: Dimer, native: Dimer, interface_cutoff: float = INTERFACE_CUTOFF) -> float:
    """Backbone RMSD over native interface residues after fitting on them."""
    _check_pair(model, native)
    rec_idx, lig_idx = interface_residues(native, interface_cutoff)
    if len(rec_idx) == 0 or len(lig_idx) == 0:
        raise MetricError("native complex has an empty interface")
    mob = np.vstack([_backbone(model[0], rec_idx), _backbone(model[1], lig_idx)])
    ref = np.vstack([_backbone(native[0], rec_idx), _backbone(native[1], lig_idx)])
    return kabsch_superpose(mob, ref)[1]


def ligand_rmsd(model: Dimer, native: Dimer) -> float:
    """Ligand backbone RMSD after superposing the receptors' backbones."""
    _check_pair(model, native)
    transform, _ = kabsch_superpose(_backbone(model[0], None), _backbone(native[0], None))
    return rmsd(transform.apply(_backbone(model[1], None)), _backbone(native[1], None))


def _is_homodimer(dimer: Dimer) -> bool:
    return dimer[0].sequence == dimer[1].sequence


def _report(model: Dimer, native: Dimer, threshold: float, all_heavy: bool) -> QualityReport:
    return QualityReport(
        tm_score=tm_score(model, native),
        rmsd=complex_rmsd(model, native, all_heavy),
        fnat=fnat(model, native, threshold),
        i_rmsd=interface_rmsd(model, native),
        l_rmsd=ligand_rmsd(model, native),
    )


def evaluate(
    model: Dimer,
    native: Dimer,
    *,
    contact_threshold: float = CONTACT_THRESHOLD,
    all_heavy: bool = False,
    chain_swap: bool | None = None,
) -> QualityReport:
    """All five metrics for one model.

    For homodimers (identical sequences, detected automatically unless
    ``chain_swap`` is given) each metric is computed for both chain
    assignments and the better value is kept.
    """
    report = _report(model, native, contact_threshold, all_heavy)
    swap = _is_homodimer(native) and _is_homodimer(model) if chain_swap is None else chain_swap
    if not swap:
        return report
    other = _report((model[1], model[0]), native, contact_threshold, all_heavy)
    return QualityReport(
        tm_score=max(report.tm_score, other.tm_score),
        rmsd=min(report.rmsd, other.rmsd),
        fnat=max(report.fnat, other.fnat),
        i_rmsd=min(report.i_rmsd, other.i_rmsd),
        l_rmsd=min(report.l_rmsd, other.l_rmsd),
    )
