"""Deterministic synthetic dimers for tests and the bundled benchmark suite.

Chains are built from ideal alpha-helical backbones (standard bond
geometry, phi = -57.8, psi = -47.0) and packed against each other.  The
packing search rejects interfaces where any residue pair sits just inside
the 6 A contact cutoff, so every native contact survives sub-Angstrom
perturbations of the ligand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import Axis, rotation_matrix
from .pdb_io import Atom, Residue, Structure, read_dimer, write_pdb
from .restraints import residue_min_distances

PHI, PSI, OMEGA = -57.8, -47.0, 180.0
BOND = {"N-CA": 1.458, "CA-C": 1.525, "C-N": 1.329, "C-O": 1.231, "CA-CB": 1.530, "CB-G": 1.52}
ANGLE = {"N-CA-C": 111.2, "CA-C-N": 116.2, "C-N-CA": 121.7, "CA-C-O": 120.5, "N-CA-CB": 110.5, "CA-CB-G": 110.5}

SIDE_CHAINS = {
    "GLY": (),
    "ALA": (),
    "SER": (("OG", "O", 60.0),),
    "VAL": (("CG1", "C", 60.0), ("CG2", "C", 180.0)),
    "LEU": (("CG", "C", 180.0),),
}


def place_atom(a, b, c, bond, angle_deg, torsion_deg) -> np.ndarray:
    """NeRF: position of d given a-b-c, |cd|, angle b-c-d and torsion a-b-c-d."""
    angle, torsion = math.radians(angle_deg), math.radians(torsion_deg)
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.column_stack([bc, np.cross(n, bc), n])
    d2 = np.array([-bond * math.cos(angle), bond * math.sin(angle) * math.cos(torsion), bond * math.sin(angle) * math.sin(torsion)])
    return c + m @ d2


def helix_backbone(sequence: list[str]) -> list[dict[str, np.ndarray]]:
    """Atoms of an ideal helix, one dict per residue."""
    n = np.array([0.0, 0.0, 0.0])
    ca = np.array([BOND["N-CA"], 0.0, 0.0])
    ang = math.radians(ANGLE["N-CA-C"])
    c = ca + BOND["CA-C"] * np.array([-math.cos(ang), math.sin(ang), 0.0])
    residues = []
    for k, name in enumerate(sequence):
        if k > 0:
            prev = residues[-1]
            n = place_atom(prev["N"], prev["CA"], prev["C"], BOND["C-N"], ANGLE["CA-C-N"], PSI)
            ca = place_atom(prev["CA"], prev["C"], n, BOND["N-CA"], ANGLE["C-N-CA"], OMEGA)
            c = place_atom(prev["C"], n, ca, BOND["CA-C"], ANGLE["N-CA-C"], PHI)
        atoms = {"N": n, "CA": ca, "C": c}
        # carbonyl O is anti to the next residue's N
        atoms["O"] = place_atom(n, ca, c, BOND["C-O"], ANGLE["CA-C-O"], PSI + 180.0)
        if name != "GLY":
            atoms["CB"] = place_atom(c, n, ca, BOND["CA-CB"], ANGLE["N-CA-CB"], -122.6)
            for gname, _, chi in SIDE_CHAINS[name]:
                atoms[gname] = place_atom(n, ca, atoms["CB"], BOND["CB-G"], ANGLE["CA-CB-G"], chi)
        residues.append(atoms)
    return residues


def _axis_frame(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    center = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - center)
    axis = vt[0]
    if np.dot(points[-1] - points[0], axis) < 0:
        axis = -axis
    return center, axis


def _align_to_z(axis: np.ndarray) -> np.ndarray:
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(axis, z)
    s, c = np.linalg.norm(v), float(np.dot(axis, z))
    if s < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx * ((1 - c) / s**2)


@dataclass(frozen=True)
class HelixSegment:
    """Placement of one helix: axis along +z (or -z if ``flip``), then moved."""

    length: int
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    phase: float = 0.0  # degrees about the helix axis
    flip: bool = False
    tilt: float = 0.0  # degrees about the x axis, applied last


def build_chain(chain_id: str, segments: list[HelixSegment], rng: np.random.Generator) -> Structure:
    names = ["ALA", "LEU", "VAL", "SER", "GLY"]
    weights = [0.35, 0.2, 0.2, 0.15, 0.1]
    residues: list[Residue] = []
    for seg in segments:
        seq = list(rng.choice(names, size=seg.length, p=weights))
        atoms = helix_backbone(seq)
        ca = np.array([a["CA"] for a in atoms])
        center, axis = _axis_frame(ca)
        rot = rotation_matrix(Axis.Z, math.radians(seg.phase)) @ _align_to_z(axis)
        if seg.flip:
            rot = rotation_matrix(Axis.X, math.pi) @ rot
        rot = rotation_matrix(Axis.X, math.radians(seg.tilt)) @ rot
        shift = np.array([seg.x, seg.y, seg.z])
        for name, res_atoms in zip(seq, atoms):
            built = []
            for atom_name, xyz in res_atoms.items():
                element = "O" if atom_name.startswith("O") else atom_name[0]
                built.append(Atom(atom_name, element, np.round(rot @ (xyz - center) + shift, 3)))
            residues.append(Residue(len(residues) + 1, name, tuple(built)))
    return Structure(chain_id, tuple(residues))


def interface_profile(receptor: Structure, ligand: Structure, cutoff: float = 6.0, margin: float = 1.0):
    """Contact count, borderline count and closest approach of an interface."""
    d = residue_min_distances(ligand, receptor)
    contacts = int(np.sum(d <= cutoff))
    borderline = int(np.sum((d > cutoff - margin) & (d <= cutoff)))
    return contacts, borderline, float(d.min())


def _rotation_about(axis: np.ndarray, theta: float) -> np.ndarray:
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(theta) * k + (1 - math.cos(theta)) * k @ k


_BACKBONE = ("N", "CA", "C", "O")

# (residue name, ((atom, chi1), ...)) side-chain variants tried during design
ROTAMERS = [("GLY", ()), ("ALA", ())]
for _chi in (60.0, 180.0, -60.0):
    ROTAMERS.append(("SER", (("OG", _chi),)))
    ROTAMERS.append(("LEU", (("CG", _chi),)))
    ROTAMERS.append(("VAL", (("CG1", _chi), ("CG2", _chi + 120.0))))


def _with_side_chain(res: Residue, name: str, extra) -> Residue:
    bb = {a.name: np.asarray(a.coord, dtype=float) for a in res.atoms if a.name in _BACKBONE}
    atoms = [Atom(n, "O" if n == "O" else n[0], bb[n]) for n in _BACKBONE]
    if name != "GLY":
        cb = place_atom(bb["C"], bb["N"], bb["CA"], BOND["CA-CB"], ANGLE["N-CA-CB"], -122.6)
        atoms.append(Atom("CB", "C", np.round(cb, 3)))
        for gname, chi in extra:
            g = place_atom(bb["N"], bb["CA"], cb, BOND["CB-G"], ANGLE["CA-CB-G"], chi)
            atoms.append(Atom(gname, "O" if gname.startswith("O") else "C", np.round(g, 3)))
    return Residue(res.index, name, tuple(atoms))


def _replace(structure: Structure, pos: int, res: Residue) -> Structure:
    residues = list(structure.residues)
    residues[pos] = res
    return Structure(structure.chain_id, tuple(residues))


def _interface_score(receptor, ligand, cutoff, margin):
    d = residue_min_distances(ligand, receptor)
    borderline = int(np.sum((d > cutoff - margin) & (d <= cutoff)))
    contacts = int(np.sum(d <= cutoff))
    clashes = int(np.sum(d < 3.0))
    return (borderline + 10 * clashes, -contacts)


def design_interface(receptor: Structure, ligand: Structure, cutoff: float = 6.0, margin: float = 1.0, sweeps: int = 4):
    """Pick interface side chains so that no contact sits within ``margin`` of ``cutoff``.

    Greedy coordinate descent over a small rotamer library; backbone atoms
    are never moved.  Returns ``(receptor, ligand, borderline_count)``.
    """
    d = residue_min_distances(ligand, receptor)
    near = d <= cutoff + 3.0
    lig_sites = [int(i) for i in np.flatnonzero(near.any(axis=1))]
    rec_sites = [int(j) for j in np.flatnonzero(near.any(axis=0))]
    best = _interface_score(receptor, ligand, cutoff, margin)
    for _ in range(sweeps):
        changed = False
        for chain_name, sites in (("lig", lig_sites), ("rec", rec_sites)):
            for pos in sites:
                for name, extra in ROTAMERS:
                    if chain_name == "lig":
                        cand_l = _replace(ligand, pos, _with_side_chain(ligand.residues[pos], name, extra))
                        cand_r = receptor
                    else:
                        cand_l = ligand
                        cand_r = _replace(receptor, pos, _with_side_chain(receptor.residues[pos], name, extra))
                    score = _interface_score(cand_r, cand_l, cutoff, margin)
                    if score < best:
                        best, ligand, receptor, changed = score, cand_l, cand_r, True
        if not changed or best[0] == 0:
            break
    return receptor, ligand, best[0]


@dataclass(frozen=True)
class DimerRecipe:
    name: str
    receptor: tuple[HelixSegment, ...]
    ligand: tuple[HelixSegment, ...]
    seed: int
    min_contacts: int = 12


def _hairpin(length: int, gap: float = 10.0, tilt: float = 0.0) -> tuple[HelixSegment, ...]:
    return (
        HelixSegment(length, y=-gap / 2, tilt=tilt),
        HelixSegment(length, y=gap / 2, flip=True, phase=180.0, tilt=tilt),
    )


SUITE = (
    DimerRecipe("hx_pair", (HelixSegment(22),), (HelixSegment(20),), seed=11),
    DimerRecipe("hairpin_helix", _hairpin(16), (HelixSegment(18),), seed=21, min_contacts=10),
    DimerRecipe("hairpin_pair", _hairpin(15), _hairpin(14, tilt=20.0), seed=13),
    DimerRecipe(
        "bundle_helix",
        (HelixSegment(14, y=-5.5), HelixSegment(14, y=5.5, flip=True)),
        (HelixSegment(16, tilt=25.0),),
        seed=24,
        min_contacts=10,
    ),
    DimerRecipe("short_pair", (HelixSegment(14),), (HelixSegment(14, flip=True),), seed=16, min_contacts=8),
)


def make_dimer(recipe: DimerRecipe, margin: float = 1.0) -> tuple[Structure, Structure]:
    """Build, pack and design one dimer; returns native ``(receptor, ligand)``."""
    rng = np.random.default_rng(recipe.seed)
    receptor = build_chain("A", list(recipe.receptor), rng)
    ligand = build_chain("B", list(recipe.ligand), rng)
    direction = np.array([1.0, 0.0, 0.0])
    base = ligand.coords - ligand.coords.mean(axis=0)
    rc = receptor.coords.mean(axis=0)
    rec_extent = float(np.max(receptor.coords[:, 0] - rc[0]))
    lig_extent = float(np.max(-base[:, 0]))
    best = None
    for spin in np.arange(0.0, 360.0, 30.0):
        rot = _rotation_about(direction, math.radians(spin))
        moved_base = base @ rot.T
        lig_extent = float(np.max(-moved_base[:, 0]))
        for gap in np.arange(1.0, 4.5, 0.5):
            dist = rec_extent + lig_extent + gap
            moved = ligand.with_coords(moved_base + rc + dist * direction)
            contacts, _, closest = interface_profile(receptor, moved, margin=margin)
            if closest < 2.5 or contacts < recipe.min_contacts:
                continue
            rec2, lig2, borderline = design_interface(receptor, moved, margin=margin)
            if borderline:
                continue
            n, _, closest = interface_profile(rec2, lig2, margin=margin)
            if n >= recipe.min_contacts and closest >= 3.0 and (best is None or n > best[0]):
                best = (n, rec2, lig2)
    if best is None:
        raise RuntimeError(f"no clean packing found for {recipe.name}")
    return best[1], best[2]


def write_suite(directory) -> list[Path]:
    """Regenerate the bundled suite: one native PDB per recipe."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for recipe in SUITE:
        receptor, ligand = make_dimer(recipe)
        path = out / f"{recipe.name}.pdb"
        write_pdb(receptor, ligand, None, path)
        paths.append(path)
    return paths


def suite_names() -> list[str]:
    return [r.name for r in SUITE]


def suite_path(name: str) -> Path:
    """Path of a bundled native complex (chains A and B)."""
    path = Path(str(resources.files("qfold") / "data" / "suite" / f"{name}.pdb"))
    if not path.exists():
        raise FileNotFoundError(f"no bundled target named {name!r}")
    return path


def load_target(name: str) -> tuple[Structure, Structure]:
    """Native ``(receptor, ligand)`` of a bundled target."""
    return read_dimer(suite_path(name), ("A", "B"))


if __name__ == "__main__":
    import sys

    for p in write_suite(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "data" / "suite"):
        print(p)
