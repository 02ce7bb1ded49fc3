from __future__ import annotations

import numpy as np
import pytest

from qfold.pdb_io import Atom, Residue, Structure
from qfold.synthetic import load_target


def element_of(name: str) -> str:
    return name[0]


def make_chain(chain_id: str, residues) -> Structure:
    """Chain from ``[(resname, {atom_name: xyz}), ...]``."""
    out = []
    for k, (resname, atoms) in enumerate(residues, start=1):
        out.append(
            Residue(k, resname, tuple(Atom(n, element_of(n), np.asarray(c, dtype=float)) for n, c in atoms.items()))
        )
    return Structure(chain_id, tuple(out))


def point_chain(chain_id: str, points, name: str = "CA") -> Structure:
    """One single-atom residue per point."""
    return make_chain(chain_id, [("ALA", {name: p}) for p in points])


def backbone_residue(center, rng: np.random.Generator | None = None, cb: bool = True) -> dict:
    """A residue with N, CA, C, O (and CB) scattered around ``center``."""
    rng = rng or np.random.default_rng(0)
    names = ["N", "CA", "C", "O"] + (["CB"] if cb else [])
    c = np.asarray(center, dtype=float)
    return {n: c + rng.normal(scale=1.2, size=3) for n in names}


def random_dimer(rng: np.random.Generator, n_rec: int = 6, n_lig: int = 5, gap: float = 8.0):
    """Two small random chains, the ligand offset along +x."""
    rec = make_chain("A", [("ALA", backbone_residue(rng.normal(scale=4.0, size=3), rng)) for _ in range(n_rec)])
    lig_centers = rng.normal(scale=4.0, size=(n_lig, 3)) + np.array([gap, 0.0, 0.0])
    lig = make_chain("B", [("GLY", backbone_residue(c, rng)) for c in lig_centers])
    return rec, lig


@pytest.fixture(scope="session")
def hx_pair():
    return load_target("hx_pair")


@pytest.fixture(scope="session")
def short_pair():
    return load_target("short_pair")


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    """Store one acceptance verdict for the end-of-run summary."""
    line = f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
