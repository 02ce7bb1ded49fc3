"""Reading and writing the fixed-column PDB subset used by qfold.

Only the first MODEL is read.  Residues are renumbered with a sequential
1-based ordinal (insertion codes collapse into it), because contact files
refer to residues by position in the chain rather than by author numbering.
"""

from __future__ import annotations

import gzip
import io
import os
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import BinaryIO, Iterable

import numpy as np

from .errors import ChainNotFoundError, EmptyStructureError, PDBParseError, ResidueError
from .geometry import Pose

BACKBONE = ("N", "CA", "C", "O")
WATER = {"HOH", "WAT", "DOD", "H2O"}


@dataclass(frozen=True)
class Atom:
    name: str
    element: str
    coord: np.ndarray

    @property
    def is_heavy(self) -> bool:
        return self.element.upper() not in ("H", "D")


@dataclass(frozen=True)
class Residue:
    index: int
    name: str
    atoms: tuple[Atom, ...]

    def atom(self, name: str) -> Atom | None:
        for a in self.atoms:
            if a.name == name:
                return a
        return None

    @property
    def heavy_atoms(self) -> tuple[Atom, ...]:
        return tuple(a for a in self.atoms if a.is_heavy)


@dataclass(frozen=True)
class Structure:
    """A single chain.  Treat as immutable; coordinate arrays are cached."""

    chain_id: str
    residues: tuple[Residue, ...]

    @property
    def length(self) -> int:
        return len(self.residues)

    def __len__(self) -> int:
        return len(self.residues)

    @property
    def sequence(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.residues)

    @cached_property
    def coords(self) -> np.ndarray:
        """All atom coordinates in file order, ``(n_atoms, 3)``."""
        arr = np.array([a.coord for r in self.residues for a in r.atoms], dtype=float).reshape(-1, 3)
        arr.setflags(write=False)
        return arr

    @cached_property
    def atom_residue(self) -> np.ndarray:
        """Residue position (0-based) of every atom in :attr:`coords`."""
        return np.array([i for i, r in enumerate(self.residues) for _ in r.atoms], dtype=int)

    @cached_property
    def heavy_mask(self) -> np.ndarray:
        return np.array([a.is_heavy for r in self.residues for a in r.atoms], dtype=bool)

    @cached_property
    def cb_coords(self) -> np.ndarray:
        arr = np.array([cb_coordinate(r) for r in self.residues], dtype=float).reshape(-1, 3)
        arr.setflags(write=False)
        return arr

    @cached_property
    def ca_coords(self) -> np.ndarray:
        out = []
        for r in self.residues:
            ca = r.atom("CA")
            if ca is None:
                raise ResidueError(f"residue {r.index} {r.name} of chain {self.chain_id} has no CA")
            out.append(ca.coord)
        arr = np.array(out, dtype=float).reshape(-1, 3)
        arr.setflags(write=False)
        return arr

    def backbone_coords(self, residues: Iterable[int] | None = None) -> np.ndarray:
        """N, CA, C, O coordinates of the given 0-based residue positions."""
        picks = range(len(self.residues)) if residues is None else residues
        out = []
        for i in picks:
            r = self.residues[i]
            for name in BACKBONE:
                a = r.atom(name)
                if a is None:
                    raise ResidueError(f"residue {r.index} {r.name} lacks backbone atom {name}")
                out.append(a.coord)
        return np.array(out, dtype=float).reshape(-1, 3)

    def with_coords(self, coords: np.ndarray, chain_id: str | None = None) -> Structure:
        """Copy of this chain with every atom moved to the rows of ``coords``."""
        coords = np.asarray(coords, dtype=float)
        if coords.shape != self.coords.shape:
            raise ValueError(f"coordinate shape {coords.shape} != {self.coords.shape}")
        residues, k = [], 0
        for r in self.residues:
            atoms = []
            for a in r.atoms:
                atoms.append(Atom(a.name, a.element, coords[k].copy()))
                k += 1
            residues.append(Residue(r.index, r.name, tuple(atoms)))
        return Structure(chain_id or self.chain_id, tuple(residues))

    def posed(self, pose: Pose) -> Structure:
        return self.with_coords(pose.apply(self.coords))

    def relabeled(self, chain_id: str) -> Structure:
        return replace(self, chain_id=chain_id)


def cb_coordinate(residue: Residue) -> np.ndarray:
    """CB position, falling back to CA for glycine or truncated side chains."""
    for name in ("CB", "CA"):
        a = residue.atom(name)
        if a is not None:
            return np.asarray(a.coord, dtype=float)
    raise ResidueError(f"residue {residue.index} {residue.name} has neither CB nor CA")


TWO_LETTER_ELEMENTS = {"FE", "ZN", "MG", "CL", "BR", "NA", "MN", "CU", "SE", "CO", "NI"}


def _element_from_name(raw_name: str) -> str:
    # Columns 13-14 hold the element right-justified, so " CA " is carbon
    # while "CA  " would be calcium.
    if raw_name[:1].isalpha() and raw_name[:2].upper() in TWO_LETTER_ELEMENTS:
        return raw_name[:2].upper()
    stripped = raw_name.strip().lstrip("0123456789")
    return stripped[:1].upper()


def _open_source(source) -> tuple[str, str]:
    """Return ``(text, label)`` for a path, bytes or a binary/text stream."""
    if isinstance(source, (str, os.PathLike)):
        path = os.fspath(source)
        opener = gzip.open if path.endswith(".gz") else open
        with opener(path, "rb") as fh:
            data = fh.read()
        return data.decode("ascii", errors="replace"), path
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
        if data[:2] == b"\x1f\x8b":
            data = gzip.decompress(data)
        return data.decode("ascii", errors="replace"), "<bytes>"
    data = source.read()
    if isinstance(data, bytes):
        if data[:2] == b"\x1f\x8b":
            data = gzip.decompress(data)
        data = data.decode("ascii", errors="replace")
    return data, getattr(source, "name", "<stream>")


def parse_pdb(
    source,
    chain: str | None = None,
    *,
    include_hetatm: bool = False,
    keep_hydrogens: bool = False,
    keep_water: bool = False,
) -> list[Structure]:
    """Parse ATOM records into one :class:`Structure` per chain.

    Args:
        source: a file path (``.gz`` is decompressed), raw bytes, or a
            binary/text stream.
        chain: if given, only this chain is returned.
        include_hetatm: also honour HETATM records.

    Raises:
        PDBParseError: a coordinate field is not a number.
        ChainNotFoundError: ``chain`` is not present.
        EmptyStructureError: no usable residues were found.
    """
    text, label = _open_source(source)
    records = ("ATOM  ", "HETATM") if include_hetatm else ("ATOM  ",)
    order: list[str] = []
    chains: dict[str, list[tuple[tuple[str, str], str, list[Atom]]]] = {}
    seen_atoms: dict[str, set[tuple[tuple[str, str], str]]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("ENDMDL"):
            break
        if not line.startswith(records):
            continue
        line = line.ljust(80)
        raw_name = line[12:16]
        name = raw_name.strip()
        resname = line[17:20].strip()
        chain_id = line[21]
        res_key = (line[22:26].strip(), line[26])
        try:
            xyz = np.array([float(line[30:38]), float(line[38:46]), float(line[46:54])])
        except ValueError:
            raise PDBParseError(f"malformed coordinates in {label}", line=lineno) from None
        if not np.all(np.isfinite(xyz)):
            raise PDBParseError(f"non-finite coordinates in {label}", line=lineno)
        if not res_key[0]:
            raise PDBParseError(f"missing residue number in {label}", line=lineno)
        element = line[76:78].strip().upper() or _element_from_name(raw_name)
        if resname in WATER and not keep_water:
            continue
        if element in ("H", "D") and not keep_hydrogens:
            continue
        if chain is not None and chain_id != chain:
            continue
        if chain_id not in chains:
            chains[chain_id] = []
            seen_atoms[chain_id] = set()
            order.append(chain_id)
        # alternate locations: first occurrence of an atom name wins
        if (res_key, name) in seen_atoms[chain_id]:
            continue
        seen_atoms[chain_id].add((res_key, name))
        residues = chains[chain_id]
        if not residues or residues[-1][0] != res_key:
            residues.append((res_key, resname, []))
        residues[-1][2].append(Atom(name, element, xyz))

    if chain is not None and chain not in chains:
        raise ChainNotFoundError(f"chain {chain!r} not found in {label}")
    structures = []
    for cid in order:
        residues = []
        for _, resname, atoms in chains[cid]:
            if not any(a.is_heavy for a in atoms):
                continue
            residues.append(Residue(len(residues) + 1, resname, tuple(atoms)))
        if residues:
            structures.append(Structure(cid, tuple(residues)))
    if not structures:
        raise EmptyStructureError(f"no residues parsed from {label}")
    return structures


def read_chain(path, chain: str | None = None) -> Structure:
    """Convenience: parse a file and return one chain (the first if unspecified)."""
    return parse_pdb(path, chain)[0]


def _format_atom_name(name: str, element: str) -> str:
    if len(name) >= 4 or len(element) == 2:
        return f"{name:<4s}"
    return f" {name:<3s}"


def _atom_lines(structure: Structure, chain_id: str, coords: np.ndarray, serial: int) -> tuple[list[str], int]:
    lines, k = [], 0
    for res in structure.residues:
        for atom in res.atoms:
            x, y, z = coords[k]
            k += 1
            lines.append(
                "ATOM  %5d %s %3s %1s%4d    %8.3f%8.3f%8.3f%6.2f%6.2f          %2s  "
                % (
                    serial % 100000,
                    _format_atom_name(atom.name, atom.element),
                    res.name[:3],
                    chain_id,
                    res.index % 10000,
                    x,
                    y,
                    z,
                    1.0,
                    0.0,
                    atom.element[:2],
                )
            )
            serial += 1
    last = structure.residues[-1]
    lines.append("TER   %5d      %3s %1s%4d" % (serial % 100000, last.name[:3], chain_id, last.index % 10000))
    return lines, serial + 1


def pdb_text(receptor: Structure, ligand: Structure, ligand_pose: Pose | None = None) -> str:
    """Render a two-chain complex; the ligand is moved by ``ligand_pose``."""
    rec_id = receptor.chain_id.strip() or "A"
    lig_id = ligand.chain_id.strip() or "B"
    if lig_id == rec_id:
        lig_id = "B" if rec_id != "B" else "C"
    lig_coords = ligand.coords if ligand_pose is None else ligand_pose.apply(ligand.coords)
    lines, serial = _atom_lines(receptor, rec_id, receptor.coords, 1)
    more, _ = _atom_lines(ligand, lig_id, lig_coords, serial)
    lines.extend(more)
    lines.append("END")
    return "\n".join(lines) + "\n"


def write_pdb(receptor: Structure, ligand: Structure, ligand_pose: Pose | None, sink: BinaryIO | str | os.PathLike) -> None:
    """Write the receptor unchanged and the ligand with ``ligand_pose`` applied.

    Occupancy is always written as 1.00 and the B-factor as 0.00 so output
    files are bit-stable.
    """
    data = pdb_text(receptor, ligand, ligand_pose).encode("ascii")
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(data)
    elif isinstance(sink, io.TextIOBase):
        sink.write(data.decode("ascii"))
    else:
        sink.write(data)


def write_chains(structures: Iterable[Structure], sink) -> None:
    """Write any number of chains as they are (no pose applied)."""
    lines, serial = [], 1
    for s in structures:
        more, serial = _atom_lines(s, s.chain_id, s.coords, serial)
        lines.extend(more)
    lines.append("END")
    data = ("\n".join(lines) + "\n").encode("ascii")
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(data)
    else:
        sink.write(data)


def read_dimer(path, chains: tuple[str, str] | None = None) -> tuple[Structure, Structure]:
    """Return ``(receptor, ligand)`` from a two-chain file.

    Without ``chains`` the first two chains in file order are used.
    """
    if chains is not None:
        return parse_pdb(path, chains[0])[0], parse_pdb(path, chains[1])[0]
    structures = parse_pdb(path)
    if len(structures) < 2:
        raise ChainNotFoundError(f"{path} holds {len(structures)} chain(s); a dimer needs two")
    return structures[0], structures[1]
