"""SMILES-subset parser producing 2D molecular graphs, plus graph utilities.

Supported grammar: organic-subset atoms (B, C, N, O, P, S, F, Cl, Br, I),
bracket atoms with an optional implicit-hydrogen count and charge, branches,
ring closures (single digits and %nn), and the bond symbols ``-``, ``=``,
``#``. Aromatic lowercase atoms are accepted and mapped to their element with
a ring flag; aromatic bonds become single bonds. Stereochemistry is rejected.
Hydrogen counts inside brackets are parsed but not materialized as nodes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Atom",
    "Bond",
    "MolecularGraph",
    "SmilesParseError",
    "UnsupportedAtomError",
    "parse_smiles",
    "atom_features",
    "permute_graph",
    "graph_hash",
    "adjacency_text",
    "FEATURE_ELEMENTS",
    "MAX_DEGREE",
]

# feature layout: element one-hot, degree one-hot 0..MAX_DEGREE, charge, ring flag
FEATURE_ELEMENTS = ("C", "N", "O", "S", "P", "F", "Cl", "Br", "I", "H")
MAX_DEGREE = 6

_ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
_AROMATIC = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
_BOND_ORDERS = {"-": 1, "=": 2, "#": 3}


class SmilesParseError(ValueError):
    """Parse failure; ``offset`` is the byte position in the source string."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class UnsupportedAtomError(ValueError):
    """An atom cannot be featurized (element outside the supported set)."""


@dataclass(frozen=True)
class Atom:
    element: str
    charge: int = 0
    in_ring: bool = False


@dataclass(frozen=True, order=True)
class Bond:
    i: int
    j: int
    order: int


@dataclass(frozen=True)
class MolecularGraph:
    """Undirected molecular graph. Bonds are stored with i < j, sorted."""

    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]

    def __post_init__(self):
        n = len(self.atoms)
        seen = set()
        for b in self.bonds:
            if b.i == b.j:
                raise ValueError(f"self-loop on atom {b.i}")
            if not (0 <= b.i < n and 0 <= b.j < n):
                raise ValueError(f"bond ({b.i},{b.j}) endpoint out of range")
            if b.i > b.j:
                raise ValueError("bonds must be normalized with i < j")
            if (b.i, b.j) in seen:
                raise ValueError(f"duplicate bond ({b.i},{b.j})")
            if b.order not in (1, 2, 3):
                raise ValueError(f"bond order {b.order} not in 1..3")
            seen.add((b.i, b.j))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    def neighbors(self) -> list[list[tuple[int, int]]]:
        """Adjacency as, per atom, a list of (neighbor index, bond order)."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.i].append((b.j, b.order))
            adj[b.j].append((b.i, b.order))
        for lst in adj:
            lst.sort()
        return adj

    def degree(self, i: int) -> int:
        return sum(1 for b in self.bonds if i in (b.i, b.j))


def _make_graph(atoms, bonds) -> MolecularGraph:
    norm = sorted(
        Bond(min(i, j), max(i, j), order) for (i, j, order) in bonds
    )
    return MolecularGraph(tuple(atoms), tuple(norm))


def _cyclic_atoms(n: int, bonds) -> set[int]:
    """Atoms lying on at least one cycle (endpoints of non-bridge edges)."""
    adj = [[] for _ in range(n)]
    for k, (i, j, _o) in enumerate(bonds):
        adj[i].append((j, k))
        adj[j].append((i, k))
    on_cycle: set[int] = set()
    for k, (i, j, _o) in enumerate(bonds):
        # edge is on a cycle iff i and j stay connected without it
        seen = {i}
        stack = [i]
        while stack:
            u = stack.pop()
            if u == j:
                on_cycle.update((i, j))
                break
            for v, ek in adj[u]:
                if ek != k and v not in seen:
                    seen.add(v)
                    stack.append(v)
    return on_cycle


class _Parser:
    def __init__(self, s: str):
        self.s = s
        self.pos = 0
        self.atoms: list[tuple[str, int, bool]] = []  # element, charge, aromatic
        self.bonds: list[tuple[int, int, int]] = []
        self.bond_keys: set[tuple[int, int]] = set()
        self.prev: int | None = None
        self.stack: list[int] = []
        self.pending: int | None = None  # explicit bond order awaiting its atom
        self.pending_at = 0
        self.rings: dict[str, tuple[int, int | None, int]] = {}

    def error(self, msg: str, offset: int | None = None):
        raise SmilesParseError(msg, self.pos if offset is None else offset)

    def add_atom(self, element: str, charge: int, aromatic: bool, offset: int):
        idx = len(self.atoms)
        self.atoms.append((element, charge, aromatic))
        if self.prev is not None:
            self.add_bond(self.prev, idx, self.pending or 1, offset)
        self.pending = None
        self.prev = idx

    def add_bond(self, i: int, j: int, order: int, offset: int):
        if i == j:
            self.error("ring bond closes onto the same atom", offset)
        key = (min(i, j), max(i, j))
        if key in self.bond_keys:
            self.error(f"duplicate bond between atoms {key[0]} and {key[1]}", offset)
        self.bond_keys.add(key)
        self.bonds.append((i, j, order))

    def ring_digit(self, label: str, offset: int):
        if self.prev is None:
            self.error("ring closure digit before any atom", offset)
        if label in self.rings:
            other, other_order, _ = self.rings.pop(label)
            order = self.pending or other_order or 1
            if (
                self.pending is not None
                and other_order is not None
                and self.pending != other_order
            ):
                self.error(f"conflicting bond orders for ring closure {label}", offset)
            self.add_bond(other, self.prev, order, offset)
        else:
            self.rings[label] = (self.prev, self.pending, offset)
        self.pending = None

    def parse_bracket(self):
        start = self.pos
        self.pos += 1  # consume '['
        s = self.s
        if self.pos >= len(s):
            self.error("unmatched '['", start)
        ch = s[self.pos]
        if ch in "@/\\":
            self.error("stereochemistry is not supported")
        aromatic = False
        if ch in _AROMATIC:
            element = _AROMATIC[ch]
            aromatic = True
            self.pos += 1
        elif ch.isalpha() and ch.isupper():
            element = ch
            self.pos += 1
            if self.pos < len(s) and s[self.pos].isalpha() and s[self.pos].islower():
                element += s[self.pos]
                self.pos += 1
        else:
            self.error(f"unexpected character {ch!r} in bracket atom")
        # optional hydrogen count (implicit hydrogens; never materialized)
        if self.pos < len(s) and s[self.pos] == "H" and element != "H":
            self.pos += 1
            while self.pos < len(s) and s[self.pos].isdigit():
                self.pos += 1
        charge = 0
        if self.pos < len(s) and s[self.pos] in "+-":
            sign = 1 if s[self.pos] == "+" else -1
            symbol = s[self.pos]
            self.pos += 1
            if self.pos < len(s) and s[self.pos].isdigit():
                mag = 0
                while self.pos < len(s) and s[self.pos].isdigit():
                    mag = mag * 10 + int(s[self.pos])
                    self.pos += 1
                charge = sign * mag
            else:
                charge = sign
                while self.pos < len(s) and s[self.pos] == symbol:
                    charge += sign
                    self.pos += 1
        if self.pos < len(s) and s[self.pos] in "@/\\":
            self.error("stereochemistry is not supported")
        if self.pos >= len(s) or s[self.pos] != "]":
            self.error("unmatched '['", start)
        self.pos += 1
        self.add_atom(element, charge, aromatic, start)

    def run(self) -> MolecularGraph:
        s = self.s
        if not s:
            self.error("empty SMILES string", 0)
        while self.pos < len(s):
            ch = s[self.pos]
            if ch in "@/\\":
                self.error("stereochemistry is not supported")
            elif ch in _BOND_ORDERS:
                self.pending = _BOND_ORDERS[ch]
                self.pending_at = self.pos
                self.pos += 1
            elif ch == "(":
                if self.prev is None:
                    self.error("branch before any atom")
                if self.pending is not None:
                    self.error("bond symbol before '('")
                self.stack.append(self.prev)
                self.pos += 1
            elif ch == ")":
                if not self.stack:
                    self.error("unmatched ')'")
                if self.pending is not None:
                    self.error("dangling bond before ')'", self.pending_at)
                self.prev = self.stack.pop()
                self.pos += 1
            elif ch.isdigit():
                self.ring_digit(ch, self.pos)
                self.pos += 1
            elif ch == "%":
                if len(s) < self.pos + 3 or not s[self.pos + 1 : self.pos + 3].isdigit():
                    self.error("'%' ring closure needs two digits")
                label = "%" + s[self.pos + 1 : self.pos + 3]
                self.ring_digit(label, self.pos)
                self.pos += 3
            elif ch == "[":
                self.parse_bracket()
            elif ch in _AROMATIC:
                self.add_atom(_AROMATIC[ch], 0, True, self.pos)
                self.pos += 1
            else:
                for sym in _ORGANIC:
                    if s.startswith(sym, self.pos):
                        self.add_atom(sym, 0, False, self.pos)
                        self.pos += len(sym)
                        break
                else:
                    self.error(f"unknown symbol {ch!r}")
        if self.stack:
            self.error("unmatched '('", len(s) - 1)
        if self.rings:
            label, (_, _, offset) = next(iter(self.rings.items()))
            self.error(f"unmatched ring closure digit {label.lstrip('%')}", offset)
        if self.pending is not None:
            self.error("dangling bond at end of input", self.pending_at)

        on_cycle = _cyclic_atoms(len(self.atoms), self.bonds)
        atoms = [
            Atom(el, charge, aromatic or i in on_cycle)
            for i, (el, charge, aromatic) in enumerate(self.atoms)
        ]
        return _make_graph(atoms, self.bonds)


def parse_smiles(s: str) -> MolecularGraph:
    """Parse a SMILES-subset string; raises SmilesParseError with an offset."""
    return _Parser(s).run()


def atom_features(g: MolecularGraph) -> np.ndarray:
    """Per-atom feature rows: element one-hot over FEATURE_ELEMENTS, degree
    one-hot over 0..MAX_DEGREE, formal charge, ring flag. Shape |V| x 19."""
    d = len(FEATURE_ELEMENTS) + (MAX_DEGREE + 1) + 2
    out = np.zeros((g.n_atoms, d), dtype=np.float64)
    degrees = [0] * g.n_atoms
    for b in g.bonds:
        degrees[b.i] += 1
        degrees[b.j] += 1
    for i, atom in enumerate(g.atoms):
        if atom.element not in FEATURE_ELEMENTS:
            raise UnsupportedAtomError(
                f"element {atom.element!r} of atom {i} is not featurizable"
            )
        if degrees[i] > MAX_DEGREE:
            raise UnsupportedAtomError(
                f"atom {i} has degree {degrees[i]} > {MAX_DEGREE}"
            )
        out[i, FEATURE_ELEMENTS.index(atom.element)] = 1.0
        out[i, len(FEATURE_ELEMENTS) + degrees[i]] = 1.0
        out[i, d - 2] = float(atom.charge)
        out[i, d - 1] = float(atom.in_ring)
    return out


def permute_graph(g: MolecularGraph, perm) -> MolecularGraph:
    """Relabel nodes so old index i becomes perm[i]."""
    perm = list(perm)
    if sorted(perm) != list(range(g.n_atoms)):
        raise ValueError(f"perm is not a bijection over 0..{g.n_atoms - 1}")
    atoms: list[Atom | None] = [None] * g.n_atoms
    for i, atom in enumerate(g.atoms):
        atoms[perm[i]] = atom
    bonds = [(perm[b.i], perm[b.j], b.order) for b in g.bonds]
    return _make_graph(atoms, bonds)


def graph_hash(g: MolecularGraph) -> str:
    """Short digest of the graph as labeled (provenance, not isomorphism)."""
    parts = [f"{a.element},{a.charge},{int(a.in_ring)}" for a in g.atoms]
    parts += [f"{b.i}-{b.j}x{b.order}" for b in g.bonds]
    return hashlib.sha256(";".join(parts).encode()).hexdigest()[:16]


def adjacency_text(g: MolecularGraph) -> str:
    """Human-readable adjacency listing (used by the `parse` CLI command)."""
    lines = [f"atoms: {g.n_atoms}  bonds: {g.n_bonds}"]
    adj = g.neighbors()
    for i, atom in enumerate(g.atoms):
        charge = f"{atom.charge:+d}" if atom.charge else ""
        ring = " ring" if atom.in_ring else ""
        nbrs = " ".join(f"{j}(x{o})" for j, o in adj[i])
        lines.append(f"{i:3d} {atom.element}{charge}{ring}: {nbrs}")
    return "\n".join(lines)
