"""SMILES parsing, validation, canonicalization, scaffolds, and local edits.

Molecules are immutable once constructed; every construction path
(:func:`parse`, :meth:`Molecule.from_graph`, :func:`mutate`) validates the
graph and computes the canonical string eagerly.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from importlib import resources
from typing import Iterator, Optional, Sequence

__all__ = [
    "Atom",
    "Bond",
    "Molecule",
    "Scaffold",
    "SmilesError",
    "SmilesSyntaxError",
    "UnmatchedRingError",
    "ValenceError",
    "MultiFragmentError",
    "UnsupportedAtomError",
    "NoApplicableSiteError",
    "parse",
    "canonicalize",
    "scaffold_of",
    "mutate",
    "load_valence_table",
    "EDIT_OPERATORS",
]


class SmilesError(ValueError):
    """Base class for molecule construction failures."""


class SmilesSyntaxError(SmilesError):
    """Malformed SMILES text (bad token, dangling branch, bad aromaticity)."""


class UnmatchedRingError(SmilesError):
    """A ring-closure digit was opened but never closed."""


class ValenceError(SmilesError):
    """An atom exceeds its maximum allowed valence."""


class MultiFragmentError(SmilesError):
    """Disconnected input (the '.' separator or a disconnected graph)."""


class UnsupportedAtomError(SmilesError):
    """Element outside the supported subset."""


class NoApplicableSiteError(SmilesError):
    """An edit operator has no valid site on the molecule."""


SUPPORTED_ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
_ELEMENT_INDEX = {el: i for i, el in enumerate(SUPPORTED_ELEMENTS)}
_AROMATIC_OK = frozenset({"B", "C", "N", "O", "P", "S"})

# Normal valences used to infer implicit hydrogens on bare (non-bracket)
# atoms; the shipped valence.tsv only bounds the error check.
_DEFAULT_VALENCES = {
    "B": (3,),
    "C": (4,),
    "N": (3, 5),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}

SINGLE = "single"
DOUBLE = "double"
TRIPLE = "triple"
AROMATIC = "aromatic"

_ORDER_ELECTRONS = {SINGLE: 1, DOUBLE: 2, TRIPLE: 3, AROMATIC: 1}
_ORDER_SORT = {SINGLE: 1, DOUBLE: 2, TRIPLE: 3, AROMATIC: 4}
_BOND_CHARS = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC}

EDIT_OPERATORS = (
    "substitute_atom",
    "append_terminal_atom",
    "delete_terminal_atom",
    "change_bond_order",
)

# Guard against combinatorial blow-up on pathologically symmetric graphs.
_MAX_CANON_LEAVES = 20_000


def load_valence_table(path: Optional[str] = None) -> dict[str, int]:
    """Load `element<TAB>max_valence` lines; defaults to the shipped table."""
    if path is None:
        text = (
            resources.files("leadopt.data").joinpath("valence.tsv").read_text()
        )
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    table: dict[str, int] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        element, value = line.split("\t")
        table[element] = int(value)
    return table


_VALENCE_MAX = load_valence_table()


@dataclass(frozen=True)
class Atom:
    """One heavy atom; hcount is the resolved number of attached hydrogens."""

    element: str
    aromatic: bool = False
    formal_charge: int = 0
    hcount: int = 0
    isotope: Optional[int] = None


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: str = SINGLE

    def key(self) -> tuple[int, int]:
        return (self.a, self.b) if self.a < self.b else (self.b, self.a)

    def other(self, idx: int) -> int:
        return self.b if idx == self.a else self.a


class Molecule:
    """Immutable molecular graph with a cached canonical SMILES string."""

    __slots__ = (
        "atoms",
        "bonds",
        "_adj",
        "_ring_bonds",
        "_ring_atoms",
        "_canonical",
        "_fp_cache",
    )

    def __init__(
        self,
        atoms: Sequence[Atom],
        bonds: Sequence[Bond],
        *,
        validate: bool = True,
        valence_table: Optional[dict[str, int]] = None,
    ):
        self.atoms: tuple[Atom, ...] = tuple(atoms)
        self.bonds: tuple[Bond, ...] = tuple(bonds)
        self._adj = _adjacency(len(self.atoms), self.bonds)
        self._ring_bonds = _ring_bond_flags(len(self.atoms), self.bonds, self._adj)
        self._ring_atoms = [False] * len(self.atoms)
        for b_idx, bond in enumerate(self.bonds):
            if self._ring_bonds[b_idx]:
                self._ring_atoms[bond.a] = True
                self._ring_atoms[bond.b] = True
        if validate:
            self._validate(valence_table or _VALENCE_MAX)
        self._canonical: str = _canonical_string(self)
        self._fp_cache: dict = {}

    @classmethod
    def from_graph(
        cls,
        atoms: Sequence[Atom],
        bonds: Sequence[Bond],
        *,
        validate: bool = True,
    ) -> "Molecule":
        return cls(atoms, bonds, validate=validate)

    @classmethod
    def empty(cls) -> "Molecule":
        return cls((), (), validate=False)

    # -- derived structure ------------------------------------------------

    @property
    def canonical(self) -> str:
        return self._canonical

    def neighbors(self, idx: int) -> list[tuple[int, str]]:
        """(neighbor index, bond order) pairs for one atom."""
        return self._adj[idx]

    def degree(self, idx: int) -> int:
        return len(self._adj[idx])

    def bond_in_ring(self, bond_idx: int) -> bool:
        return self._ring_bonds[bond_idx]

    def atom_in_ring(self, idx: int) -> bool:
        return self._ring_atoms[idx]

    def ring_count(self) -> int:
        """Cyclomatic number: independent cycles in the (connected) graph."""
        if not self.atoms:
            return 0
        return len(self.bonds) - len(self.atoms) + 1

    def heavy_atom_count(self) -> int:
        return len(self.atoms)

    # -- identity ----------------------------------------------------------

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Molecule):
            return NotImplemented
        return self._canonical == other._canonical

    def __hash__(self) -> int:
        return hash(self._canonical)

    def __repr__(self) -> str:
        return f"Molecule({self._canonical!r})"

    # -- validation ---------------------------------------------------------

    def _validate(self, valence_max: dict[str, int]) -> None:
        n = len(self.atoms)
        if n == 0:
            return
        seen: set[tuple[int, int]] = set()
        for bond in self.bonds:
            if bond.a == bond.b:
                raise SmilesSyntaxError("bond endpoints must be distinct")
            if not (0 <= bond.a < n and 0 <= bond.b < n):
                raise SmilesSyntaxError("bond endpoint out of range")
            if bond.key() in seen:
                raise SmilesSyntaxError(f"duplicate bond between {bond.key()}")
            seen.add(bond.key())

        if _component_size(0, self._adj) != n:
            raise MultiFragmentError("molecule graph is disconnected")

        bond_sums = [0] * n
        for b_idx, bond in enumerate(self.bonds):
            if bond.order == AROMATIC:
                if not (self.atoms[bond.a].aromatic and self.atoms[bond.b].aromatic):
                    raise SmilesSyntaxError("aromatic bond between non-aromatic atoms")
                if not self._ring_bonds[b_idx]:
                    raise SmilesSyntaxError("aromatic bond outside a ring")
            bond_sums[bond.a] += _ORDER_ELECTRONS[bond.order]
            bond_sums[bond.b] += _ORDER_ELECTRONS[bond.order]

        for idx, atom in enumerate(self.atoms):
            if atom.element not in _ELEMENT_INDEX:
                raise UnsupportedAtomError(f"unsupported element {atom.element!r}")
            if atom.aromatic:
                if atom.element not in _AROMATIC_OK:
                    raise UnsupportedAtomError(
                        f"element {atom.element!r} cannot be aromatic"
                    )
                if not self._ring_atoms[idx]:
                    raise SmilesSyntaxError(
                        f"aromatic atom at index {idx} is not in a ring"
                    )
            if atom.hcount < 0:
                raise ValenceError(f"atom {idx} has negative hydrogen count")
            ceiling = max(0, valence_max[atom.element] + atom.formal_charge)
            if atom.hcount + bond_sums[idx] > ceiling:
                raise ValenceError(
                    f"atom {idx} ({atom.element}) valence "
                    f"{atom.hcount + bond_sums[idx]} exceeds {ceiling}"
                )


def _adjacency(n: int, bonds: Sequence[Bond]) -> list[list[tuple[int, str]]]:
    adj: list[list[tuple[int, str]]] = [[] for _ in range(n)]
    for bond in bonds:
        adj[bond.a].append((bond.b, bond.order))
        adj[bond.b].append((bond.a, bond.order))
    return adj


def _component_size(start: int, adj: list[list[tuple[int, str]]]) -> int:
    seen = {start}
    stack = [start]
    while stack:
        cur = stack.pop()
        for nbr, _ in adj[cur]:
            if nbr not in seen:
                seen.add(nbr)
                stack.append(nbr)
    return len(seen)


def _ring_bond_flags(
    n: int, bonds: Sequence[Bond], adj: list[list[tuple[int, str]]]
) -> list[bool]:
    """True for every bond on a cycle; bridges are the only non-ring bonds."""
    if n == 0 or not bonds:
        return [False] * len(bonds)
    edge_index: dict[tuple[int, int], int] = {b.key(): i for i, b in enumerate(bonds)}
    # back edges always close a cycle; tree edges checked with low-links
    flags = [True] * len(bonds)
    disc = [-1] * n
    low = [0] * n
    timer = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack: list[tuple[int, int, Iterator[tuple[int, str]]]] = [
            (root, -1, iter(adj[root]))
        ]
        while stack:
            node, parent, it = stack[-1]
            advanced = False
            for nbr, _ in it:
                if nbr == parent:
                    continue
                if disc[nbr] == -1:
                    disc[nbr] = low[nbr] = timer
                    timer += 1
                    stack.append((nbr, node, iter(adj[nbr])))
                    advanced = True
                    break
                low[node] = min(low[node], disc[nbr])
            if advanced:
                continue
            stack.pop()
            if stack:
                up = stack[-1][0]
                low[up] = min(low[up], low[node])
                if low[node] > disc[up]:
                    flags[edge_index[(min(up, node), max(up, node))]] = False
    return flags


def _implicit_hydrogens(element: str, aromatic: bool, bond_orders: list[str]) -> int:
    """Implicit-H rule for bare SMILES atoms.

    Aromatic atoms reserve one valence slot for the ring pi system.
    """
    total = sum(_ORDER_ELECTRONS[o] for o in bond_orders)
    if aromatic:
        total += 1
    for valence in _DEFAULT_VALENCES[element]:
        if valence >= total:
            return valence - total
    return 0


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _tokenize(smiles: str) -> Iterator[tuple[str, object]]:
    i = 0
    n = len(smiles)
    while i < n:
        ch = smiles[i]
        if ch == "[":
            end = smiles.find("]", i)
            if end == -1:
                raise SmilesSyntaxError("unterminated bracket atom")
            yield ("atom", smiles[i : end + 1])
            i = end + 1
        elif ch in "-=#:":
            yield ("bond", ch)
            i += 1
        elif ch in "/\\":
            # stereo marks are accepted and discarded
            i += 1
        elif ch == "(":
            yield ("open", ch)
            i += 1
        elif ch == ")":
            yield ("close", ch)
            i += 1
        elif ch == ".":
            raise MultiFragmentError("multi-fragment SMILES is not supported")
        elif ch == "%":
            if i + 2 >= n or not smiles[i + 1 : i + 3].isdigit():
                raise SmilesSyntaxError("'%' must be followed by two digits")
            yield ("ring", int(smiles[i + 1 : i + 3]))
            i += 3
        elif ch.isdigit():
            yield ("ring", int(ch))
            i += 1
        elif ch == "*":
            raise UnsupportedAtomError("wildcard atoms are not supported")
        elif ch.isalpha():
            two = smiles[i : i + 2]
            if two in ("Cl", "Br"):
                yield ("atom", two)
                i += 2
            elif ch in "BCNOPSFI":
                yield ("atom", ch)
                i += 1
            elif ch in "bcnops":
                yield ("atom", ch)
                i += 1
            elif two and two[0].isupper():
                raise UnsupportedAtomError(f"unsupported element at {i}: {smiles[i:i+2]!r}")
            else:
                raise SmilesSyntaxError(f"unexpected character {ch!r} at {i}")
        else:
            raise SmilesSyntaxError(f"unexpected character {ch!r} at {i}")


def _parse_bracket(token: str) -> Atom:
    body = token[1:-1]
    if not body:
        raise SmilesSyntaxError("empty bracket atom")
    i = 0
    isotope = None
    start = i
    while i < len(body) and body[i].isdigit():
        i += 1
    if i > start:
        isotope = int(body[start:i])
    if i >= len(body):
        raise SmilesSyntaxError(f"bracket atom {token!r} has no element")
    aromatic = False
    if body[i] == "*":
        raise UnsupportedAtomError("wildcard atoms are not supported")
    if body[i].isupper():
        element = body[i]
        i += 1
        if i < len(body) and body[i].islower():
            element += body[i]
            i += 1
    elif body[i].islower():
        el = body[i]
        i += 1
        if i < len(body) and body[i].islower() and body[i] not in "h":
            el += body[i]
            i += 1
        element = el.capitalize()
        aromatic = True
    else:
        raise SmilesSyntaxError(f"bad element in bracket atom {token!r}")
    if element not in _ELEMENT_INDEX:
        raise UnsupportedAtomError(f"unsupported element {element!r}")
    # chirality marks are accepted and discarded
    while i < len(body) and body[i] == "@":
        i += 1
    hcount = 0
    if i < len(body) and body[i] == "H":
        i += 1
        start = i
        while i < len(body) and body[i].isdigit():
            i += 1
        hcount = int(body[start:i]) if i > start else 1
    charge = 0
    if i < len(body) and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        ch = body[i]
        i += 1
        if i < len(body) and body[i].isdigit():
            start = i
            while i < len(body) and body[i].isdigit():
                i += 1
            charge = sign * int(body[start:i])
        else:
            charge = sign
            while i < len(body) and body[i] == ch:
                charge += sign
                i += 1
    if i < len(body) and body[i] == ":":
        i += 1
        start = i
        while i < len(body) and body[i].isdigit():
            i += 1
        if i == start:
            raise SmilesSyntaxError(f"bad atom class in {token!r}")
    if i != len(body):
        raise SmilesSyntaxError(f"trailing characters in bracket atom {token!r}")
    return Atom(element, aromatic, charge, hcount, isotope)


def _parse_organic(token: str) -> tuple[Atom, bool]:
    """Returns the atom plus a flag marking that hcount needs inference."""
    if token[0].islower():
        element = token.capitalize()
        if element not in _AROMATIC_OK:
            raise UnsupportedAtomError(f"element {element!r} cannot be aromatic")
        return Atom(element, aromatic=True), True
    if token not in _ELEMENT_INDEX:
        raise UnsupportedAtomError(f"unsupported element {token!r}")
    return Atom(token), True


def parse(smiles: str, *, valence_table: Optional[dict[str, int]] = None) -> Molecule:
    """Parse a SMILES string into a validated :class:`Molecule`.

    Raises :class:`SmilesSyntaxError`, :class:`UnmatchedRingError`,
    :class:`ValenceError`, :class:`MultiFragmentError`, or
    :class:`UnsupportedAtomError`.
    """
    if not isinstance(smiles, str) or not smiles.strip():
        raise SmilesSyntaxError("empty SMILES string")
    smiles = smiles.strip()

    atoms: list[Atom] = []
    needs_h: list[bool] = []
    bond_orders: list[Optional[str]] = []  # None = unspecified, resolved later
    bonds: list[Bond] = []
    anchor: Optional[int] = None
    pending: Optional[str] = None
    branch_stack: list[int] = []
    open_rings: dict[int, tuple[int, Optional[str]]] = {}

    def add_bond(a: int, b: int, order: Optional[str]) -> None:
        key = (min(a, b), max(a, b))
        if a == b:
            raise SmilesSyntaxError(f"ring bond from atom {a} to itself")
        for bond in bonds:
            if bond.key() == key:
                raise SmilesSyntaxError(f"duplicate bond between atoms {key}")
        bonds.append(Bond(a, b, SINGLE))
        bond_orders.append(order)

    just_opened = False
    for kind, value in _tokenize(smiles):
        if kind == "atom":
            token = str(value)
            if token.startswith("["):
                atom = _parse_bracket(token)
                infer = False
            else:
                atom, infer = _parse_organic(token)
            idx = len(atoms)
            atoms.append(atom)
            needs_h.append(infer)
            if anchor is not None:
                add_bond(anchor, idx, pending)
            elif pending is not None:
                raise SmilesSyntaxError("bond symbol before the first atom")
            pending = None
            anchor = idx
            just_opened = False
        elif kind == "bond":
            if pending is not None:
                raise SmilesSyntaxError("two consecutive bond symbols")
            pending = _BOND_CHARS[str(value)]
        elif kind == "open":
            if anchor is None:
                raise SmilesSyntaxError("branch before the first atom")
            if just_opened:
                raise SmilesSyntaxError("empty branch")
            branch_stack.append(anchor)
            just_opened = True
        elif kind == "close":
            if not branch_stack:
                raise SmilesSyntaxError("unmatched ')'")
            if pending is not None or just_opened:
                raise SmilesSyntaxError("dangling branch content before ')'")
            anchor = branch_stack.pop()
        elif kind == "ring":
            num = int(value)  # type: ignore[arg-type]
            if anchor is None:
                raise SmilesSyntaxError("ring digit before the first atom")
            if num in open_rings:
                other, order_there = open_rings.pop(num)
                if pending is not None and order_there is not None and pending != order_there:
                    raise SmilesSyntaxError(f"conflicting ring-bond orders for digit {num}")
                add_bond(other, anchor, pending if pending is not None else order_there)
                pending = None
            else:
                open_rings[num] = (anchor, pending)
                pending = None

    if branch_stack:
        raise SmilesSyntaxError("unclosed '('")
    if pending is not None:
        raise SmilesSyntaxError("dangling bond symbol at end of input")
    if open_rings:
        digits = sorted(open_rings)
        raise UnmatchedRingError(f"unmatched ring digit(s): {digits}")
    if not atoms:
        raise SmilesSyntaxError("no atoms in SMILES string")

    # Resolve unspecified bond orders: aromatic between two aromatic atoms
    # when the bond lies on a ring, single otherwise.
    adj = _adjacency(len(atoms), bonds)
    ring_flags = _ring_bond_flags(len(atoms), bonds, adj)
    resolved: list[Bond] = []
    for i, bond in enumerate(bonds):
        order = bond_orders[i]
        if order is None:
            if (
                atoms[bond.a].aromatic
                and atoms[bond.b].aromatic
                and ring_flags[i]
            ):
                order = AROMATIC
            else:
                order = SINGLE
        resolved.append(Bond(bond.a, bond.b, order))

    # Infer implicit hydrogens for bare atoms.
    per_atom_orders: list[list[str]] = [[] for _ in atoms]
    for bond in resolved:
        per_atom_orders[bond.a].append(bond.order)
        per_atom_orders[bond.b].append(bond.order)
    final_atoms: list[Atom] = []
    for idx, atom in enumerate(atoms):
        if needs_h[idx]:
            h = _implicit_hydrogens(atom.element, atom.aromatic, per_atom_orders[idx])
            atom = Atom(atom.element, atom.aromatic, atom.formal_charge, h, atom.isotope)
        final_atoms.append(atom)

    return Molecule(final_atoms, resolved, valence_table=valence_table)


# ---------------------------------------------------------------------------
# Canonicalization
# ---------------------------------------------------------------------------


def canonicalize(m: Molecule) -> str:
    """Canonical SMILES of a molecule (already cached on the instance)."""
    return m.canonical


def _initial_invariants(mol: Molecule) -> list[tuple]:
    inv = []
    for idx, atom in enumerate(mol.atoms):
        inv.append(
            (
                _ELEMENT_INDEX[atom.element],
                atom.aromatic,
                atom.formal_charge,
                atom.hcount,
                mol.degree(idx),
                mol.atom_in_ring(idx),
                atom.isotope or 0,
            )
        )
    return inv


def _dense_ranks(keys: list) -> list[int]:
    order = {key: rank for rank, key in enumerate(sorted(set(keys)))}
    return [order[key] for key in keys]


def _refine(mol: Molecule, ranks: list[int]) -> list[int]:
    n = len(ranks)
    while True:
        keys = []
        for i in range(n):
            nbrs = sorted(
                (_ORDER_SORT[order], ranks[j]) for j, order in mol.neighbors(i)
            )
            keys.append((ranks[i], tuple(nbrs)))
        new_ranks = _dense_ranks(keys)
        if new_ranks == ranks:
            return ranks
        ranks = new_ranks


def _canonical_string(mol: Molecule) -> str:
    n = len(mol.atoms)
    if n == 0:
        return ""
    ranks = _refine(mol, _dense_ranks(_initial_invariants(mol)))
    budget = [_MAX_CANON_LEAVES]
    return _canon_search(mol, ranks, budget)


def _canon_search(mol: Molecule, ranks: list[int], budget: list[int]) -> str:
    cells: dict[int, list[int]] = {}
    for idx, rank in enumerate(ranks):
        cells.setdefault(rank, []).append(idx)
    tied = None
    for rank in sorted(cells):
        if len(cells[rank]) > 1:
            tied = cells[rank]
            break
    if tied is None:
        budget[0] -= 1
        if budget[0] < 0:
            raise RuntimeError("canonicalization budget exceeded (graph too symmetric)")
        return _write_smiles(mol, ranks)
    best: Optional[str] = None
    for atom in tied:
        keys = [(ranks[i], int(i != atom)) for i in range(len(ranks))]
        refined = _refine(mol, _dense_ranks(keys))
        candidate = _canon_search(mol, refined, budget)
        if best is None or candidate < best:
            best = candidate
    assert best is not None
    return best


def _bond_char(mol: Molecule, bond_idx: int) -> str:
    bond = mol.bonds[bond_idx]
    if bond.order == DOUBLE:
        return "="
    if bond.order == TRIPLE:
        return "#"
    if bond.order == AROMATIC:
        return ""
    # single bond: explicit '-' only where re-parsing would otherwise
    # resolve the default order to aromatic (ring bond, both ends aromatic)
    if (
        mol.bond_in_ring(bond_idx)
        and mol.atoms[bond.a].aromatic
        and mol.atoms[bond.b].aromatic
    ):
        return "-"
    return ""


def _atom_token(mol: Molecule, idx: int) -> str:
    atom = mol.atoms[idx]
    orders = [order for _, order in mol.neighbors(idx)]
    plain_ok = (
        atom.formal_charge == 0
        and atom.isotope is None
        and (not atom.aromatic or atom.element in _AROMATIC_OK)
        and _implicit_hydrogens(atom.element, atom.aromatic, orders) == atom.hcount
    )
    symbol = atom.element.lower() if atom.aromatic else atom.element
    if plain_ok:
        return symbol
    parts = ["["]
    if atom.isotope is not None:
        parts.append(str(atom.isotope))
    parts.append(symbol)
    if atom.hcount == 1:
        parts.append("H")
    elif atom.hcount > 1:
        parts.append(f"H{atom.hcount}")
    if atom.formal_charge == 1:
        parts.append("+")
    elif atom.formal_charge == -1:
        parts.append("-")
    elif atom.formal_charge > 1:
        parts.append(f"+{atom.formal_charge}")
    elif atom.formal_charge < -1:
        parts.append(str(atom.formal_charge))
    parts.append("]")
    return "".join(parts)


def _write_smiles(mol: Molecule, ranks: list[int]) -> str:
    n = len(mol.atoms)
    if n == 0:
        return ""
    bond_index = {bond.key(): i for i, bond in enumerate(mol.bonds)}
    # terminal atoms give chain-first strings; both keys are isomorphism
    # invariants, so the choice is still canonical
    root = min(range(n), key=lambda i: (mol.degree(i) != 1, ranks[i]))

    # depth-first spanning tree, neighbors taken in canonical-rank order
    children: dict[int, list[int]] = {i: [] for i in range(n)}
    closure_set: set[tuple[int, int]] = set()
    visited = [False] * n
    parent = [-1] * n
    visited[root] = True

    def _ordered(idx: int) -> list[int]:
        return sorted((nbr for nbr, _ in mol.neighbors(idx)), key=lambda j: ranks[j])

    dfs: list[tuple[int, Iterator[int]]] = [(root, iter(_ordered(root)))]
    while dfs:
        node, it = dfs[-1]
        advanced = False
        for nbr in it:
            if not visited[nbr]:
                visited[nbr] = True
                parent[nbr] = node
                children[node].append(nbr)
                dfs.append((nbr, iter(_ordered(nbr))))
                advanced = True
                break
            if nbr != parent[node]:
                closure_set.add((min(node, nbr), max(node, nbr)))
        if not advanced:
            dfs.pop()

    closure_atoms: dict[int, list[tuple[int, int]]] = {}
    for pair in closure_set:
        closure_atoms.setdefault(pair[0], []).append(pair)
        closure_atoms.setdefault(pair[1], []).append(pair)
    ring_digit: dict[tuple[int, int], int] = {}

    free_digits = list(range(1, 100))
    open_digits: dict[tuple[int, int], int] = {}
    written: set[int] = set()

    def closure_tokens(idx: int) -> str:
        out = []
        pairs = closure_atoms.get(idx, [])
        closing = [p for p in pairs if p in open_digits]
        opening = [p for p in pairs if p not in open_digits and p not in ring_digit]
        closing.sort(key=lambda p: open_digits[p])
        # deterministic: open closures toward lower-ranked partners first
        opening.sort(key=lambda p: ranks[p[0] if p[1] == idx else p[1]])
        for pair in closing:
            digit = open_digits.pop(pair)
            free_digits.insert(0, digit)
            free_digits.sort()
            out.append(_digit_token(digit))
        for pair in opening:
            digit = free_digits.pop(0)
            open_digits[pair] = digit
            ring_digit[pair] = digit
            out.append(_bond_char(mol, bond_index[pair]) + _digit_token(digit))
        return "".join(out)

    def write(idx: int) -> str:
        written.add(idx)
        token = _atom_token(mol, idx) + closure_tokens(idx)
        kids = children[idx]
        parts = [token]
        for pos, kid in enumerate(kids):
            bond = _bond_char(mol, bond_index[(min(idx, kid), max(idx, kid))])
            sub = bond + write(kid)
            if pos < len(kids) - 1:
                parts.append(f"({sub})")
            else:
                parts.append(sub)
        return "".join(parts)

    return write(root)


def _digit_token(digit: int) -> str:
    return str(digit) if digit < 10 else f"%{digit:02d}"


# ---------------------------------------------------------------------------
# Scaffolds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scaffold:
    """Ring systems plus linkers; empty for acyclic molecules."""

    core: Molecule
    ring_count: int


def scaffold_of(m: Molecule) -> Scaffold:
    """Iteratively prune terminal atoms until only rings and linkers remain."""
    keep = set(range(len(m.atoms)))
    while True:
        removable = []
        for idx in keep:
            deg = sum(1 for nbr, _ in m.neighbors(idx) if nbr in keep)
            if deg <= 1 and not m.atom_in_ring(idx):
                removable.append(idx)
        if not removable:
            break
        keep.difference_update(removable)
    if not keep:
        return Scaffold(Molecule.empty(), 0)

    remap = {old: new for new, old in enumerate(sorted(keep))}
    atoms = []
    for old in sorted(keep):
        atom = m.atoms[old]
        # hydrogens refill the valence freed by pruned neighbors
        pruned = sum(
            _ORDER_ELECTRONS[order]
            for nbr, order in m.neighbors(old)
            if nbr not in keep
        )
        atoms.append(
            Atom(
                atom.element,
                atom.aromatic,
                atom.formal_charge,
                atom.hcount + pruned,
                atom.isotope,
            )
        )
    bonds = [
        Bond(remap[b.a], remap[b.b], b.order)
        for b in m.bonds
        if b.a in keep and b.b in keep
    ]
    core = Molecule(atoms, bonds)
    return Scaffold(core, core.ring_count())


# ---------------------------------------------------------------------------
# Local edits
# ---------------------------------------------------------------------------

# common light elements only; Br/I enter molecules via explicit SMILES
_APPEND_POOL = ("C", "N", "O", "F", "Cl", "S")
_SUBSTITUTE_POOL = ("C", "N", "O", "S", "P", "F", "Cl", "B")
_SUBSTITUTE_AROMATIC_POOL = ("C", "N", "O", "S")


def mutate(m: Molecule, op: str, seed: int) -> Molecule:
    """Apply one local edit; deterministic for a given seed.

    Raises :class:`NoApplicableSiteError` when the operator has no valid
    site, :class:`ValenceError` when the edit would break valence rules.
    """
    if op not in EDIT_OPERATORS:
        raise ValueError(f"unknown edit operator {op!r}")
    rng = random.Random(seed)
    if op == "delete_terminal_atom":
        return _delete_terminal(m, rng)
    if op == "append_terminal_atom":
        return _append_terminal(m, rng)
    if op == "substitute_atom":
        return _substitute(m, rng)
    return _change_bond_order(m, rng)


def _delete_terminal(m: Molecule, rng: random.Random) -> Molecule:
    sites = [
        idx
        for idx in range(len(m.atoms))
        if m.degree(idx) == 1 and len(m.atoms) > 1
    ]
    if not sites:
        raise NoApplicableSiteError("no terminal atom to delete")
    target = rng.choice(sorted(sites))
    (nbr, order), = m.neighbors(target)
    atoms = []
    remap = {}
    for idx, atom in enumerate(m.atoms):
        if idx == target:
            continue
        remap[idx] = len(atoms)
        if idx == nbr:
            atom = Atom(
                atom.element,
                atom.aromatic,
                atom.formal_charge,
                atom.hcount + _ORDER_ELECTRONS[order],
                atom.isotope,
            )
        atoms.append(atom)
    bonds = [
        Bond(remap[b.a], remap[b.b], b.order)
        for b in m.bonds
        if target not in (b.a, b.b)
    ]
    return Molecule(atoms, bonds)


def _append_terminal(m: Molecule, rng: random.Random, element: Optional[str] = None) -> Molecule:
    sites = [idx for idx, atom in enumerate(m.atoms) if atom.hcount >= 1]
    if not sites:
        raise NoApplicableSiteError("no atom with a spare hydrogen")
    site = rng.choice(sorted(sites))
    new_el = element or rng.choice(_APPEND_POOL)
    old = m.atoms[site]
    atoms = list(m.atoms)
    atoms[site] = Atom(old.element, old.aromatic, old.formal_charge, old.hcount - 1, old.isotope)
    atoms.append(Atom(new_el, hcount=_DEFAULT_VALENCES[new_el][0] - 1))
    bonds = list(m.bonds) + [Bond(site, len(atoms) - 1, SINGLE)]
    return Molecule(atoms, bonds)


def _substitute(m: Molecule, rng: random.Random) -> Molecule:
    candidates: list[tuple[int, str]] = []
    for idx, atom in enumerate(m.atoms):
        orders = [order for _, order in m.neighbors(idx)]
        pool = _SUBSTITUTE_AROMATIC_POOL if atom.aromatic else _SUBSTITUTE_POOL
        for el in pool:
            if el == atom.element:
                continue
            h = _implicit_hydrogens(el, atom.aromatic, orders)
            bond_sum = sum(_ORDER_ELECTRONS[o] for o in orders)
            if bond_sum + h <= _VALENCE_MAX[el] and bond_sum <= _VALENCE_MAX[el]:
                candidates.append((idx, el))
    if not candidates:
        raise NoApplicableSiteError("no substitutable atom")
    idx, el = rng.choice(sorted(candidates))
    old = m.atoms[idx]
    orders = [order for _, order in m.neighbors(idx)]
    atoms = list(m.atoms)
    atoms[idx] = Atom(
        el, old.aromatic, 0, _implicit_hydrogens(el, old.aromatic, orders), None
    )
    return Molecule(atoms, list(m.bonds))


def _change_bond_order(m: Molecule, rng: random.Random) -> Molecule:
    candidates: list[tuple[int, str]] = []
    for b_idx, bond in enumerate(m.bonds):
        if bond.order == AROMATIC:
            continue
        for new_order in (SINGLE, DOUBLE, TRIPLE):
            if new_order == bond.order:
                continue
            delta = _ORDER_ELECTRONS[new_order] - _ORDER_ELECTRONS[bond.order]
            a, b = m.atoms[bond.a], m.atoms[bond.b]
            if a.hcount - delta < 0 or b.hcount - delta < 0:
                continue
            if a.aromatic or b.aromatic:
                continue
            candidates.append((b_idx, new_order))
    if not candidates:
        raise NoApplicableSiteError("no bond eligible for an order change")
    b_idx, new_order = rng.choice(sorted(candidates))
    bond = m.bonds[b_idx]
    delta = _ORDER_ELECTRONS[new_order] - _ORDER_ELECTRONS[bond.order]
    atoms = list(m.atoms)
    for end in (bond.a, bond.b):
        atom = atoms[end]
        atoms[end] = Atom(
            atom.element,
            atom.aromatic,
            atom.formal_charge,
            atom.hcount - delta,
            atom.isotope,
        )
    bonds = list(m.bonds)
    bonds[b_idx] = Bond(bond.a, bond.b, new_order)
    return Molecule(atoms, bonds)
