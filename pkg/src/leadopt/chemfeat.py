"""Circular fingerprints, similarity, functional groups, cheap descriptors.

Everything here is a pure function of the molecular graph; fingerprints and
functional-group sets are cached on the molecule instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from .molgraph import (
    Molecule,
    SmilesSyntaxError,
    UnsupportedAtomError,
    _AROMATIC_OK,
    _BOND_CHARS,
    _ELEMENT_INDEX,
    _ORDER_SORT,
    _parse_bracket,
    _tokenize,
)

__all__ = [
    "Fingerprint",
    "FunctionalGroupSet",
    "DescriptorVector",
    "DescriptorDelta",
    "WidthMismatchError",
    "morgan_fp",
    "tanimoto",
    "detect_functional_groups",
    "jaccard",
    "descriptors",
    "catalog_tags",
    "fingerprint_from_words",
]

DEFAULT_RADIUS = 2
DEFAULT_WIDTH = 2048

_M64 = (1 << 64) - 1


class WidthMismatchError(ValueError):
    """Fingerprints with different width or radius were compared."""


def _load_table(name: str) -> dict[str, float]:
    text = resources.files("leadopt.data").joinpath(name).read_text()
    table: dict[str, float] = {}
    for line in text.splitlines():
        line = line.rstrip()
        if not line or line.startswith("#"):
            continue
        key, value = line.split("\t")[:2]
        table[key] = float(value)
    return table


_MASSES = _load_table("atomic_masses.tsv")
_PSA = _load_table("psa_contrib.tsv")


# ---------------------------------------------------------------------------
# Fingerprints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fingerprint:
    """Fixed-width bit vector from hashed circular atom environments."""

    bits: int
    width: int = DEFAULT_WIDTH
    radius: int = DEFAULT_RADIUS
    popcount: int = field(init=False)

    def __post_init__(self):
        if self.width <= 0 or self.width & (self.width - 1):
            raise ValueError("fingerprint width must be a power of two")
        object.__setattr__(self, "popcount", self.bits.bit_count())

    def to_words(self) -> np.ndarray:
        """Little-endian uint64 view, for bulk numpy scans."""
        raw = self.bits.to_bytes(self.width // 8, "little")
        return np.frombuffer(raw, dtype=np.uint64)

    def on_bits(self) -> list[int]:
        return [i for i in range(self.width) if (self.bits >> i) & 1]


def fingerprint_from_words(
    words: np.ndarray, width: int = DEFAULT_WIDTH, radius: int = DEFAULT_RADIUS
) -> Fingerprint:
    bits = int.from_bytes(words.astype("<u8").tobytes(), "little")
    return Fingerprint(bits, width, radius)


def _mix64(x: int) -> int:
    x &= _M64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _M64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _M64
    x ^= x >> 31
    return x


def _mix_stream(values) -> int:
    h = 0x9E3779B97F4A7C15
    for v in values:
        h = _mix64(h ^ (int(v) & _M64))
    return h


def morgan_fp(
    m: Molecule, radius: int = DEFAULT_RADIUS, width: int = DEFAULT_WIDTH
) -> Fingerprint:
    """Hash every atom environment at iterations 0..radius into `width` bits.

    Depends only on the molecular graph, never on input atom order.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    key = ("fp", radius, width)
    cached = m._fp_cache.get(key)
    if cached is not None:
        return cached

    current = []
    for idx, atom in enumerate(m.atoms):
        current.append(
            _mix_stream(
                (
                    _ELEMENT_INDEX[atom.element],
                    int(atom.aromatic),
                    atom.formal_charge,
                    atom.hcount,
                    m.degree(idx),
                    int(m.atom_in_ring(idx)),
                )
            )
        )
    bits = 0
    for iteration in range(radius + 1):
        if iteration > 0:
            refreshed = []
            for idx in range(len(m.atoms)):
                stream = [iteration, current[idx]]
                for pair in sorted(
                    (_ORDER_SORT[order], current[j]) for j, order in m.neighbors(idx)
                ):
                    stream.extend(pair)
                refreshed.append(_mix_stream(stream))
            current = refreshed
        for h in current:
            bits |= 1 << (h % width)
    fp = Fingerprint(bits, width, radius)
    m._fp_cache[key] = fp
    return fp


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """|a AND b| / |a OR b|; 1.0 when both vectors are all-zero."""
    if a.width != b.width or a.radius != b.radius:
        raise WidthMismatchError(
            f"incompatible fingerprints: {a.width}/{a.radius} vs {b.width}/{b.radius}"
        )
    inter = (a.bits & b.bits).bit_count()
    union = a.popcount + b.popcount - inter
    if union == 0:
        return 1.0
    return inter / union


# ---------------------------------------------------------------------------
# Functional-group detection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _PatternAtom:
    element: str
    aromatic: bool
    charge: int
    h_min: Optional[int]


@dataclass(frozen=True)
class _Pattern:
    atoms: tuple[_PatternAtom, ...]
    adj: tuple[tuple[tuple[int, str], ...], ...]  # (neighbor, order) per atom


def _parse_pattern(smiles: str) -> _Pattern:
    """Pattern SMILES: no implicit hydrogens, bracket H is a lower bound."""
    atoms: list[_PatternAtom] = []
    bonds: list[tuple[int, int, Optional[str]]] = []
    anchor: Optional[int] = None
    pending: Optional[str] = None
    branch_stack: list[int] = []
    open_rings: dict[int, tuple[int, Optional[str]]] = {}

    for kind, value in _tokenize(smiles):
        if kind == "atom":
            token = str(value)
            if token.startswith("["):
                parsed = _parse_bracket(token)
                h_min = parsed.hcount if "H" in token else None
                atom = _PatternAtom(
                    parsed.element, parsed.aromatic, parsed.formal_charge, h_min
                )
            else:
                if token[0].islower():
                    element = token.capitalize()
                    if element not in _AROMATIC_OK:
                        raise UnsupportedAtomError(
                            f"element {element!r} cannot be aromatic"
                        )
                    atom = _PatternAtom(element, True, 0, None)
                else:
                    if token not in _ELEMENT_INDEX:
                        raise UnsupportedAtomError(f"unsupported element {token!r}")
                    atom = _PatternAtom(token, False, 0, None)
            idx = len(atoms)
            atoms.append(atom)
            if anchor is not None:
                bonds.append((anchor, idx, pending))
            pending = None
            anchor = idx
        elif kind == "bond":
            pending = _BOND_CHARS[str(value)]
        elif kind == "open":
            branch_stack.append(anchor)  # type: ignore[arg-type]
        elif kind == "close":
            anchor = branch_stack.pop()
        elif kind == "ring":
            num = int(value)  # type: ignore[arg-type]
            if num in open_rings:
                other, order_there = open_rings.pop(num)
                bonds.append((other, anchor, pending or order_there))  # type: ignore[arg-type]
            else:
                open_rings[num] = (anchor, pending)  # type: ignore[dict-item]
            pending = None
    if open_rings:
        raise SmilesSyntaxError(f"unmatched ring digit in pattern {smiles!r}")

    adj: list[list[tuple[int, str]]] = [[] for _ in atoms]
    for a, b, order in bonds:
        if order is None:
            order = "aromatic" if atoms[a].aromatic and atoms[b].aromatic else "single"
        adj[a].append((b, order))
        adj[b].append((a, order))
    return _Pattern(tuple(atoms), tuple(tuple(nbrs) for nbrs in adj))


@dataclass(frozen=True)
class _CatalogEntry:
    tag: str
    pattern: _Pattern
    suppresses: tuple[str, ...]


def _load_catalog() -> list[_CatalogEntry]:
    text = resources.files("leadopt.data").joinpath("fg_catalog.tsv").read_text()
    entries = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        tag, pattern = parts[0], parts[1]
        suppresses: tuple[str, ...] = ()
        if len(parts) > 2 and parts[2].startswith("suppresses:"):
            suppresses = tuple(parts[2][len("suppresses:"):].split(","))
        entries.append(_CatalogEntry(tag, _parse_pattern(pattern), suppresses))
    return entries


_CATALOG = _load_catalog()


def catalog_tags() -> frozenset[str]:
    return frozenset(entry.tag for entry in _CATALOG)


@dataclass(frozen=True)
class FunctionalGroupSet:
    """Set of functional-group tags drawn from the shipped catalog."""

    tags: frozenset[str]

    def __post_init__(self):
        unknown = self.tags - catalog_tags()
        if unknown:
            raise ValueError(f"tags not in catalog: {sorted(unknown)}")

    def __iter__(self):
        return iter(sorted(self.tags))

    def __contains__(self, tag: str) -> bool:
        return tag in self.tags

    def __len__(self) -> int:
        return len(self.tags)


def _atom_compatible(p: _PatternAtom, mol: Molecule, idx: int) -> bool:
    atom = mol.atoms[idx]
    if atom.element != p.element or atom.aromatic != p.aromatic:
        return False
    if atom.formal_charge != p.charge:
        return False
    if p.h_min is not None and atom.hcount < p.h_min:
        return False
    return True


def _pattern_matches(pattern: _Pattern, mol: Molecule) -> set[frozenset[int]]:
    """All target atom sets hit by the pattern (connected subgraph matches)."""
    p_n = len(pattern.atoms)
    n = len(mol.atoms)
    if p_n == 0 or p_n > n:
        return set()

    mol_adj: list[dict[int, str]] = [
        {j: order for j, order in mol.neighbors(i)} for i in range(n)
    ]
    # search order: start at pattern atom 0, then always extend from mapped
    order: list[tuple[int, Optional[int]]] = [(0, None)]  # (pattern atom, mapped nbr)
    placed = {0}
    while len(order) < p_n:
        for p_idx in range(p_n):
            if p_idx in placed:
                continue
            anchor = next(
                (j for j, _ in pattern.adj[p_idx] if j in placed), None
            )
            if anchor is not None:
                order.append((p_idx, anchor))
                placed.add(p_idx)
                break
        else:
            raise ValueError("pattern graph must be connected")

    results: set[frozenset[int]] = set()
    mapping: dict[int, int] = {}
    used: set[int] = set()

    def backtrack(depth: int) -> None:
        if depth == p_n:
            results.add(frozenset(mapping.values()))
            return
        p_idx, anchor = order[depth]
        if anchor is None:
            candidates = range(n)
        else:
            candidates = list(mol_adj[mapping[anchor]].keys())
        for t_idx in candidates:
            if t_idx in used or not _atom_compatible(pattern.atoms[p_idx], mol, t_idx):
                continue
            # every pattern bond to an already-mapped atom must exist with
            # the same order in the target
            ok = True
            for p_nbr, p_order in pattern.adj[p_idx]:
                if p_nbr not in mapping:
                    continue
                if mol_adj[t_idx].get(mapping[p_nbr]) != p_order:
                    ok = False
                    break
            if not ok:
                continue
            mapping[p_idx] = t_idx
            used.add(t_idx)
            backtrack(depth + 1)
            del mapping[p_idx]
            used.discard(t_idx)

    backtrack(0)
    return results


def detect_functional_groups(m: Molecule) -> FunctionalGroupSet:
    """Tags for every catalog pattern with a match, after suppression rules.

    Suppression uses the raw (pre-suppression) matches of the suppressor:
    a suppressed match is dropped when it shares at least one atom with any
    match of the suppressing tag.
    """
    cached = m._fp_cache.get("fg")
    if cached is not None:
        return cached

    raw: dict[str, set[frozenset[int]]] = {}
    suppresses: dict[str, set[str]] = {}
    for entry in _CATALOG:
        found = _pattern_matches(entry.pattern, m)
        if found:
            raw.setdefault(entry.tag, set()).update(found)
        if entry.suppresses:
            suppresses.setdefault(entry.tag, set()).update(entry.suppresses)

    surviving = {tag: set(matches) for tag, matches in raw.items()}
    for sup_tag, targets in suppresses.items():
        for sup_match in raw.get(sup_tag, ()):
            for target in targets:
                if target not in surviving:
                    continue
                surviving[target] = {
                    match for match in surviving[target] if not (match & sup_match)
                }
    tags = frozenset(tag for tag, matches in surviving.items() if matches)
    result = FunctionalGroupSet(tags)
    m._fp_cache["fg"] = result
    return result


def jaccard(a: FunctionalGroupSet, b: FunctionalGroupSet) -> float:
    """|intersection| / |union| over tags; 1.0 when both sets are empty."""
    union = a.tags | b.tags
    if not union:
        return 1.0
    return len(a.tags & b.tags) / len(union)


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DescriptorVector:
    mw: float
    ring_count: int
    hbd: int
    hba: int
    psa_lite: float
    rotatable_bonds: int

    def delta(self, earlier: "DescriptorVector") -> "DescriptorDelta":
        """Signed change from `earlier` to this vector."""
        return DescriptorDelta(
            mw=self.mw - earlier.mw,
            ring_count=self.ring_count - earlier.ring_count,
            hbd=self.hbd - earlier.hbd,
            hba=self.hba - earlier.hba,
            psa_lite=self.psa_lite - earlier.psa_lite,
            rotatable_bonds=self.rotatable_bonds - earlier.rotatable_bonds,
        )


@dataclass(frozen=True)
class DescriptorDelta:
    mw: float
    ring_count: int
    hbd: int
    hba: int
    psa_lite: float
    rotatable_bonds: int


def descriptors(m: Molecule) -> DescriptorVector:
    heavy_mass = 0.0
    total_h = 0
    hbd = 0
    hba = 0
    psa = 0.0
    for idx, atom in enumerate(m.atoms):
        heavy_mass += _MASSES[atom.element]
        total_h += atom.hcount
        if atom.element in ("N", "O"):
            hba += 1
            if atom.hcount >= 1:
                hbd += 1
            key = atom.element.lower() if atom.aromatic else atom.element
            if atom.hcount >= 1:
                key += "_H"
            psa += _PSA.get(key, 0.0)
    rotatable = 0
    for b_idx, bond in enumerate(m.bonds):
        if (
            bond.order == "single"
            and not m.bond_in_ring(b_idx)
            and m.degree(bond.a) >= 2
            and m.degree(bond.b) >= 2
        ):
            rotatable += 1
    return DescriptorVector(
        mw=heavy_mass + total_h * _MASSES["H"],
        ring_count=m.ring_count(),
        hbd=hbd,
        hba=hba,
        psa_lite=psa,
        rotatable_bonds=rotatable,
    )
