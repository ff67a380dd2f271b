"""Evolving skill memory: edit-card extraction from improving transitions,
strategy-sentence rendering, and a capacity-controlled per-task skill bank
with dual (fingerprint / functional-group) retrieval.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from . import lineproto
from .chemfeat import (
    DescriptorDelta,
    Fingerprint,
    FunctionalGroupSet,
    descriptors,
    detect_functional_groups,
    jaccard,
    morgan_fp,
    tanimoto,
)
from .molgraph import Atom, Bond, Molecule, parse, scaffold_of

__all__ = [
    "McsResult",
    "EditCard",
    "SkillCard",
    "SkillBank",
    "EvictionReport",
    "mcs_decompose",
    "build_edit_card",
    "harvest",
    "summarize_template",
    "summarize_external",
    "render_summarizer_prompt",
    "make_skill_card",
    "render_skill_block",
    "save_skills",
    "load_skills",
    "SKILL_HEADER_TEMPLATE",
]

log = logging.getLogger(__name__)

SKILL_HEADER_TEMPLATE = "=== Potential Useful Strategies for {task} ==="

MODIFICATION_TYPES = ("addition", "removal", "replacement", "scaffold_hop")
SCAFFOLD_TYPES = (
    "unchanged",
    "ring_removal",
    "ring_addition",
    "scaffold_replacement",
    "scaffold_hop",
)

_EXACT_MCS_ATOM_LIMIT = 40
DEFAULT_MCS_TIME_CAP = 0.2
DEFAULT_HARVEST_DELTA = 0.05
DEFAULT_CAPACITY = 1000


# ---------------------------------------------------------------------------
# Maximum common connected substructure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McsResult:
    """Atom mapping (before index -> after index) plus complement fragments."""

    mapping: tuple[tuple[int, int], ...]
    removed_fragment: str
    added_fragment: str
    approximate: bool

    def mapping_dict(self) -> dict[int, int]:
        return dict(self.mapping)


class _SearchTimeout(Exception):
    pass


def _atom_label(mol: Molecule, idx: int) -> tuple:
    atom = mol.atoms[idx]
    return (atom.element, atom.aromatic, atom.formal_charge)


def _adj_maps(mol: Molecule) -> list[dict[int, str]]:
    return [{j: order for j, order in mol.neighbors(i)} for i in range(len(mol.atoms))]


def _exact_mcs(
    g: Molecule, h: Molecule, deadline: float
) -> tuple[list[tuple[int, int]], bool]:
    """McSplit-style branch and bound for the maximum common connected
    induced subgraph with matching atom labels and bond orders.

    Returns (best mapping, completed) where completed is False on timeout.
    """
    g_adj = _adj_maps(g)
    h_adj = _adj_maps(h)
    target = min(len(g.atoms), len(h.atoms))

    classes: dict[tuple, tuple[list[int], list[int]]] = {}
    for i in range(len(g.atoms)):
        classes.setdefault(_atom_label(g, i), ([], []))[0].append(i)
    for j in range(len(h.atoms)):
        classes.setdefault(_atom_label(h, j), ([], []))[1].append(j)
    initial = [
        (gs, hs, False) for gs, hs in classes.values() if gs and hs
    ]

    best: list[tuple[int, int]] = []
    completed = True

    def refine(
        current: list[tuple[list[int], list[int], bool]], v: int, w: int
    ) -> list[tuple[list[int], list[int], bool]]:
        out = []
        for gs, hs, adj in current:
            buckets: dict[Optional[str], tuple[list[int], list[int]]] = {}
            for u in gs:
                if u == v:
                    continue
                buckets.setdefault(g_adj[v].get(u), ([], []))[0].append(u)
            for u in hs:
                if u == w:
                    continue
                buckets.setdefault(h_adj[w].get(u), ([], []))[1].append(u)
            for key, (sub_g, sub_h) in buckets.items():
                if sub_g and sub_h:
                    out.append((sub_g, sub_h, adj or key is not None))
        return out

    def search(
        mapping: list[tuple[int, int]],
        current: list[tuple[list[int], list[int], bool]],
    ) -> None:
        nonlocal best
        if time.monotonic() > deadline:
            raise _SearchTimeout
        if len(mapping) > len(best):
            best = list(mapping)
            if len(best) == target:
                raise _SearchTimeout  # cannot do better; not a real timeout
        bound = len(mapping) + sum(min(len(gs), len(hs)) for gs, hs, _ in current)
        if bound <= len(best):
            return
        usable = [
            (gs, hs, adj)
            for gs, hs, adj in current
            if gs and hs and (adj or not mapping)
        ]
        if not usable:
            return
        # branch on the largest class; deterministic tie-break by node id
        gs, hs, adj = max(
            usable, key=lambda c: (min(len(c[0]), len(c[1])), -min(c[0]))
        )
        v = max(gs, key=lambda u: (len(g_adj[u]), -u))
        rest = [c for c in current if c[0] is not gs] + [
            ([u for u in gs if u != v], hs, adj)
        ]
        for w in sorted(hs):
            search(mapping + [(v, w)], refine(current, v, w))
        # branch with v left unmatched
        search(mapping, [c for c in rest if c[0] and c[1]])

    try:
        search([], initial)
    except _SearchTimeout:
        # raised either because the mapping size hit its ceiling (still an
        # exact result) or because the deadline passed mid-search
        if len(best) < target:
            completed = False
    return best, completed


def _greedy_mcs(g: Molecule, h: Molecule) -> list[tuple[int, int]]:
    """Anchor-grown common-substructure mapping; fast but not maximal."""
    g_adj = _adj_maps(g)
    h_adj = _adj_maps(h)
    seeds = [
        (i, j)
        for i in range(len(g.atoms))
        for j in range(len(h.atoms))
        if _atom_label(g, i) == _atom_label(h, j)
    ]
    seeds.sort(key=lambda p: (-(len(g_adj[p[0]]) + len(h_adj[p[1]])), p))
    best: list[tuple[int, int]] = []
    for seed in seeds[:10]:
        mapping = {seed[0]: seed[1]}
        used = {seed[1]}
        while True:
            candidates = []
            for u in list(mapping):
                for x in g_adj[u]:
                    if x in mapping:
                        continue
                    for y in h_adj[mapping[u]]:
                        if y in used or _atom_label(g, x) != _atom_label(h, y):
                            continue
                        consistent = all(
                            g_adj[x].get(gm) == h_adj[y].get(hm)
                            for gm, hm in mapping.items()
                        )
                        if consistent:
                            matched = sum(
                                1 for gm in g_adj[x] if gm in mapping
                            )
                            candidates.append((-matched, x, y))
            if not candidates:
                break
            _, x, y = min(candidates)
            mapping[x] = y
            used.add(y)
        if len(mapping) > len(best):
            best = sorted(mapping.items())
    return best


def _fragment_string(mol: Molecule, outside: set[int]) -> str:
    """Canonical string of the atoms outside the mapping, components joined.

    Hydrogens refill valence freed at cut bonds; the string is descriptive
    (fragments torn from rings need not re-parse as molecules).
    """
    if not outside:
        return ""
    unvisited = set(outside)
    fragments = []
    while unvisited:
        start = min(unvisited)
        comp = {start}
        queue = [start]
        while queue:
            cur = queue.pop()
            for nbr, _ in mol.neighbors(cur):
                if nbr in unvisited and nbr not in comp:
                    comp.add(nbr)
                    queue.append(nbr)
        unvisited -= comp
        remap = {old: new for new, old in enumerate(sorted(comp))}
        atoms = []
        for old in sorted(comp):
            atom = mol.atoms[old]
            cut = sum(
                {"single": 1, "double": 2, "triple": 3, "aromatic": 1}[order]
                for nbr, order in mol.neighbors(old)
                if nbr not in comp
            )
            atoms.append(
                Atom(atom.element, atom.aromatic, atom.formal_charge,
                     atom.hcount + cut, atom.isotope)
            )
        bonds = [
            Bond(remap[b.a], remap[b.b], b.order)
            for b in mol.bonds
            if b.a in comp and b.b in comp
        ]
        fragments.append(Molecule(atoms, bonds, validate=False).canonical)
    return ".".join(sorted(fragments))


def mcs_decompose(
    before: Molecule, after: Molecule, time_cap: float = DEFAULT_MCS_TIME_CAP
) -> McsResult:
    """Maximum common connected substructure split into kept/removed/added.

    Exact branch and bound up to 40 heavy atoms within the time cap; larger
    or timed-out instances fall back to a greedy mapping and are flagged
    approximate. The pair is ordered internally by canonical string, so
    swapping the arguments exactly swaps the removed/added fragments.
    """
    swapped = after.canonical < before.canonical
    g, h = (after, before) if swapped else (before, after)

    approximate = False
    if max(len(g.atoms), len(h.atoms)) > _EXACT_MCS_ATOM_LIMIT:
        pairs = _greedy_mcs(g, h)
        approximate = True
    else:
        pairs, completed = _exact_mcs(g, h, time.monotonic() + time_cap)
        if not completed:
            greedy = _greedy_mcs(g, h)
            if len(greedy) > len(pairs):
                pairs = greedy
            approximate = True

    if swapped:
        pairs = sorted((b, a) for a, b in pairs)
    mapping = tuple(sorted(pairs))
    mapped_before = {a for a, _ in mapping}
    mapped_after = {b for _, b in mapping}
    removed = _fragment_string(before, set(range(len(before.atoms))) - mapped_before)
    added = _fragment_string(after, set(range(len(after.atoms))) - mapped_after)
    return McsResult(mapping, removed, added, approximate)


# ---------------------------------------------------------------------------
# Edit cards
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EditCard:
    """Structured decomposition of one molecular transition."""

    before: str
    after: str
    modification_type: str
    removed_fragment: str
    added_fragment: str
    scaffold_before: str
    scaffold_after: str
    scaffold_type: str
    fg_removed: FunctionalGroupSet
    fg_added: FunctionalGroupSet
    deltas: DescriptorDelta
    score_before: float
    score_after: float
    aromatic_attachment: bool = False
    approximate_mcs: bool = False

    def __post_init__(self):
        if self.modification_type not in MODIFICATION_TYPES:
            raise ValueError(f"bad modification_type {self.modification_type!r}")
        if self.scaffold_type not in SCAFFOLD_TYPES:
            raise ValueError(f"bad scaffold_type {self.scaffold_type!r}")
        if self.modification_type == "addition" and (
            self.removed_fragment or not self.added_fragment
        ):
            raise ValueError("addition cards need an added fragment only")
        if self.modification_type == "removal" and (
            self.added_fragment or not self.removed_fragment
        ):
            raise ValueError("removal cards need a removed fragment only")
        if self.modification_type == "replacement" and not (
            self.removed_fragment and self.added_fragment
        ):
            raise ValueError("replacement cards need both fragments")

    @property
    def delta_r(self) -> float:
        return self.score_after - self.score_before

    @property
    def key(self) -> str:
        return f"{self.before}>>{self.after}"


def _scaffold_atom_set(m: Molecule) -> set[int]:
    keep = set(range(len(m.atoms)))
    while True:
        removable = [
            idx
            for idx in keep
            if sum(1 for nbr, _ in m.neighbors(idx) if nbr in keep) <= 1
            and not m.atom_in_ring(idx)
        ]
        if not removable:
            return keep
        keep.difference_update(removable)


def build_edit_card(
    before: Molecule,
    after: Molecule,
    score_before: float,
    score_after: float,
    time_cap: float = DEFAULT_MCS_TIME_CAP,
) -> EditCard:
    """Full edit decomposition: MCS diff, scaffold change, FG flux, deltas."""
    if before.canonical == after.canonical:
        raise ValueError("identical molecules leave nothing to decompose")
    mcs = mcs_decompose(before, after, time_cap)
    mapping = mcs.mapping_dict()

    sc_before = scaffold_of(before)
    sc_after = scaffold_of(after)
    if sc_before.core.canonical == sc_after.core.canonical:
        scaffold_type = "unchanged"
    elif sc_after.ring_count < sc_before.ring_count:
        scaffold_type = "ring_removal"
    elif sc_after.ring_count > sc_before.ring_count:
        scaffold_type = "ring_addition"
    elif not _scaffold_atom_set(before) <= set(mapping):
        scaffold_type = "scaffold_hop"
    else:
        scaffold_type = "scaffold_replacement"

    if scaffold_type == "scaffold_hop":
        modification_type = "scaffold_hop"
    elif mcs.removed_fragment and mcs.added_fragment:
        modification_type = "replacement"
    elif mcs.added_fragment:
        modification_type = "addition"
    elif mcs.removed_fragment:
        modification_type = "removal"
    else:
        modification_type = "replacement"

    fg_before = detect_functional_groups(before)
    fg_after = detect_functional_groups(after)
    fg_removed = FunctionalGroupSet(fg_before.tags - fg_after.tags)
    fg_added = FunctionalGroupSet(fg_after.tags - fg_before.tags)

    mapped_before = set(mapping)
    mapped_after = set(mapping.values())
    attach = False
    for idx in range(len(before.atoms)):
        if idx in mapped_before:
            continue
        for nbr, _ in before.neighbors(idx):
            if nbr in mapped_before and before.atoms[nbr].aromatic:
                attach = True
    for idx in range(len(after.atoms)):
        if idx in mapped_after:
            continue
        for nbr, _ in after.neighbors(idx):
            if nbr in mapped_after and after.atoms[nbr].aromatic:
                attach = True

    return EditCard(
        before=before.canonical,
        after=after.canonical,
        modification_type=modification_type,
        removed_fragment=mcs.removed_fragment,
        added_fragment=mcs.added_fragment,
        scaffold_before=sc_before.core.canonical,
        scaffold_after=sc_after.core.canonical,
        scaffold_type=scaffold_type,
        fg_removed=fg_removed,
        fg_added=fg_added,
        deltas=descriptors(after).delta(descriptors(before)),
        score_before=score_before,
        score_after=score_after,
        aromatic_attachment=attach,
        approximate_mcs=mcs.approximate,
    )


def harvest(
    trajectory,
    obj=None,
    delta: float = DEFAULT_HARVEST_DELTA,
    time_cap: float = DEFAULT_MCS_TIME_CAP,
) -> list[EditCard]:
    """One card per consecutive evaluated pair improving by more than delta.

    The trajectory supplies the evaluated chain: `lead`/`lead_score` plus
    steps with `action`, `score`, and `valid` fields (only valid, scored
    steps advance the chain). Duplicate (before, after) cards merge keeping
    the larger improvement.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    cards: dict[str, EditCard] = {}
    prev_smiles = trajectory.lead
    prev_score = trajectory.lead_score
    for step in trajectory.steps:
        if not step.valid or step.score is None:
            continue
        if step.score - prev_score > delta:
            card = build_edit_card(
                parse(prev_smiles), parse(step.action),
                prev_score, step.score, time_cap,
            )
            existing = cards.get(card.key)
            if existing is None or card.delta_r > existing.delta_r:
                cards[card.key] = card
        prev_smiles, prev_score = step.action, step.score
    return list(cards.values())


# ---------------------------------------------------------------------------
# Strategy sentences
# ---------------------------------------------------------------------------

_FG_PRIORITY = (
    "sulfonamide",
    "nitro",
    "carboxylic_acid",
    "ester",
    "amide",
    "sulfone",
    "nitrile",
    "methoxy",
    "aldehyde",
    "ketone",
    "thiol",
    "hydroxyl",
    "amine",
    "ether",
    "halogen",
    "aromatic_ring",
)

_FG_DISPLAY = {
    "sulfonamide": "sulfonamide",
    "nitro": "nitro (-NO2)",
    "carboxylic_acid": "carboxylic acid (-COOH)",
    "ester": "ester (-C(=O)O-)",
    "amide": "amide (-C(=O)N)",
    "sulfone": "sulfone",
    "nitrile": "nitrile (-C#N)",
    "methoxy": "methoxy (-OCH3)",
    "aldehyde": "aldehyde (-CHO)",
    "ketone": "ketone (C=O)",
    "thiol": "thiol (-SH)",
    "hydroxyl": "hydroxyl (-OH)",
    "amine": "amine (-NH2)",
    "ether": "ether (-O-)",
    "halogen": "halogen",
    "aromatic_ring": "aromatic ring",
}

_HALOGEN_NAMES = {
    "F": "fluorine (-F)",
    "Cl": "chlorine (-Cl)",
    "Br": "bromine (-Br)",
    "I": "iodine (-I)",
}

_FRAGMENT_NAMES = {
    "C": "methyl (-CH3)",
    "CC": "ethyl (-C2H5)",
    "O": "hydroxyl (-OH)",
    "N": "amino (-NH2)",
    "S": "thiol (-SH)",
    "CO": "methoxy (-OCH3)",
    "OC": "methoxy (-OCH3)",
    **_HALOGEN_NAMES,
}


def _describe(fg_set: FunctionalGroupSet, fragment: str) -> str:
    for tag in _FG_PRIORITY:
        if tag in fg_set:
            if tag == "halogen" and fragment in _HALOGEN_NAMES:
                return _HALOGEN_NAMES[fragment]
            return _FG_DISPLAY[tag]
    if fragment in _FRAGMENT_NAMES:
        return _FRAGMENT_NAMES[fragment]
    if fragment:
        return f"the fragment {fragment}"
    return "the modified group"


def summarize_template(card: EditCard, task: str) -> str:
    """Deterministic Action-What-Where-Effect sentence for one edit card."""
    removed = _describe(card.fg_removed, card.removed_fragment)
    added = _describe(card.fg_added, card.added_fragment)
    on_ring = " on the aromatic ring" if card.aromatic_attachment else ""
    from_ring = " from the aromatic ring" if card.aromatic_attachment else ""
    effect = "to improve the target score."
    if card.modification_type == "scaffold_hop":
        return f"Replace the {removed} core with {added} {effect}"
    if card.modification_type == "replacement":
        return f"Replace {removed} with {added}{on_ring} {effect}"
    if card.modification_type == "addition":
        return f"Add {added}{on_ring} {effect}"
    return f"Remove {removed}{from_ring} {effect}"


def render_summarizer_prompt(card: EditCard, task: str) -> str:
    """The external-summarizer prompt, byte-exact placeholders filled in."""
    template = (
        resources.files("leadopt.data").joinpath("summarizer_prompt.txt").read_text()
    )
    delta_r = card.delta_r
    result = f"Score {'improved' if delta_r > 0 else 'worsened'} by {abs(delta_r):.3f}"
    return template.format(
        task=task,
        before_smiles=card.before,
        after_smiles=card.after,
        score_before=card.score_before,
        score_after=card.score_after,
        score_delta=delta_r,
        modification_type=card.modification_type,
        removed_fragment=card.removed_fragment or "none",
        added_fragment=card.added_fragment or "none",
        before_scaffold=card.scaffold_before or "none",
        after_scaffold=card.scaffold_after or "none",
        scaffold_type=card.scaffold_type,
        fg_removed=", ".join(card.fg_removed) or "none",
        fg_added=", ".join(card.fg_added) or "none",
        mw_change=card.deltas.mw,
        ring_changes=card.deltas.ring_count,
        psa_change=card.deltas.psa_lite,
        hbd_change=card.deltas.hbd,
        hba_change=card.deltas.hba,
        result=result,
    )


def summarize_external(
    card: EditCard,
    task: str,
    endpoint: str,
    timeout: float = 10.0,
    transport: Optional[lineproto.LineTransport] = None,
) -> str:
    """Ask an external summarizer for the sentence; falls back to the
    template on any transport or protocol failure (a sentence is always
    returned). Multi-sentence replies are cut at the first period.
    """
    payload = json.dumps(
        {
            "task": task,
            "prompt": render_summarizer_prompt(card, task),
            "before": card.before,
            "after": card.after,
            "delta_r": card.delta_r,
        },
        sort_keys=True,
    )
    try:
        own_transport = transport is None
        if own_transport:
            transport = lineproto.open_transport(endpoint, timeout)
        try:
            reply = transport.request(f"SUMMARIZE {payload}")
        finally:
            if own_transport:
                transport.close()
        if not reply.startswith("OK "):
            raise lineproto.ProtocolError(f"malformed summarizer reply {reply!r}")
        sentence = reply[3:].strip()
        if "." in sentence:
            sentence = sentence[: sentence.index(".") + 1]
        if not sentence:
            raise lineproto.ProtocolError("empty summarizer reply")
        if not sentence.endswith("."):
            sentence += "."
        return sentence
    except (lineproto.ProtocolError, ValueError, OSError) as exc:
        log.warning("external summarizer failed (%s); using template", exc)
        return summarize_template(card, task)


# ---------------------------------------------------------------------------
# Skill cards and the bank
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SkillCard:
    """One distilled strategy: a sentence plus its supporting edit card."""

    text: str
    card: EditCard
    delta_r: float
    fp_key: Fingerprint
    fg_tags: FunctionalGroupSet
    task: str

    def __post_init__(self):
        if not self.text.strip() or not self.text.strip().endswith("."):
            raise ValueError("skill text must be one sentence ending with a period")
        if self.delta_r != self.card.score_after - self.card.score_before:
            raise ValueError("delta_r must equal the card score difference")

    @property
    def key(self) -> str:
        return self.card.key


def make_skill_card(
    card: EditCard,
    task: str,
    summarizer: str = "template",
    endpoint: Optional[str] = None,
    timeout: float = 10.0,
) -> SkillCard:
    if summarizer == "external":
        if not endpoint:
            raise ValueError("external summarizer needs an endpoint")
        text = summarize_external(card, task, endpoint, timeout)
    else:
        text = summarize_template(card, task)
    source = parse(card.before)
    return SkillCard(
        text=text,
        card=card,
        delta_r=card.delta_r,
        fp_key=morgan_fp(source),
        fg_tags=detect_functional_groups(source),
        task=task,
    )


@dataclass(frozen=True)
class EvictionReport:
    inserted: int
    merged: int
    evicted_keys: tuple[str, ...]
    retained: int


@dataclass
class _Entry:
    seq: int
    skill: SkillCard


class SkillBank:
    """Per-task skill store capped at `capacity` by improvement magnitude."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._tasks: dict[str, dict[str, _Entry]] = {}
        self._seq = 0

    def tasks(self) -> list[str]:
        return sorted(self._tasks)

    def cards(self, task: str) -> list[SkillCard]:
        return [entry.skill for entry in self._tasks.get(task, {}).values()]

    def size(self, task: str) -> int:
        return len(self._tasks.get(task, {}))

    def insert(self, skills: Sequence[SkillCard]) -> EvictionReport:
        """Dedup-merge a batch for one task, then enforce capacity.

        Duplicates (same before/after pair) keep the larger improvement;
        when over capacity the smallest-delta cards go, newer cards win
        ties. Insertion is atomic from a reader's perspective.
        """
        if not skills:
            return EvictionReport(0, 0, (), 0)
        task_names = {skill.task for skill in skills}
        if len(task_names) > 1:
            raise ValueError("one insert batch must target a single task")
        task = task_names.pop()
        store = dict(self._tasks.get(task, {}))

        inserted = 0
        merged = 0
        for skill in skills:
            existing = store.get(skill.key)
            if existing is None:
                self._seq += 1
                store[skill.key] = _Entry(self._seq, skill)
                inserted += 1
            elif skill.delta_r > existing.skill.delta_r:
                self._seq += 1
                store[skill.key] = _Entry(self._seq, skill)
                merged += 1

        evicted: tuple[str, ...] = ()
        if len(store) > self.capacity:
            ranked = sorted(
                store.items(), key=lambda kv: (-kv[1].skill.delta_r, -kv[1].seq)
            )
            keep = ranked[: self.capacity]
            evicted = tuple(sorted(key for key, _ in ranked[self.capacity:]))
            store = dict(keep)
        self._tasks[task] = store
        return EvictionReport(inserted, merged, evicted, len(store))


def retrieve_skills(
    bank: SkillBank,
    current: Molecule,
    task: str,
    k_fp: int = 3,
    k_fg: int = 3,
    gamma_fp: float = 0.4,
    gamma_fg: float = 0.5,
) -> list[SkillCard]:
    """Dual retrieval: fingerprint channel then functional-group channel.

    Each channel keeps threshold passers ranked by improvement (ties by
    channel similarity, then key); the union preserves fp-channel order
    first and drops duplicates.
    """
    for threshold in (gamma_fp, gamma_fg):
        if not (0.0 <= threshold <= 1.0):
            raise ValueError("thresholds must lie in [0, 1]")
    cards = bank.cards(task)
    if not cards:
        return []
    query_fp = morgan_fp(current, cards[0].fp_key.radius, cards[0].fp_key.width)
    query_fg = detect_functional_groups(current)

    fp_pass = []
    fg_pass = []
    for skill in cards:
        fp_sim = tanimoto(query_fp, skill.fp_key)
        if fp_sim >= gamma_fp:
            fp_pass.append((fp_sim, skill))
        fg_sim = jaccard(query_fg, skill.fg_tags)
        if fg_sim >= gamma_fg:
            fg_pass.append((fg_sim, skill))
    fp_pass.sort(key=lambda pair: (-pair[1].delta_r, -pair[0], pair[1].key))
    fg_pass.sort(key=lambda pair: (-pair[1].delta_r, -pair[0], pair[1].key))

    result: list[SkillCard] = []
    seen: set[str] = set()
    for _, skill in fp_pass[:k_fp]:
        if skill.key not in seen:
            seen.add(skill.key)
            result.append(skill)
    for _, skill in fg_pass[:k_fg]:
        if skill.key not in seen:
            seen.add(skill.key)
            result.append(skill)
    return result


def render_skill_block(skills: Sequence[SkillCard], task: str) -> str:
    """The strategy block injected into the agent's working memory."""
    if not skills:
        raise ValueError("cannot render an empty skill block")
    lines = [SKILL_HEADER_TEMPLATE.format(task=task)]
    for pos, skill in enumerate(skills, start=1):
        lines.append(f"{pos}. {skill.text}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_skills(bank: SkillBank, path: str | Path) -> Path:
    """One JSON line per card, written atomically (temp file, then rename)."""
    import io

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with io.StringIO() as fh:
        for task in bank.tasks():
            for skill in bank.cards(task):
                card = skill.card
                fh.write(
                    json.dumps(
                        {
                            "task": skill.task,
                            "text": skill.text,
                            "delta_r": skill.delta_r,
                            "before": card.before,
                            "after": card.after,
                            "modification_type": card.modification_type,
                            "removed_fragment": card.removed_fragment,
                            "added_fragment": card.added_fragment,
                            "scaffold_before": card.scaffold_before,
                            "scaffold_after": card.scaffold_after,
                            "scaffold_type": card.scaffold_type,
                            "fg_removed": sorted(card.fg_removed),
                            "fg_added": sorted(card.fg_added),
                            "deltas": vars(card.deltas),
                            "score_before": card.score_before,
                            "score_after": card.score_after,
                            "aromatic_attachment": card.aromatic_attachment,
                            "approximate_mcs": card.approximate_mcs,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        payload = fh.getvalue()
    from .exembank import _replace_file

    _replace_file(path, payload.encode("utf-8"))
    return path


def load_skills(path: str | Path, capacity: int = DEFAULT_CAPACITY) -> SkillBank:
    bank = SkillBank(capacity)
    batches: dict[str, list[SkillCard]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            payload = json.loads(line)
            card = EditCard(
                before=payload["before"],
                after=payload["after"],
                modification_type=payload["modification_type"],
                removed_fragment=payload["removed_fragment"],
                added_fragment=payload["added_fragment"],
                scaffold_before=payload["scaffold_before"],
                scaffold_after=payload["scaffold_after"],
                scaffold_type=payload["scaffold_type"],
                fg_removed=FunctionalGroupSet(frozenset(payload["fg_removed"])),
                fg_added=FunctionalGroupSet(frozenset(payload["fg_added"])),
                deltas=DescriptorDelta(**payload["deltas"]),
                score_before=payload["score_before"],
                score_after=payload["score_after"],
                aromatic_attachment=payload.get("aromatic_attachment", False),
                approximate_mcs=payload.get("approximate_mcs", False),
            )
            source = parse(card.before)
            skill = SkillCard(
                text=payload["text"],
                card=card,
                delta_r=card.delta_r,
                fp_key=morgan_fp(source),
                fg_tags=detect_functional_groups(source),
                task=payload["task"],
            )
            batches.setdefault(skill.task, []).append(skill)
    for task in sorted(batches):
        bank.insert(batches[task])
    return bank
