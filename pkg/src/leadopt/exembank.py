"""Static exemplar memory: property-annotated molecule bank with two-stage
retrieval (broad fingerprint recall, then lead-constrained objective ranking).

The bank is immutable after build/load; queries are read-only.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .chemfeat import (
    DEFAULT_RADIUS,
    DEFAULT_WIDTH,
    Fingerprint,
    morgan_fp,
    tanimoto,
)
from .molgraph import Molecule, SmilesError, parse
from .oracles import Objective, Oracle

__all__ = [
    "ExemplarRecord",
    "ExemplarBank",
    "EmptyBankError",
    "build_bank",
    "candidate_recall",
    "retrieve_exemplars",
    "render_exemplar_block",
    "save_bank",
    "load_bank",
    "format_score",
]

log = logging.getLogger(__name__)

EXEMPLAR_HEADER = "=== SIMILAR HIGH-SCORING MOLECULES FOR REFERENCE ==="
EXEMPLAR_FOOTER = "Learn from structural patterns, but do not copy directly."

_FP_MAGIC = b"LOFP"
_FP_VERSION = 1


class EmptyBankError(RuntimeError):
    """Retrieval was attempted on a bank with no records."""


def format_score(value: float) -> str:
    """Three decimals, round half up: 0.8915 renders as '0.892'."""
    return str(Decimal(str(value)).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ExemplarRecord:
    canonical: str
    fp: Fingerprint
    props: dict[str, float]


class ExemplarBank:
    """Deduplicated exemplar records plus a popcount-aware scan index."""

    def __init__(
        self,
        records: Sequence[ExemplarRecord],
        width: int = DEFAULT_WIDTH,
        radius: int = DEFAULT_RADIUS,
    ):
        seen: set[str] = set()
        unique: list[ExemplarRecord] = []
        for record in records:
            if record.fp.width != width or record.fp.radius != radius:
                raise ValueError("record fingerprint does not match bank parameters")
            if record.canonical in seen:
                continue
            seen.add(record.canonical)
            unique.append(record)
        self.records: tuple[ExemplarRecord, ...] = tuple(unique)
        self.width = width
        self.radius = radius
        self._words: Optional[np.ndarray] = None
        self._pops: Optional[np.ndarray] = None
        self._inverted: Optional[dict[int, np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.records)

    def _matrix(self) -> tuple[np.ndarray, np.ndarray]:
        if self._words is None:
            if self.records:
                self._words = np.vstack([r.fp.to_words() for r in self.records])
            else:
                self._words = np.zeros((0, self.width // 64), dtype=np.uint64)
            self._pops = np.array([r.fp.popcount for r in self.records], dtype=np.int64)
        assert self._pops is not None
        return self._words, self._pops

    def _inverted_index(self) -> dict[int, np.ndarray]:
        if self._inverted is None:
            postings: dict[int, list[int]] = {}
            for idx, record in enumerate(self.records):
                for bit in record.fp.on_bits():
                    postings.setdefault(bit, []).append(idx)
            self._inverted = {
                bit: np.array(ids, dtype=np.int64) for bit, ids in postings.items()
            }
        return self._inverted

    def similarities(self, query: Fingerprint) -> np.ndarray:
        """Exact Tanimoto of the query against every record."""
        if query.width != self.width or query.radius != self.radius:
            raise ValueError("query fingerprint does not match bank parameters")
        words, pops = self._matrix()
        if len(self.records) == 0:
            return np.zeros(0)
        q = query.to_words()
        inter = np.bitwise_count(words & q).sum(axis=1).astype(np.int64)
        union = pops + query.popcount - inter
        sims = np.ones(len(self.records), dtype=np.float64)
        nonzero = union > 0
        sims[nonzero] = inter[nonzero] / union[nonzero]
        return sims


def build_bank(
    source: str | Path | Iterable[str],
    oracles: Sequence[Oracle] = (),
    width: int = DEFAULT_WIDTH,
    radius: int = DEFAULT_RADIUS,
) -> ExemplarBank:
    """Ingest a corpus into a deduplicated, fingerprinted bank.

    Rows are either TSV (`smiles<TAB>prop=value;prop=value`) or JSON objects
    (`{"smiles": ..., "props": {...}}`); bad rows are skipped with a log
    line. Missing properties are filled offline with the given oracles —
    bank construction never touches an optimization budget.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    else:
        lines = list(source)

    records: list[ExemplarRecord] = []
    seen: set[str] = set()
    skipped = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            smiles, props = _parse_row(line)
            molecule = parse(smiles)
        except (SmilesError, ValueError, KeyError) as exc:
            skipped += 1
            log.warning("skipping corpus row %d: %s", lineno, exc)
            continue
        if molecule.canonical in seen:
            continue
        seen.add(molecule.canonical)
        for oracle in oracles:
            if oracle.name not in props:
                props[oracle.name] = oracle(molecule)
        records.append(
            ExemplarRecord(
                molecule.canonical, morgan_fp(molecule, radius, width), props
            )
        )
    if skipped:
        log.warning("bank build skipped %d bad rows", skipped)
    return ExemplarBank(records, width=width, radius=radius)


def _parse_row(line: str) -> tuple[str, dict[str, float]]:
    if line.startswith("{"):
        obj = json.loads(line)
        return obj["smiles"], {k: float(v) for k, v in (obj.get("props") or {}).items()}
    parts = line.split("\t")
    smiles = parts[0]
    props: dict[str, float] = {}
    if len(parts) > 1 and parts[1]:
        for item in parts[1].split(";"):
            if not item:
                continue
            key, value = item.split("=")
            props[key] = float(value)
    return smiles, props


def candidate_recall(
    bank: ExemplarBank,
    query: Molecule,
    pool_size: int,
    mode: str = "exact",
) -> list[ExemplarRecord]:
    """Top `pool_size` records by Tanimoto to the query molecule.

    Exact mode scans the whole bank and returns the true top set; the
    approximate mode ranks only records sharing at least one on-bit with
    the query. Ties break by canonical-string order.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    if len(bank) == 0:
        raise EmptyBankError("exemplar bank is empty")
    query_fp = morgan_fp(query, bank.radius, bank.width)

    if mode == "approx":
        inverted = bank._inverted_index()
        hit_lists = [inverted[b] for b in query_fp.on_bits() if b in inverted]
        if not hit_lists:
            return []
        candidate_ids = np.unique(np.concatenate(hit_lists))
        scored = [
            (tanimoto(query_fp, bank.records[i].fp), bank.records[i])
            for i in candidate_ids
        ]
        scored.sort(key=lambda pair: (-pair[0], pair[1].canonical))
        return [record for _, record in scored[:pool_size]]
    if mode != "exact":
        raise ValueError(f"unknown recall mode {mode!r}")

    sims = bank.similarities(query_fp)
    k = min(pool_size, len(bank))
    boundary = np.partition(sims, len(sims) - k)[len(sims) - k]
    candidate_ids = np.flatnonzero(sims >= boundary)
    ranked = sorted(
        candidate_ids, key=lambda i: (-sims[i], bank.records[i].canonical)
    )
    return [bank.records[i] for i in ranked[:pool_size]]


def retrieve_exemplars(
    bank: ExemplarBank,
    current: Molecule,
    lead: Molecule,
    obj: Objective,
    k: int = 3,
    gamma_ex: Optional[float] = None,
    pool_size: int = 200,
    mode: str = "exact",
) -> list[ExemplarRecord]:
    """Two-stage retrieval: broad recall around the current molecule, then
    lead-similarity filtering and objective-score ranking.

    Ranking ties break by higher lead similarity, then canonical order.
    Records missing a term property are dropped with a log line.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    threshold = obj.gamma if gamma_ex is None else gamma_ex
    if not (0.0 <= threshold <= 1.0):
        raise ValueError("gamma_ex must lie in [0, 1]")
    pool = candidate_recall(bank, current, pool_size, mode=mode)
    lead_fp = morgan_fp(lead, bank.radius, bank.width)

    scored: list[tuple[float, float, ExemplarRecord]] = []
    for record in pool:
        lead_sim = tanimoto(record.fp, lead_fp)
        if lead_sim < threshold:
            continue
        try:
            score = obj.aggregate(record.props)
        except KeyError:
            log.warning(
                "exemplar %s lacks a property for objective %s; dropped",
                record.canonical,
                obj.name,
            )
            continue
        scored.append((score, lead_sim, record))
    scored.sort(key=lambda item: (-item[0], -item[1], item[2].canonical))
    return [record for _, _, record in scored[:k]]


def render_exemplar_block(
    exemplars: Sequence[ExemplarRecord], obj: Objective, lead: Molecule
) -> str:
    """The reference block injected into the agent's working memory."""
    if not exemplars:
        raise ValueError("cannot render an empty exemplar block")
    lead_fp = morgan_fp(lead, exemplars[0].fp.radius, exemplars[0].fp.width)
    lines = [
        EXEMPLAR_HEADER,
        f"Here are {len(exemplars)} similar molecules with high target scores"
        " (higher is better):",
        "",
    ]
    for pos, record in enumerate(exemplars, start=1):
        score = obj.aggregate(record.props)
        sim = tanimoto(record.fp, lead_fp)
        lines.append(f"{pos}. SMILES: {record.canonical}")
        lines.append(f"   target score: {format_score(score)}")
        lines.append(f"   Similarity to original lead: {format_score(sim)}")
        lines.append("")
    lines.append(EXEMPLAR_FOOTER)
    return "\n".join(lines) + "\n"


def save_bank(bank: ExemplarBank, base: str | Path) -> tuple[Path, Path]:
    """Write `<base>.bank.jsonl` plus the `<base>.fp.bin` sidecar.

    Both files land atomically (temp file, then rename).
    """
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    jsonl_path = base.with_name(base.name + ".bank.jsonl")
    fp_path = base.with_name(base.name + ".fp.bin")

    lines = [
        json.dumps({"smiles": r.canonical, "props": r.props}, sort_keys=True)
        for r in bank.records
    ]
    _replace_file(jsonl_path, ("\n".join(lines) + "\n" if lines else "").encode())

    blob = [
        struct.pack(
            "<4sHIHQ", _FP_MAGIC, _FP_VERSION, bank.width, bank.radius, len(bank)
        )
    ]
    for record in bank.records:
        blob.append(record.fp.bits.to_bytes(bank.width // 8, "little"))
    _replace_file(fp_path, b"".join(blob))
    return jsonl_path, fp_path


def _replace_file(path: Path, payload: bytes) -> None:
    import os
    import tempfile

    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_bank(base: str | Path) -> ExemplarBank:
    base = Path(base)
    jsonl_path = base.with_name(base.name + ".bank.jsonl")
    fp_path = base.with_name(base.name + ".fp.bin")

    with open(fp_path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sHIHQ"))
        magic, version, width, radius, count = struct.unpack("<4sHIHQ", header)
        if magic != _FP_MAGIC:
            raise ValueError(f"{fp_path} is not a fingerprint sidecar")
        if version != _FP_VERSION:
            raise ValueError(f"unsupported sidecar version {version}")
        blob = fh.read(count * (width // 8))

    records: list[ExemplarRecord] = []
    block = width // 8
    with open(jsonl_path, "r", encoding="utf-8") as fh:
        for idx, line in enumerate(fh):
            if idx >= count:
                raise ValueError("more records than fingerprints in sidecar")
            payload = json.loads(line)
            bits = int.from_bytes(blob[idx * block : (idx + 1) * block], "little")
            records.append(
                ExemplarRecord(
                    payload["smiles"],
                    Fingerprint(bits, width, radius),
                    {k: float(v) for k, v in payload["props"].items()},
                )
            )
    if len(records) != count:
        raise ValueError("fingerprint sidecar count does not match records")
    return ExemplarBank(records, width=width, radius=radius)
