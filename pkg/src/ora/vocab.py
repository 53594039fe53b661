"""Entropy-ranked code vocabulary."""
from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .events import PatientRecord

NUMERIC_THRESHOLD = 0.5


class EntropyDomainError(ValueError):
    pass


@dataclass(frozen=True)
class CodeStats:
    code: str
    patient_frequency: float
    is_numeric: bool
    joint_with_parent: tuple[float, float] | None = None
    parent: str | None = None


@dataclass(frozen=True)
class VocabEntry:
    code: str
    index: int
    is_numeric: bool
    score: float


class Vocabulary:
    def __init__(self, entries: Sequence[VocabEntry]):
        self.entries = tuple(entries)
        self.index = {e.code: e.index for e in self.entries}
        if sorted(self.index.values()) != list(range(len(self.entries))):
            raise ValueError("vocabulary indices must be dense 0..K-1 and codes unique")

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, code: str) -> bool:
        return code in self.index

    @property
    def codes(self) -> list[str]:
        return [e.code for e in self.entries]

    @property
    def numeric_mask(self) -> list[bool]:
        return [e.is_numeric for e in self.entries]

    @property
    def numeric_indices(self) -> list[int]:
        return [e.index for e in self.entries if e.is_numeric]

    @property
    def nonnumeric_indices(self) -> list[int]:
        return [e.index for e in self.entries if not e.is_numeric]

    def dumps(self) -> str:
        return "".join(
            f"{e.index}\t{e.code}\t{int(e.is_numeric)}\t{e.score!r}\n" for e in self.entries)

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        entries = []
        for line in text.splitlines():
            if not line:
                continue
            idx, code, num, score = line.split("\t")
            entries.append(VocabEntry(code, int(idx), num == "1", float(score)))
        return cls(entries)

    @classmethod
    def from_codes(cls, codes: Sequence[str], numeric: Sequence[bool] | None = None) -> "Vocabulary":
        numeric = numeric if numeric is not None else [False] * len(codes)
        return cls([VocabEntry(c, i, bool(n), 0.0) for i, (c, n) in enumerate(zip(codes, numeric))])


def entropy(p: float) -> float:
    """-p ln p with 0 ln 0 = 0."""
    if not 0.0 <= p <= 1.0:
        raise EntropyDomainError(f"probability {p!r} outside [0, 1]")
    return 0.0 if p == 0.0 else 0.0 - p * math.log(p)


def conditional_entropy(p_joint_present: float, p_joint_absent: float) -> float:
    """Entropy of a code split by whether its parent also appears."""
    if p_joint_present < 0 or p_joint_absent < 0:
        raise EntropyDomainError("joint probabilities must be non-negative")
    p = p_joint_present + p_joint_absent
    if p > 1.0 + 1e-12:
        raise EntropyDomainError(f"joint probabilities sum to {p!r} > 1")
    out = 0.0
    for q in (p_joint_absent, p_joint_present):
        if q > 0.0:
            out -= q * math.log(q / p)
    return out


def read_ontology(text: str) -> list[tuple[str, str]]:
    """Parent edges as ``child<TAB>parent`` lines."""
    edges = []
    for line in text.splitlines():
        if line and not line.startswith("#"):
            child, parent = line.split("\t")[:2]
            edges.append((child, parent))
    return edges


def compute_code_stats(
    records: Sequence[PatientRecord],
    ontology: Iterable[tuple[str, str]] | None = None,
    numeric_threshold: float = NUMERIC_THRESHOLD,
) -> dict[str, CodeStats]:
    if not records:
        raise ValueError("cannot compute code statistics on an empty corpus")
    parent_of: dict[str, str] = {}
    for child, parent in ontology or ():
        parent_of.setdefault(child, parent)  # first listed parent wins

    present = Counter()
    n_events = Counter()
    n_valued = Counter()
    with_parent = Counter()
    for rec in records:
        codes = set()
        for e in rec.events:
            codes.add(e.code)
            n_events[e.code] += 1
            if e.value is not None:
                n_valued[e.code] += 1
        present.update(codes)
        for c in codes:
            par = parent_of.get(c)
            if par is not None and par in codes:
                with_parent[c] += 1

    n = len(records)
    stats = {}
    for code in sorted(present):
        joint = None
        par = parent_of.get(code)
        if par is not None:
            both = with_parent[code]
            joint = (both / n, (present[code] - both) / n)
        stats[code] = CodeStats(
            code=code,
            patient_frequency=present[code] / n,
            is_numeric=n_valued[code] / n_events[code] > numeric_threshold,
            joint_with_parent=joint,
            parent=par,
        )
    return stats


def code_score(stat: CodeStats, use_ontology: bool) -> float:
    if use_ontology and stat.joint_with_parent is not None:
        return conditional_entropy(*stat.joint_with_parent)
    return entropy(stat.patient_frequency)


def build_vocabulary(stats: Mapping[str, CodeStats], k: int, use_ontology: bool = False) -> Vocabulary:
    """Keep the ``k`` highest-entropy codes; ties go to the smaller code string."""
    if k < 1:
        raise ValueError("vocabulary size must be >= 1")
    scored = sorted(((-code_score(s, use_ontology), s.code, s) for s in stats.values()),
                    key=lambda t: (t[0], t[1]))
    if len(scored) < k:
        warnings.warn(f"only {len(scored)} distinct codes available, fewer than k={k}")
    entries = [VocabEntry(s.code, i, s.is_numeric, -neg) for i, (neg, _, s) in enumerate(scored[:k])]
    return Vocabulary(entries)
