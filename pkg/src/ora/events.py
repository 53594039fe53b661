"""Irregular marked event streams and first-occurrence targets.

An event file holds one JSON object per line::

    {"patient_id":"p1","events":[[0.0,"A",null],[2.5,"LAB",1.3]]}

Times are fractional days since the patient origin.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, NamedTuple

import numpy as np


class EventParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class EventValidationError(EventParseError):
    pass


class Event(NamedTuple):
    time: float
    code: str
    value: float | None = None


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    events: tuple[Event, ...]

    def __len__(self) -> int:
        return len(self.events)

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.events], dtype=np.float64)

    def history(self, until: float) -> "PatientRecord":
        """Events with time <= ``until`` (ties included)."""
        n = int(np.searchsorted(self.times, until, side="right"))
        return PatientRecord(self.patient_id, self.events[:n])


@dataclass
class ParseStats:
    records: int = 0
    events: int = 0
    reordered: int = 0


def _sort_key(e: Event):
    return (e.time, e.code)


def make_record(patient_id: str, events: Iterable[Event]) -> PatientRecord:
    """Build a record in canonical order: time, then code."""
    return PatientRecord(patient_id, tuple(sorted(events, key=_sort_key)))


def _parse_line(line: str, lineno: int) -> tuple[str, list[Event]]:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as err:
        raise EventParseError(lineno, f"invalid JSON ({err.msg})") from None
    if not isinstance(obj, dict) or "patient_id" not in obj or "events" not in obj:
        raise EventParseError(lineno, "expected an object with 'patient_id' and 'events'")
    pid = obj["patient_id"]
    raw = obj["events"]
    if not isinstance(pid, str) or not isinstance(raw, list):
        raise EventParseError(lineno, "'patient_id' must be a string and 'events' a list")
    events = []
    for k, item in enumerate(raw):
        if not (isinstance(item, list) and len(item) == 3):
            raise EventParseError(lineno, f"event {k} is not a [time, code, value] triple")
        t, code, v = item
        if isinstance(t, bool) or not isinstance(t, (int, float)):
            raise EventParseError(lineno, f"event {k}: time is not a number")
        if not isinstance(code, str):
            raise EventParseError(lineno, f"event {k}: code is not a string")
        if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise EventParseError(lineno, f"event {k}: value is not a number or null")
        t = float(t)
        if not math.isfinite(t) or t < 0:
            raise EventValidationError(lineno, f"event {k}: time {t!r} must be finite and >= 0")
        if v is not None:
            v = float(v)
            if not math.isfinite(v):
                raise EventValidationError(lineno, f"event {k}: value {v!r} is not finite")
        events.append(Event(t, code, v))
    return pid, events


def parse_event_stream(source: bytes | str | IO) -> tuple[list[PatientRecord], ParseStats]:
    """Parse an event file; unsorted records are sorted and counted, not rejected."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if isinstance(source, str):
        source = io.StringIO(source)
    stats = ParseStats()
    records = []
    for lineno, line in enumerate(source, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        line = line.rstrip("\n")
        if not line.strip():
            continue
        pid, events = _parse_line(line, lineno)
        rec = make_record(pid, events)
        if list(rec.events) != events:
            stats.reordered += 1
        stats.records += 1
        stats.events += len(events)
        records.append(rec)
    return records, stats


def read_events(path) -> list[PatientRecord]:
    with open(path, encoding="utf-8") as fh:
        records, _ = parse_event_stream(fh)
    return records


def format_record(record: PatientRecord) -> str:
    events = [[float(e.time), e.code, None if e.value is None else float(e.value)]
              for e in record.events]
    return json.dumps({"patient_id": record.patient_id, "events": events},
                      separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def write_event_stream(records: Iterable[PatientRecord], fh: IO[str]) -> None:
    """Canonical writer: one compact JSON object per line."""
    for rec in records:
        fh.write(format_record(rec))
        fh.write("\n")


def dumps_event_stream(records: Iterable[PatientRecord]) -> str:
    buf = io.StringIO()
    write_event_stream(records, buf)
    return buf.getvalue()


def validate_record(record: PatientRecord) -> list[str]:
    """List of violations; empty when the record is clean."""
    problems = []
    if not record.events:
        return ["empty"]
    prev = None
    for k, e in enumerate(record.events):
        if not math.isfinite(e.time):
            problems.append(f"event {k}: non-finite time")
        elif e.time < 0:
            problems.append(f"event {k}: negative time")
        if e.value is not None and not math.isfinite(e.value):
            problems.append(f"event {k}: non-finite value")
        if prev is not None and math.isfinite(e.time) and _sort_key(e) < _sort_key(prev):
            problems.append(f"event {k}: unsorted")
        prev = e
    return problems


# ---------------------------------------------------------------------------
# first-occurrence targets


@dataclass(frozen=True)
class FirstOccurrenceTarget:
    code: int
    delta_t: float
    value: float | None
    observed: bool


@dataclass(frozen=True)
class TargetSet:
    """Targets for one anchor; censored codes share ``censor_duration``."""

    anchor_position: int
    n_codes: int
    censor_duration: float
    observed: dict[int, FirstOccurrenceTarget] = field(default_factory=dict)

    def __getitem__(self, code: int) -> FirstOccurrenceTarget:
        if not 0 <= code < self.n_codes:
            raise IndexError(f"code index {code} outside vocabulary of size {self.n_codes}")
        hit = self.observed.get(code)
        if hit is not None:
            return hit
        return FirstOccurrenceTarget(code, self.censor_duration, None, False)

    def __iter__(self):
        return (self[m] for m in range(self.n_codes))

    def __len__(self) -> int:
        return self.n_codes


@dataclass(frozen=True)
class RecordTargets:
    """Dense targets for every anchor of a record, shape (N, K).

    ``delta_t`` holds the censor duration where ``observed`` is false and
    ``value`` is NaN wherever no value applies.
    """

    delta_t: np.ndarray
    observed: np.ndarray
    value: np.ndarray
    censor: np.ndarray

    def target_set(self, j: int) -> TargetSet:
        obs = {}
        for m in np.flatnonzero(self.observed[j]):
            v = self.value[j, m]
            obs[int(m)] = FirstOccurrenceTarget(
                int(m), float(self.delta_t[j, m]), None if np.isnan(v) else float(v), True)
        return TargetSet(j, self.delta_t.shape[1], float(self.censor[j]), obs)


def code_indices(record: PatientRecord, index_of: dict[str, int]) -> np.ndarray:
    """Vocabulary index per event, -1 for out-of-vocabulary codes."""
    return np.array([index_of.get(e.code, -1) for e in record.events], dtype=np.int64)


def extract_all_targets(record: PatientRecord, vocab) -> RecordTargets:
    """First strictly-future occurrence of every code, for every anchor.

    A backward scan builds ``nearest[i, m]``, the first index >= i holding
    code m; anchor j then reads the row of the first event strictly later
    than t_j, so simultaneous events never count as each other's targets.
    """
    index_of = vocab.index if hasattr(vocab, "index") else vocab
    n = len(record.events)
    k = len(index_of)
    if n == 0:
        raise ValueError("record has no events")
    times = record.times
    codes = code_indices(record, index_of)
    vals = np.array([np.nan if e.value is None else e.value for e in record.events])

    nearest = np.full((n + 1, k), n, dtype=np.intp)
    known = codes >= 0
    nearest[np.flatnonzero(known), codes[known]] = np.flatnonzero(known)
    nearest = np.minimum.accumulate(nearest[::-1], axis=0)[::-1]

    later = np.searchsorted(times, times, side="right")
    nxt = nearest[later]  # (n, k); n marks "no future occurrence"
    observed = nxt < n
    censor = times[-1] - times
    t_ext = np.append(times, np.nan)
    v_ext = np.append(vals, np.nan)
    delta = np.where(observed, t_ext[nxt] - times[:, None], censor[:, None])
    value = np.where(observed, v_ext[nxt], np.nan)
    return RecordTargets(delta, observed, value, censor)


def extract_targets(record: PatientRecord, vocab, position: int) -> TargetSet:
    """Targets for a single 0-based anchor ``position``."""
    if not 0 <= position < len(record.events):
        raise IndexError(f"position {position} out of range for record of length {len(record.events)}")
    return extract_all_targets(record, vocab).target_set(position)
