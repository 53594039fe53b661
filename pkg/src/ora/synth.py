"""Synthetic marked point processes with known per-code laws.

Each patient carries a static binary latent state ``z``.  Code ``m`` fires
as a homogeneous Poisson stream with rate ``base_rate[m] * exp(rate_weights[m] @ z)``
and numeric codes draw values from ``Normal(value_mean[m] + value_weights[m] @ z, value_sd[m])``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .discretize import BinGrid
from .events import Event, PatientRecord

MAX_EXPECTED_EVENTS = 10_000


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    n_patients: int
    n_numeric: int
    n_nonnumeric: int
    latent_dim: int
    base_rate: np.ndarray  # (K,) events per day
    rate_weights: np.ndarray  # (K, H)
    value_mean: np.ndarray  # (K,) ignored for non-numeric codes
    value_weights: np.ndarray  # (K, H)
    value_sd: np.ndarray  # (K,)
    window: tuple[float, float] = (30.0, 30.0)  # uniform observation length, days
    latent_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        K, H = self.n_codes, self.latent_dim
        for name, shape in (("base_rate", (K,)), ("rate_weights", (K, H)), ("value_mean", (K,)),
                            ("value_weights", (K, H)), ("value_sd", (K,))):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)
        if (self.base_rate <= 0).any():
            raise ConfigError("rates must be positive")
        if (self.value_sd <= 0).any():
            raise ConfigError("value sds must be positive")
        lo, hi = self.window
        if not 0 < lo <= hi:
            raise ConfigError("window lengths must be positive")

    @property
    def n_codes(self) -> int:
        return self.n_numeric + self.n_nonnumeric

    @property
    def code_names(self) -> list[str]:
        return ([f"LAB{m:02d}" for m in range(self.n_numeric)]
                + [f"DX{m:02d}" for m in range(self.n_nonnumeric)])

    def is_numeric(self, code: int) -> bool:
        return code < self.n_numeric

    def rates(self, z: np.ndarray) -> np.ndarray:
        """(..., K) rates for latent states of shape (..., H)."""
        return self.base_rate * np.exp(np.asarray(z, dtype=np.float64) @ self.rate_weights.T)

    def value_means(self, z: np.ndarray) -> np.ndarray:
        return self.value_mean + np.asarray(z, dtype=np.float64) @ self.value_weights.T

    @classmethod
    def random(cls, seed: int, n_patients: int = 1000, n_numeric: int = 3, n_nonnumeric: int = 3,
               latent_dim: int = 2) -> "GeneratorConfig":
        rng = np.random.default_rng(seed)
        K = n_numeric + n_nonnumeric
        return cls(
            n_patients=n_patients, n_numeric=n_numeric, n_nonnumeric=n_nonnumeric, latent_dim=latent_dim,
            base_rate=rng.uniform(0.05, 0.5, K),
            rate_weights=rng.normal(0.0, 0.7, (K, latent_dim)),
            value_mean=rng.normal(0.0, 2.0, K),
            value_weights=rng.normal(0.0, 1.0, (K, latent_dim)),
            value_sd=rng.uniform(0.5, 1.5, K),
            window=(20.0, 60.0), seed=seed)


@dataclass
class GroundTruth:
    patient_ids: list[str]
    z: np.ndarray  # (n, H) int
    window: np.ndarray  # (n,)
    rates: np.ndarray  # (n, K)
    value_means: np.ndarray  # (n, K)
    value_sd: np.ndarray  # (K,)
    code_names: list[str]
    numeric: list[bool] = field(default_factory=list)

    def dumps_latent(self) -> str:
        return "".join(f"{pid}\t{''.join(str(int(b)) for b in zz)}\t{w!r}\n"
                       for pid, zz, w in zip(self.patient_ids, self.z, self.window.tolist()))

    def dumps_parameters(self) -> str:
        """Per-patient, per-code rate and value mean."""
        lines = ["patient_id\tcode\trate\tvalue_mean\tvalue_sd\n"]
        for i, pid in enumerate(self.patient_ids):
            for m, name in enumerate(self.code_names):
                mu = repr(float(self.value_means[i, m])) if self.numeric[m] else "-"
                sd = repr(float(self.value_sd[m])) if self.numeric[m] else "-"
                lines.append(f"{pid}\t{name}\t{float(self.rates[i, m])!r}\t{mu}\t{sd}\n")
        return "".join(lines)


def poisson_streams(rate: np.ndarray, window: np.ndarray, rng: np.random.Generator
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Homogeneous Poisson events on [0, window_i] for each unit i.

    Returns (owner, time) arrays sorted by owner, times unsorted within owner.
    """
    counts = rng.poisson(rate * window)
    owner = np.repeat(np.arange(rate.size), counts)
    times = rng.random(owner.size) * window[owner]
    return owner, times


def _code_rng(seed: int, code: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1, code]))


def generate_cohort(config: GeneratorConfig) -> tuple[list[PatientRecord], GroundTruth]:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    n, K = config.n_patients, config.n_codes
    z = (rng.random((n, config.latent_dim)) < config.latent_prob).astype(np.int64)
    lo, hi = config.window
    window = lo + (hi - lo) * rng.random(n)
    rates = config.rates(z)
    means = config.value_means(z)
    expected = (rates * window[:, None]).sum(axis=1)
    if expected.max() > MAX_EXPECTED_EVENTS:
        raise ConfigError(f"expected {expected.max():.0f} events for one patient; rates are runaway")

    owners, times, codes, values = [], [], [], []
    for m in range(K):
        crng = _code_rng(config.seed, m)
        own, t = poisson_streams(rates[:, m], window, crng)
        if config.is_numeric(m):
            v = means[own, m] + config.value_sd[m] * crng.standard_normal(own.size)
        else:
            v = np.full(own.size, np.nan)
        owners.append(own)
        times.append(t)
        codes.append(np.full(own.size, m))
        values.append(v)
    owner = np.concatenate(owners)
    time = np.concatenate(times)
    code = np.concatenate(codes)
    value = np.concatenate(values)
    names = config.code_names
    name_rank = np.argsort(np.argsort(names))
    order = np.lexsort((name_rank[code], time, owner))
    owner, time, code, value = owner[order], time[order], code[order], value[order]
    bounds = np.searchsorted(owner, np.arange(n + 1))
    pids = [f"p{i:06d}" for i in range(n)]
    records = []
    for i in range(n):
        sl = slice(bounds[i], bounds[i + 1])
        evs = tuple(Event(float(t), names[c], None if np.isnan(v) else float(v))
                    for t, c, v in zip(time[sl], code[sl], value[sl]))
        records.append(PatientRecord(pids[i], evs))
    truth = GroundTruth(pids, z, window, rates, means, config.value_sd.copy(), names,
                        [config.is_numeric(m) for m in range(K)])
    return records, truth


def first_arrivals(rate: float, value_mean: float, value_sd: float, n: int, horizon: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """First event time and its value for ``n`` independent streams.

    Streams are simulated window by window with :func:`poisson_streams`, so
    every sample ends with an arrival.
    """
    first = np.full(n, np.inf)
    offset = np.zeros(n)
    pending = np.arange(n)
    while pending.size:
        own, t = poisson_streams(np.full(pending.size, rate), np.full(pending.size, horizon), rng)
        hit = np.full(pending.size, np.inf)
        np.minimum.at(hit, own, t)
        got = np.isfinite(hit)
        first[pending[got]] = offset[pending[got]] + hit[got]
        offset[pending[~got]] += horizon
        pending = pending[~got]
    values = value_mean + value_sd * rng.standard_normal(n)
    return first, values


def oracle_cell_distribution(config: GeneratorConfig, z: Sequence[int], code: int, grid: BinGrid) -> np.ndarray:
    """Exact cell masses of the first arrival after any time point.

    Returns (T_eff, V_eff) for numeric codes and (T_eff, 1) otherwise, where
    the effective counts come from the grid's edges.
    """
    rate = float(config.rates(np.asarray(z))[code])
    edges = np.asarray(grid.time_edges, dtype=np.float64)
    surv = np.concatenate([[1.0], np.exp(-rate * edges), [0.0]])
    time_mass = surv[:-1] - surv[1:]
    if grid.numeric and config.is_numeric(code):
        mu = float(config.value_means(np.asarray(z))[code])
        sd = float(config.value_sd[code])
        cdf = np.concatenate([[0.0], ndtr((np.asarray(grid.value_edges) - mu) / sd), [1.0]])
        value_mass = np.diff(cdf)
    else:
        value_mass = np.ones(1)
    return np.outer(time_mass, value_mass)


def directional_config(seed: int = 0, n_patients: int = 5000) -> GeneratorConfig:
    """16 codes whose latent bits act through timing and values only.

    Bit 0 scales every rate by the same factor, so it leaves the relative
    code frequencies (all that next-code prediction sees) unchanged.  Bits 1
    and 2 shift lab values and do not touch rates at all.
    """
    n_num, n_non, H = 8, 8, 3
    K = n_num + n_non
    rng = np.random.default_rng(12345)  # code parameters are fixed; seed drives patients
    base = rng.uniform(0.02, 0.06, K)
    rate_w = np.zeros((K, H))
    rate_w[:, 0] = 1.0
    value_w = np.zeros((K, H))
    value_w[:n_num, 1] = rng.choice([-1.0, 1.0], n_num) * 1.5
    value_w[:n_num, 2] = rng.choice([-1.0, 1.0], n_num) * 1.5
    return GeneratorConfig(
        n_patients=n_patients, n_numeric=n_num, n_nonnumeric=n_non, latent_dim=H,
        base_rate=base, rate_weights=rate_w,
        value_mean=rng.normal(0.0, 1.0, K), value_weights=value_w,
        value_sd=np.full(K, 1.0), window=(40.0, 80.0), seed=seed)


# ---------------------------------------------------------------------------
# downstream task labels


@dataclass
class TaskExample:
    patient_id: str
    prediction_time: float
    label: tuple[float, ...]


TASK_KINDS = ("classification", "time_to_event", "regression")


def task_labels(records: Sequence[PatientRecord], truth: GroundTruth, kind: str, target_code: str,
                horizon: float = 7.0, prediction_fraction: float = 0.5) -> list[TaskExample]:
    """Labels at a prediction time placed at a fixed fraction of each window.

    Anchors need at least one event at or before the prediction time;
    regression anchors also need a strictly later target event.
    """
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}")
    window = dict(zip(truth.patient_ids, truth.window.tolist()))
    out = []
    for rec in records:
        w = window[rec.patient_id]
        t0 = prediction_fraction * w
        if not rec.events or rec.events[0].time > t0:
            continue
        future = [e for e in rec.events if e.code == target_code and e.time > t0]
        first = future[0] if future else None
        if kind == "classification":
            label = (1.0 if first is not None and first.time <= t0 + horizon else 0.0,)
        elif kind == "time_to_event":
            label = (first.time - t0, 1.0) if first is not None else (w - t0, 0.0)
        else:
            if first is None or first.value is None:
                continue
            label = (first.value,)
        out.append(TaskExample(rec.patient_id, t0, label))
    if not out:
        raise ValueError("no eligible prediction anchors")
    return out


def dumps_task(kind: str, examples: Sequence[TaskExample]) -> str:
    lines = [f"#task={kind}\n"]
    for ex in examples:
        fields_ = "\t".join(repr(float(x)) for x in ex.label)
        lines.append(f"{ex.patient_id}\t{ex.prediction_time!r}\t{fields_}\n")
    return "".join(lines)


def loads_task(text: str) -> tuple[str, list[TaskExample]]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#task="):
        raise ValueError("task file lacks the '#task=' header")
    kind = lines[0][len("#task="):]
    out = []
    for line in lines[1:]:
        if line:
            pid, t, *rest = line.split("\t")
            out.append(TaskExample(pid, float(t), tuple(float(x) for x in rest)))
    return kind, out
