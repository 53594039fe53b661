"""Discrimination and regression metrics with bootstrap standard errors."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

DEFAULT_BOOTSTRAP = 200


class MetricDomainError(ValueError):
    """Inputs violate a metric's preconditions."""


@dataclass(frozen=True)
class MetricReport:
    name: str
    estimate: float
    se: float
    n: int

    def line(self, task: str) -> str:
        return f"{task}\t{self.name}\t{self.estimate!r}\t{self.se!r}\t{self.n}"


def auroc_score(scores, labels) -> float:
    """Mann-Whitney AUROC, ties credited one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricDomainError("AUROC needs both classes")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def concordance_score(curves, durations, events, edges) -> float:
    """Time-dependent concordance of discrete survival curves.

    A pair (i, j) is comparable when i had an event and d_i < d_j; it is
    concordant when S_i < S_j at the bin containing d_i.
    """
    S = np.asarray(curves, dtype=np.float64)
    d = np.asarray(durations, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    bins = np.searchsorted(np.asarray(edges, dtype=np.float64), d, side="right")
    # at[j, i]: curve of j evaluated at the bin of d_i
    at = S[:, bins]
    own = np.diagonal(at)
    comparable = (d[:, None] > d[None, :]) & e[None, :]
    pairs = int(comparable.sum())
    conc = int((comparable & (at > own[None, :])).sum())
    ties = int((comparable & (at == own[None, :])).sum())
    if pairs == 0:
        raise MetricDomainError("no comparable pairs")
    return (conc + 0.5 * ties) / pairs


def r2_score(predictions, truths) -> float:
    y = [float(v) for v in truths]
    p = [float(v) for v in predictions]
    if len(y) < 2:
        raise MetricDomainError("R^2 needs at least two examples")
    mean = math.fsum(y) / len(y)
    ss_tot = math.fsum((v - mean) ** 2 for v in y)
    if ss_tot == 0.0:
        raise MetricDomainError("R^2 is undefined for constant truths")
    ss_res = math.fsum((a - b) ** 2 for a, b in zip(y, p))
    return 1.0 - ss_res / ss_tot


def rmse_score(predictions, truths) -> float:
    p, y = np.asarray(predictions, float), np.asarray(truths, float)
    if y.size == 0:
        raise MetricDomainError("RMSE needs at least one example")
    return math.sqrt(math.fsum((p - y) ** 2) / y.size)


def mae_score(predictions, truths) -> float:
    p, y = np.asarray(predictions, float), np.asarray(truths, float)
    if y.size == 0:
        raise MetricDomainError("MAE needs at least one example")
    return math.fsum(np.abs(p - y)) / y.size


@dataclass(frozen=True)
class BootstrapResult:
    values: np.ndarray
    skipped: int

    @property
    def se(self) -> float:
        return float(np.std(self.values, ddof=1))


def bootstrap(metric: Callable[..., float], arrays: Sequence, B: int = DEFAULT_BOOTSTRAP,
              seed: int = 0) -> BootstrapResult:
    """Resample examples with replacement; resamples the metric rejects are skipped."""
    if B < 2:
        raise ValueError("need B >= 2 resamples")
    arrays = [np.asarray(a) for a in arrays]
    n = len(arrays[0])
    rng = np.random.default_rng(seed)
    vals, skipped = [], 0
    for _ in range(B):
        idx = rng.integers(0, n, n)
        try:
            vals.append(metric(*(a[idx] for a in arrays)))
        except MetricDomainError:
            skipped += 1
    if len(vals) < 2:
        raise MetricDomainError("too few valid bootstrap resamples")
    return BootstrapResult(np.asarray(vals), skipped)


def bootstrap_se(metric: Callable[..., float], arrays: Sequence, B: int = DEFAULT_BOOTSTRAP,
                 seed: int = 0) -> float:
    return bootstrap(metric, arrays, B, seed).se


def _report(name, metric, arrays, B, seed) -> MetricReport:
    est = metric(*arrays)
    se = bootstrap_se(metric, arrays, B, seed) if B else 0.0
    return MetricReport(name, est, se, len(arrays[0]))


def auroc(scores, labels, B: int = DEFAULT_BOOTSTRAP, seed: int = 0) -> MetricReport:
    return _report("auroc", auroc_score, [np.asarray(scores), np.asarray(labels)], B, seed)


def td_concordance(curves, durations, events, edges, B: int = DEFAULT_BOOTSTRAP, seed: int = 0) -> MetricReport:
    def metric(c, d, e):
        return concordance_score(c, d, e, edges)

    return _report("td_cindex", metric, [np.asarray(curves), np.asarray(durations), np.asarray(events)], B, seed)


def r2(predictions, truths, B: int = DEFAULT_BOOTSTRAP, seed: int = 0) -> MetricReport:
    return _report("r2", r2_score, [np.asarray(predictions), np.asarray(truths)], B, seed)


def rmse(predictions, truths, B: int = DEFAULT_BOOTSTRAP, seed: int = 0) -> MetricReport:
    return _report("rmse", rmse_score, [np.asarray(predictions), np.asarray(truths)], B, seed)


def mae(predictions, truths, B: int = DEFAULT_BOOTSTRAP, seed: int = 0) -> MetricReport:
    return _report("mae", mae_score, [np.asarray(predictions), np.asarray(truths)], B, seed)


def hanley_mcneil_se(auc: float, n_pos: int, n_neg: int) -> float:
    q1 = auc / (2.0 - auc)
    q2 = 2.0 * auc * auc / (1.0 + auc)
    var = (auc * (1 - auc) + (n_pos - 1) * (q1 - auc**2) + (n_neg - 1) * (q2 - auc**2)) / (n_pos * n_neg)
    return math.sqrt(var)


def dumps_reports(task: str, reports: Sequence[MetricReport]) -> str:
    return "".join(r.line(task) + "\n" for r in reports)


def loads_reports(text: str) -> list[tuple[str, MetricReport]]:
    out = []
    for line in text.splitlines():
        if line:
            task, name, est, se, n = line.split("\t")
            out.append((task, MetricReport(name, float(est), float(se), int(n))))
    return out
