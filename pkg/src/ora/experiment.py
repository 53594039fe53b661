"""Objective comparison on a synthetic cohort with a known latent signal.

Each seed generates a cohort, pretrains one backbone per objective on a
pretraining split, then fits linear probes on frozen embeddings of the
remaining patients and scores them on a held-out half.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .discretize import fit_bins_from_records
from .metrics import MetricDomainError, auroc_score, concordance_score, r2_score
from .model import BackboneConfig
from .probe import Standardizer, extract_embeddings, fit_discrete_survival, fit_linear, fit_logistic
from .synth import directional_config, generate_cohort, task_labels
from .train import PretrainModel, TrainConfig, prepare_records, pretrain
from .vocab import build_vocabulary, compute_code_stats

log = logging.getLogger(__name__)

OBJECTIVES = ("ntp", "tpp", "ora")
TASK_METRICS = {"classification": "auroc", "time_to_event": "td_cindex", "regression": "r2"}


@dataclass
class ComparisonConfig:
    n_patients: int = 5000
    pretrain_fraction: float = 0.5
    steps: int = 300
    lr: float = 1e-3
    batch_positions: int = 1024
    bootstrap: int = 200
    reg_code: str = "LAB00"
    tte_code: str = "DX00"
    cls_code: str = "DX01"
    horizon: float = 7.0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)


@dataclass
class TaskScores:
    """Test-set predictions of every objective for one task."""

    task: str
    metric: str
    scores: dict[str, float]
    predictions: dict[str, np.ndarray]
    truth: tuple[np.ndarray, ...]
    edges: tuple[float, ...] = ()

    def paired_se(self, a: str, b: str, B: int, seed: int) -> float:
        """Bootstrap se of metric(a) - metric(b), resampling test examples jointly."""
        rng = np.random.default_rng(seed)
        n = len(self.truth[0])
        diffs = []
        for _ in range(B):
            idx = rng.integers(0, n, n)
            try:
                diffs.append(self._metric(self.predictions[a][idx], idx) - self._metric(self.predictions[b][idx], idx))
            except MetricDomainError:
                continue
        return float(np.std(diffs, ddof=1))

    def _metric(self, pred: np.ndarray, idx: np.ndarray) -> float:
        if self.metric == "auroc":
            return auroc_score(pred, self.truth[0][idx])
        if self.metric == "r2":
            return r2_score(pred, self.truth[0][idx])
        return concordance_score(pred, self.truth[0][idx], self.truth[1][idx], self.edges)


@dataclass
class SeedResult:
    seed: int
    tasks: dict[str, TaskScores]
    seconds: float


def _probe_task(kind: str, X_tr, X_te, ex_tr, ex_te) -> tuple[np.ndarray, tuple, tuple[float, ...]]:
    y_tr = np.array([e.label for e in ex_tr])
    y_te = np.array([e.label for e in ex_te])
    if kind == "regression":
        return fit_linear(X_tr, y_tr[:, 0]).predict(X_te), (y_te[:, 0],), ()
    if kind == "classification":
        return fit_logistic(X_tr, y_tr[:, 0]).predict_proba(X_te), (y_te[:, 0],), ()
    head = fit_discrete_survival(X_tr, y_tr[:, 0], y_tr[:, 1])
    return head.survival(X_te), (y_te[:, 0], y_te[:, 1].astype(bool)), head.edges


def run_seed(seed: int, cfg: ComparisonConfig) -> SeedResult:
    start = time.perf_counter()
    gen = directional_config(seed=seed, n_patients=cfg.n_patients)
    records, truth = generate_cohort(gen)
    n_pre = int(cfg.pretrain_fraction * len(records))
    pre, rest = records[:n_pre], records[n_pre:]

    bc = cfg.backbone
    vocab = build_vocabulary(compute_code_stats(pre), gen.n_codes)
    grids = fit_bins_from_records(pre, vocab, bc.time_bins, bc.value_bins)
    prepared = prepare_records(pre, vocab, grids, bc.context_length)

    examples = {kind: task_labels(rest, truth, kind, code, horizon=cfg.horizon)
                for kind, code in (("classification", cfg.cls_code), ("time_to_event", cfg.tte_code),
                                   ("regression", cfg.reg_code))}
    by_pid = {r.patient_id: r for r in rest}
    # probe split by patient, fixed per seed
    pids = sorted(by_pid)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    train_pids = set(rng.permutation(pids)[: len(pids) // 2].tolist())

    tasks: dict[str, TaskScores] = {}
    for obj in OBJECTIVES:
        model = PretrainModel(bc, vocab, grids, obj, seed=seed)
        losses = pretrain(model, prepared, TrainConfig(cfg.steps, cfg.lr, cfg.batch_positions, seed))
        log.info("seed %d %s: loss %.4f -> %.4f", seed, obj, losses[0], float(np.mean(losses[-20:])))
        for kind, exs in examples.items():
            recs = [by_pid[e.patient_id] for e in exs]
            X = extract_embeddings(model.backbone, recs, [e.prediction_time for e in exs])
            tr = np.array([e.patient_id in train_pids for e in exs])
            scale = Standardizer.fit(X[tr])
            ex_tr = [e for e, f in zip(exs, tr) if f]
            ex_te = [e for e, f in zip(exs, tr) if not f]
            pred, truth_te, edges = _probe_task(kind, scale(X[tr]), scale(X[~tr]), ex_tr, ex_te)
            ts = tasks.setdefault(kind, TaskScores(kind, TASK_METRICS[kind], {}, {}, truth_te, edges))
            ts.predictions[obj] = pred
            ts.scores[obj] = ts._metric(pred, np.arange(len(pred)))
    return SeedResult(seed, tasks, time.perf_counter() - start)


@dataclass
class Margin:
    task: str
    better: str
    worse: str
    diff: float
    se: float

    @property
    def passed(self) -> bool:
        return self.diff > 2.0 * self.se

    def line(self) -> str:
        return (f"{self.task}: {self.better}-{self.worse} = {self.diff:+.4f} "
                f"(2se = {2 * self.se:.4f}) {'PASS' if self.passed else 'FAIL'}")


CLAIMS = (("regression", "ora", "tpp"), ("regression", "ora", "ntp"), ("time_to_event", "ora", "ntp"))


def aggregate(results: Sequence[SeedResult], B: int) -> list[Margin]:
    """Mean difference over seeds against the se of that mean."""
    out = []
    for task, a, b in CLAIMS:
        diffs = [r.tasks[task].scores[a] - r.tasks[task].scores[b] for r in results]
        ses = [r.tasks[task].paired_se(a, b, B, r.seed) for r in results]
        se = math.sqrt(sum(s * s for s in ses)) / len(ses)
        out.append(Margin(task, a, b, float(np.mean(diffs)), se))
    return out


def run_comparison(seeds: Sequence[int] = (0, 1, 2), cfg: ComparisonConfig | None = None
                   ) -> tuple[list[SeedResult], list[Margin]]:
    cfg = cfg or ComparisonConfig()
    results = [run_seed(s, cfg) for s in seeds]
    return results, aggregate(results, cfg.bootstrap)
