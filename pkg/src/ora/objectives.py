"""NTP, TPP and ORA pretraining losses.

Each time-to-event term is ``-log(sum(P * mask))`` for one (anchor, code)
pair: the mask is one-hot at the observed cell, or covers every cell whose
time bin is at or after the censoring bin.  Cells strictly before the
censoring bin are the ones excluded, so the censored term equals
``-log(1 - mass before k_c)`` for a normalized ``P``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .discretize import BinGrid, GridError
from .events import RecordTargets
from .model import CellGroup, HeadOutput

CLAMP = 1e-12


class ObjectiveKind(str, enum.Enum):
    NTP = "ntp"
    TPP = "tpp"
    ORA = "ora"


class TargetError(ValueError):
    pass


@dataclass
class LossBatch:
    loss: Tensor
    terms: int
    observed: int = 0
    censored: int = 0
    clamped: int = 0

    @property
    def value(self) -> float:
        return self.loss.item()

    def log_line(self, step: int, objective: str) -> str:
        return (f"step={step}\tobjective={objective}\tloss={self.value:.10g}\t"
                f"observed={self.observed}\tcensored={self.censored}\tclamped={self.clamped}")


@dataclass
class TargetBatch:
    """Discretized targets for n anchors over K vocabulary codes.

    ``time_bin`` is the observed time bin, or the censoring bin k_c when
    ``observed`` is false.  ``include`` drops terms (e.g. padding).
    """

    observed: np.ndarray  # (n, K) bool
    time_bin: np.ndarray  # (n, K) int
    value_bin: np.ndarray  # (n, K) int, -1 where absent
    include: np.ndarray = field(default=None)  # (n, K) bool

    def __post_init__(self):
        if self.include is None:
            self.include = np.ones(self.observed.shape, dtype=bool)

    @property
    def n(self) -> int:
        return self.observed.shape[0]

    def select(self, rows: np.ndarray) -> "TargetBatch":
        return TargetBatch(self.observed[rows], self.time_bin[rows], self.value_bin[rows], self.include[rows])

    @staticmethod
    def concat(batches: Sequence["TargetBatch"]) -> "TargetBatch":
        return TargetBatch(*(np.concatenate([getattr(b, f) for b in batches])
                             for f in ("observed", "time_bin", "value_bin", "include")))


def discretize_targets(targets: RecordTargets, grids: Mapping[int, BinGrid],
                       numeric: Sequence[bool]) -> TargetBatch:
    """Map dense record targets onto the code grids."""
    n, K = targets.observed.shape
    tb = np.empty((n, K), dtype=np.intp)
    vb = np.full((n, K), -1, dtype=np.intp)
    for m in range(K):
        g = grids.get(m)
        if g is None:
            raise GridError(f"no grid for code {m}")
        tb[:, m] = np.searchsorted(np.asarray(g.time_edges), targets.delta_t[:, m], side="right")
        if numeric[m]:
            obs = targets.observed[:, m]
            vals = targets.value[:, m]
            if np.isnan(vals[obs]).any():
                raise TargetError(f"code {m}: observed numeric target without a value")
            has = obs & ~np.isnan(vals)
            vb[has, m] = np.searchsorted(np.asarray(g.value_edges), vals[has], side="right")
    return TargetBatch(targets.observed.copy(), tb, vb)


def _cell_masks(group_codes: np.ndarray, targets: TargetBatch, T: int, V: int,
                use_values: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Selection masks (n, Kg, T*V) plus observed/censored/included flags (n, Kg)."""
    obs = targets.observed[:, group_codes]
    tb = targets.time_bin[:, group_codes]
    inc = targets.include[:, group_codes]
    C = T * V
    cell_time = np.arange(C) // V
    if use_values:
        vb = targets.value_bin[:, group_codes]
        if (obs & inc & (vb < 0)).any():
            raise TargetError("observed numeric target missing a value bin")
        obs_cell = tb * V + np.maximum(vb, 0)
        onehot = np.arange(C) == obs_cell[..., None]
    else:
        onehot = cell_time == tb[..., None]
    tail = cell_time >= tb[..., None]
    mask = np.where(obs[..., None], onehot, tail)
    return mask.astype(np.float64), obs & inc, ~obs & inc, inc


def _censored_tte_loss(groups: Sequence[tuple[Tensor, np.ndarray, int, bool]],
                       targets: TargetBatch, T: int) -> LossBatch:
    total = None
    terms = observed = censored = clamped = 0
    for probs, codes, V, use_values in groups:
        mask, obs, cen, inc = _cell_masks(codes, targets, T, V, use_values)
        if T * V != probs.shape[-1]:
            raise ValueError(f"head emits {probs.shape[-1]} cells, expected {T * V}")
        mass = ad.sum(probs * mask, axis=-1)
        small = mass.data < CLAMP
        clamped += int((small & inc).sum())
        safe = ad.masked_fill(mass, small | ~inc, 1.0)
        # clamp contributes a constant -log(CLAMP) per clamped term
        logs = ad.log(safe)
        contrib = ad.sum(logs * inc.astype(np.float64))
        contrib = contrib + float(np.log(CLAMP) * (small & inc).sum())
        total = contrib if total is None else total + contrib
        terms += int(inc.sum())
        observed += int(obs.sum())
        censored += int(cen.sum())
    if terms == 0:
        raise TargetError("no loss terms")
    loss = total * (-1.0 / terms)
    return LossBatch(loss, terms, observed, censored, clamped)


def ora_loss(head: HeadOutput, targets: TargetBatch) -> LossBatch:
    """Mean negative log-likelihood over every included (anchor, code) term."""
    groups = [(g.probs, g.codes, g.value_bins, g.value_bins > 1) for g in head.groups]
    return _censored_tte_loss(groups, targets, head.time_bins)


def _time_marginal(group: CellGroup, T: int) -> Tensor:
    n, K, C = group.probs.shape
    V = C // T
    if V == 1:
        return group.probs
    flat = ad.reshape(group.probs, (n * K * T, V))
    return ad.reshape(ad.sum(flat, axis=-1), (n, K, T))


def tpp_loss(head: HeadOutput, targets: TargetBatch) -> LossBatch:
    """Censored time-to-event loss on the time marginal of every code."""
    groups = [(_time_marginal(g, head.time_bins), g.codes, 1, False) for g in head.groups]
    return _censored_tte_loss(groups, targets, head.time_bins)


def ntp_loss(logits: Tensor, next_codes: Sequence[int]) -> LossBatch:
    """Mean cross-entropy of the next code."""
    labels = np.asarray(next_codes, dtype=np.intp)
    n, K = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n == 0:
        raise TargetError("no loss terms")
    if (labels < 0).any() or (labels >= K).any():
        raise TargetError("next-code label outside the vocabulary")
    onehot = np.zeros((n, K))
    onehot[np.arange(n), labels] = 1.0
    loss = ad.sum(ad.log_softmax(logits) * onehot) * (-1.0 / n)
    return LossBatch(loss, n, observed=n)
