"""Pretraining loop shared by the three objectives."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .discretize import BinGrid
from .events import PatientRecord, code_indices, extract_all_targets
from .model import BackboneConfig, EventTransformer, FactorizedHead, LinearHead
from .objectives import LossBatch, ObjectiveKind, TargetBatch, discretize_targets, ntp_loss, ora_loss, tpp_loss
from .vocab import Vocabulary

log = logging.getLogger(__name__)


class PretrainModel:
    """Backbone plus the head matching one objective."""

    def __init__(self, config: BackboneConfig, vocab: Vocabulary, grids: Mapping[int, BinGrid],
                 objective: ObjectiveKind | str, seed: int = 0):
        self.objective = ObjectiveKind(objective)
        self.backbone = EventTransformer(config, vocab, grids, seed=seed)
        D = config.d_model
        if self.objective is ObjectiveKind.NTP:
            self.head = LinearHead(D, len(vocab), seed=seed + 1)
        elif self.objective is ObjectiveKind.TPP:
            # time-only semantics: every code gets a T-cell distribution
            self.head = FactorizedHead(D, config.d_hidden, config.time_bins, 1, [],
                                       list(range(len(vocab))), seed=seed + 1)
        else:
            self.head = FactorizedHead(D, config.d_hidden, config.time_bins, config.value_bins,
                                       vocab.numeric_indices, vocab.nonnumeric_indices, seed=seed + 1)

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    @property
    def params(self) -> dict[str, ad.Tensor]:
        return {**self.backbone.params, **self.head.params}

    def load_params(self, arrays: Mapping[str, np.ndarray]) -> None:
        params = self.params
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, t in params.items():
            if arrays[name].shape != t.shape:
                raise ValueError(f"parameter {name}: shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)

    def save(self, path) -> None:
        ad.write_checkpoint(path, self.params)


@dataclass
class PreparedRecord:
    record: PatientRecord
    targets: TargetBatch
    next_codes: np.ndarray  # (N-1,), -1 when the next event is out of vocabulary


def prepare_records(records: Sequence[PatientRecord], vocab: Vocabulary,
                    grids: Mapping[int, BinGrid], context_length: int) -> list[PreparedRecord]:
    """Targets for every anchor; records are cut to their most recent events."""
    out = []
    numeric = vocab.numeric_mask
    for rec in records:
        if not rec.events:
            continue
        if len(rec.events) > context_length:
            rec = PatientRecord(rec.patient_id, rec.events[-context_length:])
        tg = discretize_targets(extract_all_targets(rec, vocab), grids, numeric)
        codes = code_indices(rec, vocab.index)
        out.append(PreparedRecord(rec, tg, codes[1:]))
    return out


def position_batches(prepared: Sequence[PreparedRecord], batch_positions: int,
                     rng: np.random.Generator, pool: int = 16) -> list[list[int]]:
    """Shuffle records and group them until each batch holds ~batch_positions anchors.

    Records are length-sorted within pools of ``pool`` batches to cut padding.
    """
    order = rng.permutation(len(prepared))
    lengths = np.array([len(p.record.events) for p in prepared])
    chunk = max(1, int(pool * batch_positions / max(lengths.mean(), 1)))
    batches = []
    for start in range(0, len(order), chunk):
        part = order[start : start + chunk]
        part = part[np.argsort(lengths[part], kind="stable")]
        cur, count = [], 0
        for i in part:
            cur.append(int(i))
            count += lengths[i]
            if count >= batch_positions:
                batches.append(cur)
                cur, count = [], 0
        if cur:
            batches.append(cur)
    return [batches[i] for i in rng.permutation(len(batches))]


def batch_loss(model: PretrainModel, items: Sequence[PreparedRecord]) -> LossBatch:
    E, batch = model.backbone.forward([it.record for it in items])
    B, L, D = E.shape
    flat = ad.reshape(E, (B * L, D))
    if model.objective is ObjectiveKind.NTP:
        rows, labels = [], []
        for b, it in enumerate(items):
            keep = np.flatnonzero(it.next_codes >= 0)
            rows.append(b * L + keep)
            labels.append(it.next_codes[keep])
        rows = np.concatenate(rows)
        logits = model.head(ad.gather_rows(flat, rows))
        return ntp_loss(logits, np.concatenate(labels))
    rows = np.concatenate([b * L + np.arange(batch.lengths[b]) for b in range(B)])
    targets = TargetBatch.concat([it.targets for it in items])
    head_out = model.head(ad.gather_rows(flat, rows))
    if model.objective is ObjectiveKind.TPP:
        return tpp_loss(head_out, targets)
    return ora_loss(head_out, targets)


@dataclass
class TrainConfig:
    steps: int = 300
    lr: float = 1e-3
    batch_positions: int = 1024
    seed: int = 0


def pretrain(model: PretrainModel, prepared: Sequence[PreparedRecord], cfg: TrainConfig,
             on_step: Callable[[int, LossBatch], None] | None = None) -> list[float]:
    """Adam on minibatches of anchors; returns the loss trace."""
    rng = np.random.default_rng(cfg.seed)
    params = list(model.params.values())
    state = ad.AdamState()
    losses: list[float] = []
    batches: list[list[int]] = []
    for step in range(1, cfg.steps + 1):
        if not batches:
            batches = position_batches(prepared, cfg.batch_positions, rng)
        idx = batches.pop()
        for p in params:
            p.zero_grad()
        with ad.Tape() as tape:
            lb = batch_loss(model, [prepared[i] for i in idx])
        tape.backward(lb.loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        ad.adam_step(params, grads, state, cfg.lr)
        losses.append(lb.value)
        if on_step is not None:
            on_step(step, lb)
    return losses
