"""Random micro-instances for the loss oracles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ora.autodiff import Tensor
from ora.discretize import BinGrid
from ora.events import Event, PatientRecord, extract_all_targets, make_record
from ora.model import CellGroup, HeadOutput
from ora.objectives import TargetBatch, discretize_targets
from ora.vocab import Vocabulary


@dataclass
class MicroInstance:
    record: PatientRecord
    vocab: Vocabulary
    grids: dict[int, BinGrid]
    T: int
    V: int
    probs: list[np.ndarray]  # per code: (N, T, V) numeric or (N, T)

    @property
    def numeric(self) -> list[bool]:
        return self.vocab.numeric_mask

    def targets(self) -> TargetBatch:
        return discretize_targets(extract_all_targets(self.record, self.vocab), self.grids, self.numeric)

    def head(self) -> HeadOutput:
        N = len(self.record.events)
        groups = []
        num = [m for m, f in enumerate(self.numeric) if f]
        non = [m for m, f in enumerate(self.numeric) if not f]
        if num:
            cells = np.stack([self.probs[m].reshape(N, -1) for m in num], axis=1)
            groups.append(CellGroup(np.array(num), Tensor(cells), self.V))
        if non:
            cells = np.stack([self.probs[m] for m in non], axis=1)
            groups.append(CellGroup(np.array(non), Tensor(cells), 1))
        return HeadOutput(groups, self.T)

    def nested_probs(self):
        N = len(self.record.events)
        return [[self.probs[m][j].tolist() for m in range(len(self.vocab))] for j in range(N)]

    def nested_time_probs(self):
        N = len(self.record.events)
        out = []
        for j in range(N):
            row = []
            for m in range(len(self.vocab)):
                p = self.probs[m][j]
                row.append(p.sum(axis=1).tolist() if p.ndim == 2 else p.tolist())
            out.append(row)
        return out


def random_instance(rng: np.random.Generator, max_codes: int = 4, max_bins: int = 3, max_events: int = 6,
                    force_v: int | None = None) -> MicroInstance:
    K = int(rng.integers(1, max_codes + 1))
    T = int(rng.integers(2, max_bins + 1))
    V = force_v if force_v is not None else int(rng.integers(2, max_bins + 1))
    codes = [f"C{m}" for m in range(K)]
    numeric = [bool(rng.random() < 0.5) for _ in range(K)]
    vocab = Vocabulary.from_codes(codes, numeric)
    N = int(rng.integers(1, max_events + 1))
    # times on a coarse lattice so ties and bin-edge hits occur
    times = rng.integers(0, 8, N) * 0.5
    events = []
    for t in times:
        m = int(rng.integers(0, K + 1))  # K means an out-of-vocabulary code
        if m == K:
            events.append(Event(float(t), "OOV", None))
        else:
            v = float(rng.integers(-3, 4)) if numeric[m] else None
            events.append(Event(float(t), codes[m], v))
    record = make_record("p", events)
    grids = {}
    for m in range(K):
        t_edges = tuple(sorted(set((rng.integers(1, 8, T - 1) * 0.5).tolist())))
        v_edges = tuple(sorted(set(rng.integers(-3, 4, V - 1).astype(float).tolist()))) if numeric[m] else None
        grids[m] = BinGrid(m, t_edges, v_edges, T, V)
    probs = []
    for m in range(K):
        if numeric[m] and V > 1:
            p = rng.dirichlet(np.ones(T * V), N).reshape(N, T, V)
        elif numeric[m]:
            p = rng.dirichlet(np.ones(T), N).reshape(N, T, 1)
        else:
            p = rng.dirichlet(np.ones(T), N)
        probs.append(p)
    return MicroInstance(record, vocab, grids, T, V, probs)
