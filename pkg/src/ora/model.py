"""Causal transformer encoder and prediction heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .discretize import BinGrid
from .events import PatientRecord
from .vocab import Vocabulary

N_GAP_BUCKETS = 16
# bucket 0: first event; bucket 1: gap < 2**-6 days; then one bucket per power of two
GAP_EDGES = tuple(2.0**e for e in range(-6, 8))
MASK_VALUE = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_length: int = 128
    d_hidden: int = 32  # D2, width of the per-time-bin features in the head
    time_bins: int = 4
    value_bins: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str]) -> "BackboneConfig":
        kv = dict(kv)
        preset = kv.pop("preset", None)
        base = PRESETS[preset] if preset else cls()
        names = {f.name for f in fields(cls)}
        unknown = set(kv) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return replace(base, **{k: int(v) for k, v in kv.items()})

    @classmethod
    def loads(cls, text: str) -> "BackboneConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        return cls.from_mapping(kv)


PRESETS = {
    "desk": BackboneConfig(),
    # wide configuration, for parameter arithmetic only
    "large": BackboneConfig(
        d_model=768, n_layers=11, n_heads=12, context_length=8192,
        d_hidden=512, time_bins=8, value_bins=10, mlp_ratio=4),
}


def gap_bucket(gap: float | None) -> int:
    if gap is None:
        return 0
    return 1 + int(np.searchsorted(GAP_EDGES, gap, side="right"))


@dataclass(frozen=True)
class SequenceBatch:
    """Right-padded index arrays of shape (B, L)."""

    codes: np.ndarray
    gaps: np.ndarray
    values: np.ndarray
    lengths: np.ndarray
    truncated: int = 0


class EventTransformer:
    """Pre-norm causal transformer over event embeddings."""

    def __init__(self, config: BackboneConfig, vocab: Vocabulary, grids: Mapping[int, BinGrid], seed: int = 0):
        self.config = config
        self.vocab = vocab
        self.grids = dict(grids)
        self.truncated = 0
        rng = ad.seed_rng(seed)
        D, K, V = config.d_model, len(vocab), config.value_bins
        dh = D // config.n_heads
        p: dict[str, Tensor] = {}
        p["embed.code"] = ad.param_init((K + 1, D), 1.0, rng)  # last row: out of vocabulary
        p["embed.gap"] = ad.param_init((N_GAP_BUCKETS, D), 1.0, rng)
        p["embed.value"] = ad.param_init((K * V + 1, D), 1.0, rng)  # last row: no value
        for i in range(config.n_layers):
            b = f"block{i}."
            p[b + "ln1.g"] = Tensor(np.ones(D), requires_grad=True)
            p[b + "ln1.b"] = Tensor(np.zeros(D), requires_grad=True)
            for h in range(config.n_heads):
                for w in ("q", "k", "v"):
                    p[f"{b}attn.w{w}{h}"] = ad.param_init((D, dh), rng=rng)
                p[f"{b}attn.wo{h}"] = ad.param_init((dh, D), 1.0 / math.sqrt(D), rng)
            p[b + "ln2.g"] = Tensor(np.ones(D), requires_grad=True)
            p[b + "ln2.b"] = Tensor(np.zeros(D), requires_grad=True)
            H = config.mlp_ratio * D
            p[b + "mlp.w1"] = ad.param_init((D, H), rng=rng)
            p[b + "mlp.b1"] = Tensor(np.zeros(H), requires_grad=True)
            p[b + "mlp.w2"] = ad.param_init((H, D), rng=rng)
            p[b + "mlp.b2"] = Tensor(np.zeros(D), requires_grad=True)
        p["ln_f.g"] = Tensor(np.ones(D), requires_grad=True)
        p["ln_f.b"] = Tensor(np.zeros(D), requires_grad=True)
        self.params = p

    # -- inputs ---------------------------------------------------------

    def event_indices(self, record: PatientRecord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Code, gap-bucket and value-embedding rows for each event.

        The gap is measured to the latest strictly earlier timestamp, so
        simultaneous events share a bucket and the first timestamp gets 0.
        """
        K, V = len(self.vocab), self.config.value_bins
        n = len(record.events)
        codes = np.empty(n, dtype=np.intp)
        gaps = np.empty(n, dtype=np.intp)
        vals = np.empty(n, dtype=np.intp)
        prev, cur = None, None
        for i, e in enumerate(record.events):
            m = self.vocab.index.get(e.code, -1)
            codes[i] = K if m < 0 else m
            if cur is not None and e.time > cur:
                prev = cur
            cur = e.time
            gaps[i] = gap_bucket(None if prev is None else e.time - prev)
            vals[i] = K * V
            if m >= 0 and e.value is not None:
                g = self.grids.get(m)
                if g is not None and g.numeric:
                    vals[i] = m * V + int(np.searchsorted(g.value_edges, e.value, side="right"))
        return codes, gaps, vals

    def make_batch(self, records: Sequence[PatientRecord]) -> SequenceBatch:
        L_max = self.config.context_length
        rows = []
        truncated = 0
        for rec in records:
            if len(rec.events) > L_max:
                rec = PatientRecord(rec.patient_id, rec.events[-L_max:])
                truncated += 1
            rows.append(self.event_indices(rec))
        self.truncated += truncated
        L = max(len(r[0]) for r in rows)
        B = len(rows)
        K, V = len(self.vocab), self.config.value_bins
        codes = np.full((B, L), K, dtype=np.intp)
        gaps = np.zeros((B, L), dtype=np.intp)
        vals = np.full((B, L), K * V, dtype=np.intp)
        lengths = np.empty(B, dtype=np.intp)
        for b, (c, g, v) in enumerate(rows):
            n = len(c)
            codes[b, :n], gaps[b, :n], vals[b, :n] = c, g, v
            lengths[b] = n
        return SequenceBatch(codes, gaps, vals, lengths, truncated)

    def embed(self, batch: SequenceBatch) -> Tensor:
        B, L = batch.codes.shape
        D = self.config.d_model
        p = self.params
        x = ad.gather_rows(p["embed.code"], batch.codes.reshape(-1))
        x = x + ad.gather_rows(p["embed.gap"], batch.gaps.reshape(-1))
        x = x + ad.gather_rows(p["embed.value"], batch.values.reshape(-1))
        return ad.reshape(x, (B, L, D))

    # -- encoder --------------------------------------------------------

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x) * self.params[prefix + ".g"] + self.params[prefix + ".b"]

    def encode(self, x: Tensor) -> Tensor:
        """(B, L, D) inputs -> (B, L, D) causal embeddings."""
        B, L, D = x.shape
        cfg = self.config
        p = self.params
        dh = D // cfg.n_heads
        future = np.triu(np.ones((L, L), dtype=bool), k=1)
        future = np.broadcast_to(future, (B, L, L))
        scale = 1.0 / math.sqrt(dh)
        for i in range(cfg.n_layers):
            b = f"block{i}."
            h = self._norm(x, b + "ln1")
            attn = None
            for hd in range(cfg.n_heads):
                q = h @ p[f"{b}attn.wq{hd}"]
                k = h @ p[f"{b}attn.wk{hd}"]
                v = h @ p[f"{b}attn.wv{hd}"]
                s = ad.masked_fill((q @ ad.transpose(k)) * scale, future, MASK_VALUE)
                o = (ad.softmax(s) @ v) @ p[f"{b}attn.wo{hd}"]
                attn = o if attn is None else attn + o
            x = x + attn
            h = self._norm(x, b + "ln2")
            h = ad.gelu(h @ p[b + "mlp.w1"] + p[b + "mlp.b1"])
            x = x + (h @ p[b + "mlp.w2"] + p[b + "mlp.b2"])
        return self._norm(x, "ln_f")

    def forward(self, records: Sequence[PatientRecord]) -> tuple[Tensor, SequenceBatch]:
        batch = self.make_batch(records)
        return self.encode(self.embed(batch)), batch

    def embed_sequences(self, records: Sequence[PatientRecord]) -> list[np.ndarray]:
        """Per-record (N_i, D) embeddings, inference only."""
        E, batch = self.forward(records)
        return [E.data[b, : batch.lengths[b]] for b in range(len(records))]


# ---------------------------------------------------------------------------
# heads


@dataclass
class CellGroup:
    """Probabilities for codes sharing a cell layout: (n, len(codes), cells)."""

    codes: np.ndarray
    probs: Tensor
    value_bins: int


@dataclass
class HeadOutput:
    groups: list[CellGroup]
    time_bins: int

    @property
    def n(self) -> int:
        return self.groups[0].probs.shape[0] if self.groups else 0

    def for_code(self, code: int, row: int = 0) -> np.ndarray:
        """(T, V) matrix for numeric codes, (T,) vector otherwise."""
        for g in self.groups:
            hit = np.flatnonzero(g.codes == code)
            if hit.size:
                cells = g.probs.data[row, hit[0]]
                return cells.reshape(self.time_bins, g.value_bins) if g.value_bins > 1 else cells
        raise KeyError(f"code {code} not produced by this head")


def _regroup(n: int, T: int, K: int) -> np.ndarray:
    """Row permutation from (i, k, m) order to (i, m, k) order."""
    i, m, k = np.meshgrid(np.arange(n), np.arange(K), np.arange(T), indexing="ij")
    return ((i * T + k) * K + m).reshape(-1)


class FactorizedHead:
    """Shared E -> (T, D2) projection, then a small per-code map per time row.

    Numeric codes map each row to V logits and take one softmax over all
    T*V cells; non-numeric codes map each row to one logit and softmax over T.
    """

    def __init__(self, d_model: int, d_hidden: int, time_bins: int, value_bins: int,
                 numeric_codes: Sequence[int], nonnumeric_codes: Sequence[int], seed: int = 0,
                 zero_init: bool = False):
        rng = ad.seed_rng(seed)
        self.T, self.V, self.D2 = time_bins, value_bins, d_hidden
        self.numeric = np.asarray(numeric_codes, dtype=np.intp)
        self.nonnumeric = np.asarray(nonnumeric_codes, dtype=np.intp)
        p = {
            "head.w1": ad.param_init((d_model, time_bins * d_hidden), rng=rng),
            "head.b1": Tensor(np.zeros(time_bins * d_hidden), requires_grad=True),
        }
        s2 = 0.0 if zero_init else None
        if self.numeric.size:
            p["head.w_num"] = ad.param_init((d_hidden, self.numeric.size * value_bins), s2, rng)
            p["head.b_num"] = Tensor(np.zeros(self.numeric.size * value_bins), requires_grad=True)
        if self.nonnumeric.size:
            p["head.w_non"] = ad.param_init((d_hidden, self.nonnumeric.size), s2, rng)
            p["head.b_non"] = Tensor(np.zeros(self.nonnumeric.size), requires_grad=True)
        self.params = p

    @property
    def codes(self) -> set[int]:
        return set(self.numeric.tolist()) | set(self.nonnumeric.tolist())

    def __call__(self, E: Tensor) -> HeadOutput:
        """E: (n, D) -> per-code cell probabilities."""
        n = E.shape[0]
        T, V, D2 = self.T, self.V, self.D2
        p = self.params
        H = ad.reshape(E @ p["head.w1"] + p["head.b1"], (n * T, D2))
        groups = []
        if self.numeric.size:
            K = self.numeric.size
            z = ad.reshape(H @ p["head.w_num"] + p["head.b_num"], (n * T * K, V))
            z = ad.reshape(ad.gather_rows(z, _regroup(n, T, K)), (n * K, T * V))
            probs = ad.reshape(ad.softmax(z), (n, K, T * V))
            groups.append(CellGroup(self.numeric, probs, V))
        if self.nonnumeric.size:
            K = self.nonnumeric.size
            z = ad.reshape(H @ p["head.w_non"] + p["head.b_non"], (n * T * K, 1))
            z = ad.reshape(ad.gather_rows(z, _regroup(n, T, K)), (n * K, T))
            probs = ad.reshape(ad.softmax(z), (n, K, T))
            groups.append(CellGroup(self.nonnumeric, probs, 1))
        return HeadOutput(groups, T)


def head_forward(head: FactorizedHead, E_j, codes: Sequence[int] | None = None) -> HeadOutput:
    """Head output for a single embedding ``E_j`` of shape (D,)."""
    if codes is not None:
        unknown = set(int(c) for c in codes) - head.codes
        if unknown:
            raise KeyError(f"unknown code indices {sorted(unknown)}")
    E = E_j if isinstance(E_j, Tensor) else Tensor(np.asarray(E_j, dtype=np.float64))
    if not np.isfinite(E.data).all():
        raise ad.NonFiniteError("head input is not finite")
    return head(ad.reshape(E, (1, E.shape[-1])))


class LinearHead:
    """Next-code logits for next-token prediction."""

    def __init__(self, d_model: int, n_codes: int, seed: int = 0):
        rng = ad.seed_rng(seed)
        self.params = {
            "head.w": ad.param_init((d_model, n_codes), rng=rng),
            "head.b": Tensor(np.zeros(n_codes), requires_grad=True),
        }

    def __call__(self, E: Tensor) -> Tensor:
        return E @ self.params["head.w"] + self.params["head.b"]


@dataclass(frozen=True)
class ParameterCounts:
    factorized: int
    direct: int

    @property
    def reduction(self) -> float:
        return 1.0 - self.factorized / self.direct


def count_parameters(config: BackboneConfig, n_numeric: int, n_nonnumeric: int) -> ParameterCounts:
    """Weights (no biases) of the factorized head vs. one direct projection."""
    D, D2, T, V = config.d_model, config.d_hidden, config.time_bins, config.value_bins
    factorized = D * T * D2 + n_numeric * D2 * V + n_nonnumeric * D2
    direct = D * (T * V * n_numeric + T * n_nonnumeric)
    return ParameterCounts(factorized, direct)
