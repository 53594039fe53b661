"""Per-code quantile grids over time-to-event and value.

Bins are left-closed, right-open; the first time bin starts at 0 and the
last bin of either axis is unbounded above.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

DEFAULT_MIN_COUNT = 50


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class BinIndex:
    time_bin: int
    value_bin: int | None = None


@dataclass(frozen=True)
class BinGrid:
    code: int
    time_edges: tuple[float, ...]
    value_edges: tuple[float, ...] | None
    T: int
    V: int

    @property
    def numeric(self) -> bool:
        return self.value_edges is not None

    @property
    def n_time_bins(self) -> int:
        return len(self.time_edges) + 1

    @property
    def n_value_bins(self) -> int:
        return 1 if self.value_edges is None else len(self.value_edges) + 1


_ignored_values = 0


def ignored_value_count() -> int:
    """Values passed to non-numeric grids and dropped by :func:`lookup`."""
    return _ignored_values


def lookup(grid: BinGrid, delta_t: float, value: float | None = None, observed: bool = True) -> BinIndex:
    global _ignored_values
    if delta_t < 0:
        raise GridError(f"negative duration {delta_t!r}")
    k = int(np.searchsorted(grid.time_edges, delta_t, side="right"))
    if not grid.numeric:
        if value is not None:
            _ignored_values += 1
        return BinIndex(k, None)
    if value is None:
        if observed:
            raise GridError(f"code {grid.code}: observed numeric event without a value")
        return BinIndex(k, None)
    return BinIndex(k, int(np.searchsorted(grid.value_edges, value, side="right")))


def time_bins(grid: BinGrid, delta_t: np.ndarray) -> np.ndarray:
    return np.searchsorted(np.asarray(grid.time_edges), delta_t, side="right")


def value_bins(grid: BinGrid, values: np.ndarray) -> np.ndarray:
    if grid.value_edges is None:
        return np.zeros(np.shape(values), dtype=np.intp)
    return np.searchsorted(np.asarray(grid.value_edges), values, side="right")


def quantile_edges(sample: Sequence[float], n_bins: int) -> tuple[float, ...]:
    """Interior edges at the i/n_bins quantiles, lower order statistic at ceil(q*n).

    Duplicates are collapsed, so a degenerate sample yields fewer bins.
    """
    x = np.sort(np.asarray(sample, dtype=np.float64))
    n = x.size
    if n == 0:
        return ()
    edges = []
    for i in range(1, n_bins):
        rank = (i * n + n_bins - 1) // n_bins  # ceil(i*n/n_bins) in exact arithmetic
        e = float(x[max(rank, 1) - 1])
        if not edges or e > edges[-1]:
            edges.append(e)
    # an edge at the sample minimum leaves bin 0 empty; drop it
    if edges and edges[0] <= x[0]:
        edges = edges[1:]
    return tuple(edges)


def fit_bins(
    deltas: Mapping[int, Sequence[float]],
    values: Mapping[int, Sequence[float]],
    numeric: Mapping[int, bool] | Sequence[bool],
    T: int,
    V: int,
    min_count: int = DEFAULT_MIN_COUNT,
) -> dict[int, BinGrid]:
    """Fit one grid per code from observed first-occurrence gaps and values.

    ``deltas[m]`` and ``values[m]`` hold observed targets only.  Codes with
    fewer than ``min_count`` observations get the pooled grid.
    """
    if T < 2 or V < 2:
        raise GridError("need T >= 2 and V >= 2")
    codes = range(len(numeric)) if not isinstance(numeric, Mapping) else sorted(numeric)
    is_num = {m: bool(numeric[m]) for m in codes}
    pooled_t = [np.asarray(deltas.get(m, ()), dtype=np.float64) for m in codes]
    pooled_t = np.concatenate(pooled_t) if pooled_t else np.empty(0)
    if pooled_t.size == 0:
        raise GridError("no observed targets in the corpus; cannot fit a global grid")
    pooled_v = [np.asarray(values.get(m, ()), dtype=np.float64) for m in codes if is_num[m]]
    pooled_v = np.concatenate(pooled_v) if pooled_v else np.empty(0)
    global_t = quantile_edges(pooled_t, T)
    global_v = quantile_edges(pooled_v, V)

    grids = {}
    for m in codes:
        d = np.asarray(deltas.get(m, ()), dtype=np.float64)
        sparse = d.size < min_count
        t_edges = global_t if sparse else quantile_edges(d, T)
        v_edges = None
        if is_num[m]:
            v = np.asarray(values.get(m, ()), dtype=np.float64)
            v_edges = global_v if sparse or v.size == 0 else quantile_edges(v, V)
        grids[m] = BinGrid(m, t_edges, v_edges, T, V)
    return grids


def fit_bins_from_records(records, vocab, T: int, V: int, min_count: int = DEFAULT_MIN_COUNT):
    """Collect observed first-occurrence targets over all anchors, then fit."""
    from .events import extract_all_targets

    k = len(vocab)
    d_chunks: list[list[np.ndarray]] = [[] for _ in range(k)]
    v_chunks: list[list[np.ndarray]] = [[] for _ in range(k)]
    for rec in records:
        if not rec.events:
            continue
        tg = extract_all_targets(rec, vocab)
        for m in range(k):
            sel = tg.observed[:, m]
            if sel.any():
                d_chunks[m].append(tg.delta_t[sel, m])
                vals = tg.value[sel, m]
                v_chunks[m].append(vals[~np.isnan(vals)])
    deltas = {m: np.concatenate(c) for m, c in enumerate(d_chunks) if c}
    values = {m: np.concatenate(c) for m, c in enumerate(v_chunks) if c}
    return fit_bins(deltas, values, vocab.numeric_mask, T, V, min_count)


def _fmt(edges) -> str:
    return ",".join(repr(float(e)) for e in edges)


def _parse(field: str) -> tuple[float, ...]:
    return tuple(float(x) for x in field.split(",")) if field else ()


def dumps_grids(grids: Mapping[int, BinGrid]) -> str:
    any_grid = next(iter(grids.values()))
    lines = [f"# T={any_grid.T} V={any_grid.V}\n"]
    for m in sorted(grids):
        g = grids[m]
        v = "-" if g.value_edges is None else _fmt(g.value_edges)
        lines.append(f"{m}\t{_fmt(g.time_edges)}\t{v}\n")
    return "".join(lines)


def loads_grids(text: str) -> dict[int, BinGrid]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# T="):
        raise GridError("grid file lacks the '# T=.. V=..' header")
    hdr = dict(kv.split("=") for kv in lines[0][2:].split())
    T, V = int(hdr["T"]), int(hdr["V"])
    grids = {}
    for line in lines[1:]:
        if not line:
            continue
        idx, t, v = line.split("\t")
        m = int(idx)
        grids[m] = BinGrid(m, _parse(t), None if v == "-" else _parse(v), T, V)
    return grids
