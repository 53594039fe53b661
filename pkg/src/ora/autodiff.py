"""Small reverse-mode autodiff over dense float64 arrays of rank <= 3.

Operations are recorded onto the innermost active :class:`Tape`.  Outside a
tape nothing is recorded, which is how inference runs.

    with Tape() as tape:
        loss = mean(log_softmax(x @ w))
    tape.backward(loss)      # fills w.grad
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_RANK = 3


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Records operations in execution (hence topological) order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss) through ``tape``; returns and accumulates leaf grads."""
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.is_leaf:
                leaves[key] = inp
    out: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, data: np.ndarray, inputs: Sequence[Tensor], bwd) -> Tensor:
    if data.ndim > MAX_RANK:
        raise ShapeError(f"{op}: result rank {data.ndim} exceeds {MAX_RANK}")
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite output")
    out = Tensor(data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        _ACTIVE[-1].nodes.append(_Node(op, tuple(inputs), out, bwd))
    return out


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    """(n,k)@(k,m), (B,n,k)@(k,m) or (B,n,k)@(B,k,m)."""
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    ok = (
        A.ndim in (2, 3)
        and B.ndim in (2, 3)
        and A.shape[-1] == B.shape[-2]
        and not (A.ndim == 2 and B.ndim == 3)
        and not (A.ndim == 3 and B.ndim == 3 and A.shape[0] != B.shape[0])
    )
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {A.shape} and {B.shape}")

    def bwd(g):
        ga = g @ _swap(B)
        if A.ndim == 3 and B.ndim == 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _swap(A) @ g
        return ga, gb

    return _finish("matmul", A @ B, (a, b), bwd)


def _broadcast_check(op: str, A: np.ndarray, B: np.ndarray) -> bool:
    """True when B is a row vector added along the last axis of A."""
    if A.shape == B.shape:
        return False
    if B.ndim == 0:
        return True
    if B.ndim == 1 and A.ndim >= 1 and B.shape[0] == A.shape[-1]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {A.shape} and {B.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    A, B = a.data, b.data
    _broadcast_check("add", A, B)

    def bwd(g):
        return g, _reduce_to(g, B.shape)

    return _finish("add", A + B, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    A, B = a.data, b.data
    _broadcast_check("multiply", A, B)

    def bwd(g):
        return g * B, _reduce_to(g * A, B.shape)

    return _finish("multiply", A * B, (a, b), bwd)


def gather_rows(x, index) -> Tensor:
    """Select rows ``x[index]`` along the first axis."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-d, got shape {idx.shape}")
    X = x.data
    if X.ndim == 0 or (idx.size and (idx.min() < 0 or idx.max() >= X.shape[0])):
        raise ShapeError(f"gather_rows: index out of range for shape {X.shape}")

    def bwd(g):
        gx = np.zeros_like(X)
        np.add.at(gx, idx, g)
        return (gx,)

    return _finish("gather_rows", X[idx], (x,), bwd)


def softmax(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", s, (x,), bwd)


def log_softmax(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _finish("log_softmax", out, (x,), bwd)


def log(x) -> Tensor:
    x = _as_tensor(x)
    X = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(X)

    def bwd(g):
        return (g / X,)

    return _finish("log", out, (x,), bwd)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _finish("exp", out, (x,), bwd)


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    X = x.data

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, X.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), X.shape).copy(),)

    return _finish("sum", np.asarray(X.sum(axis=axis)), (x,), bwd)


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = _as_tensor(x)
    X = x.data
    X2 = X * X
    t = np.tanh(_GELU_C * X * (1.0 + 0.044715 * X2))
    out = 0.5 * X * (1.0 + t)

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * X2)
        d = 0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * d_inner
        return (g * d,)

    return _finish("gelu", out, (x,), bwd)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    x = _as_tensor(x)
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _finish("layer_norm", y, (x,), bwd)


def masked_fill(x, mask, value: float) -> Tensor:
    x = _as_tensor(x)
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.data.shape:
        raise ShapeError(f"masked_fill: mask shape {m.shape} != tensor shape {x.shape}")
    out = np.where(m, value, x.data)

    def bwd(g):
        return (np.where(m, 0.0, g),)

    return _finish("masked_fill", out, (x,), bwd)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as err:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from err

    def bwd(g):
        return (g.reshape(old),)

    return _finish("reshape", out, (x,), bwd)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"transpose: needs rank >= 2, got {x.shape}")

    def bwd(g):
        return (_swap(g),)

    return _finish("transpose", _swap(x.data).copy(), (x,), bwd)


# ---------------------------------------------------------------------------
# initialisation and optimisation


def seed_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def param_init(
    shape: Sequence[int],
    scale: float | None = None,
    rng: np.random.Generator | None = None,
    name: str | None = None,
) -> Tensor:
    """Uniform in [-scale, scale]; scale defaults to 1/sqrt(fan_in)."""
    shape = tuple(int(s) for s in shape)
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else 1
        scale = 1.0 / np.sqrt(fan_in)
    rng = rng if rng is not None else np.random.default_rng(0)
    data = rng.uniform(-1.0, 1.0, size=shape) * scale
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError("adam_step: params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("adam_step: non-finite gradient")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        if lr != 0.0:
            p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"ORACKPT\0"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, params: dict[str, Tensor | np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name in sorted(params):
        arr = params[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        out[name] = arr.astype(np.float64)
    return out
