"""Linear probes on frozen embeddings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .autodiff import Tensor
from .discretize import quantile_edges
from .events import PatientRecord
from .model import CellGroup, EventTransformer, HeadOutput
from .objectives import TargetBatch, tpp_loss

DEFAULT_L2 = 1e-4


class ProbeError(ValueError):
    pass


def extract_embeddings(backbone: EventTransformer, records: Sequence[PatientRecord],
                       prediction_times: Sequence[float], batch_size: int = 64) -> np.ndarray:
    """Encoder output at the last event with time <= the prediction time."""
    histories = []
    for rec, t in zip(records, prediction_times):
        h = rec.history(t)
        if not h.events:
            raise ProbeError(f"{rec.patient_id}: prediction time {t!r} precedes every event")
        histories.append(h)
    D = backbone.config.d_model
    out = np.empty((len(histories), D))
    # similar lengths together keep padding small
    order = np.argsort([len(h.events) for h in histories], kind="stable")
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        E, batch = backbone.forward([histories[i] for i in idx])
        last = np.minimum(batch.lengths, E.shape[1]) - 1
        out[idx] = E.data[np.arange(len(idx)), last]
    return out


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias


@dataclass
class LogisticModel(LinearModel):
    iterations: int = 0
    grad_norm: float = 0.0

    def predict_proba(self, X) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.predict(X)))


def fit_linear(X, y, l2: float = DEFAULT_L2) -> LinearModel:
    """Ridge regression with an unpenalized intercept (normal equations)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ProbeError("no examples")
    xm, ym = X.mean(axis=0), y.mean()
    Xc = X - xm
    A = Xc.T @ Xc + l2 * np.eye(X.shape[1])
    if l2 == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise ProbeError("normal matrix is singular; use l2 > 0")
    w = np.linalg.solve(A, Xc.T @ (y - ym))
    return LinearModel(w, float(ym - xm @ w))


def fit_logistic(X, y, l2: float = DEFAULT_L2, max_iter: int = 100, tol: float = 1e-6) -> LogisticModel:
    """Regularized logistic regression by Newton descent until ||grad|| <= tol."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.unique(y).size < 2:
        raise ProbeError("logistic probe needs both classes")
    n, d = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    theta = np.zeros(d + 1)

    def objective(th):
        z = Xb @ th
        return (np.logaddexp(0.0, z) - y * z).mean() + 0.5 * (reg * th * th).sum()

    it, gnorm = 0, np.inf
    for it in range(1, max_iter + 1):
        p = 1.0 / (1.0 + np.exp(-(Xb @ theta)))
        grad = Xb.T @ (p - y) / n + reg * theta
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            break
        H = (Xb * (p * (1 - p))[:, None]).T @ Xb / n + np.diag(reg) + 1e-12 * np.eye(d + 1)
        step = np.linalg.solve(H, grad)
        f0, t = objective(theta), 1.0
        while objective(theta - t * step) > f0 - 1e-4 * t * grad @ step and t > 1e-10:
            t *= 0.5
        theta = theta - t * step
    return LogisticModel(theta[:-1], float(theta[-1]), it, gnorm)


@dataclass
class SurvivalHead:
    edges: tuple[float, ...]
    weights: np.ndarray  # (d, T)
    bias: np.ndarray  # (T,)

    def cell_probs(self, X) -> np.ndarray:
        z = np.asarray(X, dtype=np.float64) @ self.weights + self.bias
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def survival(self, X) -> np.ndarray:
        """S(k) = 1 - mass through bin k, non-increasing in k."""
        cum = np.cumsum(self.cell_probs(X), axis=1)
        return np.clip(1.0 - cum, 0.0, 1.0)


def survival_targets(durations, events, edges) -> TargetBatch:
    d = np.asarray(durations, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    tb = np.searchsorted(np.asarray(edges), d, side="right")
    return TargetBatch(e[:, None], tb[:, None], np.full((d.size, 1), -1))


def fit_discrete_survival(X, durations, events, T_probe: int = 8, l2: float = DEFAULT_L2,
                          max_iter: int = 500) -> SurvivalHead:
    """Softmax over quantile time bins, fit with the censored discrete likelihood."""
    X = np.asarray(X, dtype=np.float64)
    d = np.asarray(durations, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    if T_probe < 2:
        raise ProbeError("T_probe must be >= 2")
    if not e.any():
        raise ProbeError("all examples are censored")
    if (d < 0).any():
        raise ProbeError("negative durations")
    edges = quantile_edges(d[e], T_probe)
    T = len(edges) + 1
    n, dim = X.shape
    targets = survival_targets(d, e, edges)
    # lay out as a single-code head so the pretraining loss is reused verbatim
    codes = np.zeros(1, dtype=np.intp)

    def fg(theta):
        W = Tensor(theta[: dim * T].reshape(dim, T), requires_grad=True)
        b = Tensor(theta[dim * T :], requires_grad=True)
        with ad.Tape() as tape:
            probs = ad.reshape(ad.softmax(X @ W + b), (n, 1, T))
            lb = tpp_loss(HeadOutput([CellGroup(codes, probs, 1)], T), targets)
            loss = lb.loss + ad.sum(W * W) * (0.5 * l2)
        tape.backward(loss)
        return loss.item(), np.concatenate([W.grad.reshape(-1), b.grad])

    res = minimize(fg, np.zeros(dim * T + T), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": 1e-10, "ftol": 1e-15})
    theta = res.x
    return SurvivalHead(edges, theta[: dim * T].reshape(dim, T), theta[dim * T :])
