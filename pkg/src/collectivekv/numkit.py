"""Small dense numeric kernel on top of numpy.

Matrices are plain 2-D ``float64`` numpy arrays. This module adds the pieces
numpy does not hand us in the exact form we need: a Jacobi SVD computed from
the Gram matrix, a Gaussian KDE with Silverman bandwidth, an Adam step with
explicit state, and a central-difference gradient checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

Matrix = np.ndarray

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_matrix(x, name: str = "matrix") -> Matrix:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")


# ---------------------------------------------------------------------------
# Random numbers

class Rng:
    """Seeded generator (PCG64) with a stable stream on every platform.

    ``spawn`` derives an independent child stream from a string key so that
    callers can hand out per-purpose generators without consuming the parent.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, key: str) -> "Rng":
        return Rng(derive_seed(self.seed, key))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(size=shape)

    def gumbel(self, shape) -> np.ndarray:
        return self._gen.gumbel(size=shape)


def derive_seed(base_seed: int, key: str) -> int:
    """Deterministic 63-bit seed from ``(base_seed, key)`` (FNV-1a)."""
    h = 0xCBF29CE484222325
    for byte in f"{int(base_seed)}/{key}".encode():
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h >> 1


# ---------------------------------------------------------------------------
# Elementwise helpers

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    """``log(sigmoid(x))`` without overflow or catastrophic cancellation."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def softplus(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def softmax_rows(x: Matrix) -> Matrix:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# SVD through a cyclic Jacobi eigen-solve of the Gram matrix

@dataclass
class SvdResult:
    singular_values: np.ndarray
    right_vectors: Matrix
    left_vectors: Optional[Matrix] = None
    sweeps: int = 0


def _round_robin(d: int) -> list[list[tuple[int, int]]]:
    """Tournament schedule: d-1 rounds of disjoint index pairs covering all pairs."""
    players = list(range(d)) + ([-1] if d % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        pairs = []
        for i in range(k // 2):
            a, b = players[i], players[k - 1 - i]
            if a >= 0 and b >= 0:
                pairs.append((min(a, b), max(a, b)))
        rounds.append(pairs)
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a: Matrix, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decompose a symmetric matrix with the cyclic Jacobi method.

    Rotations on disjoint pairs are applied together (parallel ordering),
    which keeps the python-level loop at ``O(d)`` numpy calls per sweep.
    Returns ``(eigenvalues, eigenvectors, sweeps)`` unsorted.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    d = a.shape[0]
    v = np.eye(d)
    norm = np.linalg.norm(a)
    if d < 2 or norm == 0.0:
        return np.diag(a).copy(), v, 0
    schedule = [
        (np.array([p for p, _ in r], dtype=np.intp), np.array([q for _, q in r], dtype=np.intp))
        for r in _round_robin(d)
    ]
    rot = np.eye(d)
    sweeps = 0
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        for sweeps in range(1, max_sweeps + 1):
            for p, q in schedule:
                apq = a[p, q]
                # tiny apq gives tau = +-inf and hence t = 0: no rotation
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
                t = np.where(np.isfinite(t), t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
                rot[p, p] = 1.0
                rot[q, q] = 1.0
                rot[p, q] = 0.0
                rot[q, p] = 0.0
            # direct sum: sum(a*a) - sum(diag**2) cancels down to ~1e-8 * norm
            off = np.linalg.norm(a - np.diag(np.diag(a)))
            if off <= tol * norm:
                break
    return np.diag(a).copy(), v, sweeps


def svd(x: Matrix, want_left: bool = False) -> SvdResult:
    """Thin SVD of a tall matrix (rows >= cols).

    Right vectors and singular values come from the Gram matrix ``x.T @ x``;
    each right vector's sign is fixed so its largest-magnitude entry is
    positive. Left vectors, when requested, are ``x @ v / sigma`` (zero
    columns where sigma vanishes).
    """
    x = as_matrix(x, "svd input")
    n, d = x.shape
    if n < d:
        raise ShapeError(f"svd needs rows >= cols, got {x.shape}")
    check_finite(x, "svd input")
    evals, evecs, sweeps = jacobi_eigh(x.T @ x)
    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    evecs = evecs[:, order]
    lead = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[lead, np.arange(d)])
    signs[signs == 0] = 1.0
    evecs = evecs * signs
    sv = np.sqrt(np.clip(evals, 0.0, None))
    left = None
    if want_left:
        xv = x @ evecs
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(sv > 0, xv / np.where(sv > 0, sv, 1.0), 0.0)
    return SvdResult(singular_values=sv, right_vectors=evecs, left_vectors=left, sweeps=sweeps)


# ---------------------------------------------------------------------------
# Kernel density estimation

def silverman_bandwidth(samples: Sequence[float]) -> float:
    """Silverman's rule of thumb, ``1.06 * std * n**(-1/5)``.

    A sample with zero spread gets a floor of ``1e-3`` on the std so the
    estimate stays a proper density.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise UsageError("automatic bandwidth needs at least 2 samples")
    std = float(np.std(x, ddof=1))
    return 1.06 * max(std, 1e-3) * x.size ** (-0.2)


def kde_density(samples: Sequence[float], grid: Sequence[float], bandwidth: float | None = None) -> np.ndarray:
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if x.size == 0:
        raise UsageError("kde_density needs at least one sample")
    check_finite(x, "kde samples")
    if bandwidth is None:
        h = silverman_bandwidth(x)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise UsageError(f"bandwidth must be positive, got {bandwidth}")
    g = np.asarray(grid, dtype=np.float64).ravel()
    z = (g[:, None] - x[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) * (_INV_SQRT_2PI / (h * x.size))


def kde_grid(samples: Sequence[float], bandwidth: float | None = None, points: int = 256):
    """Grid spanning ``[min - 4h, max + 4h]`` plus the bandwidth used."""
    x = np.asarray(samples, dtype=np.float64)
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    return np.linspace(x.min() - 4 * h, x.max() + 4 * h, points), h


# ---------------------------------------------------------------------------
# Optimizer

@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_param, state)``; the
    state is updated in place."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or state.first_moment.shape != param.shape:
        raise ShapeError(
            f"adam shapes differ: param {param.shape}, grad {grad.shape}, state {state.first_moment.shape}"
        )
    state.step_count += 1
    state.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * grad
    state.second_moment = state.beta2 * state.second_moment + (1 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1 - state.beta1 ** state.step_count)
    v_hat = state.second_moment / (1 - state.beta2 ** state.step_count)
    return param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon), state


# ---------------------------------------------------------------------------
# Gradient checking

def numeric_gradient(f: Callable[[np.ndarray], float], param: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(param, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"objective is non-finite near entry {i}")
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def check_gradient(f: Callable[[np.ndarray], float], param: np.ndarray, analytic_grad: np.ndarray,
                   step: float = 1e-5) -> float:
    """Max over entries of ``|analytic - numeric| / max(1, |numeric|)``."""
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != np.shape(param):
        raise ShapeError(f"gradient shape {analytic_grad.shape} != param shape {np.shape(param)}")
    num = numeric_gradient(f, param, step)
    if num.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic_grad - num) / np.maximum(1.0, np.abs(num))))
