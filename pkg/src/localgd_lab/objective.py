"""Logistic objective F(w) = (1/M) sum_m F_m(w) and its derivatives.

Every function takes a :class:`Scope` selecting the whole objective, one
client's objective F_m, or a single point's loss. Evaluation goes through
the compiled kernels, which use overflow-free two-branch forms of
log(1 + e^{-z}) and 1 / (1 + e^z).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as kern
from .dataset import Dataset

__all__ = [
    "Scope",
    "GLOBAL",
    "loss",
    "grad",
    "hessian_spectral_norm",
    "grad_potential",
    "all_correct",
    "point_losses",
]


@dataclass(frozen=True)
class Scope:
    """``Scope()`` is the global objective; ``Scope(m)`` client m; ``Scope(m, i)`` one point."""

    client: int | None = None
    point: int | None = None

    def __post_init__(self):
        if self.point is not None and self.client is None:
            raise ValueError("a point scope needs a client index")

    def select(self, data: Dataset) -> np.ndarray:
        X = data.points
        if self.client is None:
            return X
        if not 0 <= self.client < data.M:
            raise IndexError(f"client {self.client} out of range for M={data.M}")
        if self.point is None:
            return X[self.client : self.client + 1]
        if not 0 <= self.point < data.n:
            raise IndexError(f"point {self.point} out of range for n={data.n}")
        return X[self.client : self.client + 1, self.point : self.point + 1]


GLOBAL = Scope()


def _weights(w, data: Dataset) -> np.ndarray:
    w = np.ascontiguousarray(w, dtype=np.float64)
    if w.shape != (data.d,):
        raise ValueError(f"weights have shape {w.shape}, data has dimension {data.d}")
    return w


def loss(w, data: Dataset, scope: Scope = GLOBAL) -> float:
    return kern.total_loss(_weights(w, data), scope.select(data))


def grad(w, data: Dataset, scope: Scope = GLOBAL) -> np.ndarray:
    """-(1/|scope|) sum x / (1 + e^{<w, x>})."""
    out = np.empty(data.d)
    kern.total_grad_into(_weights(w, data), scope.select(data), out)
    return out


def hessian_spectral_norm(w, data: Dataset, scope: Scope = GLOBAL, tol: float = 1e-8,
                          max_iter: int = 10_000, full_output: bool = False):
    """Largest eigenvalue of the Hessian via power iteration on Hessian-vector products.

    The start vector is e_0 + 1e-3 * ones, normalized. Iteration stops when the
    eigen-residual drops below ``tol`` relative to the estimate. With
    ``full_output`` returns ``(value, converged, iterations)``; a run that hits
    ``max_iter`` still returns its last Rayleigh quotient.
    """
    w = _weights(w, data)
    v0 = np.full(data.d, 1e-3)
    v0[0] += 1.0
    lam, converged, its = kern.power_iteration(w, scope.select(data), v0, tol, max_iter)
    if full_output:
        return lam, bool(converged), int(its)
    return lam


def grad_potential(w, data: Dataset, scope: Scope = GLOBAL) -> float:
    """G(w): mean of |l'(<w, x>)| = 1 / (1 + e^{<w, x>})."""
    return kern.total_potential(_weights(w, data), scope.select(data))


def all_correct(w, data: Dataset) -> bool:
    w = _weights(w, data)
    return bool(np.all(data.flat() @ w >= 0.0))


def point_losses(w, data: Dataset) -> np.ndarray:
    """Per-point losses l(<w, x_i^m>) as an (M, n) array."""
    w = _weights(w, data)
    X = data.points
    return np.array([[kern.logistic_loss(kern.dot(w, X[m, i])) for i in range(data.n)]
                     for m in range(data.M)])
