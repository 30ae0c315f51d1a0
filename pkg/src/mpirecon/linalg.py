"""Numerical kernels shared by the solvers."""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .core import SvdFactors, SystemMatrix
from .errors import DimensionError, ParameterError


SUBPROBLEM_METHODS = ("cg", "eig")


@dataclass(frozen=True)
class CgConfig:
    """Settings for the ``(A^T A + mu I) x = b`` subproblems.

    ``method="cg"`` runs conjugate gradients; ``method="eig"`` solves exactly
    through an eigendecomposition of the Gram matrix, computed once per
    matrix and cached.  The latter pays off for small N and many solves.
    ``warm_start`` lets iterative solvers start CG from their previous
    subproblem solution instead of zero; off so that runs do not depend on
    the iteration history.
    """

    tol: float = 1e-12
    max_iter: int = 10000
    method: str = "cg"
    warm_start: bool = False

    def __post_init__(self):
        if self.method not in SUBPROBLEM_METHODS:
            raise ParameterError(f"method must be one of {SUBPROBLEM_METHODS}")
        if not self.tol > 0:
            raise ParameterError("CG tolerance must be positive")
        if self.max_iter < 1:
            raise ParameterError("CG max_iter must be >= 1")


def as_matrix(a) -> np.ndarray:
    if isinstance(a, SystemMatrix):
        return a.entries
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D operator, got shape {a.shape}")
    return a


class NormalOperator:
    """Applies ``x -> A^T A x``.

    The Gram matrix is formed once when A is tall (``M >= 4 N``); otherwise
    each apply costs one product with A and one with A^T.
    """

    def __init__(self, a, materialize: bool | None = None):
        self.a = as_matrix(a)
        m, n = self.a.shape
        if materialize is None:
            materialize = m >= 4 * n
        self.gram = self.a.T @ self.a if materialize else None

    @property
    def n(self) -> int:
        return self.a.shape[1]

    def eig(self):
        """``(w, Q)`` with ``A^T A = Q diag(w) Q^T``, ``w >= 0``."""
        return gram_eig(self.a)

    def __call__(self, x):
        if self.gram is not None:
            return self.gram @ x
        return self.a.T @ (self.a @ x)


def cg_normal(a, rhs, mu: float, cfg: CgConfig | None = None, op: NormalOperator | None = None, x0=None):
    """Solve ``(A^T A + mu I) x = rhs`` by conjugate gradients from ``x0``
    (zero by default).

    Returns ``(x, iterations)``.  Stops once the residual falls below
    ``cfg.tol * ||rhs||`` or after ``cfg.max_iter`` iterations.  Pass a
    prebuilt :class:`NormalOperator` to reuse a Gram matrix across calls.
    """
    if mu < 0:
        raise ParameterError(f"mu must be nonnegative, got {mu}")
    cfg = cfg or CgConfig()
    op = op if op is not None else NormalOperator(a)
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != (op.n,):
        raise DimensionError(f"rhs has shape {rhs.shape}, operator has {op.n} columns")

    if x0 is None:
        x = np.zeros_like(rhs)
        r = rhs.copy()
    else:
        x = np.array(x0, dtype=np.float64)
        if x.shape != rhs.shape:
            raise DimensionError(f"x0 has shape {x.shape}, expected {rhs.shape}")
        r = rhs - (op(x) + mu * x)
    target = cfg.tol * np.linalg.norm(rhs)
    rr = r @ r
    if np.sqrt(rr) <= target:
        return x, 0
    p = r.copy()
    for it in range(1, cfg.max_iter + 1):
        q = op(p) + mu * p
        pq = p @ q
        if pq <= 0:
            # singular direction (A p = 0 with mu = 0); nothing left to reduce
            return x, it
        step = rr / pq
        x += step * p
        r -= step * q
        rr_new = r @ r
        if np.sqrt(rr_new) <= target:
            return x, it
        p *= rr_new / rr
        p += r
        rr = rr_new
    return x, cfg.max_iter


_EIG_CACHE: OrderedDict = OrderedDict()
_EIG_CACHE_SIZE = 8


def gram_eig(a):
    """Cached eigendecomposition of ``A^T A`` keyed on the matrix contents."""
    mat = np.ascontiguousarray(as_matrix(a))
    key = (mat.shape, hashlib.sha1(mat.tobytes()).hexdigest())
    hit = _EIG_CACHE.get(key)
    if hit is not None:
        _EIG_CACHE.move_to_end(key)
        return hit
    w, q = np.linalg.eigh(mat.T @ mat)
    hit = (np.maximum(w, 0.0), q)
    _EIG_CACHE[key] = hit
    if len(_EIG_CACHE) > _EIG_CACHE_SIZE:
        _EIG_CACHE.popitem(last=False)
    return hit


def normal_solve(a, rhs, mu: float, cfg: CgConfig | None = None, op: NormalOperator | None = None, x0=None):
    """Solve ``(A^T A + mu I) x = rhs`` with the method chosen in ``cfg``.

    Returns ``(x, iterations)``; the eigen route reports 0 iterations and
    ignores ``x0``, which CG only uses when ``cfg.warm_start`` is set.
    """
    cfg = cfg or CgConfig()
    if cfg.method == "cg":
        return cg_normal(a, rhs, mu, cfg, op, x0 if cfg.warm_start else None)
    if not mu > 0:
        raise ParameterError(f"the eigen route needs mu > 0, got {mu}")
    w, q = op.eig() if op is not None else gram_eig(a)
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != (q.shape[0],):
        raise DimensionError(f"rhs has shape {rhs.shape}, operator has {q.shape[0]} columns")
    return q @ ((q.T @ rhs) / (w + mu)), 0


def soft_threshold(u, t: float):
    """Proximal map of ``t * ||.||_1``."""
    if t < 0:
        raise ParameterError(f"threshold must be nonnegative, got {t}")
    u = np.asarray(u, dtype=np.float64)
    return np.sign(u) * np.maximum(np.abs(u) - t, 0.0)


def project_nonneg(u):
    return np.maximum(np.asarray(u, dtype=np.float64), 0.0)


def project_ball(x, center, eps: float):
    """Euclidean projection of ``x`` onto the ball of radius ``eps`` around ``center``."""
    if eps < 0:
        raise ParameterError(f"ball radius must be nonnegative, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if x.shape != center.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {center.shape}")
    diff = x - center
    dist = np.linalg.norm(diff)
    if dist <= eps:
        return x.copy()
    return center + (eps / dist) * diff


def tikhonov_direct(svd: SvdFactors, f_reduced, lam: float):
    """``V diag(s / (s^2 + lam)) f_reduced`` for data already in the U frame."""
    if not lam > 0:
        raise ParameterError(f"lambda must be positive, got {lam}")
    f_reduced = np.asarray(f_reduced, dtype=np.float64)
    if f_reduced.shape != (svd.rank,):
        raise DimensionError(f"f_reduced must have length {svd.rank}, got {f_reduced.shape}")
    s = svd.sigma_k
    return svd.v_k @ (s / (s * s + lam) * f_reduced)
