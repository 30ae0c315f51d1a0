"""Reconstruction methods: Tikhonov, regularized ART, ZeroShot-(l1-)PnP with the
automatic noise-driven schedule, and the PP-MPI ADMM splitting."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import (
    DEFAULT_VOXEL_SIZE_MM,
    IterationRecord,
    ScanData,
    SolverReport,
    SvdFactors,
    SystemMatrix,
    Volume3D,
    devectorize,
)
from .denoise import DenoiserId, denoise_slicewise_3d, resolve
from .errors import DimensionError, ParameterError, ScheduleError
from .linalg import (
    CgConfig,
    NormalOperator,
    as_matrix,
    normal_solve,
    project_ball,
    soft_threshold,
    tikhonov_direct,
)


@dataclass(frozen=True)
class PnpConfig:
    """Inputs of the ZeroShot-(l1-)PnP iteration.

    ``mu0`` is both the initial penalty and the Tikhonov parameter of the
    first iterate; the l1 weight is ``alpha_ratio * mu0``.
    """

    mu0: float
    n_it: int = 7
    alpha_ratio: float = 0.005
    use_l1: bool = True
    denoiser: DenoiserId = field(default_factory=lambda: DenoiserId("tv"))
    cg: CgConfig = field(default_factory=CgConfig)
    c_rec: float | None = None

    def __post_init__(self):
        if not self.mu0 > 0:
            raise ParameterError(f"mu0 must be positive, got {self.mu0}")
        if self.n_it < 1:
            raise ParameterError("n_it must be >= 1")
        if self.alpha_ratio < 0:
            raise ParameterError("alpha_ratio must be nonnegative")
        if self.c_rec is not None and self.use_l1 and not self.alpha_ratio < self.c_rec:
            raise ParameterError(
                f"alpha_ratio {self.alpha_ratio} must stay below c_rec {self.c_rec}, "
                "otherwise the threshold zeroes the whole reconstruction"
            )

    @property
    def alpha(self) -> float:
        return self.alpha_ratio * self.mu0


@dataclass(frozen=True)
class ArtConfig:
    lambda_art: float = 0.0
    n_sweeps: int = 200
    relaxation: float = 1.0

    def __post_init__(self):
        if self.lambda_art < 0:
            raise ParameterError("lambda_art must be nonnegative")
        if self.n_sweeps < 1:
            raise ParameterError("n_sweeps must be >= 1")
        if not 0 < self.relaxation <= 2:
            raise ParameterError("relaxation must lie in (0, 2]")


@dataclass(frozen=True)
class AdmmConfig:
    """PP-MPI settings. ``sigma`` is the fixed noise level handed to the
    denoiser (the PP-MPI denoiser itself takes no noise level)."""

    eps: float
    n_it: int = 100
    denoiser: DenoiserId = field(default_factory=lambda: DenoiserId("tv"))
    sigma: float = 0.05
    cg: CgConfig = field(default_factory=CgConfig)

    def __post_init__(self):
        if self.eps < 0:
            raise ParameterError("eps must be nonnegative")
        if self.n_it < 1:
            raise ParameterError("n_it must be >= 1")
        if self.sigma < 0:
            raise ParameterError("sigma must be nonnegative")


def ball_radius_from_snr_db(f, snr_db: float) -> float:
    """Data-ball radius ``sqrt(||f||^2 * 10^(-snr_db / 10))``."""
    f = _values(f)
    return float(np.sqrt(f @ f * 10.0 ** (-snr_db / 10.0)))


def estimate_noise_level(u) -> float:
    """Square root of the population variance of the entries of ``u``."""
    u = np.ravel(np.asarray(u.data if isinstance(u, Volume3D) else u, dtype=np.float64))
    if u.size < 2:
        raise DimensionError("need at least two entries to estimate a noise level")
    return float(np.sqrt(np.var(u)))


# --------------------------------------------------------------------------
# helpers


def _values(f) -> np.ndarray:
    return np.asarray(f.values if isinstance(f, ScanData) else f, dtype=np.float64)


def _grid(a, dims, voxel_size_mm):
    n = as_matrix(a).shape[1]
    if dims is None and isinstance(a, SystemMatrix):
        dims = a.dims
    if dims is None:
        side = round(n ** (1 / 3))
        if side**3 != n:
            raise DimensionError(f"cannot infer a voxel grid for {n} columns; pass dims")
        dims = (side, side, side)
    if dims[0] * dims[1] * dims[2] != n:
        raise DimensionError(f"dims {dims} do not match {n} columns")
    return tuple(dims), tuple(voxel_size_mm or DEFAULT_VOXEL_SIZE_MM)


def _operands(a, f):
    mat = as_matrix(a)
    fv = _values(f)
    if fv.shape != (mat.shape[0],):
        raise DimensionError(f"data length {fv.size} does not match {mat.shape[0]} matrix rows")
    return mat, fv


def _ms(t0):
    return 1e3 * (time.perf_counter() - t0)


# --------------------------------------------------------------------------
# Tikhonov


def solve_tikhonov(
    a,
    f,
    lam: float,
    svd: SvdFactors | None = None,
    cg: CgConfig | None = None,
    dims=None,
    voxel_size_mm=None,
) -> SolverReport:
    """Minimize ``||f - A u||^2 + lam ||u||^2``.

    With ``svd`` the solve is direct; ``f`` may then be given either in the
    original row frame or already reduced to the U frame.
    """
    if not lam > 0:
        raise ParameterError(f"lambda must be positive, got {lam}")
    mat, fv = _operands(a, f)
    dims, vs = _grid(a, dims, voxel_size_mm)
    t0 = time.perf_counter()
    if svd is not None:
        if fv.size == svd.rank:
            f_red = fv
        elif fv.size == svd.u_k.shape[0]:
            f_red = svd.u_k.T @ fv
        else:
            raise DimensionError("data matches neither the reduced nor the original frame")
        u, cg_its = tikhonov_direct(svd, f_red, lam), 0
    else:
        u, cg_its = normal_solve(mat, mat.T @ fv, lam, cg)
    rec = IterationRecord(
        k=1,
        mu_k=lam,
        data_residual=float(np.linalg.norm(mat @ u - fv)),
        cg_iterations=cg_its,
        wall_ms=_ms(t0),
    )
    params = {"lambda": lam, "route": "svd" if svd is not None else "cg"}
    return SolverReport(devectorize(u, dims, vs), [rec], "tikhonov", params)


# --------------------------------------------------------------------------
# ART


@njit(cache=True)
def _art_sweep(mat, f, u, lam, relax, norms2):
    for i in range(mat.shape[0]):
        if norms2[i] == 0.0:
            continue
        row = mat[i]
        c = relax * (f[i] - row @ u) / (norms2[i] + lam)
        u += c * row


def solve_art(a, f, cfg: ArtConfig, dims=None, voxel_size_mm=None, keep_iterates=False) -> SolverReport:
    """Regularized Kaczmarz sweeps, rows in ascending order, clipped to the
    nonnegative orthant after every full sweep."""
    mat, fv = _operands(a, f)
    dims, vs = _grid(a, dims, voxel_size_mm)
    mat = np.ascontiguousarray(mat)
    norms2 = np.einsum("ij,ij->i", mat, mat)
    skipped = int(np.count_nonzero(norms2 == 0))
    u = np.zeros(mat.shape[1])
    trace, snaps = [], [] if keep_iterates else None
    for sweep in range(1, cfg.n_sweeps + 1):
        t0 = time.perf_counter()
        _art_sweep(mat, fv, u, float(cfg.lambda_art), float(cfg.relaxation), norms2)
        np.maximum(u, 0.0, out=u)
        trace.append(
            IterationRecord(k=sweep, data_residual=float(np.linalg.norm(mat @ u - fv)), wall_ms=_ms(t0))
        )
        if keep_iterates:
            snaps.append(u.copy())
    params = {
        "lambda_art": cfg.lambda_art,
        "n_sweeps": cfg.n_sweeps,
        "relaxation": cfg.relaxation,
        "skipped_rows": skipped,
    }
    return SolverReport(devectorize(u, dims, vs), trace, "art", params, iterates=snaps)


# --------------------------------------------------------------------------
# ZeroShot-(l1-)PnP


def solve_pnp(a, f, cfg: PnpConfig, dims=None, voxel_size_mm=None, keep_iterates=False) -> SolverReport:
    """Half-quadratic splitting with a plug-in denoiser and the automatic
    penalty schedule ``mu_{k+1} = lam / sigma_{k+1}^2``.

    ``sigma_{k+1}`` is the standard deviation of the data iterate ``u1``;
    ``lam = mu0 * sigma_1^2`` is fixed after the first iteration.  With
    ``use_l1`` the l1 branch (soft threshold ``alpha / mu_k``) is averaged
    into the data step, otherwise the two-variable scheme runs.

    Trace record ``k`` stores ``mu_k = lam / sigma_k^2`` together with
    ``sigma_k``, so ``mu_k * sigma_k^2 == lam`` holds per record; the penalty
    used inside iteration ``k`` is kept as ``mu_used``.  The returned
    reconstruction is the denoised iterate ``u2``; ``auxiliary['u1']`` holds
    the last data iterate.
    """
    mat, fv = _operands(a, f)
    dims, vs = _grid(a, dims, voxel_size_mm)
    op = NormalOperator(mat)
    atf = mat.T @ fv
    n = mat.shape[1]
    u1 = None
    u2 = np.zeros(n)
    u3 = np.zeros(n)
    mu = cfg.mu0
    lam = None
    alpha = cfg.alpha
    trace, snaps = [], [] if keep_iterates else None

    den = resolve(cfg.denoiser)
    try:
        for k in range(cfg.n_it):
            t0 = time.perf_counter()
            prior = 0.5 * (u2 + u3) if cfg.use_l1 else u2
            u1, cg_its = normal_solve(mat, atf + mu * prior, mu, cfg.cg, op, u1)
            sigma = estimate_noise_level(u1)
            if sigma == 0.0:
                raise ScheduleError(
                    f"iterate {k + 1} is constant (variance 0); the penalty update "
                    f"lam / sigma^2 is undefined (mu_used={mu:g})"
                )
            if k == 0:
                lam = cfg.mu0 * sigma * sigma
            u2 = denoise_slicewise_3d(den, u1.reshape(dims, order="F"), sigma).ravel(order="F")
            extra = {"mu_used": mu}
            if cfg.use_l1:
                u3 = soft_threshold(u1, alpha / mu)
                extra["threshold"] = alpha / mu
                extra["u3_max_abs"] = float(np.max(np.abs(u3)))
            mu = lam / (sigma * sigma)
            trace.append(
                IterationRecord(
                    k=k + 1,
                    mu_k=mu,
                    sigma_k=sigma,
                    data_residual=float(np.linalg.norm(mat @ u1 - fv)),
                    cg_iterations=cg_its,
                    wall_ms=_ms(t0),
                    extra=extra,
                )
            )
            if keep_iterates:
                snaps.append(u2.copy())
    finally:
        if den is not cfg.denoiser:
            den.close()

    params = {
        "mu0": cfg.mu0,
        "n_it": cfg.n_it,
        "alpha_ratio": cfg.alpha_ratio,
        "alpha": alpha,
        "use_l1": cfg.use_l1,
        "denoiser": cfg.denoiser.kind,
        "lambda": lam,
    }
    return SolverReport(
        devectorize(u2, dims, vs),
        trace,
        "pnp-l1" if cfg.use_l1 else "pnp",
        params,
        auxiliary={"u1": devectorize(u1, dims, vs)},
        iterates=snaps,
    )


# --------------------------------------------------------------------------
# PP-MPI ADMM


def solve_admm_ppmpi(a, f, cfg: AdmmConfig, dims=None, voxel_size_mm=None, keep_iterates=False) -> SolverReport:
    """ADMM with the data term as the constraint ``||A u - f|| <= eps``.

    Per iteration::

        u  = (I + A^T A)^{-1} (A^T (z0 + d0) + z1 + d1)
        z1 = D(u - d1);            d1 += z1 - u
        z0 = P_ball(A u - d0);     d0 += z0 - A u

    with all auxiliaries starting at zero.
    """
    mat, fv = _operands(a, f)
    dims, vs = _grid(a, dims, voxel_size_mm)
    op = NormalOperator(mat)
    m, n = mat.shape
    z0, d0 = np.zeros(m), np.zeros(m)
    z1, d1 = np.zeros(n), np.zeros(n)
    u = np.zeros(n)
    trace, snaps = [], [] if keep_iterates else None
    den = resolve(cfg.denoiser)
    try:
        for it in range(1, cfg.n_it + 1):
            t0 = time.perf_counter()
            u, cg_its = normal_solve(mat, mat.T @ (z0 + d0) + z1 + d1, 1.0, cfg.cg, op, u)
            z1 = denoise_slicewise_3d(den, (u - d1).reshape(dims, order="F"), cfg.sigma).ravel(order="F")
            d1 = d1 + z1 - u
            au = mat @ u
            z0 = project_ball(au - d0, fv, cfg.eps)
            d0 = d0 + z0 - au
            trace.append(
                IterationRecord(
                    k=it,
                    data_residual=float(np.linalg.norm(au - fv)),
                    cg_iterations=cg_its,
                    wall_ms=_ms(t0),
                    extra={"ball_distance": float(np.linalg.norm(z0 - fv))},
                )
            )
            if keep_iterates:
                snaps.append(u.copy())
    finally:
        if den is not cfg.denoiser:
            den.close()
    params = {"eps": cfg.eps, "n_it": cfg.n_it, "denoiser": cfg.denoiser.kind, "sigma": cfg.sigma}
    return SolverReport(devectorize(u, dims, vs), trace, "ppmpi", params, iterates=snaps)
