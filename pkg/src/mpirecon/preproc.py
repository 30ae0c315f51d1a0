"""Frequency-band selection, background correction, whitening and rSVD
compression of a (system matrix, scan) pair."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from .core import RowMeta, ScanData, SvdFactors, SystemMatrix
from .errors import DimensionError, ParameterError, PreprocessingError

BACKGROUND_PERIOD = 19
BACKGROUND_MODES = ("none", "static", "interleaved")


@dataclass(frozen=True)
class PreprocConfig:
    band_low_hz: float = 80e3
    band_high_hz: float = 625e3
    whiten: bool = False
    rsvd_rank: int | str = "none"
    background_mode: str = "none"
    seed: int = 0

    def __post_init__(self):
        if not self.band_low_hz < self.band_high_hz:
            raise ParameterError("band_low_hz must be below band_high_hz")
        if self.background_mode not in BACKGROUND_MODES:
            raise ParameterError(f"background_mode must be one of {BACKGROUND_MODES}")
        if isinstance(self.rsvd_rank, str):
            if self.rsvd_rank not in ("full", "none"):
                raise ParameterError("rsvd_rank must be an integer, 'full' or 'none'")
        elif int(self.rsvd_rank) < 1:
            raise ParameterError("rsvd_rank must be >= 1")


@dataclass(frozen=True, eq=False)
class WhiteningMatrix:
    """Diagonal of W: one inverse background standard deviation per row."""

    inv_sigma: np.ndarray

    def __post_init__(self):
        inv = np.array(self.inv_sigma, dtype=np.float64)
        if inv.ndim != 1 or not np.all(np.isfinite(inv)) or np.any(inv <= 0):
            raise ParameterError("inv_sigma must be a vector of finite positive reals")
        inv.flags.writeable = False
        object.__setattr__(self, "inv_sigma", inv)

    @classmethod
    def identity(cls, m: int) -> "WhiteningMatrix":
        return cls(np.ones(m))


def _check_pair(a: SystemMatrix, f: ScanData):
    if a.rows != f.rows:
        raise DimensionError(f"matrix has {a.rows} rows, scan has {f.rows}")


def select_band(a: SystemMatrix, f: ScanData, cfg: PreprocConfig):
    """Keep rows whose frequency lies in ``[band_low_hz, band_high_hz)``."""
    _check_pair(a, f)
    freq = a.row_meta.frequency_hz
    keep = np.flatnonzero((freq >= cfg.band_low_hz) & (freq < cfg.band_high_hz))
    if keep.size == 0:
        raise PreprocessingError(
            f"no rows in [{cfg.band_low_hz:g}, {cfg.band_high_hz:g}) Hz; "
            f"frequencies span {freq.min():g}-{freq.max():g} Hz"
        )
    return replace(a, entries=a.entries[keep], row_meta=a.row_meta.take(keep)), f.take(keep)


def _interleaved_weights(bg_times, row_times):
    """``(M, B)`` convex weights over the backgrounds bracketing each row time."""
    order = np.argsort(bg_times, kind="stable")
    t = bg_times[order]
    w = np.zeros((row_times.size, t.size))
    if t.size == 1:
        w[:, 0] = 1.0
    else:
        j = np.clip(np.searchsorted(t, row_times, side="right") - 1, 0, t.size - 2)
        span = t[j + 1] - t[j]
        frac = np.clip((row_times - t[j]) / np.where(span > 0, span, 1.0), 0.0, 1.0)
        rows = np.arange(row_times.size)
        w[rows, j] = 1.0 - frac
        w[rows, j + 1] += frac
    out = np.empty_like(w)
    out[:, order] = w
    return out


def background_correct(f: ScanData, mode: str = "static") -> ScanData:
    """Subtract the background estimate from a scan.

    ``static`` subtracts the mean background.  ``interleaved`` subtracts, per
    row, the convex combination of the two backgrounds bracketing the row's
    acquisition time (linear in time).  Without timestamps the backgrounds
    are placed every ``BACKGROUND_PERIOD`` positions and rows at their index.
    The returned scan carries the background residuals.
    """
    if mode not in BACKGROUND_MODES:
        raise ParameterError(f"mode must be one of {BACKGROUND_MODES}")
    if mode == "none":
        return f
    bg = f.background_scans
    if bg.shape[0] == 0:
        raise PreprocessingError(f"background mode {mode!r} needs at least one background scan")
    if mode == "static":
        estimate = bg.mean(axis=0)
    else:
        bt = f.background_times
        if bt is None:
            bt = BACKGROUND_PERIOD * np.arange(bg.shape[0], dtype=float)
        rt = f.row_times if f.row_times is not None else np.arange(f.rows, dtype=float)
        w = _interleaved_weights(np.asarray(bt, float), np.asarray(rt, float))
        estimate = np.einsum("mb,bm->m", w, bg)
    return ScanData(
        f.values - estimate, bg - estimate, f.n_repetitions, f.background_times, f.row_times
    )


def estimate_whitening(backgrounds) -> WhiteningMatrix:
    """Inverse per-row sample standard deviation of repeated background scans.

    Rows with (near) zero spread are floored at ``1e-12 * max(std)``.
    """
    bg = np.asarray(backgrounds, dtype=np.float64)
    if bg.ndim != 2 or bg.shape[0] < 2:
        raise PreprocessingError("whitening needs at least two background scans")
    std = bg.std(axis=0, ddof=1)
    floor = 1e-12 * std.max() if std.max() > 0 else 1e-12
    return WhiteningMatrix(1.0 / np.maximum(std, floor))


def apply_whitening(w: WhiteningMatrix, a: SystemMatrix, f: ScanData):
    """Scale row ``i`` of A, f and the backgrounds by ``inv_sigma[i]``."""
    _check_pair(a, f)
    if w.inv_sigma.size != a.rows:
        raise DimensionError(f"whitening has {w.inv_sigma.size} entries, matrix has {a.rows} rows")
    s = w.inv_sigma
    wa = replace(a, entries=a.entries * s[:, None])
    wf = ScanData(f.values * s, f.background_scans * s, f.n_repetitions, f.background_times, f.row_times)
    return wa, wf


def randomized_svd(mat, k: int, oversampling: int = 10, power_iterations: int = 2, seed: int = 0):
    """Rank-``k`` randomized SVD with a Gaussian test matrix and QR-stabilized
    power iterations.  Returns ``(U, s, Vt)``."""
    mat = np.asarray(mat, dtype=np.float64)
    m, n = mat.shape
    if not 1 <= k <= min(m, n):
        raise ParameterError(f"rank {k} outside [1, {min(m, n)}]")
    ell = min(k + oversampling, min(m, n))
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(mat @ rng.standard_normal((n, ell)))
    for _ in range(power_iterations):
        q, _ = np.linalg.qr(mat.T @ q)
        q, _ = np.linalg.qr(mat @ q)
    ub, s, vt = np.linalg.svd(q.T @ mat, full_matrices=False)
    return (q @ ub)[:, :k], s[:k], vt[:k]


def compress_rsvd(a: SystemMatrix, f: ScanData, k: int, seed: int = 0):
    """Project (A, f) onto the leading ``k`` left singular vectors.

    Returns ``(U_k^T A, U_k^T f, SvdFactors)``; the reduced rows carry
    component-index metadata.  Singular values below ``1e-300`` (exact rank
    deficiency) are dropped, so the stored rank can be smaller than ``k``.
    """
    _check_pair(a, f)
    if not 1 <= k <= min(a.rows, a.cols):
        raise ParameterError(f"rank {k} outside [1, {min(a.rows, a.cols)}]")
    u, s, vt = randomized_svd(a.entries, k, seed=seed)
    keep = s > 1e-300
    u, s, vt = u[:, keep], s[keep], vt[keep]
    factors = SvdFactors(u, s, vt.T)
    reduced = replace(a, entries=u.T @ a.entries, row_meta=RowMeta.components(s.size))
    bg = f.background_scans @ u if f.background_scans.shape[0] else np.zeros((0, s.size))
    return reduced, ScanData(u.T @ f.values, bg, f.n_repetitions), factors


def preprocess(a: SystemMatrix, f: ScanData, cfg: PreprocConfig):
    """Run the configured chain: band -> background -> whitening -> rSVD.

    Returns ``(A', f', SvdFactors | None, provenance)``.
    """
    steps: list[dict[str, Any]] = []
    a, f = select_band(a, f, cfg)
    steps.append({"step": "select_band", "low_hz": cfg.band_low_hz, "high_hz": cfg.band_high_hz, "rows": a.rows})
    if cfg.background_mode != "none":
        f = background_correct(f, cfg.background_mode)
        steps.append({"step": "background_correct", "mode": cfg.background_mode})
    if cfg.whiten:
        w = estimate_whitening(f.background_scans)
        a, f = apply_whitening(w, a, f)
        steps.append({"step": "whiten", "n_backgrounds": int(f.background_scans.shape[0])})
    svd = None
    if cfg.rsvd_rank != "none":
        k = min(a.rows, a.cols) if cfg.rsvd_rank == "full" else int(cfg.rsvd_rank)
        a, f, svd = compress_rsvd(a, f, k, cfg.seed)
        steps.append({"step": "rsvd", "rank": svd.rank, "oversampling": 10, "power_iterations": 2, "seed": cfg.seed})
    return a, f, svd, {"steps": steps, "rows": a.rows, "cols": a.cols}
