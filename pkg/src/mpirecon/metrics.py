"""Image quality measures and their shift-maximized variants.

``psnr(f, g)`` takes its peak from the *first* argument, the
reconstruction.  SSIM is evaluated globally over the whole volume with
``C1 = (0.01 R)^2``, ``C2 = (0.03 R)^2``, ``C3 = C2 / 2`` and ``R = 100``;
callers multiply normalized volumes by the delta concentration first.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import Volume3D
from .errors import DimensionError, MetricError, ParameterError

SSIM_R = 100.0
INTERPOLATION = "trilinear"


def _arr(x):
    if isinstance(x, Volume3D):
        return x.array
    return np.asarray(x, dtype=np.float64)


def _pair(f, g):
    f, g = _arr(f), _arr(g)
    if f.shape != g.shape:
        raise DimensionError(f"shape mismatch {f.shape} vs {g.shape}")
    return f, g


def mse(f, g) -> float:
    f, g = _pair(f, g)
    d = f - g
    return float(np.mean(d * d))


def psnr(f, g) -> float:
    """``10 log10(max(f)^2 / MSE)``; ``inf`` when ``f == g``."""
    f, g = _pair(f, g)
    peak = float(f.max())
    if peak <= 0:
        raise MetricError("PSNR needs a reconstruction with a positive maximum")
    err = mse(f, g)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def ssim(f, g, R: float = SSIM_R) -> float:
    f, g = _pair(f, g)
    if not R > 0:
        raise ParameterError("SSIM dynamic range R must be positive")
    c1 = (0.01 * R) ** 2
    c2 = (0.03 * R) ** 2
    c3 = 0.5 * c2
    mf, mg = f.mean(), g.mean()
    sf, sg = f.std(), g.std()
    cov = np.mean((f - mf) * (g - mg))
    lum = (2 * mf * mg + c1) / (mf * mf + mg * mg + c1)
    con = (2 * sf * sg + c2) / (sf * sf + sg * sg + c2)
    struct = (cov + c3) / (sf * sg + c3)
    return float(lum * con * struct)


@dataclass(frozen=True)
class ShiftGrid:
    extent_mm: float = 3.0
    step_mm: float = 0.5

    def __post_init__(self):
        if self.extent_mm < 0 or not self.step_mm > 0:
            raise ParameterError("extent must be >= 0 and step > 0")
        count = 2 * self.extent_mm / self.step_mm
        if abs(count - round(count)) > 1e-9:
            raise ParameterError("step must divide twice the extent into an integer count")

    def offsets(self) -> np.ndarray:
        half = int(round(self.extent_mm / self.step_mm))
        return self.step_mm * np.arange(-half, half + 1)

    def shifts(self) -> list[tuple[float, float, float]]:
        """All shifts, ordered by norm, then lexicographically (the tie-break order)."""
        o = self.offsets()
        pts = list(itertools.product(o, o, o))
        pts.sort(key=lambda p: (round(p[0] ** 2 + p[1] ** 2 + p[2] ** 2, 9), p))
        return [tuple(float(c) for c in p) for p in pts]


def shift_reference(ref: Volume3D, dr_mm) -> Volume3D:
    """Trilinear resampling of ``ref`` translated by ``dr_mm``:
    ``out(x) = ref(x - dr)``, zero outside the grid."""
    shift_vox = np.asarray(dr_mm, float) / np.asarray(ref.voxel_size_mm)
    if not np.any(shift_vox):
        return ref
    out = ndimage.shift(ref.array, shift_vox, order=1, mode="constant", cval=0.0)
    return Volume3D.from_array(out, ref.voxel_size_mm)


def _shift_max(u, ref, grid, score):
    if u.dims != ref.dims:
        raise DimensionError(f"shape mismatch {u.dims} vs {ref.dims}")
    best, best_dr = -math.inf, None
    for dr in grid.shifts():
        s = score(u, shift_reference(ref, dr))
        if s > best:
            best, best_dr = s, dr
    return best, best_dr


def psnr_max(u: Volume3D, ref: Volume3D, grid: ShiftGrid | None = None):
    """Largest PSNR over shifted references; returns ``(value, best_dr_mm)``.
    Ties go to the shift with the smallest norm, then lexicographic order."""
    return _shift_max(u, ref, grid or ShiftGrid(), psnr)


def ssim_max(u: Volume3D, ref: Volume3D, grid: ShiftGrid | None = None, R: float = SSIM_R):
    return _shift_max(u, ref, grid or ShiftGrid(), lambda a, b: ssim(a, b, R))


def shift_max_metrics(u: Volume3D, ref: Volume3D, grid: ShiftGrid | None = None, scale: float = 1.0, R: float = SSIM_R):
    """PSNR_max and SSIM_max in one pass over the shift grid.

    Both volumes are multiplied by ``scale`` (the delta concentration)
    before scoring.  Returns a dict with values and arg-max shifts.
    """
    grid = grid or ShiftGrid()
    if u.dims != ref.dims:
        raise DimensionError(f"shape mismatch {u.dims} vs {ref.dims}")
    ua = u.array * scale
    best_p, best_s = (-math.inf, None), (-math.inf, None)
    for dr in grid.shifts():
        r = shift_reference(ref, dr).array * scale
        p = psnr(ua, r)
        s = ssim(ua, r, R)
        if p > best_p[0]:
            best_p = (p, dr)
        if s > best_s[0]:
            best_s = (s, dr)
    return {
        "psnr_max": best_p[0],
        "psnr_dr": best_p[1],
        "ssim_max": best_s[0],
        "ssim_dr": best_s[1],
        "interpolation": INTERPOLATION,
    }
