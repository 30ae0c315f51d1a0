"""Synthetic calibration operators, phantoms and hybrid scans.

Three phantom families: ``cone`` (solid cones with random apex, axis,
opening and height), ``graph`` (4-6 vertices joined by V-1 distinct random
edges) and ``dots`` (6-9 isolated vertices with graded values).  Graph and
dot skeletons are blurred with a unit-variance Gaussian, thresholded at 10 %
of the blurred support and rescaled so the maximum equals ``beta``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import DEFAULT_VOXEL_SIZE_MM, REAL, IMAG, RowMeta, ScanData, SystemMatrix, Volume3D, vectorize
from .errors import DimensionError, ParameterError

FAMILIES = ("cone", "graph", "dots")
BLUR_SIGMA = 1.0
THRESHOLD = 0.1
BETA_RANGE = (0.5, 1.5)


def derive_seed(master_seed: int, index: int) -> int:
    """Independent 64-bit seed for item ``index`` of a seeded collection."""
    ss = np.random.SeedSequence([int(master_seed) & (2**64 - 1), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class PhantomSpec:
    family: str
    seed: int
    dims: tuple[int, int, int] = (19, 19, 19)
    beta: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown phantom family {self.family!r}; expected one of {FAMILIES}")
        if self.beta is not None and not self.beta > 0:
            raise ParameterError("beta must be positive")
        if len(self.dims) != 3 or min(self.dims) < 5:
            raise DimensionError(f"phantom grids need every dimension >= 5, got {self.dims}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))


@dataclass(frozen=True)
class Skeleton:
    """Pre-blur raster of a graph or dot phantom."""

    raster: np.ndarray
    vertices: np.ndarray
    edges: tuple[tuple[int, int], ...]
    values: np.ndarray


def _rng(spec: PhantomSpec):
    return np.random.default_rng(spec.seed)


def _random_vertices(rng, dims, count, min_sep):
    """Distinct voxel positions with Chebyshev separation >= ``min_sep``."""
    lo = np.ones(3, dtype=int)
    hi = np.array(dims) - 1
    # a box of side n holds at most ceil(n / s) points per axis at Chebyshev spacing s
    capacity = int(np.prod(-(-(hi - lo) // max(min_sep, 1))))
    if count > capacity:
        raise ParameterError(f"cannot place {count} separated vertices in {dims}")
    for _ in range(200):
        pts = []
        for _ in range(200 * count):
            p = rng.integers(lo, hi)
            if all(np.max(np.abs(p - q)) >= min_sep for q in pts):
                pts.append(p)
                if len(pts) == count:
                    return np.array(pts)
    raise ParameterError(f"cannot place {count} separated vertices in {dims}")


def rasterize_segment(raster, p, q, value=1.0):
    """Mark every voxel whose centre is within half a voxel (max-norm) of a
    densely sampled point of segment ``pq``."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    n = max(2, int(np.ceil(np.max(np.abs(q - p)) * 8)) + 1)
    pts = p + np.linspace(0.0, 1.0, n)[:, None] * (q - p)
    idx = np.clip(np.rint(pts).astype(int), 0, np.array(raster.shape) - 1)
    raster[idx[:, 0], idx[:, 1], idx[:, 2]] = value


def skeleton(spec: PhantomSpec) -> Skeleton:
    """Pre-blur vertices/edges of a graph or dot phantom (same RNG stream as
    :func:`generate_phantom`)."""
    if spec.family == "cone":
        raise ParameterError("cone phantoms have no skeleton")
    rng = _rng(spec)
    spec_beta_draw(rng, spec)
    raster = np.zeros(spec.dims)
    if spec.family == "graph":
        n_v = int(rng.integers(4, 7))
        verts = _random_vertices(rng, spec.dims, n_v, 1)
        pairs = list(itertools.combinations(range(n_v), 2))
        chosen = rng.choice(len(pairs), size=n_v - 1, replace=False)
        edges = tuple(sorted(pairs[i] for i in chosen))
        for i, j in edges:
            rasterize_segment(raster, verts[i], verts[j])
        raster[verts[:, 0], verts[:, 1], verts[:, 2]] = 1.0
        values = np.ones(n_v)
    else:
        n_v = int(rng.integers(6, 10))
        verts = _random_vertices(rng, spec.dims, n_v, 2)
        values = rng.uniform(0.05, 1.0, size=n_v)
        raster[verts[:, 0], verts[:, 1], verts[:, 2]] = values
        edges = ()
    return Skeleton(raster, verts, edges, values)


def spec_beta_draw(rng, spec: PhantomSpec) -> float:
    """First draw of every phantom stream: the peak value beta."""
    drawn = rng.uniform(*BETA_RANGE)
    return float(drawn) if spec.beta is None else float(spec.beta)


def _cone(rng, dims):
    dims_a = np.array(dims, float)
    grid = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=-1)
    for _ in range(100):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        slope = rng.uniform(0.15, 0.45)
        height = rng.uniform(0.4, 0.9) * dims_a.min()
        centre = rng.uniform(0.3, 0.7, size=3) * (dims_a - 1)
        apex = centre - 0.5 * height * axis
        rel = grid - apex
        s = rel @ axis
        radial = np.linalg.norm(rel - s[..., None] * axis, axis=-1)
        mask = (s >= 0) & (s <= height) & (radial <= slope * s)
        if mask.sum() >= 5:
            return mask.astype(float)
    raise ParameterError("failed to place a cone inside the grid")


def _blur_threshold(sk: Skeleton):
    support = ndimage.gaussian_filter((sk.raster > 0).astype(float), BLUR_SIGMA, mode="constant")
    mask = support >= THRESHOLD * support.max()
    return mask * ndimage.gaussian_filter(sk.raster, BLUR_SIGMA, mode="constant")


def generate_phantom(spec: PhantomSpec, voxel_size_mm=DEFAULT_VOXEL_SIZE_MM) -> Volume3D:
    rng = _rng(spec)
    beta = spec_beta_draw(rng, spec)
    if spec.family == "cone":
        vol = _cone(rng, spec.dims)
    else:
        vol = _blur_threshold(skeleton(spec))
    vol = np.maximum(vol, 0.0)
    vol = vol * (beta / vol.max())
    return Volume3D.from_array(vol, voxel_size_mm)


def generate_hybrid_dataset(n_per_family: int, dims=(19, 19, 19), seed: int = 0, voxel_size_mm=DEFAULT_VOXEL_SIZE_MM):
    """``n_per_family`` phantoms of each family, families in order cone,
    graph, dots; each phantom draws its own beta from U(0.5, 1.5)."""
    if n_per_family < 1:
        raise ParameterError("n_per_family must be >= 1")
    out = []
    index = 0
    for family in FAMILIES:
        for _ in range(n_per_family):
            spec = PhantomSpec(family, derive_seed(seed, index), tuple(dims))
            out.append((spec, generate_phantom(spec, voxel_size_mm)))
            index += 1
    return out


# --------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class SimCalibrationSpec:
    """Synthetic system-matrix recipe.

    Each of three receive channels contributes ``rows_per_channel`` rows,
    alternating real/imaginary parts of harmonics ``h = 1, 2, ...``.  The
    harmonic frequencies sit on a 6.25 kHz raster, so the default 80-625 kHz
    band drops the first 12 harmonics.
    """

    dims: tuple[int, int, int] = (7, 7, 7)
    rows_per_channel: int = 200
    psf_sigma_voxels: float = 0.5
    frequency_decay: float = 2.0
    column_noise_sigma: float = 0.0
    seed: int = 0
    frequency_step_hz: float = 6.25e3

    def __post_init__(self):
        if self.rows_per_channel < 1:
            raise ParameterError("rows_per_channel must be >= 1")
        if not self.psf_sigma_voxels > 0:
            raise ParameterError("psf_sigma_voxels must be positive")
        if self.frequency_decay < 0:
            raise ParameterError("frequency_decay must be nonnegative")
        if self.column_noise_sigma < 0:
            raise ParameterError("column_noise_sigma must be nonnegative")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))



def wave_vector_classes(dims) -> np.ndarray:
    """One representative of every +-k pair of the grid's Fourier lattice,
    ordered by spatial frequency (then lexicographically)."""
    axes = [np.fft.fftfreq(d) * d for d in dims]
    ks = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    dims_a = np.array(dims)
    seen, out = set(), []
    order = np.lexsort((ks[:, 2], ks[:, 1], ks[:, 0], (ks**2 / dims_a**2).sum(1)))
    for k in ks[order]:
        key = tuple(int(v) for v in np.mod(k, dims_a))
        if key in seen:
            continue
        seen.add(key)
        seen.add(tuple(int(v) for v in np.mod(-k, dims_a)))
        out.append(k)
    return np.array(out)


def simulate_calibration(spec: SimCalibrationSpec, voxel_size_mm=DEFAULT_VOXEL_SIZE_MM) -> SystemMatrix:
    """Ill-conditioned stand-in for a measured system matrix.

    Row pair ``(2s, 2s+1)`` of channel ``l`` holds the real and imaginary
    parts of ``exp(-2 pi i <kappa, x> + i theta_l)`` where ``kappa`` is the
    ``(3 s + l)``-th lattice wave vector in order of increasing frequency
    (cycling once exhausted) and ``theta_l`` a random channel phase.  Rows are
    blurred by a Gaussian PSF and weighted by ``(1 + r)^-gamma`` with ``r``
    the row index inside the channel; calibration noise is added last.  With
    ``3 * rows_per_channel / 2`` at least the number of wave-vector classes
    and no decay the rows span the whole voxel space.
    """
    n1, n2, n3 = spec.dims
    n = n1 * n2 * n3
    rng = np.random.default_rng(spec.seed)
    coords = np.stack(np.meshgrid(np.arange(n1), np.arange(n2), np.arange(n3), indexing="ij"), -1)
    coords = coords.reshape(-1, 3, order="F").astype(float)
    classes = wave_vector_classes(spec.dims)
    r = np.arange(spec.rows_per_channel)
    slot = r // 2
    part = np.where(r % 2 == 0, REAL, IMAG)
    weights = (1.0 + r) ** (-spec.frequency_decay)
    offsets = rng.uniform(0, 2 * np.pi, size=3)

    blocks, channels = [], []
    for l in range(3):
        kappa = classes[(3 * slot + l) % len(classes)] / np.array(spec.dims, float)
        phase = -2 * np.pi * (kappa @ coords.T) + offsets[l]
        rows = np.where(part[:, None] == REAL, np.cos(phase), np.sin(phase))
        vols = rows.reshape(-1, n1, n2, n3, order="F")
        blurred = ndimage.gaussian_filter(
            vols, (0, spec.psf_sigma_voxels, spec.psf_sigma_voxels, spec.psf_sigma_voxels), mode="constant"
        )
        blocks.append(weights[:, None] * blurred.reshape(len(r), n, order="F"))
        channels.append(np.full(len(r), l + 1))
    entries = np.vstack(blocks)
    if spec.column_noise_sigma > 0:
        entries = entries + rng.normal(0.0, spec.column_noise_sigma, size=entries.shape)
    meta = RowMeta(
        np.concatenate(channels),
        np.tile((slot + 1) * spec.frequency_step_hz, 3),
        np.tile(part, 3),
    )
    return SystemMatrix(entries, meta, 100.0, spec.dims)


def synthesize_scan(
    a: SystemMatrix, u: Volume3D, noise_sigma: float, seed: int = 0, n_background: int = 0
) -> ScanData:
    """``A u + eta`` with i.i.d. ``N(0, noise_sigma^2)`` noise, plus
    ``n_background`` pure-noise background scans."""
    if a.cols != u.n_voxels:
        raise DimensionError(f"matrix has {a.cols} columns, volume has {u.n_voxels} voxels")
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    clean = a.entries @ vectorize(u)
    noise = rng.normal(0.0, noise_sigma, size=clean.shape) if noise_sigma > 0 else 0.0
    bg = rng.normal(0.0, noise_sigma, size=(n_background, clean.size)) if noise_sigma > 0 else np.zeros((n_background, clean.size))
    return ScanData(clean + noise, bg)


def default_noise_sigma(a: SystemMatrix, u: Volume3D, relative: float = 1e-3) -> float:
    """Default hybrid-scan noise: ``relative * ||A u||_inf``."""
    return float(relative * np.max(np.abs(a.entries @ vectorize(u))))
