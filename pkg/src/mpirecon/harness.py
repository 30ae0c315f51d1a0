"""Hyperparameter validation on hybrid datasets and manifest-driven experiments.

The grid search runs a coarse pass over ``10**j`` and then refines over
``k * 10**(j*-1)`` and ``k * 10**j*`` (``k = 1..9``).  Iterative methods
are scored at every iteration of one run, so the best iteration count is
picked jointly with the parameter.  Ties go to the smaller parameter, then
the smaller iteration count.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .core import ScanData, SolverReport, SvdFactors, SystemMatrix, Volume3D, load_container, save_container
from .denoise import DenoiserId
from .errors import ManifestError, MetricError, MPIReconError, ParameterError
from .linalg import CgConfig
from .metrics import SSIM_R, ShiftGrid, psnr, shift_max_metrics, ssim
from .preproc import PreprocConfig, apply_whitening, background_correct, estimate_whitening, preprocess, select_band
from .simcal import default_noise_sigma, derive_seed, generate_hybrid_dataset, synthesize_scan
from .solvers import (
    AdmmConfig,
    ArtConfig,
    PnpConfig,
    ball_radius_from_snr_db,
    solve_admm_ppmpi,
    solve_art,
    solve_pnp,
    solve_tikhonov,
)

log = logging.getLogger(__name__)

METHODS = ("tikhonov", "art", "pnp", "pnp-l1", "ppmpi")
#: the parameter each method's grid search sweeps
SEARCH_PARAM = {"tikhonov": "lambda", "art": "lambda_art", "pnp": "mu0", "pnp-l1": "mu0", "ppmpi": "snr_db"}
ITERATION_PARAM = {"art": "n_sweeps", "pnp": "n_it", "pnp-l1": "n_it", "ppmpi": "n_it"}
MANIFEST_VERSION = 1
EIG_MAX_COLUMNS = 4096


# --------------------------------------------------------------------------
# methods


def _denoiser(params) -> DenoiserId:
    d = params.get("denoiser", "tv")
    if isinstance(d, DenoiserId):
        return d
    return DenoiserId.parse(d, params.get("denoiser_params"))


def run_method(name: str, a, f, params: dict[str, Any], svd: SvdFactors | None = None, dims=None, keep_iterates=False) -> SolverReport:
    """Dispatch one reconstruction by method name."""
    p = dict(params)
    if "cg" in p:
        cg = p["cg"] if isinstance(p["cg"], CgConfig) else CgConfig(**p["cg"])
    else:
        # small voxel counts: exact cached eigen-solves beat thousands of CG steps
        n = a.cols if isinstance(a, SystemMatrix) else np.shape(a)[1]
        cg = CgConfig(method="eig" if n <= EIG_MAX_COLUMNS else "cg")
    if name == "tikhonov":
        return solve_tikhonov(a, f, float(p["lambda"]), svd=svd, cg=cg, dims=dims)
    if name == "art":
        cfg = ArtConfig(float(p.get("lambda_art", 0.0)), int(p.get("n_sweeps", 200)), float(p.get("relaxation", 1.0)))
        return solve_art(a, f, cfg, dims=dims, keep_iterates=keep_iterates)
    if name in ("pnp", "pnp-l1"):
        cfg = PnpConfig(
            mu0=float(p["mu0"]),
            n_it=int(p.get("n_it", 7)),
            alpha_ratio=float(p.get("alpha_ratio", 0.005)),
            use_l1=name == "pnp-l1",
            denoiser=_denoiser(p),
            cg=cg,
            c_rec=p.get("c_rec"),
        )
        return solve_pnp(a, f, cfg, dims=dims, keep_iterates=keep_iterates)
    if name == "ppmpi":
        eps = float(p["eps"]) if "eps" in p else ball_radius_from_snr_db(f, float(p["snr_db"]))
        cfg = AdmmConfig(eps, int(p.get("n_it", 100)), _denoiser(p), float(p.get("sigma", 0.05)), cg)
        report = solve_admm_ppmpi(a, f, cfg, dims=dims, keep_iterates=keep_iterates)
        if "snr_db" in p:
            report.params["snr_db"] = float(p["snr_db"])
        return report
    raise ParameterError(f"unknown method {name!r}; expected one of {METHODS}")


# --------------------------------------------------------------------------
# datasets


@dataclass
class HybridDataset:
    """Ground truths with their (preprocessed) scans and operator."""

    matrix: SystemMatrix
    scans: list[ScanData]
    phantoms: list[Volume3D]
    families: list[str]
    svd: SvdFactors | None = None
    provenance: dict[str, Any] = field(default_factory=dict)

    def __len__(self):
        return len(self.phantoms)

    @property
    def dims(self):
        return self.phantoms[0].dims


def build_hybrid_dataset(
    matrix: SystemMatrix,
    n_per_family: int,
    seed: int = 0,
    noise_relative: float = 1e-3,
    noise_sigma: float | None = None,
    preproc: PreprocConfig | None = None,
    n_background: int = 0,
) -> HybridDataset:
    """Phantoms -> ``A u + eta`` -> preprocessing.

    Without ``noise_sigma`` each scan gets ``noise_relative * ||A u||_inf``.
    Preprocessing statistics (whitening, rSVD) come from the first scan's
    backgrounds and the shared matrix, so all scans share one operator.
    """
    if matrix.dims is None:
        raise ParameterError("the matrix must know its voxel grid")
    items = generate_hybrid_dataset(n_per_family, matrix.dims, seed)
    raw_scans = []
    for i, (_, u) in enumerate(items):
        sigma = default_noise_sigma(matrix, u, noise_relative) if noise_sigma is None else noise_sigma
        raw_scans.append(synthesize_scan(matrix, u, sigma, derive_seed(seed + 1, i), n_background))
    cfg = preproc or PreprocConfig(band_low_hz=0.0, band_high_hz=math.inf)
    return _preprocess_dataset(matrix, raw_scans, [u for _, u in items], [s.family for s, _ in items], cfg)


def _preprocess_dataset(matrix, raw_scans, phantoms, families, cfg: PreprocConfig) -> HybridDataset:
    # the first scan fixes the operator (band, whitening, rSVD basis); the rest
    # are corrected with the same statistics and projected onto the same basis
    a, f0, svd, prov = preprocess(matrix, raw_scans[0], cfg)
    band_a, _ = select_band(matrix, raw_scans[0], cfg)
    w = None
    if cfg.whiten:
        w = estimate_whitening(background_correct(select_band(matrix, raw_scans[0], cfg)[1], cfg.background_mode).background_scans)
    scans = [f0]
    for raw in raw_scans[1:]:
        _, f = select_band(matrix, raw, cfg)
        f = background_correct(f, cfg.background_mode)
        if w is not None:
            _, f = apply_whitening(w, band_a, f)
        if svd is not None:
            f = ScanData(svd.u_k.T @ f.values, np.zeros((0, svd.rank)), f.n_repetitions)
        scans.append(f)
    return HybridDataset(a, scans, list(phantoms), list(families), svd, prov)


def save_dataset(path, matrix: SystemMatrix, phantoms, scans, families) -> None:
    objs: dict[str, Any] = {"matrix": matrix}
    for i, (u, f, fam) in enumerate(zip(phantoms, scans, families)):
        objs[f"phantom_{i:03d}_{fam}"] = u
        objs[f"scan_{i:03d}"] = f
    save_container(path, objs)


def load_dataset(path, preproc: PreprocConfig | None = None) -> HybridDataset:
    objs = load_container(path)
    if "matrix" not in objs:
        raise ManifestError(f"{path}: dataset container has no 'matrix' entry")
    names = sorted(k for k in objs if k.startswith("phantom_"))
    phantoms = [objs[n] for n in names]
    families = [n.split("_", 2)[2] if n.count("_") >= 2 else "unknown" for n in names]
    scans = [objs[f"scan_{n.split('_')[1]}"] for n in names]
    cfg = preproc or PreprocConfig(band_low_hz=0.0, band_high_hz=math.inf)
    return _preprocess_dataset(objs["matrix"], scans, phantoms, families, cfg)


# --------------------------------------------------------------------------
# scoring


def trimmed_stats(values, trim: float = 0.05):
    """Mean and (population) std after dropping ``floor(trim * n)`` values
    from each tail.  Returns ``(mean, std, n_used)``."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    cut = int(math.floor(trim * v.size))
    kept = v[cut : v.size - cut] if cut else v
    if kept.size == 0:
        return math.nan, math.nan, 0
    return float(kept.mean()), float(kept.std()), int(kept.size)


def _score(objective, rec: np.ndarray, gt: Volume3D, scale: float) -> float:
    rec3 = rec.reshape(gt.dims, order="F")
    if objective == "mean_psnr":
        return psnr(rec3, gt.array)
    return ssim(rec3 * scale, gt.array * scale, SSIM_R)


def _mean_finite(scores):
    """Mean over finite scores; +inf entries are excluded and counted."""
    s = np.asarray(scores, dtype=np.float64)
    n_inf = int(np.count_nonzero(s == math.inf))
    if np.any(s == -math.inf):
        return -math.inf, n_inf
    finite = s[np.isfinite(s)]
    return (float(finite.mean()) if finite.size else -math.inf), n_inf


@dataclass(frozen=True)
class GridSearchSpec:
    coarse_exponents: tuple[int, ...] = tuple(range(-6, 19))
    refine_multipliers: tuple[int, ...] = tuple(range(1, 10))
    objective: str = "mean_psnr"
    trimming: float = 0.05

    def __post_init__(self):
        if not self.coarse_exponents or not self.refine_multipliers:
            raise ParameterError("grid ranges must be nonempty")
        if self.objective not in ("mean_psnr", "mean_ssim"):
            raise ParameterError("objective must be mean_psnr or mean_ssim")
        object.__setattr__(self, "coarse_exponents", tuple(int(j) for j in self.coarse_exponents))
        object.__setattr__(self, "refine_multipliers", tuple(int(k) for k in self.refine_multipliers))

    # parsed from decimal text so that e.g. 9e-3 is exactly float("0.009")
    def coarse_values(self):
        return [float(f"1e{j}") for j in self.coarse_exponents]

    def refine_values(self, j_star: int):
        return [float(f"{k}e{j}") for j in (j_star - 1, j_star) for k in self.refine_multipliers]


def evaluate_point(method: str, dataset: HybridDataset, value: float, base_params=None, objective="mean_psnr"):
    """Score one grid value on every phantom.

    Returns ``(per_iteration_scores, failures)`` where
    ``per_iteration_scores[t][i]`` is the score of phantom ``i`` after
    iteration ``t + 1`` (one row for non-iterative methods).
    """
    params = dict(base_params or {})
    params[SEARCH_PARAM[method]] = value
    scale = dataset.matrix.delta_concentration
    per_phantom, failures = [], []
    n_rows = 1
    for i, (f, gt) in enumerate(zip(dataset.scans, dataset.phantoms)):
        try:
            rep = run_method(method, dataset.matrix, f, params, dataset.svd, gt.dims, keep_iterates=True)
        except MPIReconError as exc:
            failures.append({"phantom": i, "error": f"{type(exc).__name__}: {exc}"})
            per_phantom.append(None)
            continue
        snaps = rep.iterates if rep.iterates is not None else [rep.reconstruction.data]
        scores = []
        for snap in snaps:
            try:
                scores.append(_score(objective, snap, gt, scale))
            except MetricError:
                scores.append(-math.inf)
        per_phantom.append(scores)
        n_rows = max(n_rows, len(scores))
    table = np.full((n_rows, len(per_phantom)), -math.inf)
    for i, scores in enumerate(per_phantom):
        if scores is not None:
            table[: len(scores), i] = scores
    return table, failures


def _evaluate_task(args):
    return evaluate_point(*args)


def _run_points(method, dataset, values, base_params, objective, jobs):
    tasks = [(method, dataset, v, base_params, objective) for v in values]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_evaluate_task, tasks))
    return [_evaluate_task(t) for t in tasks]


def _rows_for(method, phase, value, result):
    table, failures = result
    iterative = method in ITERATION_PARAM
    rows = []
    for t, scores in enumerate(table):
        mean, n_inf = _mean_finite(scores)
        if failures:
            mean = -math.inf
        rows.append(
            {
                "phase": phase,
                "param": value,
                "n_it": t + 1 if iterative else None,
                "score": mean,
                "n_phantoms": table.shape[1],
                "n_inf_excluded": n_inf,
                "n_failed": len(failures),
                "errors": "; ".join(fl["error"] for fl in failures),
            }
        )
    return rows


def _best(rows):
    """Max score; ties -> smaller param, then smaller iteration count."""
    return max(rows, key=lambda r: (r["score"], -r["param"], -(r["n_it"] or 0)))


def search_values(method: str, dataset: HybridDataset, values, base_params=None, objective="mean_psnr", jobs=1, phase="grid"):
    """Exhaustively score ``values``; returns ``(best_row, rows)``."""
    if len(dataset) == 0:
        raise ParameterError("dataset is empty")
    values = list(values)
    results = _run_points(method, dataset, values, base_params, objective, jobs)
    rows = [r for v, res in zip(values, results) for r in _rows_for(method, phase, v, res)]
    return _best(rows), rows


def grid_search(method: str, dataset: HybridDataset, spec: GridSearchSpec | None = None, base_params=None, jobs: int = 1):
    """Two-phase search of the method's main parameter.

    Returns ``(best_params, score_table)``; ``best_params`` includes the
    chosen iteration count for iterative methods.  Failed reconstructions
    score ``-inf`` for their grid point and are listed in the table.
    """
    spec = spec or GridSearchSpec()
    if len(dataset) == 0:
        raise ParameterError("dataset is empty")
    best_c, coarse = search_values(method, dataset, spec.coarse_values(), base_params, spec.objective, jobs, "coarse")
    j_star = spec.coarse_exponents[spec.coarse_values().index(best_c["param"])]
    best_r, refine = search_values(method, dataset, spec.refine_values(j_star), base_params, spec.objective, jobs, "refine")
    best = _best([best_c, best_r])
    params = dict(base_params or {})
    params[SEARCH_PARAM[method]] = best["param"]
    if method in ITERATION_PARAM:
        params[ITERATION_PARAM[method]] = best["n_it"]
    params["score"] = best["score"]
    params["coarse_exponent"] = j_star
    return params, coarse + refine


TABLE_FIELDS = ["phase", "param", "n_it", "score", "n_phantoms", "n_inf_excluded", "n_failed", "errors"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows, fields) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in fields])
    Path(path).write_text(buf.getvalue())


# --------------------------------------------------------------------------
# slice export


def _to_uint8(arr, vmax):
    scale = vmax if vmax > 0 else 1.0
    return np.clip(np.rint(np.clip(arr, 0, None) / scale * 255.0), 0, 255).astype(np.uint8)


def export_slices(vol: Volume3D, axis: str, out_dir) -> list[Path]:
    """One 8-bit grayscale PNG per slice perpendicular to ``axis``, mapped
    linearly from ``[0, max(vol)]`` to ``[0, 255]``, plus ``index.json``."""
    axes = {"x": 0, "y": 1, "z": 2}
    if axis not in axes:
        raise ParameterError(f"axis must be one of {sorted(axes)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arr = np.moveaxis(vol.array, axes[axis], 0)
    vmax = float(vol.data.max())
    paths, index = [], []
    for i, sl in enumerate(arr):
        p = out_dir / f"{axis}_{i:03d}.png"
        Image.fromarray(_to_uint8(sl, vmax), mode="L").save(p)
        paths.append(p)
        index.append({"file": p.name, "axis": axis, "index": i})
    (out_dir / "index.json").write_text(
        json.dumps({"dims": list(vol.dims), "max": vmax, "slices": index}, indent=2)
    )
    return paths


def slice_montage(vols: list[Volume3D], path, axis: int = 2, zoom: int = 4) -> None:
    """Grid PNG: one row per volume, one column per slice along ``axis``."""
    vmax = max(float(v.data.max()) for v in vols)
    rows = []
    for v in vols:
        sl = np.moveaxis(v.array, axis, 0)
        tiles = [np.pad(_to_uint8(s, vmax), 1) for s in sl]
        rows.append(np.concatenate(tiles, axis=1))
    img = np.concatenate(rows, axis=0)
    img = np.kron(img, np.ones((zoom, zoom), dtype=np.uint8))
    Image.fromarray(img, mode="L").save(path)


# --------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentManifest:
    dataset: str
    methods: list[dict[str, Any]]
    output_dir: str
    preprocessing: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    metrics: dict[str, Any] = field(default_factory=dict)
    jobs: int = 1
    schema_version: int = MANIFEST_VERSION

    @classmethod
    def from_dict(cls, d: dict[str, Any], base_dir=None) -> "ExperimentManifest":
        if d.get("schema_version") != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest schema_version {d.get('schema_version')!r}")
        missing = [k for k in ("dataset", "methods", "output_dir") if k not in d]
        if missing:
            raise ManifestError(f"manifest is missing {missing}")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ManifestError(f"unknown manifest fields {sorted(unknown)}")
        m = cls(**d)
        if base_dir is not None:
            m.dataset = str(Path(base_dir, m.dataset))
            m.output_dir = str(Path(base_dir, m.output_dir))
        for spec in m.methods:
            if spec.get("name") not in METHODS:
                raise ManifestError(f"unknown method {spec.get('name')!r}")
        return m

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: {exc}") from None
        return cls.from_dict(d, path.parent)

    def validate_paths(self):
        if not Path(self.dataset).exists():
            raise ManifestError(f"dataset {self.dataset} does not exist")


@dataclass
class ExperimentResult:
    reports: dict[str, list[SolverReport | None]]
    aggregate: list[dict[str, Any]]
    failures: list[dict[str, Any]]
    output_dir: Path

    @property
    def ok(self):
        return not self.failures


SCORE_FIELDS = ["method", "phantom", "family", "psnr", "ssim", "psnr_max", "ssim_max", "best_dr"]
AGG_FIELDS = [
    "method", "n", "n_failed",
    "psnr_mean", "psnr_std", "psnr_trimmed_mean", "psnr_trimmed_std",
    "ssim_mean", "ssim_std", "ssim_trimmed_mean", "ssim_trimmed_std",
    "psnr_max_mean", "ssim_max_mean", "n_trimmed",
]


def _preproc_cfg(d):
    d = dict(d)
    d.setdefault("band_low_hz", 0.0)
    d.setdefault("band_high_hz", math.inf)
    return PreprocConfig(**d)


def run_experiment(manifest: ExperimentManifest) -> ExperimentResult:
    """Validate (optionally), reconstruct, score and report every method.

    Writes under ``output_dir``: ``<method>/scores.csv``, ``<method>/reports.mrx``,
    ``<method>/traces.json``, ``<method>/grid_search.csv`` (when a grid is
    given), ``<method>/slices.png``, plus ``aggregate.csv``, ``metrics.csv``
    and ``failures.json``.  Per-phantom failures are recorded, not raised.
    """
    manifest.validate_paths()
    out = Path(manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(manifest.dataset, _preproc_cfg(manifest.preprocessing))
    grid = ShiftGrid(**manifest.metrics.get("shift_grid", {}))
    trim = float(manifest.metrics.get("trimming", 0.05))
    scale = ds.matrix.delta_concentration

    all_reports, aggregate, failures, metric_rows = {}, [], [], []
    for mspec in manifest.methods:
        name = mspec["name"]
        label = mspec.get("label", name)
        mdir = out / label
        mdir.mkdir(exist_ok=True)
        params = dict(mspec.get("params", {}))
        if "grid" in mspec:
            gspec = GridSearchSpec(**mspec["grid"])
            best, table = grid_search(name, ds, gspec, params, manifest.jobs)
            write_csv(mdir / "grid_search.csv", table, TABLE_FIELDS)
            params = {k: v for k, v in best.items() if k not in ("score", "coarse_exponent")}
        reports, rows = [], []
        for i, (f, gt, fam) in enumerate(zip(ds.scans, ds.phantoms, ds.families)):
            try:
                rep = run_method(name, ds.matrix, f, params, ds.svd, gt.dims)
                rec = Volume3D(gt.dims, rep.reconstruction.data, gt.voxel_size_mm)
                row = {
                    "method": label,
                    "phantom": i,
                    "family": fam,
                    "psnr": psnr(rec, gt),
                    "ssim": ssim(rec.array * scale, gt.array * scale),
                }
                sm = shift_max_metrics(rec, gt, grid, scale)
                row.update(psnr_max=sm["psnr_max"], ssim_max=sm["ssim_max"], best_dr=" ".join(repr(c) for c in sm["psnr_dr"]))
            except MPIReconError as exc:
                failures.append({"method": label, "phantom": i, "error": f"{type(exc).__name__}: {exc}"})
                reports.append(None)
                continue
            reports.append(rep)
            rows.append(row)
        write_csv(mdir / "scores.csv", rows, SCORE_FIELDS)
        metric_rows += rows
        good = [r for r in reports if r is not None]
        if good:
            save_container(mdir / "reports.mrx", {f"report_{i:03d}": r for i, r in enumerate(reports) if r is not None})
            (mdir / "traces.json").write_text(json.dumps([json.loads(r.to_json()) for r in good], indent=2))
            slice_montage([r.reconstruction for r in good], mdir / "slices.png")
        aggregate.append(_aggregate(label, rows, len(reports) - len(good), trim))
        all_reports[label] = reports
    write_csv(out / "aggregate.csv", aggregate, AGG_FIELDS)
    write_csv(out / "metrics.csv", metric_rows, ["method", "phantom", "psnr_max", "ssim_max", "best_dr"])
    (out / "failures.json").write_text(json.dumps(failures, indent=2))
    return ExperimentResult(all_reports, aggregate, failures, out)


def _aggregate(label, rows, n_failed, trim):
    agg = {"method": label, "n": len(rows), "n_failed": n_failed}
    for key in ("psnr", "ssim"):
        vals = [r[key] for r in rows if math.isfinite(r[key])]
        agg[f"{key}_mean"] = float(np.mean(vals)) if vals else math.nan
        agg[f"{key}_std"] = float(np.std(vals)) if vals else math.nan
        tm, ts, n_used = trimmed_stats(vals, trim)
        agg[f"{key}_trimmed_mean"], agg[f"{key}_trimmed_std"] = tm, ts
        agg["n_trimmed"] = n_used
    for key in ("psnr_max", "ssim_max"):
        vals = [r[key] for r in rows if math.isfinite(r[key])]
        agg[f"{key}_mean"] = float(np.mean(vals)) if vals else math.nan
    return agg


def manifest_template(dataset: str, output_dir: str) -> dict[str, Any]:
    return asdict(
        ExperimentManifest(
            dataset=dataset,
            output_dir=output_dir,
            methods=[
                {"name": "tikhonov", "grid": {"coarse_exponents": list(range(-6, 7))}},
                {"name": "pnp", "params": {"n_it": 10, "denoiser": "tv"}, "grid": {"coarse_exponents": list(range(-6, 7))}},
            ],
        )
    )
