"""``mpi-recon`` command line.

Exit codes: 0 success, 2 validation error (bad input, manifest or
parameters), 3 partial failure (some tasks failed, outputs still written).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .core import ScanData, SolverReport, SystemMatrix, Volume3D, load_container, save_container
from .denoise import DenoiserId
from .errors import MPIReconError
from .harness import (
    METHODS,
    SEARCH_PARAM,
    TABLE_FIELDS,
    ExperimentManifest,
    GridSearchSpec,
    grid_search,
    export_slices,
    load_dataset,
    run_experiment,
    run_method,
    write_csv,
)
from .metrics import ShiftGrid, shift_max_metrics
from .preproc import PreprocConfig, preprocess
from .simcal import (
    FAMILIES,
    PhantomSpec,
    SimCalibrationSpec,
    default_noise_sigma,
    derive_seed,
    generate_phantom,
    simulate_calibration,
    synthesize_scan,
)

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 2, 3
log = logging.getLogger("mpirecon")


class UsageError(Exception):
    pass


def _dims(text):
    parts = [int(p) for p in text.lower().replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("dims are 'N' or 'N1,N2,N3'")
    return tuple(parts)


def _one(path, kind, name=None):
    """The single object of type ``kind`` in a container (or the named one)."""
    objs = load_container(path)
    if name is not None:
        if name not in objs:
            raise UsageError(f"{path} has no entry {name!r}")
        return objs[name]
    found = [(k, v) for k, v in objs.items() if isinstance(v, kind)]
    if len(found) != 1:
        raise UsageError(f"{path} holds {len(found)} {kind.__name__} objects; name one with path:entry")
    return found[0][1]


def _split(spec):
    path, _, name = str(spec).partition(":")
    return path, name or None


def _load(spec, kind):
    path, name = _split(spec)
    return _one(path, kind, name)


def _kv(items):
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--denoiser-param expects k=v, got {item!r}")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_phantoms(args):
    fams = FAMILIES if args.family == "all" else (args.family,)
    objs, index = {}, 0
    for fam in fams:
        for _ in range(args.count):
            spec = PhantomSpec(fam, derive_seed(args.seed, index), args.dims)
            objs[f"phantom_{index:03d}_{fam}"] = generate_phantom(spec, (args.voxel_mm,) * 3)
            index += 1
    save_container(args.out, objs)
    print(f"wrote {len(objs)} phantoms to {args.out}")
    return EXIT_OK


def cmd_sim_cal(args):
    if args.rows % 3:
        raise UsageError("--rows must be a multiple of 3 (three receive channels)")
    spec = SimCalibrationSpec(args.dims, args.rows // 3, args.psf_sigma, args.gamma, args.column_noise, args.seed)
    a = simulate_calibration(spec, (args.voxel_mm,) * 3)
    save_container(args.out, {"matrix": a})
    print(f"wrote {a.rows}x{a.cols} system matrix to {args.out}")
    return EXIT_OK


def cmd_scan(args):
    """Scans are named after their phantom (``phantom_003_dots`` -> ``scan_003``)."""
    a = _load(args.matrix, SystemMatrix)
    path, name = _split(args.phantom)
    objs = load_container(path)
    names = [name] if name else sorted(k for k, v in objs.items() if isinstance(v, Volume3D))
    out = {"matrix": a} if args.dataset else {}
    for i, key in enumerate(names):
        u = objs[key]
        sigma = args.noise_sigma if args.noise_sigma is not None else default_noise_sigma(a, u, args.noise_relative)
        parts = key.split("_")
        tag = parts[1] if len(parts) > 1 and parts[0] == "phantom" else f"{i:03d}"
        if args.dataset:
            out[key if key.startswith("phantom_") else f"phantom_{tag}_unknown"] = u
        out[f"scan_{tag}"] = synthesize_scan(a, u, sigma, derive_seed(args.seed, i), args.n_background)
    save_container(args.out, out)
    print(f"wrote {len(names)} scans to {args.out}")
    return EXIT_OK


def _preproc_cfg(args):
    rank = args.rsvd_rank
    if rank not in ("none", "full"):
        rank = int(rank)
    return PreprocConfig(args.band_low, args.band_high, args.whiten, rank, args.background, args.seed)


def cmd_preprocess(args):
    a = _load(args.matrix, SystemMatrix)
    f = _load(args.scan, ScanData)
    cfg = _preproc_cfg(args)
    a2, f2, svd, prov = preprocess(a, f, cfg)
    objs = {"matrix": a2, "scan": f2}
    if svd is not None:
        objs["svd"] = svd
    save_container(args.out, objs)
    prov.update(config={k: getattr(cfg, k) for k in cfg.__dataclass_fields__}, matrix=args.matrix, scan=args.scan)
    sidecar = Path(str(args.out) + ".json")
    sidecar.write_text(json.dumps(prov, indent=2, default=str))
    print(f"wrote {args.out} ({a2.rows}x{a2.cols}) and {sidecar}")
    return EXIT_OK


def _method_params(args):
    p = {}
    for flag, key in (("mu0", "mu0"), ("n_it", "n_it"), ("alpha_ratio", "alpha_ratio"), ("lam", "lambda"),
                      ("lambda_art", "lambda_art"), ("snr_db", "snr_db"), ("sigma", "sigma")):
        v = getattr(args, flag, None)
        if v is not None:
            p[key] = v
    if args.method == "art" and args.n_it is not None:
        p["n_sweeps"] = p.pop("n_it")
    if args.method == "art" and "lambda" in p and "lambda_art" not in p:
        p["lambda_art"] = p.pop("lambda")
    p["denoiser"] = DenoiserId.parse(args.denoiser, _kv(args.denoiser_param))
    return p


def cmd_reconstruct(args):
    path, name = _split(args.matrix)
    objs = load_container(path)
    a = objs[name] if name else next(v for v in objs.values() if isinstance(v, SystemMatrix))
    svd = objs.get("svd")
    f = _load(args.scan, ScanData)
    params = _method_params(args)
    missing = {"tikhonov": "lambda", "pnp": "mu0", "pnp-l1": "mu0"}.get(args.method)
    if missing and missing not in params:
        raise UsageError(f"--method {args.method} needs --{'lambda' if missing == 'lambda' else 'mu0'}")
    if args.method == "ppmpi" and "snr_db" not in params:
        raise UsageError("--method ppmpi needs --snr-db")
    rep = run_method(args.method, a, f, params, svd)
    save_container(args.out, {"report": rep})
    trace = Path(str(args.out) + ".json")
    trace.write_text(rep.to_json())
    print(f"wrote {args.out} and {trace}")
    return EXIT_OK


def _entries(spec):
    """All entries of a container, or just the one named by ``path:entry``."""
    path, name = _split(spec)
    objs = load_container(path)
    if name is None:
        return objs
    if name not in objs:
        raise UsageError(f"{path} has no entry {name!r}")
    return {name: objs[name]}


def _reports(spec):
    out = {}
    for k, v in _entries(spec).items():
        if isinstance(v, SolverReport):
            out[k] = (v.method_id, v.reconstruction)
        elif isinstance(v, Volume3D):
            out[k] = ("volume", v)
    return out


def cmd_evaluate(args):
    recs = _reports(args.rec)
    refs = {k: v for k, v in _entries(args.ref).items() if isinstance(v, Volume3D)}
    grid = ShiftGrid(args.extent_mm, args.step_mm)
    if not recs or not refs:
        raise UsageError("need at least one reconstruction and one reference volume")
    ref_keys = sorted(refs)
    rows, failed = [], 0
    for i, key in enumerate(sorted(recs)):
        method, vol = recs[key]
        ref_key = ref_keys[0] if len(ref_keys) == 1 else ref_keys[i] if i < len(ref_keys) else None
        if ref_key is None:
            log.error("no reference for %s", key)
            failed += 1
            continue
        try:
            m = shift_max_metrics(vol, refs[ref_key], grid, args.scale)
        except MPIReconError as exc:
            log.error("%s: %s", key, exc)
            failed += 1
            continue
        rows.append({"method": method, "phantom": ref_key, "psnr_max": m["psnr_max"], "ssim_max": m["ssim_max"],
                     "best_dr": " ".join(repr(c) for c in m["psnr_dr"])})
    write_csv(args.out, rows, ["method", "phantom", "psnr_max", "ssim_max", "best_dr"])
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_validate(args):
    ds = load_dataset(args.dataset, _preproc_cfg(args))
    spec = GridSearchSpec(
        tuple(range(args.coarse_min, args.coarse_max + 1)), objective=args.objective, trimming=args.trimming
    )
    base = {k: v for k, v in _method_params(args).items() if k != SEARCH_PARAM[args.method]}
    best, table = grid_search(args.method, ds, spec, base, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / f"grid_{args.method}.csv", table, TABLE_FIELDS)
    best = {k: (v.kind if isinstance(v, DenoiserId) else v) for k, v in best.items()}
    (out / f"best_{args.method}.json").write_text(json.dumps(best, indent=2))
    print(json.dumps(best))
    return EXIT_PARTIAL if any(r["n_failed"] for r in table) else EXIT_OK


def cmd_experiment(args):
    manifest = ExperimentManifest.load(args.manifest)
    if args.jobs is not None:
        manifest.jobs = args.jobs
    result = run_experiment(manifest)
    print(f"wrote report bundle to {result.output_dir}")
    return EXIT_OK if result.ok else EXIT_PARTIAL


def cmd_export_slices(args):
    vol = _load(args.volume, Volume3D) if not args.report else _load(args.volume, SolverReport).reconstruction
    paths = export_slices(vol, args.axis, args.out)
    print(f"wrote {len(paths)} slices to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_method_flags(p):
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--mu0", type=float)
    p.add_argument("--n-it", type=int)
    p.add_argument("--alpha-ratio", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lambda-art", type=float)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--sigma", type=float, help="fixed denoiser noise level for ppmpi")
    p.add_argument("--denoiser", default="tv", help="identity | gaussian | tv | external:<cmd>")
    p.add_argument("--denoiser-param", action="append", metavar="K=V")


def _add_preproc_flags(p):
    p.add_argument("--band-low", type=float, default=0.0)
    p.add_argument("--band-high", type=float, default=math.inf)
    p.add_argument("--whiten", action="store_true")
    p.add_argument("--rsvd-rank", default="none", help="integer, 'full' or 'none'")
    p.add_argument("--background", default="none", choices=("none", "static", "interleaved"))
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    ap = argparse.ArgumentParser(prog="mpi-recon", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantoms", help="generate synthetic phantoms")
    p.add_argument("--family", default="all", choices=FAMILIES + ("all",))
    p.add_argument("--count", type=int, default=1, help="phantoms per family")
    p.add_argument("--dims", type=_dims, default=(19, 19, 19))
    p.add_argument("--voxel-mm", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_phantoms)

    p = sub.add_parser("sim-cal", help="simulate a system matrix")
    p.add_argument("--dims", type=_dims, default=(7, 7, 7))
    p.add_argument("--rows", type=int, default=600)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--psf-sigma", type=float, default=0.5)
    p.add_argument("--column-noise", type=float, default=0.0)
    p.add_argument("--voxel-mm", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sim_cal)

    p = sub.add_parser("scan", help="simulate scans A u + noise")
    p.add_argument("--matrix", required=True)
    p.add_argument("--phantom", required=True, help="container[:entry]")
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--noise-relative", type=float, default=1e-3, help="used when --noise-sigma is absent")
    p.add_argument("--n-background", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", action="store_true", help="bundle matrix, phantoms and scans into one dataset container")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("preprocess", help="band selection, background, whitening, rSVD")
    p.add_argument("--matrix", required=True)
    p.add_argument("--scan", required=True)
    _add_preproc_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("reconstruct", help="run one solver")
    p.add_argument("--matrix", required=True)
    p.add_argument("--scan", required=True)
    _add_method_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="shift-maximized PSNR/SSIM")
    p.add_argument("--rec", required=True, help="container[:entry]")
    p.add_argument("--ref", required=True, help="container[:entry]")
    p.add_argument("--extent-mm", type=float, default=3.0)
    p.add_argument("--step-mm", type=float, default=0.5)
    p.add_argument("--scale", type=float, default=100.0, help="delta concentration applied before scoring")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("validate", help="two-phase grid search on a dataset")
    p.add_argument("--dataset", required=True)
    _add_method_flags(p)
    _add_preproc_flags(p)
    p.add_argument("--coarse-min", type=int, default=-6)
    p.add_argument("--coarse-max", type=int, default=18)
    p.add_argument("--objective", default="mean_psnr", choices=("mean_psnr", "mean_ssim"))
    p.add_argument("--trimming", type=float, default=0.05)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("experiment", help="run a manifest")
    p.add_argument("manifest")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("export-slices", help="write PNG slices of a volume")
    p.add_argument("--volume", required=True, help="container[:entry]")
    p.add_argument("--report", action="store_true", help="the entry is a SolverReport")
    p.add_argument("--axis", default="z", choices=("x", "y", "z"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_slices)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, MPIReconError, ValueError, FileNotFoundError) as exc:
        print(f"mpi-recon: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
