"""System-matrix MPI reconstruction at desk scale: simulated calibration,
phantoms, preprocessing, regularized solvers (Tikhonov, ART, ZeroShot-PnP,
PP-MPI ADMM), denoisers and shift-aware metrics."""
from .core import (
    IterationRecord,
    RowMeta,
    ScanData,
    SolverReport,
    SvdFactors,
    SystemMatrix,
    Volume3D,
    devectorize,
    load_container,
    save_container,
    vectorize,
)
from .denoise import DenoiserId, denoise_2d, denoise_slicewise_3d
from .errors import *  # noqa: F403
from .solvers import (
    AdmmConfig,
    ArtConfig,
    PnpConfig,
    solve_admm_ppmpi,
    solve_art,
    solve_pnp,
    solve_tikhonov,
)

__version__ = "0.1.0"

__all__ = [
    "IterationRecord",
    "RowMeta",
    "ScanData",
    "SolverReport",
    "SvdFactors",
    "SystemMatrix",
    "Volume3D",
    "devectorize",
    "load_container",
    "save_container",
    "vectorize",
    "DenoiserId",
    "denoise_2d",
    "denoise_slicewise_3d",
    "AdmmConfig",
    "ArtConfig",
    "PnpConfig",
    "solve_admm_ppmpi",
    "solve_art",
    "solve_pnp",
    "solve_tikhonov",
]
