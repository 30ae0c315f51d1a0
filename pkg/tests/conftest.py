import math
import sys

import numpy as np
import pytest
from hypothesis import settings

from mpirecon.core import RowMeta, SystemMatrix

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

STUB = [sys.executable, "-m", "mpirecon.denoise_stubs"]


def random_matrix(rng, m, n, dims=None):
    meta = RowMeta(np.ones(m), np.full(m, 100e3), np.zeros(m))
    return SystemMatrix(rng.standard_normal((m, n)), meta, 100.0, dims)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    den = np.linalg.norm(b)
    return np.linalg.norm(a - b) / (den if den > 0 else 1.0)


def isclose_db(a, b, tol=1e-12):
    return math.isclose(a, b, rel_tol=tol, abs_tol=tol)


@pytest.fixture
def datadir():
    from pathlib import Path

    return Path(__file__).parent / "data"
