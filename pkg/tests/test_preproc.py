import numpy as np
import pytest

from mpirecon.core import RowMeta, ScanData, SystemMatrix
from mpirecon.errors import ParameterError, PreprocessingError
from mpirecon.preproc import (
    PreprocConfig,
    WhiteningMatrix,
    apply_whitening,
    background_correct,
    compress_rsvd,
    estimate_whitening,
    preprocess,
    randomized_svd,
    select_band,
)

from conftest import rel


def _pair(rng, freqs, n=4, backgrounds=None):
    m = len(freqs)
    a = SystemMatrix(rng.standard_normal((m, n)), RowMeta(np.ones(m), np.asarray(freqs, float), np.zeros(m)))
    bg = np.zeros((0, m)) if backgrounds is None else backgrounds
    return a, ScanData(rng.standard_normal(m), bg)


def test_band_keeps_everything_inside(rng):
    a, f = _pair(rng, [100e3] * 5)
    a2, f2 = select_band(a, f, PreprocConfig())
    assert a2 == a and f2 == f


def test_band_empty_is_an_error(rng):
    a, f = _pair(rng, [50e3] * 3)
    with pytest.raises(PreprocessingError):
        select_band(a, f, PreprocConfig())


def test_band_half_open(rng):
    a, f = _pair(rng, [50e3, 80e3, 624.9e3, 625e3])
    a2, f2 = select_band(a, f, PreprocConfig())
    assert a2.row_meta.frequency_hz.tolist() == [80e3, 624.9e3]
    assert np.array_equal(a2.entries, a.entries[1:3])
    assert np.array_equal(f2.values, f.values[1:3])


def test_config_validation():
    with pytest.raises(ParameterError):
        PreprocConfig(band_low_hz=5.0, band_high_hz=5.0)
    with pytest.raises(ParameterError):
        PreprocConfig(rsvd_rank=0)
    with pytest.raises(ParameterError):
        PreprocConfig(background_mode="median")


def test_static_background_single(rng):
    b = rng.standard_normal(5)
    f = ScanData(rng.standard_normal(5), b[None])
    out = background_correct(f, "static")
    assert np.allclose(out.values, f.values - b)


def test_static_background_exact_cancellation(rng):
    clean, b = rng.standard_normal(5), rng.standard_normal(5)
    out = background_correct(ScanData(clean + b, b[None]), "static")
    assert np.allclose(out.values, clean, atol=1e-15)


def test_interleaved_convex_weights(rng):
    b0, b1 = rng.standard_normal(3), rng.standard_normal(3)
    vals = rng.standard_normal(3)
    f = ScanData(vals, np.stack([b0, b1]), background_times=np.array([0.0, 1.0]), row_times=np.full(3, 0.25))
    out = background_correct(f, "interleaved")
    assert np.allclose(out.values, vals - (0.75 * b0 + 0.25 * b1))


def test_interleaved_default_positions(rng):
    # backgrounds every 19 positions, row i at position i
    m = 20
    b = rng.standard_normal((2, m))
    f = ScanData(np.zeros(m), b)
    out = background_correct(f, "interleaved")
    t = np.arange(m) / 19.0
    w = np.clip(t, 0, 1)
    assert np.allclose(out.values, -((1 - w) * b[0] + w * b[1]))


def test_background_needs_scans(rng):
    with pytest.raises(PreprocessingError):
        background_correct(ScanData(np.ones(3)), "static")


def test_whitening_constant_std():
    bg = np.array([[1.0, 3.0], [-1.0, 5.0], [1.0, 3.0], [-1.0, 5.0]])
    bg = bg * np.sqrt(3.0)  # sample std 2 in both rows after scaling
    w = estimate_whitening(bg)
    assert np.allclose(w.inv_sigma, 0.5)


def test_whitening_degenerate_row_is_finite():
    bg = np.array([[1.0, 0.0], [1.0, 2.0], [1.0, -2.0]])
    w = estimate_whitening(bg)
    std = bg.std(axis=0, ddof=1)
    assert np.isfinite(w.inv_sigma).all()
    assert w.inv_sigma[0] == pytest.approx(1.0 / (1e-12 * std.max()))


def test_whitening_monte_carlo(rng):
    sig = rng.uniform(0.5, 3.0, size=40)
    bg = rng.standard_normal((100, 40)) * sig
    w = estimate_whitening(bg)
    err = np.abs(w.inv_sigma * sig - 1)
    # with 100 scans the std estimate spreads ~7% per row, so 15% is a ~2 sigma band
    assert np.mean(err < 0.15) >= 0.9
    assert err.max() < 0.3
    a, f = _pair(rng, [100e3] * 40, backgrounds=bg)
    _, wf = apply_whitening(w, a, f)
    var = wf.background_scans.var(axis=0, ddof=1)
    assert np.all(np.abs(var - 1) < 1e-9)


def test_whitening_identity_and_scaling(rng):
    a, f = _pair(rng, [100e3] * 4)
    a1, f1 = apply_whitening(WhiteningMatrix.identity(4), a, f)
    assert a1 == a and f1 == f
    a2, f2 = apply_whitening(WhiteningMatrix(np.full(4, 2.0)), a, f)
    assert np.array_equal(a2.entries, 2 * a.entries)
    assert np.array_equal(f2.values, 2 * f.values)


def test_rsvd_full_rank_exact(rng):
    a, f = _pair(rng, [100e3] * 30, n=12)
    red, fr, svd = compress_rsvd(a, f, 12)
    u, s, vt = np.linalg.svd(a.entries, full_matrices=False)
    assert rel(red.entries, np.diag(svd.sigma_k) @ svd.v_k.T) < 1e-8
    assert np.allclose(svd.sigma_k, s, rtol=1e-10)
    assert np.allclose(fr.values, svd.u_k.T @ f.values)


def test_rsvd_low_rank_exact(rng):
    mat = rng.standard_normal((50, 3)) @ rng.standard_normal((3, 40))
    u, s, vt = randomized_svd(mat, 3)
    assert rel(u @ np.diag(s) @ vt, mat) < 1e-8


def test_rsvd_seeded():
    mat = np.random.default_rng(0).standard_normal((30, 20))
    assert np.array_equal(randomized_svd(mat, 5, seed=2)[1], randomized_svd(mat, 5, seed=2)[1])


def test_preprocess_chain_provenance(rng):
    bg = rng.standard_normal((5, 6))
    a, f = _pair(rng, [10e3, 100e3, 200e3, 300e3, 400e3, 700e3], n=4, backgrounds=bg)
    cfg = PreprocConfig(whiten=True, rsvd_rank="full", background_mode="static")
    a2, f2, svd, prov = preprocess(a, f, cfg)
    assert [s["step"] for s in prov["steps"]] == ["select_band", "background_correct", "whiten", "rsvd"]
    assert a2.rows == svd.rank == 4 and f2.rows == 4
