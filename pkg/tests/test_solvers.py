import numpy as np
import pytest

from mpirecon.core import SvdFactors
from mpirecon.denoise import DenoiserId
from mpirecon.errors import DimensionError, ParameterError, ScheduleError
from mpirecon.linalg import CgConfig, project_nonneg
from mpirecon.solvers import (
    AdmmConfig,
    ArtConfig,
    PnpConfig,
    ball_radius_from_snr_db,
    estimate_noise_level,
    solve_admm_ppmpi,
    solve_art,
    solve_pnp,
    solve_tikhonov,
)

from conftest import rel

IDENTITY = DenoiserId("identity")


def hand_admm(a, f, eps, n_it):
    """Direct transcription of the PP-MPI iteration with an identity denoiser
    (slicewise identity = clip at zero) and dense solves."""
    m, n = a.shape
    z0, d0, z1, d1 = np.zeros(m), np.zeros(m), np.zeros(n), np.zeros(n)
    u = np.zeros(n)
    for _ in range(n_it):
        u = np.linalg.solve(np.eye(n) + a.T @ a, a.T @ (z0 + d0) + z1 + d1)
        z1 = np.maximum(u - d1, 0)
        d1 = d1 + z1 - u
        v = a @ u - d0
        dist = np.linalg.norm(v - f)
        z0 = v if dist <= eps else f + eps * (v - f) / dist
        d0 = d0 + z0 - a @ u
    return u, z0, d0, z1, d1


def test_tikhonov_scalar():
    rep = solve_tikhonov(np.eye(1), np.array([2.0]), 1.0, dims=(1, 1, 1))
    assert rep.reconstruction.data[0] == pytest.approx(1.0)
    assert len(rep.iterations) == 1


def test_tikhonov_shrinks_with_lambda(rng):
    a = rng.standard_normal((20, 8))
    f = rng.standard_normal(20)
    norms = [np.linalg.norm(solve_tikhonov(a, f, lam, dims=(2, 2, 2)).reconstruction.data) for lam in 10.0 ** np.arange(-2, 7)]
    assert all(x > y for x, y in zip(norms, norms[1:]))
    assert norms[-1] < 1e-4 * norms[0]


def test_tikhonov_svd_route_both_frames(rng):
    a = rng.standard_normal((30, 8))
    f = rng.standard_normal(30)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    svd = SvdFactors(u, s, vt.T)
    ref = solve_tikhonov(a, f, 0.5, dims=(2, 2, 2)).reconstruction.data
    red = np.diag(s) @ vt
    r1 = solve_tikhonov(red, u.T @ f, 0.5, svd=svd, dims=(2, 2, 2)).reconstruction.data
    r2 = solve_tikhonov(a, f, 0.5, svd=svd, dims=(2, 2, 2)).reconstruction.data
    assert rel(r1, ref) < 1e-8 and rel(r2, ref) < 1e-8


def test_tikhonov_rejects_bad_lambda():
    with pytest.raises(ParameterError):
        solve_tikhonov(np.eye(1), np.ones(1), 0.0, dims=(1, 1, 1))


def test_dims_mismatch():
    with pytest.raises(DimensionError):
        solve_tikhonov(np.eye(3), np.ones(3), 1.0, dims=(2, 2, 2))


def test_art_identity_one_sweep():
    rep = solve_art(np.eye(2), np.array([1.0, 2.0]), ArtConfig(0.0, 1, 1.0), dims=(2, 1, 1))
    assert np.allclose(rep.reconstruction.data, [1, 2])


def test_art_converges_on_consistent_system(rng):
    a = rng.random((30, 8))
    u_star = rng.random(8)
    f = a @ u_star
    oracle = np.linalg.lstsq(a, f, rcond=None)[0]
    rep = solve_art(a, f, ArtConfig(0.0, 40), dims=(2, 2, 2), keep_iterates=True)
    errs = [np.linalg.norm(u - oracle) for u in rep.iterates]
    assert all(x >= y - 1e-12 for x, y in zip(errs, errs[1:]))
    assert errs[-1] < 0.1 * errs[0]
    assert len(rep.iterations) == 40


def test_art_skips_zero_rows():
    a = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    rep = solve_art(a, np.array([1.0, 5.0, 2.0]), ArtConfig(0.0, 2), dims=(2, 1, 1))
    assert rep.params["skipped_rows"] == 1
    assert np.allclose(rep.reconstruction.data, [1, 2])


def test_art_nonnegative(rng):
    a = rng.standard_normal((20, 8))
    rep = solve_art(a, rng.standard_normal(20), ArtConfig(0.1, 5), dims=(2, 2, 2))
    assert rep.reconstruction.data.min() >= 0


def test_noise_level_examples():
    assert estimate_noise_level(np.full(5, 3.0)) == 0.0
    assert estimate_noise_level(np.array([0.0, 2.0])) == pytest.approx(1.0)
    x = np.random.default_rng(0).normal(0, 0.7, 200_000)
    assert abs(estimate_noise_level(x) / 0.7 - 1) < 0.02


def test_pnp_first_iterate_is_tikhonov(rng):
    a = rng.standard_normal((40, 27))
    f = rng.standard_normal(40)
    cfg = PnpConfig(mu0=0.5, n_it=1, alpha_ratio=0.0, use_l1=False, denoiser=IDENTITY)
    rep = solve_pnp(a, f, cfg, dims=(3, 3, 3))
    tik = solve_tikhonov(a, f, 0.5, dims=(3, 3, 3)).reconstruction.data
    assert rel(rep.reconstruction.data, project_nonneg(tik)) < 1e-9


def test_pnp_schedule_invariant(rng):
    a = rng.standard_normal((40, 27))
    f = rng.standard_normal(40)
    for use_l1 in (False, True):
        rep = solve_pnp(a, f, PnpConfig(mu0=2.0, n_it=6, use_l1=use_l1), dims=(3, 3, 3))
        lam = rep.params["lambda"]
        first = rep.iterations[0]
        assert lam == pytest.approx(2.0 * first.sigma_k**2, rel=1e-12)
        for r in rep.iterations:
            assert r.mu_k * r.sigma_k**2 == pytest.approx(lam, rel=1e-9)
        assert rep.iterations[0].extra["mu_used"] == 2.0
        # the penalty used in iteration k+1 is the one recorded after iteration k
        for r0, r1 in zip(rep.iterations, rep.iterations[1:]):
            assert r1.extra["mu_used"] == r0.mu_k


def test_pnp_huge_alpha_collapses_l1_branch(rng):
    a = rng.random((40, 27))
    f = a @ rng.random(27)
    rep = solve_pnp(a, f, PnpConfig(mu0=1.0, n_it=5, alpha_ratio=1e6, use_l1=True), dims=(3, 3, 3))
    assert all(r.extra["u3_max_abs"] == 0.0 for r in rep.iterations)


def test_pnp_alpha_bound_validation():
    with pytest.raises(ParameterError):
        PnpConfig(mu0=1.0, alpha_ratio=2.0, c_rec=1.0)


def test_pnp_constant_iterate_raises():
    with pytest.raises(ScheduleError):
        solve_pnp(np.zeros((5, 8)), np.ones(5), PnpConfig(mu0=1.0), dims=(2, 2, 2))


def test_pnp_output_nonnegative_and_trace_length(rng):
    a = rng.standard_normal((40, 27))
    rep = solve_pnp(a, rng.standard_normal(40), PnpConfig(mu0=1.0, n_it=4), dims=(3, 3, 3), keep_iterates=True)
    assert rep.reconstruction.data.min() >= 0
    assert len(rep.iterations) == len(rep.iterates) == 4
    assert rep.auxiliary["u1"].dims == (3, 3, 3)


def test_pnp_eig_and_cg_routes_agree(rng):
    a = rng.standard_normal((40, 27))
    f = rng.standard_normal(40)
    r1 = solve_pnp(a, f, PnpConfig(mu0=1.0, n_it=3), dims=(3, 3, 3))
    r2 = solve_pnp(a, f, PnpConfig(mu0=1.0, n_it=3, cg=CgConfig(method="eig")), dims=(3, 3, 3))
    assert rel(r2.reconstruction.data, r1.reconstruction.data) < 1e-8


def test_admm_hand_step_4x3():
    a = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, -1.0], [2.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
    f = np.array([1.0, -0.5, 2.0, 1.5])
    eps = 0.3
    for n_it in (1, 2, 3):
        rep = solve_admm_ppmpi(a, f, AdmmConfig(eps, n_it, IDENTITY), dims=(3, 1, 1))
        u, z0, *_ = hand_admm(a, f, eps, n_it)
        assert np.allclose(rep.reconstruction.data, u, rtol=0, atol=1e-10)
        assert rep.iterations[-1].extra["ball_distance"] == pytest.approx(np.linalg.norm(z0 - f), abs=1e-10)


def test_admm_infinite_ball_freezes_with_identity(rng):
    a = rng.random((6, 3))
    f = a @ rng.random(3)
    rep = solve_admm_ppmpi(a, f, AdmmConfig(1e12, 5, IDENTITY), dims=(3, 1, 1), keep_iterates=True)
    its = rep.iterates
    for later in its[2:]:
        assert np.allclose(later, its[1], atol=1e-12)


def test_ball_radius_formula():
    f = np.array([3.0, 4.0])
    assert ball_radius_from_snr_db(f, 20.0) == pytest.approx(np.sqrt(25 * 0.01))


def test_config_validation():
    with pytest.raises(ParameterError):
        PnpConfig(mu0=0.0)
    with pytest.raises(ParameterError):
        ArtConfig(lambda_art=-1.0)
    with pytest.raises(ParameterError):
        AdmmConfig(eps=-1.0)


def test_pnp_warm_start_matches_cold_start(rng):
    a = rng.standard_normal((40, 27))
    f = a @ rng.random(27)
    cold = solve_pnp(a, f, PnpConfig(mu0=0.5, n_it=4), dims=(3, 3, 3))
    warm = solve_pnp(a, f, PnpConfig(mu0=0.5, n_it=4, cg=CgConfig(warm_start=True)), dims=(3, 3, 3))
    assert rel(warm.reconstruction.data, cold.reconstruction.data) < 1e-8
    assert sum(r.cg_iterations for r in warm.iterations[1:]) < sum(r.cg_iterations for r in cold.iterations[1:])
