import struct
import time

import numpy as np
import pytest
from scipy import ndimage

from mpirecon.core import Volume3D
from mpirecon.denoise import (
    Denoiser,
    DenoiserId,
    ExternalDenoiser,
    decode_header,
    denoise_2d,
    denoise_slicewise_3d,
    encode_frame,
    external_denoise_roundtrip,
    gaussian_width,
    tv_denoise,
    tv_denoise_reference,
)
from mpirecon.errors import DenoiserError, ParameterError

from conftest import STUB


def test_identity_bit_exact(rng):
    img = rng.standard_normal((5, 7))
    assert np.array_equal(denoise_2d(DenoiserId("identity"), img, 0.3), img)


@pytest.mark.parametrize("kind", ["gaussian", "tv"])
def test_zero_sigma_is_noop(rng, kind):
    img = rng.standard_normal((6, 6))
    assert np.allclose(denoise_2d(DenoiserId(kind), img, 0.0), img, atol=1e-12)


def test_tv_reduces_variance_on_noisy_constant():
    rng = np.random.default_rng(5)
    img = 1.0 + 0.2 * rng.standard_normal((32, 32))
    out = denoise_2d(DenoiserId("tv"), img, 0.2)
    assert out.var() < img.var()


def test_tv_kernel_matches_array_version(rng):
    g = rng.standard_normal((4, 6, 9))
    assert np.allclose(tv_denoise(g, 0.3), tv_denoise_reference(g, 0.3), atol=1e-13)


def test_tv_preserves_mean(rng):
    g = rng.random((1, 8, 8))
    assert tv_denoise(g, 0.5).mean() == pytest.approx(g.mean(), abs=1e-12)


@pytest.mark.parametrize("kind", ["gaussian", "tv"])
def test_nonexpansive(rng, kind):
    d = DenoiserId(kind)
    for _ in range(10):
        u, v = rng.random((8, 8)), rng.random((8, 8))
        du, dv = denoise_2d(d, u, 0.3), denoise_2d(d, v, 0.3)
        assert np.linalg.norm(du - dv) <= np.linalg.norm(u - v) + 1e-9


def test_gaussian_width_mapping():
    assert gaussian_width(0.0, 1.0) == 0.0
    assert gaussian_width(0.1, 1.0) == pytest.approx(0.2)
    assert gaussian_width(10.0, 1.0) == 3.0


def test_slicewise_identity_is_projection(rng):
    arr = rng.standard_normal((4, 5, 6))
    out = denoise_slicewise_3d(DenoiserId("identity"), Volume3D.from_array(arr), 0.1)
    assert np.allclose(out.array, np.maximum(arr, 0))


def test_slicewise_symmetry(rng):
    arr = rng.random((6, 6, 5))
    arr = arr + arr.transpose(1, 0, 2)
    out = denoise_slicewise_3d(DenoiserId("tv"), arr, 0.3)
    assert np.allclose(out, out.transpose(1, 0, 2), atol=1e-12)


def test_slicewise_gaussian_loop_oracle(rng):
    arr = rng.random((5, 5, 5))
    sigma = 0.4
    acc = np.zeros_like(arr)
    for axis in range(3):
        for i in range(5):
            idx = [slice(None)] * 3
            idx[axis] = i
            img = arr[tuple(idx)]
            width = min(2 * sigma / (img.max() - img.min()), 3.0)
            acc[tuple(idx)] += ndimage.gaussian_filter(img, width, mode="reflect")
    oracle = np.maximum(acc / 3, 0)
    out = denoise_slicewise_3d(DenoiserId("gaussian"), arr, sigma)
    assert np.allclose(out, oracle, atol=1e-14)


def test_slicewise_nonuniform_dims(rng):
    arr = rng.random((4, 5, 6))
    batched = denoise_slicewise_3d(DenoiserId("tv"), arr, 0.2)
    assert batched.shape == arr.shape and batched.min() >= 0


def test_unknown_kind():
    with pytest.raises(ParameterError):
        DenoiserId("bm3d")


def test_parse_external():
    d = DenoiserId.parse("external:python3 -m x --flag")
    assert d.kind == "external" and d.params["cmd"] == "python3 -m x --flag"


def test_negative_sigma_rejected(rng):
    with pytest.raises(ParameterError):
        denoise_slicewise_3d(DenoiserId("tv"), rng.random((3, 3, 3)), -1.0)


# --------------------------------------------------------------------------
# external protocol


def test_frame_layout_golden(datadir):
    img = np.arange(6, dtype=float).reshape(2, 3) / 4.0
    req = encode_frame(img, 0.125)
    assert req == (datadir / "frame_plus1_request.bin").read_bytes()
    magic, rows, cols, sigma = struct.unpack("<4sIId", req[:20])
    assert (magic, rows, cols, sigma) == (b"DNZ1", 2, 3, 0.125)
    assert np.array_equal(np.frombuffer(req[20:], "<f8"), img.ravel())


def test_golden_response_decodes(datadir):
    resp = (datadir / "frame_plus1_response.bin").read_bytes()
    rows, cols, sigma = decode_header(resp[:20])
    assert (rows, cols, sigma) == (2, 3, 0.125)
    out = np.frombuffer(resp[20:], "<f8").reshape(rows, cols)
    assert np.array_equal(out, np.arange(6).reshape(2, 3) / 4.0 + 1)


def test_bad_magic():
    with pytest.raises(DenoiserError):
        decode_header(b"XXXX" + bytes(16))


def test_echo_and_plus1(rng):
    img = rng.standard_normal((7, 5))
    assert np.array_equal(external_denoise_roundtrip(STUB + ["echo"], img, 0.1), img)
    assert np.array_equal(external_denoise_roundtrip(STUB + ["plus1"], img, 0.1), img + 1)


def test_sigma_fidelity(rng):
    img = rng.random((3, 3))
    out = external_denoise_roundtrip(STUB + ["check-sigma", "0.123456789"], img, 0.123456789)
    assert np.array_equal(out, img)
    with pytest.raises(DenoiserError):
        external_denoise_roundtrip(STUB + ["check-sigma", "0.5"], img, 0.25, timeout=10)


def test_child_exit_surfaces_diagnostics(rng):
    with ExternalDenoiser(STUB + ["die-after", "2"], timeout=10) as child:
        child(rng.random((2, 2)), 0.1)
        child(rng.random((2, 2)), 0.1)
        with pytest.raises(DenoiserError) as exc:
            child(rng.random((2, 2)), 0.1)
    assert "exiting on purpose" in exc.value.diagnostics


def test_hanging_child_times_out(rng):
    t0 = time.monotonic()
    with pytest.raises(DenoiserError, match="timed out"):
        external_denoise_roundtrip(STUB + ["hang"], rng.random((2, 2)), 0.1, timeout=1.0)
    assert time.monotonic() - t0 < 5.0


def test_missing_binary():
    with pytest.raises(DenoiserError):
        ExternalDenoiser(["/nonexistent/denoiser"])


def test_external_slicewise_matches_identity(rng):
    arr = rng.standard_normal((3, 4, 5))
    d = DenoiserId("external", {"cmd": " ".join(STUB + ["echo"])})
    out = denoise_slicewise_3d(d, arr, 0.2)
    assert np.allclose(out, np.maximum(arr, 0))


def test_denoiser_reuses_one_child(rng):
    d = Denoiser(DenoiserId("external", {"cmd": " ".join(STUB + ["plus1"])}))
    try:
        pid = d._child.proc.pid
        for _ in range(3):
            denoise_slicewise_3d(d, rng.random((3, 3, 3)), 0.1)
        assert d._child.proc.pid == pid and d._child.proc.poll() is None
    finally:
        d.close()
