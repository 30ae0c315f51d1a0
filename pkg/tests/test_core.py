import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpirecon.core import (
    MAGIC,
    IterationRecord,
    RowMeta,
    ScanData,
    SolverReport,
    SvdFactors,
    SystemMatrix,
    Volume3D,
    devectorize,
    dumps_container,
    load_container,
    loads_container,
    save_container,
    vectorize,
)
from mpirecon.errors import (
    ContainerFormatError,
    ContainerTruncatedError,
    ContainerVersionError,
    DimensionError,
    ParameterError,
)


def test_vectorize_single_voxel():
    v = Volume3D.from_array(np.full((1, 1, 1), 5.0))
    assert vectorize(v).tolist() == [5.0]


def test_vectorize_line_keeps_order():
    v = Volume3D.from_array(np.array([3.0, 4.0]).reshape(2, 1, 1))
    assert vectorize(v).tolist() == [3.0, 4.0]


def test_vectorize_x_fastest_hand_layout():
    arr = np.zeros((2, 2, 1))
    arr[1, 0, 0] = 1.0
    # column-major: index = x + n1*y + n1*n2*z
    assert vectorize(Volume3D.from_array(arr)).tolist() == [0, 1, 0, 0]
    back = devectorize([0.0, 1.0, 0.0, 0.0], (2, 2, 1))
    assert back.array[1, 0, 0] == 1.0 and back.array.sum() == 1.0


def test_devectorize_single_voxel():
    v = devectorize([5.0], (1, 1, 1))
    assert v.dims == (1, 1, 1) and v.array[0, 0, 0] == 5.0


def test_vectorize_matches_loop_enumeration(rng):
    arr = rng.random((3, 4, 5))
    u = vectorize(Volume3D.from_array(arr))
    i = 0
    for z in range(5):
        for y in range(4):
            for x in range(3):
                assert u[i] == arr[x, y, z]
                i += 1


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6)))
def test_vectorize_roundtrip_bit_exact(arr):
    v = Volume3D.from_array(arr)
    back = devectorize(vectorize(v), v.dims)
    assert np.array_equal(back.array, arr)


def test_devectorize_wrong_length():
    with pytest.raises(DimensionError):
        devectorize(np.zeros(5), (2, 2, 1))


def test_volume_is_immutable():
    v = Volume3D.from_array(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0] = 1.0


def test_volume_rejects_wrong_length():
    with pytest.raises(DimensionError):
        Volume3D((2, 2, 2), np.zeros(7))


def test_svd_factors_require_nonincreasing():
    with pytest.raises(ParameterError):
        SvdFactors(np.eye(2), np.array([1.0, 2.0]), np.eye(2))


def _matrix(rng, m=120, n=27):
    meta = RowMeta(np.arange(m) % 3 + 1, 6.25e3 * (np.arange(m) // 2 + 1), np.arange(m) % 2)
    return SystemMatrix(rng.standard_normal((m, n)), meta, 100.0, (3, 3, 3))


def test_container_roundtrip_volume(tmp_path, rng):
    v = Volume3D.from_array(rng.random((19, 19, 19)), (1.0, 2.0, 3.0))
    save_container(tmp_path / "v.mrx", {"vol": v})
    assert load_container(tmp_path / "v.mrx")["vol"] == v


def test_container_roundtrip_matrix_fields(tmp_path, rng):
    a = _matrix(rng)
    save_container(tmp_path / "a.mrx", {"a": a})
    b = load_container(tmp_path / "a.mrx")["a"]
    assert (b.rows, b.cols) == (120, 27)
    assert b.row_meta == a.row_meta
    assert b.dims == (3, 3, 3)
    assert np.array_equal(b.entries, a.entries)


def test_container_roundtrip_scan_svd_report(tmp_path, rng):
    f = ScanData(rng.random(6), rng.random((2, 6)), 3, np.array([0.0, 1.0]), np.linspace(0, 1, 6))
    u, s, vt = np.linalg.svd(rng.random((6, 4)), full_matrices=False)
    svd = SvdFactors(u, s, vt.T)
    rec = Volume3D.from_array(rng.random((2, 2, 2)))
    rep = SolverReport(
        rec,
        [IterationRecord(1, 2.0, 0.5, 0.1, 4, 1.0, {"mu_used": 3.0})],
        "pnp",
        {"mu0": 3.0, "use_l1": True},
        {"u1": rec},
        [rec.data.copy()],
    )
    save_container(tmp_path / "x.mrx", {"f": f, "svd": svd, "rep": rep})
    back = load_container(tmp_path / "x.mrx")
    assert back["f"] == f
    assert back["svd"] == svd
    r = back["rep"]
    assert r.reconstruction == rec
    assert r.trace() == rep.trace()
    assert r.params == rep.params
    assert r.auxiliary["u1"] == rec
    assert np.array_equal(r.iterates[0], rec.data)


def test_container_corrupt_magic(tmp_path, rng):
    p = tmp_path / "bad.mrx"
    save_container(p, {"v": Volume3D.from_array(rng.random((2, 2, 2)))})
    raw = bytearray(p.read_bytes())
    raw[0] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(ContainerFormatError):
        load_container(p)


def test_container_truncated(rng):
    buf = dumps_container({"v": Volume3D.from_array(rng.random((3, 3, 3)))})
    with pytest.raises(ContainerTruncatedError):
        loads_container(buf[:-8])
    with pytest.raises(ContainerTruncatedError):
        loads_container(buf[:12])


def test_container_version_mismatch(rng):
    buf = dumps_container({"v": Volume3D.from_array(rng.random((2, 2, 2)))})
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16 : 16 + hlen])
    header["version"] = 99
    h2 = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with pytest.raises(ContainerVersionError):
        loads_container(MAGIC + struct.pack("<Q", len(h2)) + h2 + buf[16 + hlen :])


def test_container_layout_by_hand():
    v = Volume3D.from_array(np.arange(8, dtype=float).reshape(2, 2, 2, order="F"))
    buf = dumps_container({"v": v})
    assert buf[:8] == b"MRXCONT\x00"
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16 : 16 + hlen])
    assert header["format"] == "mrx" and header["version"] == 1
    t = header["objects"][0]["tensors"][0]
    payload = buf[16 + hlen :]
    data = np.frombuffer(payload[t["offset"] : t["offset"] + 8 * 8], "<f8")
    assert data.tolist() == list(range(8))


def test_container_deterministic_bytes(rng):
    objs = {"b": Volume3D.from_array(rng.random((2, 3, 4))), "a": _matrix(rng, 6, 27)}
    assert dumps_container(objs) == dumps_container(dict(reversed(list(objs.items()))))


def test_golden_container(datadir):
    golden = (datadir / "golden_volume.mrx").read_bytes()
    v = Volume3D.from_array(np.arange(24, dtype=float).reshape(2, 3, 4, order="F") / 8.0)
    assert dumps_container({"phantom": v}) == golden
    assert loads_container(golden)["phantom"] == v


def test_report_json_trace():
    rec = Volume3D.from_array(np.zeros((2, 2, 2)))
    rep = SolverReport(rec, [IterationRecord(1, mu_k=2.0, sigma_k=0.5)], "pnp", {"mu0": 1.0})
    d = json.loads(rep.to_json())
    assert d["method_id"] == "pnp"
    assert d["iterations"][0]["mu_k"] == 2.0
