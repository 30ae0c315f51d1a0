"""Domain types, vectorization conventions and the ``.mrx`` container.

Volumes are vectorized column-major with x varying fastest, i.e. voxel
``(ix, iy, iz)`` sits at ``ix + n1 * (iy + n2 * iz)``.  All numeric data is
float64.

Container layout (all integers little-endian)::

    bytes 0..7    magic  b"MRXCONT\\x00"
    bytes 8..15   uint64 header length H
    bytes 16..    UTF-8 JSON header (H bytes)
    then          float64 payloads, C order, at the header's byte offsets
                  (offsets relative to the first payload byte)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    ContainerFormatError,
    ContainerTruncatedError,
    ContainerVersionError,
    DimensionError,
    ParameterError,
)

MAGIC = b"MRXCONT\x00"
FORMAT_VERSION = 1
DEFAULT_VOXEL_SIZE_MM = (2.0, 2.0, 2.0)

REAL, IMAG = 0, 1


def _frozen_array(x, ndim=None, name="array"):
    arr = np.array(x, dtype=np.float64, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def _dims3(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise DimensionError(f"dims must be three positive ints, got {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Particle concentration on an ``n1 x n2 x n3`` voxel grid.

    ``data`` is the vectorized field (x fastest), in units of the calibration
    delta concentration.
    """

    dims: tuple[int, int, int]
    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = DEFAULT_VOXEL_SIZE_MM

    def __post_init__(self):
        dims = _dims3(self.dims)
        data = _frozen_array(np.ravel(self.data), name="data")
        if data.size != dims[0] * dims[1] * dims[2]:
            raise DimensionError(f"data length {data.size} does not match dims {dims}")
        vs = tuple(float(v) for v in self.voxel_size_mm)
        if len(vs) != 3 or min(vs) <= 0:
            raise ParameterError(f"voxel_size_mm must be three positive reals, got {vs}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size_mm", vs)

    @classmethod
    def from_array(cls, arr, voxel_size_mm=DEFAULT_VOXEL_SIZE_MM) -> "Volume3D":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionError(f"expected a 3-D array, got shape {arr.shape}")
        return cls(arr.shape, arr.ravel(order="F"), voxel_size_mm)

    @property
    def n_voxels(self) -> int:
        return self.data.size

    @property
    def array(self) -> np.ndarray:
        """Read-only 3-D view indexed ``[ix, iy, iz]``."""
        return self.data.reshape(self.dims, order="F")

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.voxel_size_mm == other.voxel_size_mm
            and np.array_equal(self.data, other.data)
        )


def vectorize(v: Volume3D) -> np.ndarray:
    return np.array(v.data)


def devectorize(u, dims, voxel_size_mm=DEFAULT_VOXEL_SIZE_MM) -> Volume3D:
    u = np.asarray(u, dtype=np.float64)
    dims = _dims3(dims)
    if u.ndim != 1 or u.size != dims[0] * dims[1] * dims[2]:
        raise DimensionError(f"vector of shape {u.shape} cannot be reshaped to {dims}")
    return Volume3D(dims, u, voxel_size_mm)


@dataclass(frozen=True, eq=False)
class RowMeta:
    """Per-row acquisition metadata of a system matrix.

    ``part`` holds ``REAL`` (0) or ``IMAG`` (1).
    """

    channel: np.ndarray
    frequency_hz: np.ndarray
    part: np.ndarray

    def __post_init__(self):
        channel = np.asarray(self.channel, dtype=np.int64).copy()
        freq = _frozen_array(self.frequency_hz, ndim=1, name="frequency_hz")
        part = np.asarray(self.part, dtype=np.int8).copy()
        if not (channel.shape == freq.shape == part.shape):
            raise DimensionError("row metadata arrays must have equal length")
        if np.any((part != REAL) & (part != IMAG)):
            raise ParameterError("part entries must be 0 (real) or 1 (imag)")
        channel.flags.writeable = False
        part.flags.writeable = False
        object.__setattr__(self, "channel", channel)
        object.__setattr__(self, "frequency_hz", freq)
        object.__setattr__(self, "part", part)

    def __len__(self):
        return self.channel.size

    def take(self, idx) -> "RowMeta":
        return RowMeta(self.channel[idx], self.frequency_hz[idx], self.part[idx])

    @classmethod
    def components(cls, k: int) -> "RowMeta":
        """Placeholder metadata for rows that are abstract components (after rSVD)."""
        return cls(np.zeros(k), np.arange(k, dtype=np.float64), np.zeros(k))

    def __eq__(self, other):
        if not isinstance(other, RowMeta):
            return NotImplemented
        return (
            np.array_equal(self.channel, other.channel)
            and np.array_equal(self.frequency_hz, other.frequency_hz)
            and np.array_equal(self.part, other.part)
        )


@dataclass(frozen=True, eq=False)
class SystemMatrix:
    entries: np.ndarray
    row_meta: RowMeta
    delta_concentration: float = 100.0
    dims: tuple[int, int, int] | None = None

    def __post_init__(self):
        entries = _frozen_array(self.entries, ndim=2, name="entries")
        if len(self.row_meta) != entries.shape[0]:
            raise DimensionError(
                f"row_meta has {len(self.row_meta)} rows, matrix has {entries.shape[0]}"
            )
        if self.dims is not None:
            dims = _dims3(self.dims)
            if dims[0] * dims[1] * dims[2] != entries.shape[1]:
                raise DimensionError(f"dims {dims} do not match {entries.shape[1]} columns")
            object.__setattr__(self, "dims", dims)
        if self.delta_concentration <= 0:
            raise ParameterError("delta_concentration must be positive")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "delta_concentration", float(self.delta_concentration))

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SystemMatrix):
            return NotImplemented
        return (
            np.array_equal(self.entries, other.entries)
            and self.row_meta == other.row_meta
            and self.delta_concentration == other.delta_concentration
            and self.dims == other.dims
        )


@dataclass(frozen=True, eq=False)
class ScanData:
    """Measurement vector aligned row-for-row with a :class:`SystemMatrix`.

    ``background_scans`` is a ``(B, M)`` array (``B`` may be 0).  The optional
    ``background_times`` / ``row_times`` feed interleaved background correction.
    """

    values: np.ndarray
    background_scans: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    n_repetitions: int = 1
    background_times: np.ndarray | None = None
    row_times: np.ndarray | None = None

    def __post_init__(self):
        values = _frozen_array(self.values, ndim=1, name="values")
        bg = np.asarray(self.background_scans, dtype=np.float64)
        if bg.size == 0:
            bg = np.zeros((0, values.size))
        if bg.ndim != 2 or bg.shape[1] != values.size:
            raise DimensionError(
                f"background_scans must have shape (B, {values.size}), got {bg.shape}"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "background_scans", _frozen_array(bg))
        if self.background_times is not None:
            bt = _frozen_array(self.background_times, ndim=1, name="background_times")
            if bt.size != bg.shape[0]:
                raise DimensionError("background_times must have one entry per background scan")
            object.__setattr__(self, "background_times", bt)
        if self.row_times is not None:
            rt = _frozen_array(self.row_times, ndim=1, name="row_times")
            if rt.size != values.size:
                raise DimensionError("row_times must have one entry per row")
            object.__setattr__(self, "row_times", rt)
        if int(self.n_repetitions) < 1:
            raise ParameterError("n_repetitions must be >= 1")
        object.__setattr__(self, "n_repetitions", int(self.n_repetitions))

    @property
    def rows(self) -> int:
        return self.values.size

    def take(self, idx) -> "ScanData":
        return ScanData(
            self.values[idx],
            self.background_scans[:, idx],
            self.n_repetitions,
            self.background_times,
            None if self.row_times is None else self.row_times[idx],
        )

    def __eq__(self, other):
        if not isinstance(other, ScanData):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return np.array_equal(a, b)

        return (
            np.array_equal(self.values, other.values)
            and np.array_equal(self.background_scans, other.background_scans)
            and self.n_repetitions == other.n_repetitions
            and same(self.background_times, other.background_times)
            and same(self.row_times, other.row_times)
        )


@dataclass(frozen=True, eq=False)
class SvdFactors:
    """Truncated factorization ``A ~ u_k @ diag(sigma_k) @ v_k.T``."""

    u_k: np.ndarray
    sigma_k: np.ndarray
    v_k: np.ndarray

    def __post_init__(self):
        u = _frozen_array(self.u_k, ndim=2, name="u_k")
        s = _frozen_array(self.sigma_k, ndim=1, name="sigma_k")
        v = _frozen_array(self.v_k, ndim=2, name="v_k")
        k = s.size
        if u.shape[1] != k or v.shape[1] != k:
            raise DimensionError(f"factor shapes {u.shape}, {s.shape}, {v.shape} disagree")
        if k > min(u.shape[0], v.shape[0]):
            raise DimensionError("rank exceeds min(M, N)")
        if k and (np.any(s <= 0) or np.any(np.diff(s) > 0)):
            raise ParameterError("sigma_k must be positive and nonincreasing")
        object.__setattr__(self, "u_k", u)
        object.__setattr__(self, "sigma_k", s)
        object.__setattr__(self, "v_k", v)

    @property
    def rank(self) -> int:
        return self.sigma_k.size

    def __eq__(self, other):
        if not isinstance(other, SvdFactors):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in ("u_k", "sigma_k", "v_k")
        )


@dataclass
class IterationRecord:
    k: int
    mu_k: float | None = None
    sigma_k: float | None = None
    data_residual: float | None = None
    cg_iterations: int | None = None
    wall_ms: float = 0.0
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        d = {
            "k": self.k,
            "mu_k": self.mu_k,
            "sigma_k": self.sigma_k,
            "data_residual": self.data_residual,
            "cg_iterations": self.cg_iterations,
            "wall_ms": self.wall_ms,
        }
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d) -> "IterationRecord":
        d = dict(d)
        base = {k: d.pop(k) for k in ("k", "mu_k", "sigma_k", "data_residual", "cg_iterations", "wall_ms") if k in d}
        return cls(extra=d, **base)


@dataclass
class SolverReport:
    """Reconstruction plus its per-iteration trace.

    ``auxiliary`` carries extra named volumes (the PnP data iterate ``u1``),
    ``iterates`` the per-iteration snapshots when the solver was asked to keep
    them.
    """

    reconstruction: Volume3D
    iterations: list[IterationRecord]
    method_id: str
    params: dict[str, Any] = field(default_factory=dict)
    auxiliary: dict[str, Volume3D] = field(default_factory=dict)
    iterates: list[np.ndarray] | None = None

    def trace(self) -> list[dict[str, Any]]:
        return [rec.to_dict() for rec in self.iterations]

    def to_json(self, indent=2) -> str:
        return json.dumps(
            {
                "method_id": self.method_id,
                "params": _jsonable(self.params),
                "dims": list(self.reconstruction.dims),
                "iterations": self.trace(),
            },
            indent=indent,
            sort_keys=True,
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


# --------------------------------------------------------------------------
# container


def _encode(obj) -> tuple[str, dict, dict[str, np.ndarray]]:
    if isinstance(obj, Volume3D):
        return "Volume3D", {"dims": list(obj.dims), "voxel_size_mm": list(obj.voxel_size_mm)}, {
            "data": obj.data
        }
    if isinstance(obj, SystemMatrix):
        attrs = {
            "delta_concentration": obj.delta_concentration,
            "dims": None if obj.dims is None else list(obj.dims),
        }
        return "SystemMatrix", attrs, {
            "entries": obj.entries,
            "row_channel": obj.row_meta.channel.astype(np.float64),
            "row_frequency_hz": obj.row_meta.frequency_hz,
            "row_part": obj.row_meta.part.astype(np.float64),
        }
    if isinstance(obj, ScanData):
        tensors = {"values": obj.values, "background_scans": obj.background_scans}
        if obj.background_times is not None:
            tensors["background_times"] = obj.background_times
        if obj.row_times is not None:
            tensors["row_times"] = obj.row_times
        return "ScanData", {"n_repetitions": obj.n_repetitions}, tensors
    if isinstance(obj, SvdFactors):
        return "SvdFactors", {"rank": obj.rank}, {
            "u_k": obj.u_k,
            "sigma_k": obj.sigma_k,
            "v_k": obj.v_k,
        }
    if isinstance(obj, SolverReport):
        rec = obj.reconstruction
        attrs = {
            "method_id": obj.method_id,
            "params": _jsonable(obj.params),
            "iterations": obj.trace(),
            "dims": list(rec.dims),
            "voxel_size_mm": list(rec.voxel_size_mm),
            "auxiliary": sorted(obj.auxiliary),
        }
        tensors = {"reconstruction": rec.data}
        for name in sorted(obj.auxiliary):
            tensors["aux:" + name] = obj.auxiliary[name].data
        if obj.iterates is not None:
            tensors["iterates"] = np.asarray(obj.iterates, dtype=np.float64).reshape(
                len(obj.iterates), rec.n_voxels
            )
        return "SolverReport", attrs, tensors
    raise TypeError(f"cannot store objects of type {type(obj).__name__}")


def _decode(kind: str, attrs: dict, t: dict[str, np.ndarray]):
    if kind == "Volume3D":
        return Volume3D(tuple(attrs["dims"]), t["data"], tuple(attrs["voxel_size_mm"]))
    if kind == "SystemMatrix":
        meta = RowMeta(t["row_channel"], t["row_frequency_hz"], t["row_part"])
        dims = None if attrs.get("dims") is None else tuple(attrs["dims"])
        return SystemMatrix(t["entries"], meta, attrs["delta_concentration"], dims)
    if kind == "ScanData":
        return ScanData(
            t["values"],
            t["background_scans"],
            attrs["n_repetitions"],
            t.get("background_times"),
            t.get("row_times"),
        )
    if kind == "SvdFactors":
        return SvdFactors(t["u_k"], t["sigma_k"], t["v_k"])
    if kind == "SolverReport":
        dims, vs = tuple(attrs["dims"]), tuple(attrs["voxel_size_mm"])
        aux = {name: Volume3D(dims, t["aux:" + name], vs) for name in attrs["auxiliary"]}
        iterates = list(t["iterates"]) if "iterates" in t else None
        return SolverReport(
            Volume3D(dims, t["reconstruction"], vs),
            [IterationRecord.from_dict(d) for d in attrs["iterations"]],
            attrs["method_id"],
            attrs["params"],
            aux,
            iterates,
        )
    raise ContainerFormatError(f"unknown object type {kind!r}")


def dumps_container(objects: dict[str, Any]) -> bytes:
    entries, payloads, offset = [], [], 0
    # objects are written in name order so equal inputs give equal bytes
    for name, obj in sorted(objects.items(), key=lambda kv: str(kv[0])):
        kind, attrs, tensors = _encode(obj)
        tdesc = []
        for tname, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            tdesc.append({"name": tname, "shape": list(arr.shape), "width": 8, "offset": offset})
            payloads.append(arr.tobytes(order="C"))
            offset += arr.nbytes
        entries.append({"name": str(name), "type": kind, "attrs": attrs, "tensors": tdesc})
    header = {"format": "mrx", "version": FORMAT_VERSION, "payload_bytes": offset, "objects": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(payloads)


def loads_container(buf: bytes) -> dict[str, Any]:
    if not buf or not (buf[:8] == MAGIC or MAGIC.startswith(buf)):
        raise ContainerFormatError("not an mrx container (bad magic bytes)")
    if len(buf) < 16:
        raise ContainerTruncatedError("file ends inside the fixed preamble")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen > len(buf):
        raise ContainerTruncatedError("header extends past end of file")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"malformed header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != "mrx":
        raise ContainerFormatError("header is not an mrx header")
    if header.get("version") != FORMAT_VERSION:
        raise ContainerVersionError(
            f"unsupported container version {header.get('version')!r} (expected {FORMAT_VERSION})"
        )
    payload = memoryview(buf)[16 + hlen :]
    if len(payload) < header.get("payload_bytes", 0):
        raise ContainerTruncatedError(
            f"payload has {len(payload)} bytes, header promises {header['payload_bytes']}"
        )
    out = {}
    try:
        for entry in header["objects"]:
            tensors = {}
            for td in entry["tensors"]:
                if td["width"] != 8:
                    raise ContainerFormatError(f"unsupported scalar width {td['width']}")
                count = int(np.prod(td["shape"], dtype=np.int64))
                start, stop = td["offset"], td["offset"] + 8 * count
                if stop > len(payload):
                    raise ContainerTruncatedError(f"tensor {td['name']!r} is truncated")
                arr = np.frombuffer(payload[start:stop], dtype="<f8").astype(np.float64)
                tensors[td["name"]] = arr.reshape(td["shape"])
            out[entry["name"]] = _decode(entry["type"], entry["attrs"], tensors)
    except KeyError as exc:
        raise ContainerFormatError(f"header is missing field {exc}") from None
    return out


def save_container(path, objects: dict[str, Any]) -> None:
    Path(path).write_bytes(dumps_container(objects))


def load_container(path) -> dict[str, Any]:
    return loads_container(Path(path).read_bytes())
