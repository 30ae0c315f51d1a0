"""Noise-level-aware 2-D denoisers and their slicewise 3-D application.

Kinds: ``identity``, ``gaussian``, ``tv`` and ``external``.  External
denoisers are child processes speaking a framed binary protocol over
stdin/stdout; one child serves any number of requests.  Frame layout
(little-endian)::

    4 bytes  magic b"DNZ1"
    uint32   rows
    uint32   cols
    float64  sigma
    rows*cols float64 pixels, row-major

The child answers each request with one frame of identical layout and shape
(``sigma`` echoed).  Images travel in physical units; any intensity
rescaling is the child's business.
"""
from __future__ import annotations

import os
import selectors
import shlex
import struct
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numba import njit
from scipy import ndimage

from .core import Volume3D
from .errors import DenoiserError, ParameterError

KINDS = ("identity", "gaussian", "tv", "external")

FRAME_MAGIC = b"DNZ1"
_HEADER = struct.Struct("<4sIId")

TV_ITERATIONS = 100
TV_STEP = 0.25


@dataclass(frozen=True)
class DenoiserId:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown denoiser kind {self.kind!r}; expected one of {KINDS}")

    @classmethod
    def parse(cls, text: str, params: dict[str, Any] | None = None) -> "DenoiserId":
        """Parse ``identity``, ``tv``, ``gaussian`` or ``external:<command line>``."""
        params = dict(params or {})
        if text.startswith("external:"):
            params["cmd"] = text[len("external:") :]
            return cls("external", params)
        return cls(text, params)

    def __hash__(self):
        return hash((self.kind, tuple(sorted((k, str(v)) for k, v in self.params.items()))))


# --------------------------------------------------------------------------
# classical kernels, vectorized over a leading batch axis


def gaussian_width(sigma: float, img_range: float, scale: float = 2.0, max_width: float = 3.0):
    """Spatial std (pixels) used by the gaussian kind for noise level ``sigma``."""
    if sigma <= 0 or img_range <= 0:
        return 0.0
    return float(min(max(scale * sigma / img_range, 0.0), max_width))


def _gaussian_stack(stack, sigma, params):
    out = np.empty_like(stack)
    scale = float(params.get("scale", 2.0))
    max_width = float(params.get("max_width", 3.0))
    for i, img in enumerate(stack):
        width = gaussian_width(sigma, float(img.max() - img.min()), scale, max_width)
        out[i] = img if width == 0 else ndimage.gaussian_filter(img, width, mode="reflect")
    return out


def _grad(z):
    gx = np.zeros_like(z)
    gy = np.zeros_like(z)
    gx[..., :-1, :] = z[..., 1:, :] - z[..., :-1, :]
    gy[..., :, :-1] = z[..., :, 1:] - z[..., :, :-1]
    return gx, gy


def _div(px, py):
    d = np.zeros_like(px)
    d[..., :-1, :] += px[..., :-1, :]
    d[..., 1:, :] -= px[..., :-1, :]
    d[..., :, :-1] += py[..., :, :-1]
    d[..., :, 1:] -= py[..., :, :-1]
    return d


@njit(cache=True)
def _tv_dual(g, weight, n_iter, step):
    # Chambolle iteration on a (batch, rows, cols) stack; same update as the
    # array expressions in _grad/_div, written out per pixel
    b, nr, nc = g.shape
    px = np.zeros_like(g)
    py = np.zeros_like(g)
    d = np.zeros_like(g)
    out = np.empty_like(g)
    for t in range(b):
        for _ in range(n_iter):
            for i in range(nr):
                for j in range(nc):
                    v = 0.0
                    if i < nr - 1:
                        v += px[t, i, j]
                    if i > 0:
                        v -= px[t, i - 1, j]
                    if j < nc - 1:
                        v += py[t, i, j]
                    if j > 0:
                        v -= py[t, i, j - 1]
                    d[t, i, j] = v - g[t, i, j] / weight
            for i in range(nr):
                for j in range(nc):
                    gx = d[t, i + 1, j] - d[t, i, j] if i < nr - 1 else 0.0
                    gy = d[t, i, j + 1] - d[t, i, j] if j < nc - 1 else 0.0
                    norm = 1.0 + step * np.sqrt(gx * gx + gy * gy)
                    px[t, i, j] = (px[t, i, j] + step * gx) / norm
                    py[t, i, j] = (py[t, i, j] + step * gy) / norm
        for i in range(nr):
            for j in range(nc):
                v = 0.0
                if i < nr - 1:
                    v += px[t, i, j]
                if i > 0:
                    v -= px[t, i - 1, j]
                if j < nc - 1:
                    v += py[t, i, j]
                if j > 0:
                    v -= py[t, i, j - 1]
                out[t, i, j] = g[t, i, j] - weight * v
    return out


def tv_denoise_reference(stack, weight: float, n_iter: int = TV_ITERATIONS, step: float = TV_STEP):
    """Array-expression version of :func:`tv_denoise` (slow, kept as a cross-check)."""
    g = np.asarray(stack, dtype=np.float64)
    if weight <= 0:
        return g.copy()
    px = np.zeros_like(g)
    py = np.zeros_like(g)
    scaled = g / weight
    for _ in range(n_iter):
        gx, gy = _grad(_div(px, py) - scaled)
        norm = 1.0 + step * np.sqrt(gx * gx + gy * gy)
        px = (px + step * gx) / norm
        py = (py + step * gy) / norm
    return g - weight * _div(px, py)


def tv_denoise(stack, weight: float, n_iter: int = TV_ITERATIONS, step: float = TV_STEP):
    """ROF denoising ``min_z 0.5 ||z - g||^2 + weight * TV(z)`` per 2-D image.

    Chambolle's dual projection with a fixed iteration count; the trailing
    two axes are the image axes.
    """
    g = np.asarray(stack, dtype=np.float64)
    if weight <= 0:
        return g.copy()
    if g.ndim < 2:
        raise ParameterError("tv_denoise needs images with two trailing axes")
    flat = np.ascontiguousarray(g.reshape((-1,) + g.shape[-2:]))
    return _tv_dual(flat, float(weight), int(n_iter), float(step)).reshape(g.shape)


def _tv_stack(stack, sigma, params):
    ratio = float(params.get("ratio", 1.0))
    return tv_denoise(stack, sigma * sigma * ratio, int(params.get("n_iter", TV_ITERATIONS)))


# --------------------------------------------------------------------------
# external child process


def encode_frame(img, sigma: float) -> bytes:
    img = np.ascontiguousarray(img, dtype="<f8")
    if img.ndim != 2:
        raise ParameterError("frames carry 2-D images")
    rows, cols = img.shape
    return _HEADER.pack(FRAME_MAGIC, rows, cols, float(sigma)) + img.tobytes()


def decode_header(buf: bytes) -> tuple[int, int, float]:
    magic, rows, cols, sigma = _HEADER.unpack(buf)
    if magic != FRAME_MAGIC:
        raise DenoiserError(f"malformed frame: bad magic {magic!r}")
    return rows, cols, sigma


class ExternalDenoiser:
    """A persistent child process serving framed denoising requests.

    At most one request is in flight; use one instance per worker.
    """

    def __init__(self, cmd, timeout: float = 30.0):
        self.argv = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
        self.timeout = float(timeout)
        self._stderr = tempfile.TemporaryFile()
        try:
            self.proc = subprocess.Popen(
                self.argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=self._stderr,
                bufsize=0,
            )
        except OSError as exc:
            self._stderr.close()
            raise DenoiserError(f"cannot launch denoiser {self.argv!r}: {exc}") from None
        self._sel = selectors.DefaultSelector()
        self._sel.register(self.proc.stdout, selectors.EVENT_READ)

    def _diagnostics(self) -> str:
        try:
            self._stderr.seek(0)
            return self._stderr.read().decode("utf-8", "replace")[-4000:]
        except (OSError, ValueError):
            return ""

    def _fail(self, message):
        self.kill()
        code = self.proc.poll()
        if code is not None:
            message += f" (exit code {code})"
        raise DenoiserError(message, self._diagnostics())

    def _read_exact(self, n: int, deadline: float) -> bytes:
        chunks, got = [], 0
        fd = self.proc.stdout.fileno()
        while got < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0 or not self._sel.select(remaining):
                self._fail(f"denoiser timed out after {self.timeout:g} s")
            chunk = os.read(fd, n - got)
            if not chunk:
                self._fail("denoiser closed its output")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def __call__(self, img, sigma: float):
        img = np.asarray(img, dtype=np.float64)
        request = encode_frame(img, sigma)
        deadline = time.monotonic() + self.timeout
        try:
            self.proc.stdin.write(request)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError):
            self._fail("denoiser is not accepting input")
        rows, cols, _ = decode_header(self._read_exact(_HEADER.size, deadline))
        if (rows, cols) != img.shape:
            self._fail(f"denoiser answered with shape {(rows, cols)} for a {img.shape} request")
        payload = self._read_exact(8 * rows * cols, deadline)
        return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)

    def kill(self):
        if self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
                self.proc.wait(timeout=min(self.timeout, 5.0))
            except (OSError, subprocess.TimeoutExpired):
                self.kill()
        self._sel.close()
        self.proc.stdout.close()
        self._stderr.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def external_denoise_roundtrip(cmd, img, sigma: float, timeout: float = 30.0):
    """One request to a freshly spawned child; mostly useful for diagnostics."""
    with ExternalDenoiser(cmd, timeout) as child:
        return child(img, sigma)


# --------------------------------------------------------------------------
# dispatch


class Denoiser:
    """A resolved :class:`DenoiserId` that denoises stacks of 2-D slices."""

    def __init__(self, d: DenoiserId):
        self.id = d
        self._child = None
        if d.kind == "external":
            if "cmd" not in d.params:
                raise ParameterError("external denoiser needs a 'cmd' parameter")
            self._child = ExternalDenoiser(d.params["cmd"], float(d.params.get("timeout", 30.0)))

    def denoise_stack(self, stack, sigma: float):
        if sigma < 0:
            raise ParameterError(f"noise level must be nonnegative, got {sigma}")
        stack = np.asarray(stack, dtype=np.float64)
        kind = self.id.kind
        if kind == "identity":
            return stack.copy()
        if kind == "gaussian":
            return _gaussian_stack(stack, sigma, self.id.params)
        if kind == "tv":
            return _tv_stack(stack, sigma, self.id.params)
        return np.stack([self._child(img, sigma) for img in stack])

    def close(self):
        if self._child is not None:
            self._child.close()
            self._child = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def resolve(d) -> Denoiser:
    if isinstance(d, Denoiser):
        return d
    if isinstance(d, str):
        d = DenoiserId.parse(d)
    return Denoiser(d)


def denoise_2d(d, img, sigma: float):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ParameterError(f"denoise_2d expects a 2-D image, got shape {img.shape}")
    if isinstance(d, Denoiser):
        return d.denoise_stack(img[None], sigma)[0]
    if isinstance(d, DenoiserId) and d.kind == "identity":
        return img
    with resolve(d) as den:
        return den.denoise_stack(img[None], sigma)[0]


def denoise_slicewise_3d(d, vol: Volume3D | np.ndarray, sigma: float):
    """Denoise slices perpendicular to each axis, average the three volumes,
    clip negatives.

    Returns the same type it was given (a :class:`Volume3D` or a 3-D array).
    Slices are visited axis by axis, index ascending.
    """
    if sigma < 0:
        raise ParameterError(f"noise level must be nonnegative, got {sigma}")
    arr = vol.array if isinstance(vol, Volume3D) else np.asarray(vol, dtype=np.float64)
    owned = not isinstance(d, Denoiser)
    den = resolve(d)
    try:
        stacks = [np.moveaxis(arr, axis, 0) for axis in range(3)]
        if den.id.kind in ("tv", "gaussian") and len({s.shape for s in stacks}) == 1:
            # one batched call; results are identical to three separate calls
            out = den.denoise_stack(np.concatenate(stacks), sigma)
            outs = np.split(out, 3)
        else:
            outs = [den.denoise_stack(s, sigma) for s in stacks]
        acc = np.zeros_like(arr)
        for axis, o in enumerate(outs):
            acc += np.moveaxis(o, 0, axis)
    finally:
        if owned:
            den.close()
    out = np.maximum(acc / 3.0, 0.0)
    if isinstance(vol, Volume3D):
        return Volume3D.from_array(out, vol.voxel_size_mm)
    return out
