"""Minimal children for the external denoiser protocol.

    python -m mpirecon.denoise_stubs echo
    python -m mpirecon.denoise_stubs plus1
    python -m mpirecon.denoise_stubs check-sigma 0.25
    python -m mpirecon.denoise_stubs die-after 3
    python -m mpirecon.denoise_stubs hang

They double as a reference for writing a real child, e.g. one wrapping a
pretrained network.
"""
import struct
import sys
import time

import numpy as np

HEADER = struct.Struct("<4sIId")


def _read_exact(stream, n):
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def serve(transform, stdin=None, stdout=None, die_after=None):
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    served = 0
    while True:
        head = _read_exact(stdin, HEADER.size)
        if head is None:
            return 0
        magic, rows, cols, sigma = HEADER.unpack(head)
        if magic != b"DNZ1":
            sys.stderr.write("bad magic\n")
            return 2
        img = np.frombuffer(_read_exact(stdin, 8 * rows * cols), dtype="<f8").reshape(rows, cols)
        if die_after is not None and served >= die_after:
            sys.stderr.write("stub exiting on purpose\n")
            return 1
        out = np.ascontiguousarray(transform(img, sigma), dtype="<f8")
        stdout.write(HEADER.pack(magic, rows, cols, sigma) + out.tobytes())
        stdout.flush()
        served += 1


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    mode = argv[0] if argv else "echo"
    if mode == "echo":
        return serve(lambda img, s: img)
    if mode == "plus1":
        return serve(lambda img, s: img + 1.0)
    if mode == "check-sigma":
        expected = float(argv[1])

        def check(img, s):
            if abs(s - expected) > 1e-12:
                sys.stderr.write(f"sigma mismatch: got {s!r}, expected {expected!r}\n")
                sys.exit(3)
            return img

        return serve(check)
    if mode == "die-after":
        return serve(lambda img, s: img, die_after=int(argv[1]))
    if mode == "hang":
        sys.stdin.buffer.read(HEADER.size)
        time.sleep(3600)
        return 0
    sys.stderr.write(f"unknown mode {mode!r}\n")
    return 2


if __name__ == "__main__":
    sys.exit(main())
