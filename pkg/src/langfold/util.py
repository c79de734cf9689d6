"""Shared helpers: deterministic seed derivation and PGM image export."""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer (deterministic across platforms)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(seed: int, *streams: int) -> int:
    """Derive an independent 64-bit seed from a base seed and stream indices.

    Replaces Python's salted ``hash`` so derived seeds are stable across runs.
    """
    x = seed & _MASK64
    for s in streams:
        x = splitmix64(x ^ splitmix64(s & _MASK64))
    return x


def make_rng(seed: int, *streams: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *streams)))


class ByteReader:
    """Cursor over bytes that fails loudly on truncation."""

    def __init__(self, data: bytes, what: str = "file"):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.what}: truncated (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        import struct

        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt)

    def done(self) -> bool:
        return self.pos == len(self.data)


def atomic_write(path, data: bytes) -> None:
    """Write a file via temp + rename so readers never see partial content."""
    import os

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, str(path))


def write_pgm16(path: str, values: np.ndarray) -> None:
    """Write a [0,1] float image as a 16-bit binary PGM (maxval 65535).

    Samples above 255 levels are two bytes, most significant first, per the
    Netpbm convention.
    """
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    data = np.round(v * 65535.0).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm16(path: str) -> np.ndarray:
    """Read back a 16-bit binary PGM written by :func:`write_pgm16`."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM file: {magic!r}")
        dims = f.readline().split()
        maxval = int(f.readline())
        if maxval != 65535:
            raise ValueError(f"expected maxval 65535, got {maxval}")
        w, h = int(dims[0]), int(dims[1])
        data = np.frombuffer(f.read(w * h * 2), dtype=">u2").reshape(h, w)
    return data.astype(np.float64) / 65535.0
