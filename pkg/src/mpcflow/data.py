"""Synthetic datasets and small-image file formats.

Every sampler is a pure function of its arguments and an integer seed.
Random streams come from numpy's Philox counter-based bit generator keyed by
``SeedSequence([seed, *stream])``, so independent streams can be derived
without coordination (``make_rng(seed, job_index)``).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

HEX_SIDE = 2.0
IMAGE_SIZE = 16

RAW_MAGIC = b"F64GRID0"


class ImageFormatError(ValueError):
    """Base class for image/grid decoding failures."""


class UnsupportedFormat(ImageFormatError):
    pass


class MalformedHeader(ImageFormatError):
    pass


class ShortPayload(ImageFormatError):
    pass


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def standard_normal(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` standard normals by the Box-Muller transform on ``rng`` uniforms."""
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1]
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:n]


def sample_base(n: int, d: int, seed: int) -> np.ndarray:
    if n < 1 or d < 1:
        raise ValueError(f"sample_base needs n, d >= 1 (got n={n}, d={d})")
    return standard_normal(make_rng(seed, 0), n * d).reshape(n, d)


# ---------------------------------------------------------------------------
# hexagon


def hexagon_vertices(side: float = HEX_SIDE) -> np.ndarray:
    """Vertices of the origin-centred regular hexagon, first vertex on +x."""
    ang = np.arange(6) * np.pi / 3.0
    return side * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def hexagon_corner(name: str = "lower-right", side: float = HEX_SIDE) -> np.ndarray:
    idx = {"right": 0, "upper-right": 1, "upper-left": 2, "left": 3, "lower-left": 4, "lower-right": 5}
    return hexagon_vertices(side)[idx[name]].copy()


def sample_hexagon(n: int, seed: int, side: float = HEX_SIDE) -> np.ndarray:
    """``n`` points uniform on the hexagon perimeter."""
    if n < 1:
        raise ValueError(f"sample_hexagon needs n >= 1 (got {n})")
    return hexagon_points(make_rng(seed, 1), n, side)


def hexagon_points(rng: np.random.Generator, n: int, side: float = HEX_SIDE) -> np.ndarray:
    v = hexagon_vertices(side)
    s = rng.random(n) * 6.0
    edge = np.minimum(s.astype(np.int64), 5)
    frac = (s - edge)[:, None]
    a, b = v[edge], v[(edge + 1) % 6]
    return a + frac * (b - a)


def hexagon_edge_index(points: np.ndarray, side: float = HEX_SIDE) -> np.ndarray:
    """Index of the edge whose angular sector contains each point."""
    ang = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2.0 * np.pi)
    return np.minimum((ang / (np.pi / 3.0)).astype(np.int64), 5)


def distance_to_hexagon(points: np.ndarray, side: float = HEX_SIDE) -> np.ndarray:
    """Euclidean distance from each point to the nearest hexagon edge segment."""
    points = np.atleast_2d(points)
    v = hexagon_vertices(side)
    best = np.full(len(points), np.inf)
    for k in range(6):
        a, b = v[k], v[(k + 1) % 6]
        ab = b - a
        tt = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
        proj = a + tt[:, None] * ab
        best = np.minimum(best, np.linalg.norm(points - proj, axis=1))
    return best


# ---------------------------------------------------------------------------
# discs16


def sample_discs16(n: int, seed: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """``n`` images of 1-3 anti-aliased discs on a black background, shape (n, size, size)."""
    if n < 1:
        raise ValueError(f"sample_discs16 needs n >= 1 (got {n})")
    return discs_images(make_rng(seed, 2), n, size)


def discs_images(rng: np.random.Generator, n: int, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    out = np.zeros((n, size, size))
    for i in range(n):
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.0, size, size=2)
            radius = rng.uniform(0.1 * size, 0.25 * size)
            intensity = rng.uniform(0.4, 1.0)
            dist = np.hypot(yy - cy, xx - cx)
            out[i] += intensity * np.clip(radius - dist + 0.5, 0.0, 1.0)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# PGM (P5, 16-bit) and raw float64 grids


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"write_image expects a 2-D array, got shape {image.shape}")
    h, w = image.shape
    q = np.rint(np.clip(image, 0.0, 1.0) * 65535.0).astype(">u2")
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes())


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeader("PGM header ended early")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # single whitespace byte before the raster


def read_image(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise UnsupportedFormat(f"unsupported format: magic {buf[:2]!r}, only binary P5 is read")
    (_, w, h, maxval), pos = _pgm_tokens(buf, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise MalformedHeader("PGM header fields are not integers") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise MalformedHeader(f"bad PGM dimensions/maxval: {w}x{h}, maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise ShortPayload(f"PGM payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(np.float64) / maxval


def write_raw(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"write_raw expects a 2-D array, got shape {grid.shape}")
    h, w = grid.shape
    Path(path).write_bytes(RAW_MAGIC + struct.pack("<II", h, w) + grid.astype("<f8").tobytes())


def read_raw(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:8] != RAW_MAGIC:
        raise UnsupportedFormat(f"unsupported format: magic {buf[:8]!r}")
    if len(buf) < 16:
        raise MalformedHeader("raw grid header truncated")
    h, w = struct.unpack("<II", buf[8:16])
    payload = buf[16:]
    if len(payload) != 8 * h * w:
        raise ShortPayload(f"raw grid payload has {len(payload)} bytes, expected {8 * h * w}")
    return np.frombuffer(payload, dtype="<f8").reshape(h, w).astype(np.float64)
