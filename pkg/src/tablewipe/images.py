"""Portable graymap IO and density rendering.

Grids follow the observation convention grid[ix, iy] with iy increasing
upward; image rasters store the top row first, so row r of a PGM maps to
iy = H-1-r and column c to ix = c.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .env import RESOLUTION, Observation
from .sde import ConfigError, ParticleCloud, TableGeometry


def grid_to_raster(grid: np.ndarray) -> np.ndarray:
    """(W, H) grid[ix, iy] -> (H, W) image rows, top row = largest iy."""
    return grid.T[::-1, :]


def raster_to_grid(img: np.ndarray) -> np.ndarray:
    return img[::-1, :].T


def write_pgm(path: str | Path, grid: np.ndarray, comment: str = "") -> None:
    """Write a [0,1]-valued grid as an ASCII (P2) graymap with maxval 255."""
    grid = np.asarray(grid, dtype=np.float64)
    img = np.rint(np.clip(grid_to_raster(grid), 0.0, 1.0) * 255.0).astype(np.int64)
    h, w = img.shape
    lines = ["P2"]
    if comment:
        for c in comment.splitlines():
            lines.append(f"# {c}")
    lines.append(f"{w} {h}")
    lines.append("255")
    for r in range(h):
        lines.append(" ".join(str(v) for v in img[r]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a P2 or P5 graymap into a [0,1]-valued grid[ix, iy]."""
    data = Path(path).read_bytes()
    # Tokenize the header, skipping '#' comments.
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4 and pos < len(data):
        ch = data[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        else:
            end = pos
            while end < len(data) and data[end:end + 1] not in b" \t\r\n#":
                end += 1
            tokens.append(data[pos:end])
            pos = end
    if len(tokens) < 4 or tokens[0] not in (b"P2", b"P5"):
        raise ConfigError(f"{path}: not a P2/P5 graymap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if w < 1 or h < 1 or maxval < 1 or maxval > 65535:
        raise ConfigError(f"{path}: invalid graymap dimensions")
    if tokens[0] == b"P2":
        values = np.array(data[pos:].split(), dtype=np.int64)
        if values.shape[0] != w * h:
            raise ConfigError(f"{path}: expected {w * h} pixels, found {values.shape[0]}")
        img = values.reshape(h, w).astype(np.float64)
    else:
        pos += 1  # single whitespace after maxval precedes binary data
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        count = w * h
        raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        if raw.shape[0] != count:
            raise ConfigError(f"{path}: truncated pixel data")
        img = raw.reshape(h, w).astype(np.float64)
    return raster_to_grid(img / float(maxval))


def mask_from_pgm(path: str | Path, threshold: float = 0.5, inflate_px: int = 0) -> np.ndarray:
    """Ingest an external grayscale mask: threshold to binary, optionally
    dilate by inflate_px pixels (square structuring element)."""
    grid = read_pgm(path)
    if grid.shape != (RESOLUTION, RESOLUTION):
        raise ConfigError(
            f"{path}: mask must be {RESOLUTION}x{RESOLUTION}, got {grid.shape[0]}x{grid.shape[1]}"
        )
    binary = grid >= threshold
    if inflate_px > 0:
        structure = np.ones((3, 3), dtype=bool)
        binary = ndimage.binary_dilation(binary, structure=structure, iterations=inflate_px)
    return binary


def density_grid(cloud: ParticleCloud, table: TableGeometry, sigma_px: float = 1.0) -> np.ndarray:
    """Gaussian-blurred particle density in [0,1] for image export only;
    rewards and policies always consume the binary observation."""
    vis = cloud.unwiped_on_table(table)
    counts = np.zeros((RESOLUTION, RESOLUTION))
    if np.any(vis):
        ix = np.minimum(
            (cloud.xs[vis] * (RESOLUTION / table.width_m)).astype(np.int64), RESOLUTION - 1
        )
        iy = np.minimum(
            (cloud.ys[vis] * (RESOLUTION / table.height_m)).astype(np.int64), RESOLUTION - 1
        )
        np.add.at(counts, (ix, iy), 1.0)
    if sigma_px > 0.0:
        counts = ndimage.gaussian_filter(counts, sigma=sigma_px)
    peak = counts.max()
    if peak > 0.0:
        counts = counts / peak
    return counts


def observation_to_pgm(path: str | Path, obs: Observation, comment: str = "") -> None:
    write_pgm(path, obs.grid, comment)
