"""Dependency-free image emission: ASCII PGM/PPM, occupancy projections,
and rough line plots. These are convenience outputs; CSVs hold the data."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .voxelize import VoxelSample


def _to_u8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Plain-text (P2) grayscale image; accepts uint8 or floats in [0, 1]."""
    img = _to_u8(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    h, w = img.shape
    lines = [f"P2\n{w} {h}\n255"]
    for row in img:
        lines.append(" ".join(str(int(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Plain-text (P3) color image; accepts uint8 or floats in [0, 1]."""
    img = _to_u8(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3), got shape {img.shape}")
    h, w, _ = img.shape
    lines = [f"P3\n{w} {h}\n255"]
    for row in img:
        lines.append(" ".join(str(int(v)) for v in row.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path: str | Path) -> np.ndarray:
    """Inverse of write_pgm (plain P2 only)."""
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array(tokens[4 : 4 + w * h], dtype=np.int64)
    if maxval != 255 or data.size != w * h:
        raise ValueError(f"{path}: unsupported or truncated PGM")
    return data.reshape(h, w).astype(np.uint8)


def occupancy_image(
    sample: VoxelSample, keep: np.ndarray | None = None
) -> np.ndarray:
    """Spatial (x, y) projection of voxel occupancy, brightest = densest.

    ``keep`` restricts the projection to a subset of voxel rows (e.g. the
    visible set after masking). Padding duplicates are always dropped.
    """
    gx, gy = sample.grid[0], sample.grid[1]
    mask = ~sample.duplicated_flags
    if keep is not None:
        sel = np.zeros(len(sample), dtype=bool)
        sel[np.asarray(keep, dtype=np.int64)] = True
        mask = mask & sel
    img = np.zeros((gy, gx), dtype=float)
    coords = sample.coords[mask]
    counts = sample.event_counts[mask].astype(float)
    np.add.at(img, (coords[:, 1], coords[:, 0]), counts)
    peak = img.max()
    if peak > 0:
        img /= peak
    return img


def line_plot(
    series: list[tuple[list[float], list[float]]],
    width: int = 320,
    height: int = 200,
    margin: int = 12,
) -> np.ndarray:
    """Grayscale line chart: white background, dark series, framed axes.

    Multiple series are drawn in progressively lighter grays.
    """
    img = np.full((height, width), 255, dtype=np.uint8)
    img[margin, margin:width - margin] = 0
    img[height - margin - 1, margin:width - margin] = 0
    img[margin:height - margin, margin] = 0
    img[margin:height - margin, width - margin - 1] = 0

    all_x = [x for xs, _ in series for x in xs]
    all_y = [y for _, ys in series for y in ys]
    if not all_x:
        return img
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def to_px(x: float, y: float) -> tuple[int, int]:
        col = margin + 1 + (x - x_lo) / x_span * (width - 2 * margin - 3)
        row = height - margin - 2 - (y - y_lo) / y_span * (height - 2 * margin - 3)
        return int(round(row)), int(round(col))

    for si, (xs, ys) in enumerate(series):
        shade = min(180, 40 + 70 * si)
        pts = [to_px(x, y) for x, y in sorted(zip(xs, ys))]
        for (r0, c0), (r1, c1) in zip(pts[:-1], pts[1:]):
            steps = max(abs(r1 - r0), abs(c1 - c0), 1)
            rr = np.round(np.linspace(r0, r1, steps + 1)).astype(int)
            cc = np.round(np.linspace(c0, c1, steps + 1)).astype(int)
            img[rr, cc] = shade
        for r, c in pts:
            img[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = shade
    return img
