"""Event-stream voxelization.

The sensor volume (width x height x duration) is divided into a regular grid
of (v_w, v_h, v_t) voxels. Each non-empty voxel accumulates a feature vector
of length v_w*v_h: per internal event, polarity times the timestamp
normalized within the voxel's temporal window lands in the slot addressed by
the pixel offset inside the voxel footprint. The densest n_sel voxels form a
fixed-size sample, cyclically padded (and flagged) when fewer exist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .events import EventStream


class EmptySampleError(ValueError):
    """Raised when a sample is requested from zero non-empty voxels."""


@dataclass(frozen=True)
class VoxelSpec:
    v_w: int = 5
    v_h: int = 5
    v_t: int = 25_000  # microseconds
    n_sel: int = 2048

    def __post_init__(self):
        for name in ("v_w", "v_h", "v_t", "n_sel"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def feature_len(self) -> int:
        return self.v_w * self.v_h

    def to_dict(self) -> dict:
        return {"v_w": self.v_w, "v_h": self.v_h, "v_t": self.v_t, "n_sel": self.n_sel}

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelSpec":
        unknown = set(d) - {"v_w", "v_h", "v_t", "n_sel"}
        if unknown:
            raise ValueError(f"unknown voxel keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(eq=False)
class Voxel:
    coord: tuple[int, int, int]  # (ix, iy, it)
    feature: np.ndarray
    event_count: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, Voxel):
            return NotImplemented
        return (
            self.coord == other.coord
            and self.event_count == other.event_count
            and np.array_equal(self.feature, other.feature)
        )


def grid_extent(stream: EventStream, spec: VoxelSpec) -> tuple[int, int, int]:
    """Grid size per axis; every axis has at least one bin."""
    gx = max(1, math.ceil(stream.sensor_width / spec.v_w))
    gy = max(1, math.ceil(stream.sensor_height / spec.v_h))
    gt = max(1, math.ceil(stream.duration / spec.v_t))
    return gx, gy, gt


def _voxelize_arrays(
    stream: EventStream, spec: VoxelSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized accumulation. Returns (coords [M,3], features [M,F], counts [M])
    for the M non-empty voxels, sorted by (ix, iy, it)."""
    flen = spec.feature_len
    if len(stream) == 0:
        return (
            np.zeros((0, 3), dtype=np.int64),
            np.zeros((0, flen)),
            np.zeros(0, dtype=np.int64),
        )
    gx, gy, gt = grid_extent(stream, spec)
    ix = stream.x // spec.v_w
    iy = stream.y // spec.v_h
    # t == duration falls on the upper edge of the last bin; keep it inside.
    it = np.minimum(stream.t // spec.v_t, gt - 1)
    t_hat = (stream.t - it * spec.v_t) / float(spec.v_t)
    contrib = stream.p * t_hat
    slot = (stream.y % spec.v_h) * spec.v_w + (stream.x % spec.v_w)

    key = (ix * gy + iy) * gt + it
    uniq, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    features = np.zeros((len(uniq), flen))
    np.add.at(features, (inverse, slot), contrib)
    np.clip(features, -1.0, 1.0, out=features)

    it_u = uniq % gt
    rest = uniq // gt
    coords = np.stack([rest // gy, rest % gy, it_u], axis=1)
    return coords, features, counts.astype(np.int64)


def voxelize(stream: EventStream, spec: VoxelSpec) -> list[Voxel]:
    """All non-empty voxels of the stream, ordered by (ix, iy, it)."""
    coords, features, counts = _voxelize_arrays(stream, spec)
    return [
        Voxel(tuple(int(c) for c in coords[i]), features[i], int(counts[i]))
        for i in range(len(counts))
    ]


@dataclass
class VoxelSample:
    """Exactly n_sel voxels as parallel arrays, densest first.

    coords_normalized holds each grid coordinate divided by the grid extent
    on its axis, so all entries lie in [0, 1). duplicated_flags marks rows
    that exist only as cyclic padding.
    """

    coords: np.ndarray            # (n_sel, 3) int64
    features: np.ndarray          # (n_sel, F) float64
    event_counts: np.ndarray      # (n_sel,) int64
    coords_normalized: np.ndarray  # (n_sel, 3) float64
    duplicated_flags: np.ndarray  # (n_sel,) bool
    grid: tuple[int, int, int] = field(default=(1, 1, 1))

    def __post_init__(self):
        n = len(self.coords)
        if not (
            len(self.features)
            == len(self.event_counts)
            == len(self.coords_normalized)
            == len(self.duplicated_flags)
            == n
        ):
            raise ValueError("sample arrays differ in length")
        if n and np.any(self.event_counts < 1):
            raise ValueError("event_count must be >= 1")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def voxels(self) -> list[Voxel]:
        return [
            Voxel(
                tuple(int(c) for c in self.coords[i]),
                self.features[i],
                int(self.event_counts[i]),
            )
            for i in range(len(self))
        ]

    @property
    def n_real(self) -> int:
        """Number of non-padding rows."""
        return int((~self.duplicated_flags).sum())


def _select_arrays(
    coords: np.ndarray,
    features: np.ndarray,
    counts: np.ndarray,
    spec: VoxelSpec,
    grid: tuple[int, int, int] | None,
) -> VoxelSample:
    m = len(counts)
    if m == 0:
        raise EmptySampleError("no non-empty voxels to select from")
    if grid is None:
        grid = tuple(int(v) for v in coords.max(axis=0) + 1)
    # Primary key: count descending. Ties: (ix, iy, it) ascending. lexsort
    # treats its last key as most significant.
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0], -counts))
    n = spec.n_sel
    take = order[: min(m, n)]
    idx = take[np.arange(n) % len(take)]
    flags = np.arange(n) >= len(take)
    sel_coords = coords[idx]
    norm = sel_coords / np.asarray(grid, dtype=float)
    return VoxelSample(
        coords=sel_coords,
        features=features[idx],
        event_counts=counts[idx],
        coords_normalized=norm,
        duplicated_flags=flags,
        grid=grid,
    )


def select_top_n(
    voxels: list[Voxel],
    spec: VoxelSpec,
    grid: tuple[int, int, int] | None = None,
) -> VoxelSample:
    """Keep the n_sel densest voxels (ties by ascending coord), pad cyclically.

    ``grid`` fixes the normalization extents; when omitted they are derived
    from the voxels present (max coordinate + 1 per axis).
    """
    if not voxels:
        raise EmptySampleError("no non-empty voxels to select from")
    coords = np.array([v.coord for v in voxels], dtype=np.int64)
    features = np.stack([np.asarray(v.feature, dtype=float) for v in voxels])
    counts = np.array([v.event_count for v in voxels], dtype=np.int64)
    return _select_arrays(coords, features, counts, spec, grid)


def voxelize_stream(stream: EventStream, spec: VoxelSpec) -> VoxelSample:
    """voxelize + select_top_n with the stream's true grid extents."""
    coords, features, counts = _voxelize_arrays(stream, spec)
    return _select_arrays(coords, features, counts, spec, grid_extent(stream, spec))
