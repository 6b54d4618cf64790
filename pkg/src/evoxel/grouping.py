"""Cluster construction and masking over voxel samples.

A sample is divided into n_parts local neighborhoods: farthest point
sampling picks representative voxels, each of which gathers its k_per_part
nearest neighbors (clusters may overlap). Masking is uniform per cluster,
so every cluster keeps exactly K_v = floor((1-rho1)*K) visible members, plus
an independent cluster-level mask of floor(rho2*n_parts) whole clusters.
A plain global split over voxels (ignoring clusters) is provided separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import floor_ratio
from .voxelize import VoxelSample


class GroupingError(ValueError):
    pass


@dataclass(frozen=True)
class GroupingSpec:
    n_parts: int = 16
    k_per_part: int = 128
    rho1: float = 0.8
    rho2: float = 0.5
    center_strategy: str = "fps"
    time_scale: float = 1.0

    def __post_init__(self):
        if self.n_parts < 1 or self.k_per_part < 1:
            raise GroupingError("n_parts and k_per_part must be positive")
        if not (0.0 < self.rho1 < 1.0):
            raise GroupingError(f"rho1 must be in (0, 1), got {self.rho1}")
        if not (0.0 <= self.rho2 < 1.0):
            raise GroupingError(f"rho2 must be in [0, 1), got {self.rho2}")
        if self.center_strategy not in ("fps", "random"):
            raise GroupingError(f"unknown center_strategy {self.center_strategy!r}")
        if self.time_scale <= 0.0:
            raise GroupingError("time_scale must be positive")
        if self.k_visible < 1:
            raise GroupingError(
                f"floor((1-rho1)*k) = {self.k_visible}; "
                "need at least one visible voxel per cluster"
            )
        if self.n_global_masked > self.n_parts - 1:
            raise GroupingError("rho2 leaves no visible cluster")

    @property
    def k_visible(self) -> int:
        return floor_ratio(1.0 - self.rho1, self.k_per_part)

    @property
    def k_masked(self) -> int:
        return self.k_per_part - self.k_visible

    @property
    def n_global_masked(self) -> int:
        return floor_ratio(self.rho2, self.n_parts)

    def to_dict(self) -> dict:
        return {
            "n_parts": self.n_parts,
            "k_per_part": self.k_per_part,
            "rho1": self.rho1,
            "rho2": self.rho2,
            "center_strategy": self.center_strategy,
            "time_scale": self.time_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupingSpec":
        known = {"n_parts", "k_per_part", "rho1", "rho2", "center_strategy",
                 "time_scale"}
        unknown = set(d) - known
        if unknown:
            raise GroupingError(f"unknown grouping keys: {sorted(unknown)}")
        return cls(
            n_parts=int(d["n_parts"]),
            k_per_part=int(d["k_per_part"]),
            rho1=float(d["rho1"]),
            rho2=float(d.get("rho2", 0.5)),
            center_strategy=str(d.get("center_strategy", "fps")),
            time_scale=float(d.get("time_scale", 1.0)),
        )


@dataclass
class ClusterSet:
    """center_indices: (n_parts,); members: (n_parts, k) voxel indices,
    ascending by distance to the center, center itself first."""

    center_indices: np.ndarray
    members: np.ndarray

    def __post_init__(self):
        self.center_indices = np.asarray(self.center_indices, dtype=np.int64)
        self.members = np.asarray(self.members, dtype=np.int64)
        if self.members.ndim != 2 or len(self.members) != len(self.center_indices):
            raise GroupingError("members must be (n_parts, k)")
        if len(self) and not np.array_equal(self.members[:, 0], self.center_indices):
            raise GroupingError("each cluster must start with its own center")

    def __len__(self) -> int:
        return len(self.center_indices)

    @property
    def k(self) -> int:
        return self.members.shape[1]


@dataclass
class MaskAssignment:
    """Per-cluster visible/masked voxel indices plus the cluster-level mask.

    visible: (n_parts, K_v), masked: (n_parts, K_m); both preserve the
    cluster's distance ordering. global_masked: sorted cluster indices.
    """

    visible: np.ndarray
    masked: np.ndarray
    global_masked: np.ndarray
    seed: int

    def __post_init__(self):
        self.visible = np.asarray(self.visible, dtype=np.int64)
        self.masked = np.asarray(self.masked, dtype=np.int64)
        self.global_masked = np.asarray(self.global_masked, dtype=np.int64)
        if self.visible.ndim != 2 or self.masked.ndim != 2:
            raise GroupingError("visible/masked must be 2-D")
        if len(self.visible) != len(self.masked):
            raise GroupingError("visible/masked cluster counts differ")


def _pairwise_sq(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def centroid_nearest(coords: np.ndarray) -> int:
    """Index of the point closest to the centroid; ties take the smallest index."""
    c = coords.mean(axis=0)
    d = ((coords - c) ** 2).sum(axis=1)
    return int(np.argmin(d))


def farthest_point_sample(
    coords: np.ndarray,
    n_parts: int,
    seed: int = 0,
    first_index: int | None = None,
) -> np.ndarray:
    """Greedy farthest-point subset of size n_parts.

    The walk starts at the centroid-nearest point so the result is fully
    deterministic (``seed`` is accepted for signature parity with the random
    strategy but unused). ``first_index`` overrides the starting point. Each
    following pick maximizes the minimum distance to the picks so far; ties
    resolve to the smallest index.
    """
    coords = np.asarray(coords, dtype=float)
    n = len(coords)
    if n_parts > n:
        raise GroupingError(f"cannot pick {n_parts} centers from {n} points")
    start = centroid_nearest(coords) if first_index is None else int(first_index)
    chosen = np.empty(n_parts, dtype=np.int64)
    chosen[0] = start
    min_d = ((coords - coords[start]) ** 2).sum(axis=1)
    for i in range(1, n_parts):
        nxt = int(np.argmax(min_d))  # first occurrence wins distance ties
        chosen[i] = nxt
        d = ((coords - coords[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d, d, out=min_d)
    return chosen


def random_centers(n_points: int, n_parts: int, seed: int) -> np.ndarray:
    """Uniform sample of center indices without replacement."""
    if n_parts > n_points:
        raise GroupingError(f"cannot pick {n_parts} centers from {n_points} points")
    rng = np.random.default_rng(seed)
    return np.sort(rng.permutation(n_points)[:n_parts]).astype(np.int64)


def knn_group(
    coords: np.ndarray, center_indices: np.ndarray, k_per_part: int
) -> ClusterSet:
    """k nearest points per center (distance ascending, ties smallest index).

    The center always occupies position 0 even when other points share its
    coordinates with smaller indices.
    """
    coords = np.asarray(coords, dtype=float)
    center_indices = np.asarray(center_indices, dtype=np.int64)
    n = len(coords)
    if k_per_part > n:
        raise GroupingError(f"k_per_part {k_per_part} exceeds point count {n}")
    diff = coords[None, :, :] - coords[center_indices][:, None, :]
    d2 = np.einsum("cnk,cnk->cn", diff, diff)
    # Stable argsort on distance gives smallest-index tie-breaking.
    order = np.argsort(d2, axis=1, kind="stable")[:, :k_per_part]
    members = order.copy()
    for row, c in enumerate(center_indices):
        pos = np.nonzero(order[row] == c)[0]
        if len(pos) == 0:
            # Center crowded out by coordinate duplicates: force it in.
            members[row, 1:] = order[row, :-1]
        else:
            members[row, 1 : pos[0] + 1] = order[row, : pos[0]]
        members[row, 0] = c
    return ClusterSet(center_indices=center_indices, members=members)


def uniform_mask(
    clusters: ClusterSet, rho1: float, rho2: float, seed: int
) -> MaskAssignment:
    """Mask exactly K_m members in every cluster, then mask whole clusters.

    Per cluster the masked subset is uniform; visible and masked each keep
    the original member ordering. The cluster-level mask of size
    floor(rho2*n_parts) is drawn from the same seeded generator afterwards.
    """
    n_parts, k = clusters.members.shape
    k_v = floor_ratio(1.0 - rho1, k)
    k_m = k - k_v
    if k_v < 1:
        raise GroupingError("rho1 leaves no visible voxel per cluster")
    rng = np.random.default_rng(seed)
    visible = np.empty((n_parts, k_v), dtype=np.int64)
    masked = np.empty((n_parts, k_m), dtype=np.int64)
    for i in range(n_parts):
        pos = rng.permutation(k)
        mpos = np.sort(pos[:k_m])
        vpos = np.sort(pos[k_m:])
        visible[i] = clusters.members[i, vpos]
        masked[i] = clusters.members[i, mpos]
    n_g = floor_ratio(rho2, n_parts)
    if n_g > n_parts - 1:
        raise GroupingError("rho2 leaves no visible cluster")
    global_masked = np.sort(rng.permutation(n_parts)[:n_g]).astype(np.int64)
    return MaskAssignment(
        visible=visible, masked=masked, global_masked=global_masked, seed=seed
    )


def global_random_mask(
    sample_size: int, rho: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """One uniform split over all voxels: (visible, masked) sorted index arrays.

    floor(rho*sample_size) voxels are masked, the rest stay visible.
    """
    if not (0.0 < rho < 1.0):
        raise GroupingError(f"rho must be in (0, 1), got {rho}")
    if sample_size < 1:
        raise GroupingError("sample_size must be positive")
    n_masked = floor_ratio(rho, sample_size)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(sample_size)
    masked = np.sort(perm[:n_masked]).astype(np.int64)
    visible = np.sort(perm[n_masked:]).astype(np.int64)
    return visible, masked


def scaled_coords(sample: VoxelSample, spec: GroupingSpec) -> np.ndarray:
    """Normalized coordinates with the temporal axis weighted by time_scale."""
    out = sample.coords_normalized.copy()
    out[:, 2] *= spec.time_scale
    return out


def group_sample(
    sample: VoxelSample, spec: GroupingSpec, seed: int
) -> tuple[ClusterSet, MaskAssignment]:
    """Centers -> KNN clusters -> per-cluster and cluster-level masks."""
    coords = scaled_coords(sample, spec)
    if spec.center_strategy == "fps":
        centers = farthest_point_sample(coords, spec.n_parts, seed)
    else:
        centers = random_centers(len(coords), spec.n_parts, seed)
    clusters = knn_group(coords, centers, spec.k_per_part)
    assignment = uniform_mask(clusters, spec.rho1, spec.rho2, seed)
    return clusters, assignment
