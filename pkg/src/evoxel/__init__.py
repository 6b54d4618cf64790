"""Self-supervised masked pre-training for event-camera voxel sets.

Pipeline: event streams -> space-time voxels -> FPS/KNN clusters with
semantic-uniform masking -> multi-stage set encoder -> two reconstruction
branches (local voxel features, global cluster summaries) trained against
a momentum target network. Everything runs on CPU in numpy.
"""

__version__ = "0.1.0"

from .events import Event, EventStream, SyntheticSpec, DatasetManifest
from .voxelize import VoxelSpec, Voxel, VoxelSample
from .grouping import GroupingSpec, ClusterSet, MaskAssignment

__all__ = [
    "Event",
    "EventStream",
    "SyntheticSpec",
    "DatasetManifest",
    "VoxelSpec",
    "Voxel",
    "VoxelSample",
    "GroupingSpec",
    "ClusterSet",
    "MaskAssignment",
    "__version__",
]
