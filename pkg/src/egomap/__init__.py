"""egomap: egocentric frames + a spatial question -> global semantic map + VLM prompt."""

from .geometry import (
    CameraIntrinsics,
    Correspondence3D,
    RansacParams,
    RigidTransform,
    compose,
    estimate_rigid_transform,
)

__all__ = [
    "CameraIntrinsics",
    "Correspondence3D",
    "RansacParams",
    "RigidTransform",
    "compose",
    "estimate_rigid_transform",
]

__version__ = "0.1.0"
