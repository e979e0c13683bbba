"""Perception backends: synthetic oracle, remote HTTP client, capability routing."""

from .types import Detection, DepthMap, FrameEmbedding, FrameRecord, SegmentMask
from .base import CompositeBackend, PerceptionBackend

__all__ = [
    "CompositeBackend",
    "Detection",
    "DepthMap",
    "FrameEmbedding",
    "FrameRecord",
    "PerceptionBackend",
    "SegmentMask",
]
