"""Data types shared by all perception backends."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics

EMBEDDING_NORM_TOL = 1e-6


@dataclass
class FrameRecord:
    """One video frame plus lazily-filled perception products."""

    image: np.ndarray
    index: int
    intrinsics: CameraIntrinsics
    masks: list["SegmentMask"] | None = None
    depth: "DepthMap | None" = None
    detections: list["Detection"] | None = None
    embedding: "FrameEmbedding | None" = None


@dataclass(frozen=True)
class SegmentMask:
    """A labeled instance mask over one frame."""

    label: str
    instance_id: int
    mask: np.ndarray
    prompt_points: list[tuple[float, float]] | None = None

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not m.any():
            raise ValueError("mask must contain at least one true pixel")
        object.__setattr__(self, "mask", m)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel metric depth with a validity mask."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float32)
        v = np.asarray(self.valid, dtype=bool)
        if d.shape != v.shape or d.ndim != 2:
            raise ValueError("depth and valid must be matching 2-D arrays")
        if np.any(d[v] <= 0) or not np.all(np.isfinite(d[v])):
            raise ValueError("valid depth must be positive and finite")
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "valid", v)


@dataclass(frozen=True)
class Detection:
    """Open-vocabulary 2D detection."""

    label: str
    bbox_2d: tuple[float, float, float, float]  # (u_min, v_min, u_max, v_max)
    confidence: float

    def __post_init__(self):
        u0, v0, u1, v1 = self.bbox_2d
        if not (u0 < u1 and v0 < v1):
            raise ValueError(f"degenerate bbox {self.bbox_2d}")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class FrameEmbedding:
    """Unit-norm frame descriptor; cosine similarity approximates view overlap."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float).reshape(-1)
        n = np.linalg.norm(v)
        if abs(n - 1.0) > EMBEDDING_NORM_TOL:
            raise ValueError(f"embedding norm {n} not within {EMBEDDING_NORM_TOL} of 1")
        object.__setattr__(self, "vector", v)

    def cosine(self, other: "FrameEmbedding") -> float:
        return float(np.dot(self.vector, other.vector))
