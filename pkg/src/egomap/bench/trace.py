"""Synthetic likelihood traces for evaluating the key-frame search in isolation.

A trace is a per-frame ground-truth likelihood curve with a few compact
high-score segments on a low-noise floor, mimicking task objects that
appear in short windows of a long video. A TraceBackend serves these
scores through the detection interface so the real search loop runs
unmodified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import CameraIntrinsics
from ..grounding import GroundedObject, TaskGrounding
from ..perception.base import PerceptionBackend
from ..perception.types import Detection, FrameRecord

TRACE_LABELS = ("trace-a", "trace-b", "trace-c")
_TRACE_INTRINSICS = CameraIntrinsics(fx=16.0, fy=16.0, cx=7.5, cy=7.5, width=16, height=16)

N_CORE = 16          # frames scoring >= 1.6; one more than the usual budget
SHOULDER = 2         # sub-threshold frames flanking each segment


@dataclass
class TraceSpec:
    scores: np.ndarray       # (N,) ground-truth likelihoods
    segments: list[range]    # core frame ranges
    seed: int

    @property
    def n_frames(self) -> int:
        return len(self.scores)

    def oracle_top(self, k: int) -> list[int]:
        order = np.lexsort((np.arange(self.n_frames), -self.scores))
        return sorted(int(i) for i in order[:k])


def make_trace(seed: int, n_frames: int = 200, n_segments: int = 3) -> TraceSpec:
    """Trace with ``n_segments`` disjoint segments of high-scoring frames.

    Core frames score in [1.6, 3.0] (exactly N_CORE of them, roughly half
    at 2.0 or above), shoulders in [1.0, 1.4], everything else in
    [0.05, 0.55].
    """
    rng = np.random.default_rng(seed)
    sizes = [N_CORE // n_segments] * n_segments
    for j in range(N_CORE - sum(sizes)):
        sizes[j] += 1
    max_width = max(sizes) + 2 * SHOULDER
    scores = rng.uniform(0.05, 0.55, n_frames)
    starts: list[int] = []
    while len(starts) < n_segments:
        s = int(rng.integers(SHOULDER + 2, n_frames - max_width - 2))
        if all(abs(s - t) > max_width + 6 for t in starts):
            starts.append(s)
    core_values = rng.permutation(np.linspace(1.6, 3.0, N_CORE))
    segments = []
    vi = 0
    for s, per in zip(sorted(starts), sizes):
        core = range(s + SHOULDER, s + SHOULDER + per)
        segments.append(core)
        for f in range(s, s + SHOULDER):
            scores[f] = rng.uniform(1.0, 1.4)
        for f in range(s + SHOULDER + per, s + per + 2 * SHOULDER):
            scores[f] = rng.uniform(1.0, 1.4)
        for f in core:
            scores[f] = core_values[vi]
            vi += 1
    return TraceSpec(scores=scores, segments=segments, seed=seed)


def trace_grounding() -> TaskGrounding:
    targets = tuple(GroundedObject(label=lbl, relevance=1.0) for lbl in TRACE_LABELS)
    return TaskGrounding(targets=targets, cues=(), question="trace")


def trace_frames(trace: TraceSpec) -> list[FrameRecord]:
    """Tiny stand-in frames whose histograms reflect segment membership.

    Frames inside one segment share a base image (high neighbor
    similarity, wide kernels); background frames get independent noise.
    """
    rng = np.random.default_rng(trace.seed + 1)
    frames = []
    # Mid-bin quantized base values: the +-3 jitter never crosses one of the
    # 8-wide histogram bins, so segment neighbors score near-perfect similarity.
    seg_bases = [
        (rng.integers(0, 32, (16, 16, 3)) * 8 + 4).astype(np.uint8) for _ in trace.segments
    ]
    for i in range(trace.n_frames):
        img = None
        for seg, base in zip(trace.segments, seg_bases):
            if seg.start - SHOULDER <= i < seg.stop + SHOULDER:
                noise = rng.integers(-3, 4, base.shape, dtype=np.int16)
                img = np.clip(base.astype(np.int16) + noise, 0, 255).astype(np.uint8)
                break
        if img is None:
            img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        frames.append(FrameRecord(image=img, index=i, intrinsics=_TRACE_INTRINSICS))
    return frames


class TraceBackend(PerceptionBackend):
    """Serves trace scores as three equal detections so that the
    relevance-weighted frame likelihood equals the trace value."""

    def __init__(self, trace: TraceSpec):
        self.trace = trace

    def detect(self, frame, queries):
        value = float(self.trace.scores[frame.index])
        conf = float(np.clip(value / len(TRACE_LABELS), 0.0, 1.0))
        out = []
        for lbl in TRACE_LABELS:
            if lbl in queries and conf > 0:
                out.append(Detection(label=lbl, bbox_2d=(0.0, 0.0, 4.0, 4.0), confidence=conf))
        return out
