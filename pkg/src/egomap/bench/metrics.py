"""Evaluation metrics: keyframe selection P/R/F1, trajectory error, MRA."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateCorrespondences
from ..geometry import Correspondence3D, RansacParams, RigidTransform, estimate_rigid_transform, rotation_angle

# Threshold grid for mean relative accuracy.
MRA_THRESHOLDS = np.arange(0.50, 0.951, 0.05)


def eval_keyframes(selected, oracle_top) -> tuple[float, float, float]:
    """Precision / recall / F1 of a selected index set against the oracle set."""
    sel = set(int(i) for i in selected)
    orc = set(int(i) for i in oracle_top)
    if not sel or not orc:
        return (0.0, 0.0, 0.0) if sel != orc else (1.0, 1.0, 1.0)
    hit = len(sel & orc)
    p = hit / len(sel)
    r = hit / len(orc)
    f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    return p, r, f1


def _align_trajectories(est_pos: np.ndarray, true_pos: np.ndarray) -> RigidTransform:
    """Best-fit rigid transform mapping estimated onto true positions.

    Falls back to translation-only alignment when the positions are too
    degenerate (short or collinear trajectories) for a rotation fit.
    """
    try:
        corrs = [Correspondence3D(p, q) for p, q in zip(est_pos, true_pos)]
        tf, _ = estimate_rigid_transform(corrs, RansacParams(threshold=np.inf, iterations=1, seed=0))
        return tf
    except DegenerateCorrespondences:
        return RigidTransform(np.eye(3), true_pos.mean(axis=0) - est_pos.mean(axis=0))


def eval_alignment(estimated, truth) -> tuple[float, float]:
    """Absolute trajectory error after optimal rigid alignment.

    Args:
        estimated, truth: equal-length lists of camera-to-global poses.

    Returns:
        (ate_m, max_rot_err_rad): RMS position error and the maximum
        per-frame rotation error after applying the alignment.
    """
    if len(estimated) != len(truth) or not estimated:
        raise ValueError("trajectories must be non-empty and equal length")
    est_pos = np.stack([p.translation for p in estimated])
    true_pos = np.stack([p.translation for p in truth])
    g = _align_trajectories(est_pos, true_pos)
    resid = g.apply(est_pos) - true_pos
    ate = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    max_rot = 0.0
    for e, t in zip(estimated, truth):
        r_aligned = g.rotation @ e.rotation
        max_rot = max(max_rot, rotation_angle(t.rotation.T @ r_aligned))
    return ate, max_rot


def eval_mra(predicted: float, truth: float) -> float:
    """Mean relative accuracy over the 0.50..0.95 threshold grid.

    Zero truth is handled as an exact-match indicator.
    """
    if truth == 0:
        return 1.0 if predicted == 0 else 0.0
    rel = abs(predicted - truth) / abs(truth)
    return float(np.mean([rel < 1.0 - th for th in MRA_THRESHOLDS]))


def bev_iou(cells_a, cells_b) -> float:
    """IoU of two occupied-cell sets."""
    a, b = set(cells_a), set(cells_b)
    if not a and not b:
        return 1.0
    union = len(a | b)
    return len(a & b) / union if union else 1.0


def _cells(lo_x: float, lo_z: float, hi_x: float, hi_z: float, cell: float):
    """Unbounded-grid footprint cells with positive-area intersection."""
    out = set()
    ix0, ix1 = int(np.floor(lo_x / cell)), int(np.ceil(hi_x / cell))
    iz0, iz1 = int(np.floor(lo_z / cell)), int(np.ceil(hi_z / cell))
    for ix in range(ix0, ix1 + 1):
        if not (lo_x < (ix + 1) * cell and hi_x > ix * cell):
            continue
        for iz in range(iz0, iz1 + 1):
            if lo_z < (iz + 1) * cell and hi_z > iz * cell:
                out.add((ix, iz))
    if not out:
        out.add((int(np.floor((lo_x + hi_x) / 2 / cell)),
                 int(np.floor((lo_z + hi_z) / 2 / cell))))
    return out


def map_fidelity(entries, scene, map_origin_pose, cell_size: float = 0.25,
                 labels=None, method: str = "points"):
    """Object-map accuracy against the generating scene.

    The map lives in an arbitrary (yawed) camera frame, so estimated and
    oracle boxes must be compared under a common axis convention:

    - ``method="points"``: entry point clouds are carried into the world
      frame through the true pose of the map-origin keyframe and their
      boxes recomputed there. Exact for clean data (surface samples span
      the true faces); use when entries carry real fused points.
    - ``method="boxes"``: the scene's cuboids are carried into the map
      frame and reduced to axis-aligned bounds there. Works from
      box-only data (e.g. a reloaded map JSON) at the cost of corner
      sampling bias.

    Center errors are planimetric (XZ): the map is a top-down artifact
    and the vertical extent is structurally clipped by the level
    camera's view cone. ``labels`` restricts the comparison to a label
    subset (task-specific maps are only accountable for their
    vocabulary).

    Returns a dict with mean/max bbox center error over matched objects,
    BEV IoU of the occupied-cell unions, and the matched fraction
    (unmatched scene objects still count in the IoU union).
    """
    keep = None if labels is None else set(labels)
    truth_boxes = []
    if method == "points":
        est_boxes = [(e.label, *_world_bounds(e, map_origin_pose)) for e in entries]
        for o in scene.objects:
            if keep is not None and o.label not in keep:
                continue
            truth_boxes.append((o.label, o.bounds_min, o.bounds_max))
    elif method == "boxes":
        est_boxes = [(e.label, e.bbox_min, e.bbox_max) for e in entries]
        to_map = map_origin_pose.inverse()
        for o in scene.objects:
            if keep is not None and o.label not in keep:
                continue
            lo, hi = o.bounds_min, o.bounds_max
            corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                                for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
            cm = to_map.apply(corners)
            truth_boxes.append((o.label, cm.min(axis=0), cm.max(axis=0)))
    else:
        raise ValueError(f"unknown method {method!r}")

    used = set()
    center_errs = []
    est_cells = set()
    for label, lo, hi in est_boxes:
        est_cells |= _cells(lo[0], lo[2], hi[0], hi[2], cell_size)
        ec = (lo + hi) / 2
        cands = [(i, t) for i, t in enumerate(truth_boxes)
                 if t[0] == label and i not in used]
        if not cands:
            continue
        dists = [float(np.hypot(ec[0] - (tlo[0] + thi[0]) / 2,
                                ec[2] - (tlo[2] + thi[2]) / 2))
                 for _, (_, tlo, thi) in cands]
        j = int(np.argmin(dists))
        used.add(cands[j][0])
        center_errs.append(dists[j])
    true_cells = set()
    for _, lo, hi in truth_boxes:
        true_cells |= _cells(lo[0], lo[2], hi[0], hi[2], cell_size)
    return {
        "bbox_center_err_m": float(np.mean(center_errs)) if center_errs else np.inf,
        "bbox_center_err_max_m": float(np.max(center_errs)) if center_errs else np.inf,
        "bev_iou": bev_iou(est_cells, true_cells),
        "matched_fraction": len(used) / max(len(truth_boxes), 1),
    }


def _world_bounds(entry, map_origin_pose):
    moved = entry.transformed(map_origin_pose)
    return moved.bbox_min, moved.bbox_max


@dataclass
class EvalReport:
    """Aggregated pipeline metrics for one scene or one grid cell."""

    keyframe: dict = field(default_factory=dict)
    alignment: dict = field(default_factory=dict)
    map: dict = field(default_factory=dict)
    qa: dict = field(default_factory=dict)

    def validate(self) -> None:
        for key in ("precision", "recall", "f1", "sampled_fraction"):
            if key in self.keyframe and not (0.0 <= self.keyframe[key] <= 1.0):
                raise ValueError(f"keyframe.{key} out of range")
        for key in ("ate_m", "max_rot_err_rad"):
            if key in self.alignment and self.alignment[key] < 0:
                raise ValueError(f"alignment.{key} negative")
        if "bev_iou" in self.map and not (0.0 <= self.map["bev_iou"] <= 1.0):
            raise ValueError("map.bev_iou out of range")
        if "bbox_center_err_m" in self.map and self.map["bbox_center_err_m"] < 0:
            raise ValueError("map.bbox_center_err_m negative")
        for key in ("accuracy", "mra"):
            if key in self.qa and not (0.0 <= self.qa[key] <= 1.0):
                raise ValueError(f"qa.{key} out of range")

    def to_json(self) -> str:
        return json.dumps(
            {"keyframe": self.keyframe, "alignment": self.alignment,
             "map": self.map, "qa": self.qa},
            indent=1, sort_keys=True,
        )

    def as_table(self) -> str:
        lines = []
        for section in ("keyframe", "alignment", "map", "qa"):
            vals = getattr(self, section)
            for key in sorted(vals):
                lines.append(f"{section}.{key:<20} {vals[key]:.4f}"
                             if isinstance(vals[key], float)
                             else f"{section}.{key:<20} {vals[key]}")
        return "\n".join(lines)
