"""Shared fixtures: hand-built scenes and grounding helpers."""

import numpy as np
import pytest

from egomap.bench.scene import (
    DEFAULT_INTRINSICS,
    MotionLimits,
    SceneObject,
    SceneSpec,
    pose_from_yaw,
    render_scene,
)
from egomap.grounding import GroundedObject, TaskGrounding


def make_scene(objects, poses, room=(5.0, 5.0), seed=0):
    """Render a hand-specified scene (no motion-limit validation)."""
    scene = SceneSpec(seed=seed, room_extent=room, objects=objects,
                      trajectory=poses, motion_limits=MotionLimits(10.0, 10.0))
    return render_scene(scene, DEFAULT_INTRINSICS)


def grounding_for(labels, question="where are things?"):
    return TaskGrounding(
        targets=tuple(GroundedObject(lbl, 1.0) for lbl in labels),
        cues=(), question=question)


def orbit_poses(center_xz, radius, n, height=1.5, start=0.0, sweep=2 * np.pi):
    """Poses on a circle looking inward at the center point."""
    out = []
    for i in range(n):
        ang = start + sweep * i / max(n, 1)
        pos = np.array([center_xz[0] + radius * np.sin(ang), height,
                        center_xz[1] + radius * np.cos(ang)])
        yaw = np.arctan2(center_xz[0] - pos[0], center_xz[1] - pos[2])
        out.append(pose_from_yaw(pos, yaw))
    return out


@pytest.fixture
def box_scene():
    """One box viewed from far enough that its base is inside the view cone."""
    obj = SceneObject(label="box", center=np.array([2.5, 0.4, 3.4]),
                      extents=np.array([0.8, 0.8, 0.6]), color=(200, 60, 60))
    poses = [pose_from_yaw([2.5, 1.5, 0.8], 0.0),
             pose_from_yaw([2.1, 1.5, 0.9], 0.15)]
    return make_scene([obj], poses)
