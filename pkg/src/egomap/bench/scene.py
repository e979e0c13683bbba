"""Synthetic indoor scenes: cuboid furniture, camera walks, oracle renders.

World frame: y up, floor at y = 0, room spans [0, extent] in x and z.
Cameras follow the CV convention (x right, y down, z forward), stay level
at a fixed height above every object, and rotate about the world y axis
only. Rendering is a flat-shaded raycast against axis-aligned cuboids
with a deterministic world-anchored speckle so patch matching has
texture to grab onto.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import PlacementFailure
from ..geometry import CameraIntrinsics, RigidTransform
from ..imaging import read_png, write_png
from ..perception.rle import decode_rle, encode_rle
from ..perception.types import FrameRecord

COMPLEXITY_LEVELS = {
    "objects": {"low": 5, "med": 15, "high": 40},
    "scale": {"low": 3.0, "med": 6.0, "high": 12.0},
    "duration": {"low": 60, "med": 180, "high": 600},
}

CAMERA_HEIGHT = 1.5
WALL_HEIGHT = 2.2
MAX_OBJECT_HEIGHT = 1.2  # keeps the camera above every object

# Principal point sits high in the image: a lens-shift that angles the view
# cone toward the floor while the camera body stays level (the map's grid
# plane is the root camera's XZ plane, so poses must keep zero pitch/roll).
DEFAULT_INTRINSICS = CameraIntrinsics(fx=192.0, fy=120.0, cx=79.5, cy=29.5, width=160, height=120)

_NOUNS = ["sofa", "chair", "table", "lamp", "cabinet", "plant", "box", "shelf",
          "stool", "desk", "bench", "crate"]
_ADJECTIVES = ["red", "blue", "green", "yellow", "white", "black", "tall", "small"]

# Per-face shading multipliers keyed by (axis, direction sign of the ray).
_FACE_SHADE = {
    (0, 1): 0.82, (0, -1): 0.88,
    (1, 1): 1.00, (1, -1): 0.70,
    (2, 1): 0.78, (2, -1): 0.92,
}
_WALL_BASE = np.array([168.0, 170.0, 174.0])
_SPECKLE_CELL = 0.05
_SPECKLE_SPAN = 26.0


@dataclass(frozen=True)
class SceneObject:
    label: str
    center: np.ndarray
    extents: np.ndarray
    color: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "extents", np.asarray(self.extents, dtype=float).reshape(3))

    @property
    def bounds_min(self) -> np.ndarray:
        return self.center - self.extents / 2

    @property
    def bounds_max(self) -> np.ndarray:
        return self.center + self.extents / 2


@dataclass(frozen=True)
class MotionLimits:
    max_step_m: float = 0.15
    max_yaw_step_rad: float = 0.12


@dataclass
class SceneSpec:
    seed: int
    room_extent: tuple[float, float]
    objects: list[SceneObject]
    trajectory: list[RigidTransform]
    motion_limits: MotionLimits = field(default_factory=MotionLimits)
    wall_height: float = WALL_HEIGHT

    @property
    def duration(self) -> int:
        return len(self.trajectory)

    @property
    def labels(self) -> list[str]:
        return [o.label for o in self.objects]

    def unique_labels(self) -> list[str]:
        counts = {}
        for o in self.objects:
            counts[o.label] = counts.get(o.label, 0) + 1
        return [lbl for lbl, c in counts.items() if c == 1]

    def validate(self) -> None:
        ex, ez = self.room_extent
        for o in self.objects:
            lo, hi = o.bounds_min, o.bounds_max
            if lo[0] < 0 or lo[2] < 0 or hi[0] > ex or hi[2] > ez or lo[1] < -1e-9:
                raise ValueError(f"object {o.label} outside room")
        for a, b in zip(self.trajectory, self.trajectory[1:]):
            step = np.linalg.norm(b.translation - a.translation)
            dyaw = abs(_wrap_angle(yaw_of_pose(b) - yaw_of_pose(a)))
            if step > self.motion_limits.max_step_m + 1e-9:
                raise ValueError(f"trajectory step {step:.3f} exceeds limit")
            if dyaw > self.motion_limits.max_yaw_step_rad + 1e-9:
                raise ValueError(f"trajectory yaw step {dyaw:.3f} exceeds limit")


def pose_from_yaw(position, yaw: float) -> RigidTransform:
    """Level camera-to-world pose with CV axes, heading ``yaw`` in world XZ."""
    s, c = np.sin(yaw), np.cos(yaw)
    r = np.array([
        [-c, 0.0, s],
        [0.0, -1.0, 0.0],
        [s, 0.0, c],
    ])
    return RigidTransform(r, np.asarray(position, dtype=float))


def yaw_of_pose(pose: RigidTransform) -> float:
    fwd = pose.rotation[:, 2]
    return float(np.arctan2(fwd[0], fwd[2]))


def _wrap_angle(a: float) -> float:
    return (a + np.pi) % (2 * np.pi) - np.pi


@dataclass
class FrameTruth:
    """Oracle products of one rendered frame."""

    depth: np.ndarray            # (H, W) camera-frame z
    instance: np.ndarray         # (H, W) int16, -1 for the room shell
    visible_px: np.ndarray       # (n_obj,) pixels won in the z-buffer
    potential_px: np.ndarray     # (n_obj,) in-frustum pixels ignoring occlusion

    def visible_fraction(self, obj: int) -> float:
        p = self.potential_px[obj]
        return float(self.visible_px[obj] / p) if p > 0 else 0.0


def _speckle(points: np.ndarray) -> np.ndarray:
    """Deterministic per-surface-cell brightness jitter, view-consistent."""
    q = np.floor(points / _SPECKLE_CELL).astype(np.int64)
    h = (q[..., 0] * 73856093) ^ (q[..., 1] * 19349663) ^ (q[..., 2] * 83492791)
    return ((h & 0xFF) / 255.0 - 0.5) * _SPECKLE_SPAN


def render_frame(scene: SceneSpec, pose: RigidTransform, k: CameraIntrinsics):
    """Raycast one frame. Returns (HxWx3 uint8 image, FrameTruth)."""
    h, w = k.height, k.width
    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dirs_cam = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us)], axis=-1)
    dirs = dirs_cam @ pose.rotation.T          # (H, W, 3), z-component of cam = 1
    origin = pose.translation

    n_obj = len(scene.objects)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(np.abs(dirs) > 1e-12, 1.0 / dirs, np.inf * np.sign(dirs + 1e-300))

        t_near = np.full((h, w, max(n_obj, 1)), np.inf)
        near_axis = np.zeros((h, w, max(n_obj, 1)), dtype=np.int8)
        for i, obj in enumerate(scene.objects):
            t1 = (obj.bounds_min - origin) * inv
            t2 = (obj.bounds_max - origin) * inv
            lo = np.minimum(t1, t2)
            hi = np.maximum(t1, t2)
            # Parallel rays outside the slab never hit.
            par = np.abs(dirs) <= 1e-12
            outside = par & ((origin < obj.bounds_min) | (origin > obj.bounds_max))
            lo = np.where(par, -np.inf, lo)
            hi = np.where(par, np.inf, hi)
            lo = np.where(outside, np.inf, lo)
            tn = lo.max(axis=-1)
            tf = np.minimum(hi, np.where(outside, -np.inf, np.inf)).min(axis=-1)
            hit = (tn <= tf) & (tn > 1e-6)
            t_near[:, :, i] = np.where(hit, tn, np.inf)
            near_axis[:, :, i] = lo.argmax(axis=-1).astype(np.int8)

        # Room shell: camera is inside, take the exit distance per axis.
        bounds_lo = np.array([0.0, 0.0, 0.0])
        bounds_hi = np.array([scene.room_extent[0], scene.wall_height, scene.room_extent[1]])
        far_bound = np.where(dirs > 0, bounds_hi, bounds_lo)
        t_axis = (far_bound - origin) * inv
        t_axis = np.where(np.abs(dirs) <= 1e-12, np.inf, t_axis)
        room_t = t_axis.min(axis=-1)
        room_axis = t_axis.argmin(axis=-1)

    best_obj = t_near.argmin(axis=-1)
    best_t = np.take_along_axis(t_near, best_obj[..., None], axis=-1)[..., 0]
    instance = np.where(best_t < room_t, best_obj, -1).astype(np.int16)
    depth = np.where(best_t < room_t, best_t, room_t).astype(np.float32)

    vis = np.bincount(instance[instance >= 0].ravel(), minlength=n_obj) if n_obj else np.zeros(0, int)
    pot = (np.isfinite(t_near).sum(axis=(0, 1)) if n_obj else np.zeros(0, int))[:n_obj]

    # Shading: object/room base color scaled per hit face, plus speckle.
    image = np.empty((h, w, 3))
    hit_points = origin + dirs * depth[..., None]
    spec = _speckle(hit_points)
    room_mask = instance < 0
    if room_mask.any():
        axis = room_axis[room_mask]
        sign = np.where(far_bound[room_mask, axis] > origin[axis], 1, -1)
        # Interior faces: the exit direction sign flips the shade lookup.
        shade = np.array([_FACE_SHADE[(int(a), int(-s))] for a, s in zip(axis, sign)])
        image[room_mask] = _WALL_BASE * shade[:, None]
    for i, obj in enumerate(scene.objects):
        m = instance == i
        if not m.any():
            continue
        axis = near_axis[:, :, i][m]
        sign = np.where(dirs[m, axis] > 0, 1, -1)
        shade = np.array([_FACE_SHADE[(int(a), int(s))] for a, s in zip(axis, sign)])
        image[m] = np.asarray(obj.color, dtype=float) * shade[:, None]
    image += spec[..., None]
    image = np.clip(image, 0, 255).astype(np.uint8)

    truth = FrameTruth(depth=depth, instance=instance,
                       visible_px=np.asarray(vis, dtype=int),
                       potential_px=np.asarray(pot, dtype=int))
    return image, truth


@dataclass
class GroundTruthBundle:
    poses: list[RigidTransform]
    truths: list[FrameTruth]

    @property
    def visible_fractions(self) -> np.ndarray:
        """(T, n_obj) matrix of per-frame visible fractions."""
        rows = []
        for t in self.truths:
            pot = np.maximum(t.potential_px, 1)
            frac = t.visible_px / pot
            frac[t.potential_px == 0] = 0.0
            rows.append(frac)
        return np.stack(rows) if rows else np.zeros((0, 0))


@dataclass
class SceneBundle:
    """A generated scene with its rendered frames and oracle products."""

    scene: SceneSpec
    intrinsics: CameraIntrinsics
    frames: list[np.ndarray]
    truth: GroundTruthBundle

    def frame_records(self) -> list[FrameRecord]:
        return [
            FrameRecord(image=img, index=i, intrinsics=self.intrinsics)
            for i, img in enumerate(self.frames)
        ]

    def first_appearance(self, obj: int, threshold: float = 0.2) -> int | None:
        frac = self.truth.visible_fractions[:, obj]
        idx = np.nonzero(frac > threshold)[0]
        return int(idx[0]) if len(idx) else None


def _color_palette(rng: np.random.Generator, n: int) -> list[tuple[int, int, int]]:
    """Distinct per-object albedos: evenly spaced hues with seeded offset."""
    offset = rng.uniform(0, 1)
    colors = []
    for i in range(n):
        hue = (offset + i / max(n, 1)) % 1.0
        sat = 0.55 + 0.3 * ((i * 2654435761) % 97) / 97.0
        val = 0.65 + 0.25 * ((i * 40503) % 89) / 89.0
        colors.append(_hsv_to_rgb(hue, sat, val))
    return colors


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[int, int, int]:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return tuple(int(round(255 * c)) for c in rgb)


def _make_labels(rng: np.random.Generator, n: int) -> list[str]:
    combos = [f"{a} {b}" for a in _ADJECTIVES for b in _NOUNS]
    picks = rng.choice(len(combos), size=min(n, len(combos)), replace=False)
    labels = [combos[int(i)] for i in picks]
    while len(labels) < n:
        labels.append(labels[int(rng.integers(0, len(labels)))])
    # A handful of duplicate labels so counting questions have work to do;
    # small scenes keep every label unique so relational questions have
    # enough distinct referents.
    dup = max(1, n // 5) if n >= 8 else 0
    for j in range(dup):
        src = int(rng.integers(0, n - dup))
        labels[n - 1 - j] = labels[src]
    return labels


def _place_objects(rng: np.random.Generator, n: int, room: tuple[float, float],
                   attempts: int = 1000, restarts: int = 8) -> list[tuple[np.ndarray, np.ndarray]]:
    margin = 0.25
    gap = 0.3 if n <= 20 else 0.12
    for _ in range(restarts):
        placed: list[tuple[np.ndarray, np.ndarray]] = []
        budget = attempts
        while len(placed) < n and budget > 0:
            budget -= 1
            ext = np.array([rng.uniform(0.35, 1.0), rng.uniform(0.6, MAX_OBJECT_HEIGHT),
                            rng.uniform(0.35, 1.0)])
            cx_lo, cx_hi = margin + ext[0] / 2, room[0] - margin - ext[0] / 2
            cz_lo, cz_hi = margin + ext[2] / 2, room[1] - margin - ext[2] / 2
            if cx_lo >= cx_hi or cz_lo >= cz_hi:
                continue
            center = np.array([rng.uniform(cx_lo, cx_hi), ext[1] / 2,
                               rng.uniform(cz_lo, cz_hi)])
            lo, hi = center - ext / 2, center + ext / 2
            clash = False
            for c2, e2 in placed:
                lo2, hi2 = c2 - e2 / 2, c2 + e2 / 2
                if (lo[0] < hi2[0] + gap and hi[0] > lo2[0] - gap
                        and lo[2] < hi2[2] + gap and hi[2] > lo2[2] - gap):
                    clash = True
                    break
            if not clash:
                placed.append((center, ext))
        if len(placed) == n:
            return placed
    raise PlacementFailure(
        f"could not place {n} objects in a {room[0]}x{room[1]} room"
    )


def _make_trajectory(rng: np.random.Generator, room: tuple[float, float],
                     duration: int, limits: MotionLimits) -> list[RigidTransform]:
    """Orbit-style scan: heading sweeps while drifting opposite the gaze.

    Backing away from whatever the camera currently faces keeps objects
    inside the level camera's downward view cone, mimicking how a person
    scans a room.
    """
    pans = 1 if duration <= 90 else (2 if duration <= 300 else 3)
    base_rate = 2 * np.pi * pans / duration
    margin = 0.55
    center = np.array([room[0] / 2, room[1] / 2])
    radius = max(0.3, min(room) / 2 - margin)
    yaw = rng.uniform(-np.pi, np.pi)
    pos = center - np.array([np.sin(yaw), np.cos(yaw)]) * radius * 0.8
    poses = []
    for _ in range(duration):
        dyaw = base_rate + rng.normal(0, 0.02)
        yaw += float(np.clip(dyaw, -limits.max_yaw_step_rad, limits.max_yaw_step_rad))
        fwd = np.array([np.sin(yaw), np.cos(yaw)])
        waypoint = center - fwd * radius + rng.normal(0, 0.05, 2)
        to_wp = waypoint - pos
        dist = np.linalg.norm(to_wp)
        speed = min(limits.max_step_m * 0.6, dist)
        if dist > 1e-9:
            pos = pos + to_wp / dist * speed
        poses.append(pose_from_yaw([pos[0], CAMERA_HEIGHT, pos[1]], yaw))
    return poses


def generate_scene(complexity: dict, seed: int,
                   intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS) -> SceneBundle:
    """Generate and render a scene at the requested complexity levels.

    ``complexity`` maps each of "objects", "scale", "duration" to one of
    "low" / "med" / "high". Deterministic per seed.

    Raises:
        PlacementFailure: the object count does not fit the room.
    """
    levels = {}
    for axis in ("objects", "scale", "duration"):
        level = complexity.get(axis, "low")
        if level not in COMPLEXITY_LEVELS[axis]:
            raise ValueError(f"unknown {axis} level {level!r}")
        levels[axis] = COMPLEXITY_LEVELS[axis][level]

    rng = np.random.default_rng(seed)
    n = levels["objects"]
    room = (levels["scale"], levels["scale"])
    labels = _make_labels(rng, n)
    placed = _place_objects(rng, n, room)
    colors = _color_palette(rng, n)
    objects = [
        SceneObject(label=labels[i], center=placed[i][0], extents=placed[i][1], color=colors[i])
        for i in range(n)
    ]
    limits = MotionLimits()
    trajectory = _make_trajectory(rng, room, levels["duration"], limits)
    scene = SceneSpec(seed=seed, room_extent=room, objects=objects,
                      trajectory=trajectory, motion_limits=limits)
    scene.validate()
    return render_scene(scene, intrinsics)


def render_scene(scene: SceneSpec, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS) -> SceneBundle:
    frames, truths = [], []
    for pose in scene.trajectory:
        img, truth = render_frame(scene, pose, intrinsics)
        frames.append(img)
        truths.append(truth)
    return SceneBundle(scene=scene, intrinsics=intrinsics, frames=frames,
                       truth=GroundTruthBundle(poses=list(scene.trajectory), truths=truths))


# ---------------------------------------------------------------------------
# On-disk bundle format:
#   scene.json, frames/NNNN.png, gt/depth_NNNN.bin (f32 LE), gt/masks_NNNN.json
#   (row-major RLE per instance), gt/poses.json, gt/visibility.json

def save_bundle(bundle: SceneBundle, out_dir) -> Path:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    scene = bundle.scene
    k = bundle.intrinsics
    scene_doc = {
        "seed": scene.seed,
        "room_extent": list(scene.room_extent),
        "wall_height": scene.wall_height,
        "motion_limits": {"max_step_m": scene.motion_limits.max_step_m,
                          "max_yaw_step_rad": scene.motion_limits.max_yaw_step_rad},
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                       "width": k.width, "height": k.height},
        "objects": [
            {"label": o.label, "center": o.center.tolist(),
             "extents": o.extents.tolist(), "color": list(o.color)}
            for o in scene.objects
        ],
    }
    (out / "scene.json").write_text(json.dumps(scene_doc, indent=1))
    poses_doc = []
    for i, pose in enumerate(bundle.truth.poses):
        poses_doc.append({"frame": i, "R": pose.rotation.ravel().tolist(),
                          "t": pose.translation.tolist()})
    (out / "gt" / "poses.json").write_text(json.dumps(poses_doc))
    vis_doc = {"visible_px": [t.visible_px.tolist() for t in bundle.truth.truths],
               "potential_px": [t.potential_px.tolist() for t in bundle.truth.truths]}
    (out / "gt" / "visibility.json").write_text(json.dumps(vis_doc))
    for i, (img, truth) in enumerate(zip(bundle.frames, bundle.truth.truths)):
        write_png(out / "frames" / f"{i:04d}.png", img)
        truth.depth.astype("<f4").tofile(out / "gt" / f"depth_{i:04d}.bin")
        masks_doc = []
        for obj in range(len(scene.objects)):
            m = truth.instance == obj
            if m.any():
                masks_doc.append({"label": scene.objects[obj].label, "instance_id": obj,
                                  "rle_mask": encode_rle(m)})
        (out / "gt" / f"masks_{i:04d}.json").write_text(json.dumps(masks_doc))
    return out


def load_bundle(path) -> SceneBundle:
    root = Path(path)
    doc = json.loads((root / "scene.json").read_text())
    ik = doc["intrinsics"]
    k = CameraIntrinsics(fx=ik["fx"], fy=ik["fy"], cx=ik["cx"], cy=ik["cy"],
                         width=ik["width"], height=ik["height"])
    objects = [
        SceneObject(label=o["label"], center=np.array(o["center"]),
                    extents=np.array(o["extents"]), color=tuple(o["color"]))
        for o in doc["objects"]
    ]
    poses_doc = json.loads((root / "gt" / "poses.json").read_text())
    poses = [RigidTransform(np.array(p["R"]).reshape(3, 3), np.array(p["t"]))
             for p in sorted(poses_doc, key=lambda p: p["frame"])]
    limits = MotionLimits(**doc["motion_limits"])
    scene = SceneSpec(seed=doc["seed"], room_extent=tuple(doc["room_extent"]),
                      objects=objects, trajectory=poses, motion_limits=limits,
                      wall_height=doc["wall_height"])
    vis_doc = json.loads((root / "gt" / "visibility.json").read_text())
    frames, truths = [], []
    for i in range(len(poses)):
        frames.append(read_png(root / "frames" / f"{i:04d}.png"))
        depth = np.fromfile(root / "gt" / f"depth_{i:04d}.bin", dtype="<f4").reshape(k.height, k.width)
        instance = np.full((k.height, k.width), -1, dtype=np.int16)
        for m in json.loads((root / "gt" / f"masks_{i:04d}.json").read_text()):
            instance[decode_rle(m["rle_mask"])] = m["instance_id"]
        truths.append(FrameTruth(
            depth=depth, instance=instance,
            visible_px=np.array(vis_doc["visible_px"][i], dtype=int),
            potential_px=np.array(vis_doc["potential_px"][i], dtype=int)))
    return SceneBundle(scene=scene, intrinsics=k, frames=frames,
                       truth=GroundTruthBundle(poses=poses, truths=truths))
