"""Global semantic map: object fusion, top-down rasterization, visual prompt."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .alignment import FramePose, SimilarityTree
from .errors import AnswerParseError, EmptyObservation
from .geometry import RigidTransform, backproject_pixels, compose

logger = logging.getLogger(__name__)

MERGE_RADIUS_M = 0.5
DEFAULT_CELL_SIZE = 0.25
MAX_POINTS_PER_OBSERVATION = 1500

# The map's global frame is the root camera frame (CV axes), so height
# runs along -y and the grid plane is XZ: +x maps to image columns
# (right), +z to image rows (down).
UP_AXIS = "y-down"

# 24 maximally-distinct colors, assigned to objects by map order.
PALETTE: tuple[tuple[str, tuple[int, int, int]], ...] = (
    ("crimson", (220, 20, 60)), ("royal blue", (65, 105, 225)),
    ("forest green", (34, 139, 34)), ("orange", (255, 140, 0)),
    ("purple", (128, 0, 128)), ("teal", (0, 128, 128)),
    ("gold", (218, 165, 32)), ("magenta", (255, 0, 255)),
    ("sienna", (160, 82, 45)), ("navy", (0, 0, 128)),
    ("olive", (128, 128, 0)), ("turquoise", (64, 224, 208)),
    ("salmon", (250, 128, 114)), ("indigo", (75, 0, 130)),
    ("lime", (50, 205, 50)), ("chocolate", (210, 105, 30)),
    ("slate blue", (106, 90, 205)), ("dark red", (139, 0, 0)),
    ("sea green", (46, 139, 87)), ("hot pink", (255, 105, 180)),
    ("steel blue", (70, 130, 180)), ("dark orange", (255, 99, 20)),
    ("orchid", (218, 112, 214)), ("khaki", (189, 183, 107)),
)

_CELL_PX = 22
_QA_INSTRUCTION = (
    "You are given a top-down semantic map of a scene and structured object "
    "descriptions. Grid columns run along +x (right), rows along +z (down); "
    "the up axis is -y. Use the object bounding boxes and camera pose to "
    "answer. If a needed object is missing from the map, answer 'not found'. "
    "For multiple-choice questions reply with the choice letter in "
    "parentheses, e.g. (A)."
)


VOXEL_SIZE_M = 0.02
# Per-side quantile trim as a multiple of the relative depth-noise scale:
# 2.5 * 0.02 reproduces the [5th, 95th] percentile box at the reference
# noise level and falls back to exact min/max bounds for clean depth.
TRIM_PER_SIGMA = 2.5
TRIM_MAX = 0.05
MIN_CONTAINMENT = 0.9


def trim_quantile(depth_sigma: float) -> float:
    return float(min(TRIM_MAX, TRIM_PER_SIGMA * max(0.0, depth_sigma)))


def _trimmed_bbox(points: np.ndarray, trim_q: float) -> tuple[np.ndarray, np.ndarray]:
    """Noise-calibrated axis-aligned bounds over a density-equalized cloud.

    Trims ``trim_q`` of the mass per axis per side; with the trim scaled
    to the depth-noise level this stays tight for clean data and sheds
    noise tails otherwise. The box is grown back about its center when
    trimming would leave fewer than MIN_CONTAINMENT of the points inside.
    """
    if trim_q <= 0:
        return points.min(axis=0), points.max(axis=0)
    lo = np.percentile(points, 100 * trim_q, axis=0)
    hi = np.percentile(points, 100 * (1 - trim_q), axis=0)
    for _ in range(32):
        inside = np.all((points >= lo - 1e-12) & (points <= hi + 1e-12), axis=1)
        if inside.mean() >= MIN_CONTAINMENT:
            break
        center = (lo + hi) / 2
        lo = center + (lo - center) * 1.05
        hi = center + (hi - center) * 1.05
    return lo, hi


def voxel_downsample(points: np.ndarray, ranges: np.ndarray | None = None,
                     voxel: float = VOXEL_SIZE_M) -> np.ndarray:
    """One representative point per voxel, preferring the shortest-range
    observation (near views carry the least depth noise)."""
    keys = np.floor(points / voxel).astype(np.int64)
    order = np.arange(len(points))
    if ranges is not None:
        order = np.argsort(ranges, kind="stable")
    seen: dict[tuple, int] = {}
    for idx in order:
        key = (keys[idx, 0], keys[idx, 1], keys[idx, 2])
        if key not in seen:
            seen[key] = idx
    picked = sorted(seen.values())
    return points[picked]


@dataclass
class ObjectEntry:
    """One fused map object."""

    label: str
    points: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    source_frames: set[int]
    color_id: int = -1
    trim_q: float = 0.0

    @classmethod
    def from_points(cls, label: str, points: np.ndarray, source_frames,
                    trim_q: float = 0.0, ranges=None, downsample: bool = True) -> "ObjectEntry":
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            raise EmptyObservation(label)
        if downsample:
            points = voxel_downsample(points, ranges)
        lo, hi = _trimmed_bbox(points, trim_q)
        return cls(label=label, points=points, bbox_min=lo, bbox_max=hi,
                   source_frames=set(int(f) for f in source_frames), trim_q=trim_q)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @property
    def center(self) -> np.ndarray:
        return (self.bbox_min + self.bbox_max) / 2.0

    def validate(self) -> None:
        if not np.all(self.bbox_min <= self.bbox_max + 1e-12):
            raise ValueError("bbox min must be <= max")
        inside = np.all((self.points >= self.bbox_min - 1e-9)
                        & (self.points <= self.bbox_max + 1e-9), axis=1)
        if inside.mean() < 0.9:
            raise ValueError(f"bbox contains only {inside.mean():.0%} of points")

    def transformed(self, tf: RigidTransform) -> "ObjectEntry":
        return ObjectEntry.from_points(self.label, tf.apply(self.points),
                                       self.source_frames, trim_q=self.trim_q,
                                       downsample=False)


def merge_entries(a: ObjectEntry, b: ObjectEntry) -> ObjectEntry:
    """Merge two same-label entries; idempotent in value for a == b."""
    if a.label != b.label:
        raise ValueError("can only merge same-label entries")
    return ObjectEntry.from_points(a.label, np.vstack([a.points, b.points]),
                                   a.source_frames | b.source_frames, trim_q=a.trim_q)


def fuse_objects(frames, masks, depths, tree: SimilarityTree,
                 merge_radius: float = MERGE_RADIUS_M,
                 depth_sigma: float = 0.0) -> list[ObjectEntry]:
    """Backproject per-frame masks and merge same-label observations.

    Observations of one label whose point-cloud centroids sit within
    ``merge_radius`` merge into one entry (greedy transitive closure in
    frame order). Masks without valid-depth pixels are skipped with a
    log line. ``depth_sigma`` is the sensor's relative depth-noise scale
    and calibrates the bbox trimming quantile.

    ``masks``/``depths`` are indexed by key-frame position; only
    positions with a global pose in ``tree`` contribute. Entries carry
    original frame indices in ``source_frames``.
    """
    observations = []  # (label, world points, ranges, frame index)
    for pos in sorted(tree.global_poses):
        if pos >= len(masks) or masks[pos] is None:
            continue
        pose = tree.global_poses[pos]
        depth = depths[pos]
        k = frames[pos].intrinsics
        for m in masks[pos]:
            sel = m.mask & depth.valid
            vs, us = np.nonzero(sel)
            if len(us) == 0:
                logger.info("skipping empty-depth mask %r in position %s", m.label, pos)
                continue
            if len(us) > MAX_POINTS_PER_OBSERVATION:
                step = int(np.ceil(len(us) / MAX_POINTS_PER_OBSERVATION))
                us, vs = us[::step], vs[::step]
            uv = np.stack([us, vs], axis=1).astype(float)
            ranges = depth.depth[vs, us].astype(float)
            pts_cam = backproject_pixels(uv, ranges, k)
            observations.append((m.label, pose.apply(pts_cam), ranges,
                                 frames[pos].index))

    by_label: dict[str, list[tuple[np.ndarray, np.ndarray, int]]] = {}
    for label, pts, ranges, fidx in observations:
        by_label.setdefault(label, []).append((pts, ranges, fidx))

    trim_q = trim_quantile(depth_sigma)
    entries: list[ObjectEntry] = []
    for label in sorted(by_label):
        obs = by_label[label]
        centroids = [pts.mean(axis=0) for pts, _, _ in obs]
        parent = list(range(len(obs)))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for i in range(len(obs)):
            for j in range(i + 1, len(obs)):
                if np.linalg.norm(centroids[i] - centroids[j]) < merge_radius:
                    parent[find(j)] = find(i)
        groups: dict[int, list[int]] = {}
        for i in range(len(obs)):
            groups.setdefault(find(i), []).append(i)
        for key in sorted(groups):
            members = groups[key]
            pts = np.vstack([obs[i][0] for i in members])
            ranges = np.concatenate([obs[i][1] for i in members])
            frames_in = {obs[i][2] for i in members}
            entries.append(ObjectEntry.from_points(label, pts, frames_in,
                                                   trim_q=trim_q, ranges=ranges))

    entries.sort(key=lambda e: (e.label, min(e.source_frames),
                                float(e.centroid[0]), float(e.centroid[2])))
    return entries


@dataclass
class SemanticMap:
    """Sparse top-down grid of fused objects and camera poses."""

    objects: list[ObjectEntry]
    camera_poses: list[FramePose]
    cell_size: float
    origin: tuple[float, float]           # world (x, z) of grid corner
    dims: tuple[int, int]                 # (nx, nz)
    object_cells: dict[int, set[tuple[int, int]]]
    camera_cells: dict[int, tuple[int, int]]
    up_axis: str = UP_AXIS

    def occupied_cells(self) -> set[tuple[int, int]]:
        out: set[tuple[int, int]] = set()
        for cells in self.object_cells.values():
            out |= cells
        return out

    def validate(self) -> None:
        nx, nz = self.dims
        for oid, cells in self.object_cells.items():
            if not cells:
                raise ValueError(f"object {oid} has no occupied cell")
            for ix, iz in cells:
                if not (0 <= ix < nx and 0 <= iz < nz):
                    raise ValueError(f"cell {(ix, iz)} outside grid {self.dims}")
        for ix, iz in self.camera_cells.values():
            if not (0 <= ix < nx and 0 <= iz < nz):
                raise ValueError("camera cell outside grid")


def footprint_cells(lo_x: float, lo_z: float, hi_x: float, hi_z: float,
                    origin: tuple[float, float], cell: float,
                    dims: tuple[int, int]) -> set[tuple[int, int]]:
    """Cells whose open interior intersects the rectangle with positive area.

    Zero-width touches at cell boundaries do not count, which keeps the
    cell set stable under the bbox trimming used at fusion time. A
    degenerate rectangle falls back to the cell containing its center.
    """
    ox, oz = origin
    nx, nz = dims
    out: set[tuple[int, int]] = set()
    ix0 = max(0, int(np.floor((lo_x - ox) / cell)))
    iz0 = max(0, int(np.floor((lo_z - oz) / cell)))
    ix1 = min(nx - 1, int(np.ceil((hi_x - ox) / cell)))
    iz1 = min(nz - 1, int(np.ceil((hi_z - oz) / cell)))
    for ix in range(ix0, ix1 + 1):
        cx0, cx1 = ox + ix * cell, ox + (ix + 1) * cell
        if not (lo_x < cx1 and hi_x > cx0):
            continue
        for iz in range(iz0, iz1 + 1):
            cz0, cz1 = oz + iz * cell, oz + (iz + 1) * cell
            if lo_z < cz1 and hi_z > cz0:
                out.add((ix, iz))
    if not out:
        cx, cz = (lo_x + hi_x) / 2, (lo_z + hi_z) / 2
        ix = min(nx - 1, max(0, int(np.floor((cx - ox) / cell))))
        iz = min(nz - 1, max(0, int(np.floor((cz - oz) / cell))))
        out.add((ix, iz))
    return out


def camera_yaw(pose: RigidTransform) -> float:
    """Heading of a camera pose in the map's XZ plane."""
    fwd = pose.rotation[:, 2]
    return float(np.arctan2(fwd[0], fwd[2]))


def rasterize(objects: list[ObjectEntry], poses: list[FramePose],
              cell_size: float = DEFAULT_CELL_SIZE) -> SemanticMap:
    """Build the sparse grid covering all object footprints and cameras."""
    if not objects and not poses:
        raise ValueError("need at least one object or camera pose")
    xs, zs = [], []
    for o in objects:
        xs += [o.bbox_min[0], o.bbox_max[0]]
        zs += [o.bbox_min[2], o.bbox_max[2]]
    for p in poses:
        xs.append(p.pose.translation[0])
        zs.append(p.pose.translation[2])
    lo_x, hi_x = min(xs), max(xs)
    lo_z, hi_z = min(zs), max(zs)
    core_nx = max(1, int(np.ceil((hi_x - lo_x) / cell_size - 1e-9)))
    core_nz = max(1, int(np.ceil((hi_z - lo_z) / cell_size - 1e-9)))
    origin = (lo_x - cell_size, lo_z - cell_size)
    dims = (core_nx + 2, core_nz + 2)

    object_cells = {
        i: footprint_cells(o.bbox_min[0], o.bbox_min[2], o.bbox_max[0], o.bbox_max[2],
                           origin, cell_size, dims)
        for i, o in enumerate(objects)
    }
    camera_cells = {}
    for p in poses:
        ix = int(np.floor((p.pose.translation[0] - origin[0]) / cell_size))
        iz = int(np.floor((p.pose.translation[2] - origin[1]) / cell_size))
        camera_cells[p.frame_index] = (min(dims[0] - 1, max(0, ix)),
                                       min(dims[1] - 1, max(0, iz)))
    return SemanticMap(objects=objects, camera_poses=list(poses), cell_size=cell_size,
                       origin=origin, dims=dims, object_cells=object_cells,
                       camera_cells=camera_cells)


def build_semantic_map(entries: list[ObjectEntry], poses: list[FramePose],
                       grounding=None, cell_size: float = DEFAULT_CELL_SIZE) -> SemanticMap:
    """Order entries (targets, cues, then others by label), assign palette
    colors, and rasterize."""
    order = _entry_order(entries, grounding)
    ordered = []
    for rank, idx in enumerate(order):
        e = entries[idx]
        e.color_id = rank % len(PALETTE)
        ordered.append(e)
    return rasterize(ordered, poses, cell_size)


def _entry_order(entries, grounding) -> list[int]:
    if grounding is None:
        prio = {}
    else:
        prio = {g.label: (0, -g.relevance) for g in reversed(grounding.targets)}
        for g in reversed(grounding.cues):
            prio.setdefault(g.label, (1, -g.relevance))
    keys = []
    for i, e in enumerate(entries):
        group, rel = prio.get(e.label, (2, 0.0))
        keys.append((group, rel, e.label, min(e.source_frames), i))
    return [k[-1] for k in sorted(keys)]


@dataclass
class VisualPrompt:
    map_image: np.ndarray
    text_block: str
    legend: dict[int, tuple[str, tuple[int, int, int]]]


def _bbox_line(e: ObjectEntry) -> str:
    lo, hi = e.bbox_min, e.bbox_max
    return (f"[{lo[0]:.2f},{lo[1]:.2f},{lo[2]:.2f}]"
            f"–[{hi[0]:.2f},{hi[1]:.2f},{hi[2]:.2f}] m")


def render_text_block(smap: SemanticMap, question: str) -> str:
    lines = [
        f"Semantic map: top-down grid, cell {smap.cell_size:.2f} m, "
        f"x right, z down, up axis {smap.up_axis}.",
        "Objects:",
    ]
    for e in smap.objects:
        name = PALETTE[e.color_id][0]
        frames = ",".join(str(f) for f in sorted(e.source_frames))
        lines.append(f"- {e.label} [color: {name}]: bbox {_bbox_line(e)}; "
                     f"seen in frames [{frames}]")
    if smap.camera_poses:
        cur = smap.camera_poses[-1]
        t = cur.pose.translation
        lines.append(
            f"Camera (current): position [{t[0]:.2f},{t[1]:.2f},{t[2]:.2f}] m, "
            f"yaw {camera_yaw(cur.pose):.3f} rad, frame {cur.frame_index}")
    lines.append(f"Question: {question}")
    return "\n".join(lines)


def render_map_image(smap: SemanticMap) -> np.ndarray:
    """Deterministic raster of the grid: colored object cells, camera
    triangles showing heading, gridlines, and a legend strip."""
    nx, nz = smap.dims
    legend_h = 18 * max(1, len(smap.objects))
    w, h = nx * _CELL_PX, nz * _CELL_PX
    img = PILImage.new("RGB", (w, h + legend_h), (248, 248, 248))
    draw = ImageDraw.Draw(img)
    for x in range(0, w + 1, _CELL_PX):
        draw.line([(min(x, w - 1), 0), (min(x, w - 1), h - 1)], fill=(210, 210, 210))
    for z in range(0, h + 1, _CELL_PX):
        draw.line([(0, min(z, h - 1)), (w - 1, min(z, h - 1))], fill=(210, 210, 210))
    # Draw lowest-priority objects first so targets end up on top.
    for i in reversed(range(len(smap.objects))):
        color = PALETTE[smap.objects[i].color_id][1]
        for ix, iz in sorted(smap.object_cells[i]):
            draw.rectangle([ix * _CELL_PX + 1, iz * _CELL_PX + 1,
                            (ix + 1) * _CELL_PX - 2, (iz + 1) * _CELL_PX - 2],
                           fill=color)
    for p in smap.camera_poses:
        ix, iz = smap.camera_cells[p.frame_index]
        cx = ix * _CELL_PX + _CELL_PX / 2
        cz = iz * _CELL_PX + _CELL_PX / 2
        yaw = camera_yaw(p.pose)
        d = np.array([np.sin(yaw), np.cos(yaw)])
        side = np.array([d[1], -d[0]])
        tip = np.array([cx, cz]) + d * (_CELL_PX * 0.45)
        base = np.array([cx, cz]) - d * (_CELL_PX * 0.25)
        pts = [tuple(tip), tuple(base + side * _CELL_PX * 0.22),
               tuple(base - side * _CELL_PX * 0.22)]
        current = p is smap.camera_poses[-1]
        draw.polygon([(float(a), float(b)) for a, b in pts],
                     fill=(20, 20, 20) if current else (110, 110, 110))
    for row, e in enumerate(smap.objects):
        y = h + 2 + row * 18
        name, color = PALETTE[e.color_id]
        draw.rectangle([4, y + 3, 16, y + 15], fill=color)
        draw.text((22, y + 3), f"{e.label} ({name})", fill=(30, 30, 30))
    return np.asarray(img)


def render_prompt(smap: SemanticMap, grounding, question: str) -> VisualPrompt:
    """Rendered map image plus the structured text block for the VLM."""
    text = render_text_block(smap, question)
    image = render_map_image(smap)
    legend = {e.color_id: (e.label, PALETTE[e.color_id][1]) for e in smap.objects}
    return VisualPrompt(map_image=image, text_block=text, legend=legend)


@dataclass(frozen=True)
class Answer:
    text: str
    choice: str | None


_CHOICE_RE = re.compile(r"\(([A-F])\)")


def answer_question(prompt: VisualPrompt, question: str, backend) -> Answer:
    """Send the visual prompt to the VLM and parse a choice when present.

    Raises:
        AnswerParseError: the question is multiple-choice but the reply
        carries no recognizable letter (raw text preserved on the error).
    """
    full = f"{_QA_INSTRUCTION}\n\n{prompt.text_block}"
    reply = backend.vlm_query([prompt.map_image], full)
    has_choices = "Choices:" in question
    m = _CHOICE_RE.search(reply)
    if has_choices and m is None:
        err = AnswerParseError(f"no choice letter in reply: {reply!r}")
        err.raw_text = reply
        raise err
    return Answer(text=reply, choice=m.group(1) if m else None)


# --- machine-readable map (External Interfaces) ----------------------------

def map_to_json(smap: SemanticMap) -> str:
    doc = {
        "cell_size": smap.cell_size,
        "origin": [smap.origin[0], smap.origin[1]],
        "grid_dims": [smap.dims[0], smap.dims[1]],
        "up_axis": smap.up_axis,
        "objects": [
            {"label": e.label, "color_id": e.color_id,
             "bbox_min": [round(float(v), 6) for v in e.bbox_min],
             "bbox_max": [round(float(v), 6) for v in e.bbox_max],
             "source_frames": sorted(e.source_frames)}
            for e in smap.objects
        ],
        "cameras": [
            {"frame": p.frame_index,
             "position": [round(float(v), 6) for v in p.pose.translation],
             "yaw_rad": round(camera_yaw(p.pose), 6)}
            for p in smap.camera_poses
        ],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def map_from_json(text: str) -> SemanticMap:
    """Rebuild a map from its JSON dump (bbox corners stand in for points)."""
    doc = json.loads(text)
    entries = []
    for o in doc["objects"]:
        lo, hi = np.array(o["bbox_min"]), np.array(o["bbox_max"])
        corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                            for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        e = ObjectEntry(label=o["label"], points=corners, bbox_min=lo, bbox_max=hi,
                        source_frames=set(o["source_frames"]), color_id=o["color_id"])
        entries.append(e)
    from .bench.scene import pose_from_yaw  # level-camera pose convention
    poses = [FramePose(frame_index=c["frame"],
                       pose=pose_from_yaw(c["position"], c["yaw_rad"]))
             for c in doc["cameras"]]
    return rasterize(entries, poses, doc["cell_size"])


# --- text-block parsing (shared by replay tooling and the oracle VLM) ------

_OBJ_RE = re.compile(
    r"^- (?P<label>.+?) \[color: (?P<color>[^\]]+)\]: bbox "
    r"\[(?P<lo>[^\]]+)\]–\[(?P<hi>[^\]]+)\] m; seen in frames \[(?P<frames>[^\]]*)\]",
    re.MULTILINE)
_CAM_RE = re.compile(
    r"^Camera \(current\): position \[(?P<pos>[^\]]+)\] m, yaw (?P<yaw>[-\d.]+) rad, "
    r"frame (?P<frame>\d+)", re.MULTILINE)


@dataclass
class ParsedMap:
    objects: dict[str, list[dict]]
    camera_position: np.ndarray | None
    camera_yaw: float | None
    question: str | None

    def centers(self, label: str) -> list[np.ndarray]:
        return [(o["bbox_min"] + o["bbox_max"]) / 2.0 for o in self.objects.get(label, [])]


def parse_text_block(text: str) -> ParsedMap:
    objects: dict[str, list[dict]] = {}
    for m in _OBJ_RE.finditer(text):
        lo = np.array([float(v) for v in m.group("lo").split(",")])
        hi = np.array([float(v) for v in m.group("hi").split(",")])
        frames = [int(v) for v in m.group("frames").split(",") if v.strip()]
        objects.setdefault(m.group("label"), []).append(
            {"bbox_min": lo, "bbox_max": hi, "frames": frames,
             "color": m.group("color")})
    cam = _CAM_RE.search(text)
    pos = yaw = None
    if cam:
        pos = np.array([float(v) for v in cam.group("pos").split(",")])
        yaw = float(cam.group("yaw"))
    qm = re.search(r"^Question: (?P<q>.+)$", text, re.MULTILINE | re.DOTALL)
    return ParsedMap(objects=objects, camera_position=pos, camera_yaw=yaw,
                     question=qm.group("q") if qm else None)
