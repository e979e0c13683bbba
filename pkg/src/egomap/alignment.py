"""Pairwise SE(3) estimation and topology-aware global registration.

Key frames form a complete similarity graph weighted by embedding cosine.
Global registration picks the most central frame as root, builds the
maximum spanning tree, estimates one rigid transform per tree edge, and
compounds transforms along root paths. A sequential chain is kept as the
drift baseline, and a refinement pass recovers segmentation misses for
objects that should be visible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentFailed, DegenerateCorrespondences, PartialAlignment
from .geometry import (
    Correspondence3D,
    RansacParams,
    RigidTransform,
    backproject_pixels,
    bilinear_inverse_depth,
    compose,
    estimate_rigid_transform,
    project_points,
)
from .perception.types import SegmentMask

logger = logging.getLogger(__name__)

MIN_INLIER_RATIO = 0.3
MIN_REGION_CORRESPONDENCES = 12
MAX_MST_RETRIES = 3
EXCLUDED_EDGE_WEIGHT = -4.0

# Occlusion-refinement thresholds: minimum fraction of an object's fused
# points that must project unoccluded into a frame before recovery is
# attempted, and the depth-consistency slack as a multiple of sigma_d.
TAU_VIS = 0.4
DELTA_Z_SIGMA = 3.0
DELTA_Z_MIN = 1e-3
MAX_PROMPT_POINTS = 24


@dataclass(frozen=True)
class SimilarityGraph:
    """Complete frame-similarity graph; weights are embedding cosines."""

    n: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.n, self.n):
            raise ValueError(f"weights must be {self.n}x{self.n}")
        if not np.allclose(w, w.T, atol=1e-9):
            raise ValueError("weights must be symmetric")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class FramePose:
    frame_index: int
    pose: RigidTransform


@dataclass
class SimilarityTree:
    """MST over frames with per-edge transforms and cached global poses.

    Nodes are positions into the key-frame list. ``parent`` maps node ->
    (parent node, edge weight); ``pairwise`` holds child-to-parent
    transforms; ``global_poses`` maps node -> node-to-root transform.
    """

    root: int
    parent: dict[int, tuple[int, float]]
    pairwise: dict[tuple[int, int], RigidTransform]
    global_poses: dict[int, RigidTransform]

    @property
    def nodes(self) -> list[int]:
        return sorted(set(self.parent) | {self.root})

    def path_to_root(self, node: int) -> list[int]:
        path = [node]
        while path[-1] != self.root:
            path.append(self.parent[path[-1]][0])
        return path

    def subtree(self, node: int) -> set[int]:
        out = {node}
        changed = True
        while changed:
            changed = False
            for child, (par, _) in self.parent.items():
                if par in out and child not in out:
                    out.add(child)
                    changed = True
        return out

    def validate(self) -> None:
        if self.root in self.parent:
            raise ValueError("root must not have a parent")
        ident = self.global_poses[self.root]
        if not np.allclose(ident.rotation, np.eye(3), atol=1e-9) or np.linalg.norm(
            ident.translation
        ) > 1e-9:
            raise ValueError("global pose of root must be identity")
        for node in self.parent:
            expect = RigidTransform.identity()
            path = self.path_to_root(node)
            for child, par in zip(path, path[1:]):
                expect = compose(self.pairwise[(child, par)], expect)
            got = self.global_poses[node]
            if not np.allclose(got.rotation, expect.rotation, atol=1e-8):
                raise ValueError(f"global pose of {node} inconsistent with path product")

    def rebase(self, new_origin: int) -> "SimilarityTree":
        """Re-express all global poses in the frame of ``new_origin``.

        Tree topology and pairwise transforms are unchanged; only the
        coordinate convention moves (one extra composition per node).
        """
        base_inv = self.global_poses[new_origin].inverse()
        poses = {n: compose(base_inv, p) for n, p in self.global_poses.items()}
        return SimilarityTree(root=self.root, parent=dict(self.parent),
                              pairwise=dict(self.pairwise), global_poses=poses)

    def to_json(self, frame_indices=None) -> str:
        """Diagnostic dump for trajectory-evaluation tooling."""
        idx = (lambda n: int(frame_indices[n])) if frame_indices is not None else int
        edges = [{"i": idx(child), "j": idx(par), "weight": w}
                 for child, (par, w) in sorted(self.parent.items())]
        poses = [{"frame": idx(n), "R": p.rotation.ravel().tolist(),
                  "t": p.translation.tolist()}
                 for n, p in sorted(self.global_poses.items())]
        return json.dumps({"root": idx(self.root), "edges": edges,
                           "global_poses": poses}, indent=1)


def build_similarity_graph(frames, backend) -> SimilarityGraph:
    """Pairwise cosine similarities between frame embeddings."""
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    vecs = []
    for fr in frames:
        if fr.embedding is None:
            fr.embedding = backend.embed(fr)
        vecs.append(fr.embedding.vector)
    e = np.stack(vecs)
    w = e @ e.T
    w = (w + w.T) / 2.0
    np.fill_diagonal(w, 0.0)
    return SimilarityGraph(n=len(frames), weights=w)


def select_root(g: SimilarityGraph) -> int:
    """Most central node: argmax row sum, ties to the lowest index."""
    if g.n == 1:
        return 0
    sums = g.weights.sum(axis=1)
    return int(np.argmax(sums))


def build_mst(g: SimilarityGraph) -> set[tuple[int, int]]:
    """Maximum spanning tree via Kruskal with lexicographic tie-breaking."""
    edges = [(i, j) for i in range(g.n) for j in range(i + 1, g.n)]
    edges.sort(key=lambda e: (-g.weights[e], e[0], e[1]))
    parent = list(range(g.n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    out: set[tuple[int, int]] = set()
    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[rj] = ri
            out.add((i, j))
            if len(out) == g.n - 1:
                break
    return out


def _lift_matches(frame_a, frame_b, matches, backend) -> list[Correspondence3D]:
    """Pixel matches to 3D-3D correspondences through per-frame depth.

    Sub-pixel endpoints use inverse-depth bilinear interpolation, which
    is exact on planar surfaces.
    """
    for fr in (frame_a, frame_b):
        if fr.depth is None:
            fr.depth = backend.estimate_depth(fr)
    ka, kb = frame_a.intrinsics, frame_b.intrinsics
    corrs = []
    for uv_a, uv_b, conf in zip(matches.source, matches.target, matches.confidence):
        da = bilinear_inverse_depth(frame_a.depth.depth, frame_a.depth.valid,
                                    float(uv_a[0]), float(uv_a[1]))
        db = bilinear_inverse_depth(frame_b.depth.depth, frame_b.depth.valid,
                                    float(uv_b[0]), float(uv_b[1]))
        if da is None or db is None:
            continue
        pa = backproject_pixels(uv_a[None], np.array([da]), ka)[0]
        pb = backproject_pixels(uv_b[None], np.array([db]), kb)[0]
        corrs.append(Correspondence3D(pa, pb, float(conf)))
    return corrs


def task_region_mask(frame, grounding, backend) -> np.ndarray | None:
    """Union of task-related detection boxes; None when nothing detected."""
    if frame.detections is None:
        frame.detections = backend.detect(frame, grounding.labels)
    k = frame.intrinsics
    mask = np.zeros((k.height, k.width), dtype=bool)
    found = False
    for det in frame.detections:
        u0, v0, u1, v1 = det.bbox_2d
        mask[int(max(0, v0)) : int(min(k.height, np.ceil(v1))),
             int(max(0, u0)) : int(min(k.width, np.ceil(u1)))] = True
        found = True
    return mask if found else None


def estimate_pairwise(frame_a, frame_b, grounding, backend,
                      ransac: RansacParams = RansacParams()) -> RigidTransform:
    """Rigid transform mapping frame_a coordinates into frame_b coordinates.

    Pixel matches are restricted to the union of task-related detection
    boxes in frame_a (full frame with a logged flag when no box exists),
    lifted to 3D through estimated depth, and fit with RANSAC.

    Raises:
        AlignmentFailed: degenerate correspondences or inlier ratio < 0.3.
    """
    region = task_region_mask(frame_a, grounding, backend)
    if region is None:
        logger.info("pairwise %s->%s: no task bbox, falling back to full frame",
                    frame_a.index, frame_b.index)
    matches = backend.match(frame_a, frame_b, region_mask=region)
    corrs = _lift_matches(frame_a, frame_b, matches, backend)
    if region is not None and len(corrs) < MIN_REGION_CORRESPONDENCES:
        # Task objects of frame_a are occluded or missing in frame_b;
        # retry on the whole frame rather than failing the edge outright.
        logger.info("pairwise %s->%s: %d correspondences in task regions, "
                    "falling back to full frame", frame_a.index, frame_b.index,
                    len(corrs))
        matches = backend.match(frame_a, frame_b, region_mask=None)
        corrs = _lift_matches(frame_a, frame_b, matches, backend)
    try:
        tf, inliers = estimate_rigid_transform(corrs, ransac)
    except DegenerateCorrespondences as exc:
        raise AlignmentFailed(
            f"frames {frame_a.index}->{frame_b.index}: {exc}") from exc
    ratio = float(inliers.mean()) if len(inliers) else 0.0
    if ratio < MIN_INLIER_RATIO:
        raise AlignmentFailed(
            f"frames {frame_a.index}->{frame_b.index}: inlier ratio {ratio:.2f} < {MIN_INLIER_RATIO}")
    return tf


def _orient_edges(mst: set[tuple[int, int]], root: int, n: int) -> list[tuple[int, int]]:
    """Orient MST edges child->parent by BFS from the root, children ascending."""
    adj: dict[int, list[int]] = {i: [] for i in range(n)}
    for i, j in mst:
        adj[i].append(j)
        adj[j].append(i)
    seen = {root}
    order: list[tuple[int, int]] = []
    frontier = [root]
    while frontier:
        nxt = []
        for par in frontier:
            for child in sorted(adj[par]):
                if child not in seen:
                    seen.add(child)
                    order.append((child, par))
                    nxt.append(child)
        frontier = nxt
    return order


def _assemble_tree(g: SimilarityGraph, root: int, mst: set[tuple[int, int]],
                   pairwise_fn) -> SimilarityTree:
    parent: dict[int, tuple[int, float]] = {}
    pairwise: dict[tuple[int, int], RigidTransform] = {}
    global_poses: dict[int, RigidTransform] = {root: RigidTransform.identity()}
    for child, par in _orient_edges(mst, root, g.n):
        try:
            tf = pairwise_fn(child, par)
        except AlignmentFailed as exc:
            exc.edge = (child, par)
            raise
        parent[child] = (par, float(g.weights[child, par]))
        pairwise[(child, par)] = tf
        global_poses[child] = compose(global_poses[par], tf)
    return SimilarityTree(root=root, parent=parent, pairwise=pairwise,
                          global_poses=global_poses)


def align_tree(frames, g: SimilarityGraph, grounding, backend,
               ransac: RansacParams = RansacParams(), pairwise_fn=None) -> SimilarityTree:
    """Topology-aware global registration over the key-frame set.

    Edges that fail pairwise estimation are excluded and the MST is
    rebuilt, up to MAX_MST_RETRIES times; if the graph still cannot be
    spanned, PartialAlignment carries the component containing the root.

    ``pairwise_fn(child, parent) -> RigidTransform`` may replace the
    default estimator (used by drift experiments with exact oracles).
    """
    if pairwise_fn is None:
        cache: dict[tuple[int, int], RigidTransform] = {}

        def pairwise_fn(child, par):
            key = (child, par)
            if key not in cache:
                cache[key] = estimate_pairwise(frames[child], frames[par],
                                               grounding, backend, ransac)
            return cache[key]

    weights = g.weights.copy()
    root = select_root(g)
    for _ in range(MAX_MST_RETRIES + 1):
        work = SimilarityGraph(n=g.n, weights=weights)
        mst = build_mst(work)
        try:
            return _assemble_tree(work, root, mst, pairwise_fn)
        except AlignmentFailed as exc:
            bad = _failed_edge(exc, mst)
            if bad is None:
                raise
            logger.warning("excluding unusable tree edge %s: %s", bad, exc)
            # Finite sentinel below any cosine: the edge sorts last and is
            # only picked again if the graph cannot be spanned without it.
            weights[bad[0], bad[1]] = EXCLUDED_EDGE_WEIGHT
            weights[bad[1], bad[0]] = EXCLUDED_EDGE_WEIGHT
    # Retries exhausted: align the component reachable from the root.
    partial = _assemble_partial(g, root, weights, pairwise_fn)
    raise PartialAlignment(
        f"aligned only {len(partial.global_poses)}/{g.n} frames",
        tree=partial, aligned_nodes=sorted(partial.global_poses))


def _failed_edge(exc: AlignmentFailed, mst) -> tuple[int, int] | None:
    return getattr(exc, "edge", None)


def _assemble_partial(g, root, weights, pairwise_fn) -> SimilarityTree:
    work = SimilarityGraph(n=g.n, weights=weights)
    mst = build_mst(work)
    parent: dict[int, tuple[int, float]] = {}
    pairwise: dict[tuple[int, int], RigidTransform] = {}
    global_poses: dict[int, RigidTransform] = {root: RigidTransform.identity()}
    for child, par in _orient_edges(mst, root, g.n):
        if par not in global_poses:
            continue
        try:
            tf = pairwise_fn(child, par)
        except AlignmentFailed:
            continue
        parent[child] = (par, float(work.weights[child, par]))
        pairwise[(child, par)] = tf
        global_poses[child] = compose(global_poses[par], tf)
    return SimilarityTree(root=root, parent=parent, pairwise=pairwise,
                          global_poses=global_poses)


def align_sequential(frames, grounding, backend,
                     ransac: RansacParams = RansacParams(),
                     pairwise_fn=None) -> list[FramePose]:
    """Chained consecutive alignment (Eq.-1-style drift baseline).

    Poses are expressed in the first frame's coordinates. Exists for
    comparison experiments against the tree strategy.
    """
    if pairwise_fn is None:
        def pairwise_fn(child, par):
            return estimate_pairwise(frames[child], frames[par], grounding,
                                     backend, ransac)

    poses = [RigidTransform.identity()]
    for j in range(1, len(frames)):
        tf = pairwise_fn(j, j - 1)  # j -> j-1
        poses.append(compose(poses[j - 1], tf))
    return [FramePose(frame_index=frames[i].index, pose=poses[i])
            for i in range(len(frames))]


@dataclass(frozen=True)
class RecoveryEvent:
    """One occlusion-refinement attempt (kept for diagnostics and tests)."""

    frame_position: int
    label: str
    accepted: bool
    n_prompts: int


def refine_occlusions(tree: SimilarityTree, frames, masks, map_draft, backend,
                      depth_sigma: float = 0.0):
    """Recover segmentation misses for objects expected to be visible.

    For each (frame, map object) pair without a matching mask: project
    the object's fused points into the frame; when at least TAU_VIS of
    them land in-bounds and depth-consistent (not hidden by nearer
    geometry), pull pixel correspondences from a frame where the object
    was segmented into this frame's unsegmented area and prompt the
    segmenter with the matched pixels. A recovered mask is accepted when
    it covers at least half the prompt points.

    Args:
        masks: per-frame-position list of SegmentMask lists.
        map_draft: SemanticMap with fused object entries.
        depth_sigma: relative depth-noise scale; widens the z test.

    Returns:
        (updated_masks, events): a new per-frame mask list plus the
        recovery-attempt log. Existing masks are never removed or shrunk.
    """
    updated = [list(per_frame) for per_frame in masks]
    events: list[RecoveryEvent] = []
    for pos in sorted(tree.global_poses):
        frame = frames[pos]
        k = frame.intrinsics
        if frame.depth is None:
            frame.depth = backend.estimate_depth(frame)
        have = {m.label for m in updated[pos]}
        cam_pose = tree.global_poses[pos].inverse()  # map -> this camera frame
        for obj in map_draft.objects:
            if obj.label in have or len(obj.points) == 0:
                continue
            pts_cam = cam_pose.apply(obj.points)
            uvz, in_front = project_points(pts_cam, RigidTransform.identity(), k)
            ok = in_front.copy()
            uv = uvz[:, :2]
            ok &= ((uv[:, 0] >= 0) & (uv[:, 0] < k.width)
                   & (uv[:, 1] >= 0) & (uv[:, 1] < k.height))
            if ok.any():
                ui = np.clip(np.round(uv[ok, 0]).astype(int), 0, k.width - 1)
                vi = np.clip(np.round(uv[ok, 1]).astype(int), 0, k.height - 1)
                dmap = frame.depth.depth[vi, ui]
                valid = frame.depth.valid[vi, ui]
                slack = np.maximum(DELTA_Z_SIGMA * depth_sigma * dmap, DELTA_Z_MIN)
                unoccluded = valid & (uvz[ok, 2] <= dmap + slack)
                frac = float(unoccluded.sum()) / len(obj.points)
            else:
                frac = 0.0
            if frac < TAU_VIS:
                continue
            pos_of = {frames[p].index: p for p in range(len(frames))}
            donor = _pick_donor(obj, masks, pos, pos_of)
            if donor is None:
                continue
            donor_pos, donor_mask = donor
            prompts = _cross_frame_prompts(frames[donor_pos], frame, donor_mask,
                                           updated[pos], backend)
            if not prompts:
                events.append(RecoveryEvent(pos, obj.label, False, 0))
                continue
            recovered = backend.segment(frame, [obj.label], prompts=prompts)
            accepted = False
            for m in recovered:
                covered = sum(1 for (u, v) in prompts
                              if m.mask[int(round(v)), int(round(u))])
                if covered * 2 >= len(prompts):
                    updated[pos].append(m)
                    have.add(obj.label)
                    accepted = True
                    break
            events.append(RecoveryEvent(pos, obj.label, accepted, len(prompts)))
            if not accepted:
                logger.info("refinement failed for %s in frame position %s",
                            obj.label, pos)
    return updated, events


def _pick_donor(obj, masks, exclude_pos, pos_of):
    """Source frame for prompts: largest same-label mask, lowest position.

    ``obj.source_frames`` holds original frame indices; ``pos_of`` maps
    them back to key-frame positions.
    """
    best = None
    for fidx in sorted(obj.source_frames):
        pos = pos_of.get(fidx)
        if pos is None or pos == exclude_pos or pos >= len(masks):
            continue
        for m in masks[pos]:
            if m.label == obj.label:
                if best is None or m.area > best[1].area:
                    best = (pos, m)
    return best


def _cross_frame_prompts(donor_frame, target_frame, donor_mask: SegmentMask,
                         target_masks, backend) -> list[tuple[float, float]]:
    """Matched pixels from the donor's masked region into the target's
    unsegmented area, used as segmentation prompts."""
    matches = backend.match(donor_frame, target_frame, region_mask=donor_mask.mask)
    if len(matches) == 0:
        return []
    k = target_frame.intrinsics
    covered = np.zeros((k.height, k.width), dtype=bool)
    for m in target_masks:
        covered |= m.mask
    prompts = []
    for (ub, vb) in matches.target:
        ui, vi = int(round(ub)), int(round(vb))
        if 0 <= ui < k.width and 0 <= vi < k.height and not covered[vi, ui]:
            prompts.append((float(ub), float(vb)))
        if len(prompts) >= MAX_PROMPT_POINTS:
            break
    return prompts
