"""Tests for the similarity graph, MST registration, and occlusion refinement."""

import itertools

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import grounding_for, make_scene, orbit_poses
from egomap.alignment import (
    FramePose,
    SimilarityGraph,
    align_sequential,
    align_tree,
    build_mst,
    build_similarity_graph,
    estimate_pairwise,
    refine_occlusions,
    select_root,
)
from egomap.bench.scene import SceneObject, generate_scene, pose_from_yaw
from egomap.geometry import RigidTransform, compose, transform_distance
from egomap.perception.synthetic import SyntheticBackend, SyntheticNoise
from egomap.semmap import build_semantic_map, fuse_objects


def clean_backend(bundle, **noise):
    return SyntheticBackend(bundle, SyntheticNoise(confidence_sigma=0.0, **noise))


def scene_fixture(seed=7, step=6):
    bundle = generate_scene({"objects": "low", "scale": "low", "duration": "low"}, seed=seed)
    backend = clean_backend(bundle)
    frames = bundle.frame_records()
    sel = list(range(0, len(frames), step))
    grounding = grounding_for(sorted(set(bundle.scene.labels)))
    return bundle, backend, [frames[i] for i in sel], sel, grounding


class TestSimilarityGraph:
    def test_duplicate_frames_weight_one(self):
        bundle, backend, frames, sel, _ = scene_fixture()
        twin = [frames[0], frames[0]]
        import copy
        twin = [frames[0], copy.copy(frames[0])]
        g = build_similarity_graph(twin, backend)
        assert g.weights[0, 1] == pytest.approx(1.0, abs=1e-9)

    def test_symmetry(self):
        _, backend, frames, _, _ = scene_fixture()
        g = build_similarity_graph(frames, backend)
        assert np.allclose(g.weights, g.weights.T, atol=1e-12)

    def test_correlates_with_view_overlap(self):
        # Oracle: overlap of visible-surface sets from ground-truth
        # geometry (common z-buffer visibility of sampled world points).
        bundle, backend, frames, sel, _ = scene_fixture(step=4)
        g = build_similarity_graph(frames, backend)
        k = bundle.intrinsics
        vis_sets = []
        for idx in sel:
            truth = bundle.truth.truths[idx]
            vis = set()
            inst = truth.instance
            step = 8
            for v in range(0, inst.shape[0], step):
                for u in range(0, inst.shape[1], step):
                    if inst[v, u] >= 0:
                        vis.add((inst[v, u], u // 32, v // 32))
            vis_sets.append(vis)
        ws, overlaps = [], []
        for i in range(len(frames)):
            for j in range(i + 1, len(frames)):
                union = vis_sets[i] | vis_sets[j]
                inter = vis_sets[i] & vis_sets[j]
                if not union:
                    continue
                overlaps.append(len(inter) / len(union))
                ws.append(g.weights[i, j])
        rho = spearmanr(ws, overlaps).statistic
        assert rho > 0.5


class TestRootAndMST:
    def test_single_node(self):
        g = SimilarityGraph(n=1, weights=np.zeros((1, 1)))
        assert select_root(g) == 0
        assert build_mst(g) == set()

    def test_root_row_sums(self):
        w = np.array([[0.0, 0.7, 0.5], [0.7, 0.0, 1.1], [0.5, 1.1, 0.0]])
        g = SimilarityGraph(n=3, weights=w)
        sums = w.sum(axis=1)
        assert select_root(g) == int(np.argmax(sums)) == 1

    def test_root_tie_lowest_index(self):
        w = np.ones((4, 4)) - np.eye(4)
        g = SimilarityGraph(n=4, weights=w)
        assert select_root(g) == 0

    def test_three_node_example(self):
        w = np.zeros((3, 3))
        w[0, 1] = w[1, 0] = 0.9
        w[0, 2] = w[2, 0] = 0.5
        w[1, 2] = w[2, 1] = 0.8
        g = SimilarityGraph(n=3, weights=w)
        assert build_mst(g) == {(0, 1), (1, 2)}

    def test_two_nodes(self):
        g = SimilarityGraph(n=2, weights=np.array([[0.0, 0.3], [0.3, 0.0]]))
        assert build_mst(g) == {(0, 1)}

    @pytest.mark.parametrize("n", [4, 5, 6])
    def test_matches_bruteforce_maximum(self, n):
        # Oracle: enumerate all spanning trees (edge subsets of size n-1
        # that span), take the maximum total weight.
        rng = np.random.default_rng(n)
        for _ in range(20):
            w = rng.uniform(-1, 1, (n, n))
            w = (w + w.T) / 2
            np.fill_diagonal(w, 0)
            g = SimilarityGraph(n=n, weights=w)
            got = sum(w[e] for e in build_mst(g))
            edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
            best = -np.inf
            for subset in itertools.combinations(edges, n - 1):
                parent = list(range(n))

                def find(x):
                    while parent[x] != x:
                        parent[x] = parent[parent[x]]
                        x = parent[x]
                    return x

                ok = True
                for i, j in subset:
                    ri, rj = find(i), find(j)
                    if ri == rj:
                        ok = False
                        break
                    parent[rj] = ri
                if ok:
                    best = max(best, sum(w[e] for e in subset))
            assert got == pytest.approx(best, abs=1e-12)


class TestPairwise:
    def test_self_is_identity(self):
        _, backend, frames, _, grounding = scene_fixture()
        tf = estimate_pairwise(frames[0], frames[0], grounding, backend)
        rerr, terr = transform_distance(tf, RigidTransform.identity())
        assert rerr <= 1e-6 and terr <= 1e-6

    def test_known_relative_pose(self):
        # ~10 degree yaw plus 0.4 m translation between two views.
        obj = SceneObject(label="box", center=np.array([2.5, 0.45, 3.2]),
                          extents=np.array([0.9, 0.9, 0.7]), color=(60, 120, 200))
        poses = [pose_from_yaw([2.3, 1.5, 1.0], 0.0),
                 pose_from_yaw([2.7, 1.5, 1.05], np.deg2rad(10))]
        bundle = make_scene([obj], poses)
        backend = clean_backend(bundle)
        frames = bundle.frame_records()
        tf = estimate_pairwise(frames[0], frames[1], grounding_for(["box"]), backend)
        truth = compose(poses[1].inverse(), poses[0])
        rerr, terr = transform_distance(tf, truth)
        assert rerr <= 1e-6
        assert terr <= 1e-6

    def test_inverse_consistency(self):
        _, backend, frames, _, grounding = scene_fixture()
        t01 = estimate_pairwise(frames[0], frames[1], grounding, backend)
        t10 = estimate_pairwise(frames[1], frames[0], grounding, backend)
        rerr, terr = transform_distance(compose(t01, t10), RigidTransform.identity())
        assert rerr <= 1e-4 and terr <= 1e-4

    def test_bbox_filter_beats_full_frame_under_background_outliers(self):
        # Paired comparison: with 30% of wall/floor matches subtly
        # corrupted (they survive RANSAC gating), restricting match
        # sources to task boxes gives lower rotation error.
        from egomap.alignment import _lift_matches
        from egomap.geometry import estimate_rigid_transform

        wins, trials = 0, 0
        for seed in range(12):
            bundle = generate_scene({"objects": "low", "scale": "low", "duration": "low"},
                                    seed=100 + seed)
            backend = clean_backend(bundle, background_outlier_rate=0.3)
            frames = bundle.frame_records()
            grounding = grounding_for(sorted(set(bundle.scene.labels)))
            a, b = frames[0], frames[2]
            truth = compose(bundle.truth.poses[2].inverse(), bundle.truth.poses[0])
            try:
                tf_filtered = estimate_pairwise(a, b, grounding, backend)
                matches = backend.match(a, b, region_mask=None)
                corrs = _lift_matches(a, b, matches, backend)
                tf_full, _ = estimate_rigid_transform(corrs)
            except Exception:
                continue
            trials += 1
            r_f, _ = transform_distance(tf_filtered, truth)
            r_u, _ = transform_distance(tf_full, truth)
            if r_f < r_u:
                wins += 1
        assert trials >= 8
        assert wins / trials >= 0.8


def exact_pairwise_fn(bundle, sel, corrupt_edge=None, corrupt_tf=None):
    """Ground-truth pairwise transforms with one optional corrupted edge."""

    def fn(child, par):
        tf = compose(bundle.truth.poses[sel[par]].inverse(),
                     bundle.truth.poses[sel[child]])
        if corrupt_edge is not None and (child, par) == corrupt_edge:
            return compose(corrupt_tf, tf)
        return tf

    return fn


class TestAlignTree:
    def test_two_frames(self):
        bundle, backend, frames, sel, grounding = scene_fixture()
        two = frames[:2]
        g = build_similarity_graph(two, backend)
        tree = align_tree(two, g, grounding, backend)
        child = 1 - tree.root
        got = tree.global_poses[child]
        want = tree.pairwise[(child, tree.root)]
        assert np.allclose(got.rotation, want.rotation)
        assert np.allclose(got.translation, want.translation)

    def test_exact_estimates_match_truth(self):
        bundle, backend, frames, sel, grounding = scene_fixture(step=2)  # 30 frames
        g = build_similarity_graph(frames, backend)
        tree = align_tree(frames, g, grounding, backend,
                          pairwise_fn=exact_pairwise_fn(bundle, sel))
        tree.validate()
        root_pose = bundle.truth.poses[sel[tree.root]]
        for node, pose in tree.global_poses.items():
            truth = compose(root_pose.inverse(), bundle.truth.poses[sel[node]])
            rerr, terr = transform_distance(pose, truth)
            assert rerr <= 1e-6
            assert terr <= 1e-6

    def test_corrupted_leaf_edge_stays_local(self):
        bundle, backend, frames, sel, grounding = scene_fixture(step=2)
        g = build_similarity_graph(frames, backend)
        clean = align_tree(frames, g, grounding, backend,
                           pairwise_fn=exact_pairwise_fn(bundle, sel))
        # Find a leaf: a node that is no one's parent.
        parents = {p for p, _ in clean.parent.values()}
        leaf = max(n for n in clean.parent if n not in parents)
        edge = (leaf, clean.parent[leaf][0])
        bad = RigidTransform.from_axis_angle([0, 1, 0], np.deg2rad(5.0), [0.05, 0, 0])
        corrupted = align_tree(frames, g, grounding, backend,
                               pairwise_fn=exact_pairwise_fn(bundle, sel, edge, bad))
        affected = set()
        for node in clean.global_poses:
            rerr, terr = transform_distance(corrupted.global_poses[node],
                                            clean.global_poses[node])
            if rerr > 1e-6 or terr > 1e-6:
                affected.add(node)
        assert affected == clean.subtree(leaf)

    def test_global_root_identity_and_path_product(self):
        bundle, backend, frames, sel, grounding = scene_fixture()
        g = build_similarity_graph(frames, backend)
        tree = align_tree(frames, g, grounding, backend,
                          pairwise_fn=exact_pairwise_fn(bundle, sel))
        tree.validate()  # covers both invariants

    def test_rebase_preserves_relative_geometry(self):
        bundle, backend, frames, sel, grounding = scene_fixture()
        g = build_similarity_graph(frames, backend)
        tree = align_tree(frames, g, grounding, backend,
                          pairwise_fn=exact_pairwise_fn(bundle, sel))
        other = (tree.root + 1) % len(frames)
        rebased = tree.rebase(other)
        assert np.allclose(rebased.global_poses[other].to_matrix(), np.eye(4), atol=1e-9)
        for i in tree.global_poses:
            for j in tree.global_poses:
                d_old = np.linalg.norm(tree.global_poses[i].translation
                                       - tree.global_poses[j].translation)
                d_new = np.linalg.norm(rebased.global_poses[i].translation
                                       - rebased.global_poses[j].translation)
                assert d_new == pytest.approx(d_old, abs=1e-9)

    def test_diagnostic_dump(self):
        import json

        bundle, backend, frames, sel, grounding = scene_fixture()
        g = build_similarity_graph(frames, backend)
        tree = align_tree(frames, g, grounding, backend,
                          pairwise_fn=exact_pairwise_fn(bundle, sel))
        doc = json.loads(tree.to_json(frame_indices=sel))
        assert set(doc) == {"root", "edges", "global_poses"}
        assert len(doc["global_poses"]) == len(frames)
        assert all(len(p["R"]) == 9 and len(p["t"]) == 3 for p in doc["global_poses"])


class TestSequential:
    def test_single_frame_identity(self):
        bundle, backend, frames, _, grounding = scene_fixture()
        out = align_sequential(frames[:1], grounding, backend)
        assert len(out) == 1
        assert np.allclose(out[0].pose.to_matrix(), np.eye(4))

    def test_matches_tree_up_to_convention(self):
        bundle, backend, frames, sel, grounding = scene_fixture()
        fn = exact_pairwise_fn(bundle, sel)
        seq = align_sequential(frames, grounding, backend, pairwise_fn=fn)
        g = build_similarity_graph(frames, backend)
        tree = align_tree(frames, g, grounding, backend, pairwise_fn=fn)
        # Change of basis: sequential poses are in frame 0's coords, the
        # tree's in the root's coords.
        base = tree.global_poses[0]
        for i, fp in enumerate(seq):
            expect = compose(base, fp.pose)
            rerr, terr = transform_distance(expect, tree.global_poses[i])
            assert rerr <= 1e-9 and terr <= 1e-9

    def test_drift_propagates_downstream(self):
        bundle, backend, frames, sel, grounding = scene_fixture(step=2)
        bad = RigidTransform.from_axis_angle([0, 1, 0], np.deg2rad(5.0))
        mid = len(frames) // 2
        clean_fn = exact_pairwise_fn(bundle, sel)

        def corrupt_fn(child, par):
            tf = clean_fn(child, par)
            if child == mid:
                return compose(bad, tf)
            return tf

        clean = align_sequential(frames, grounding, backend, pairwise_fn=clean_fn)
        drift = align_sequential(frames, grounding, backend, pairwise_fn=corrupt_fn)
        for i in range(len(frames)):
            rerr, _ = transform_distance(drift[i].pose, clean[i].pose)
            if i < mid:
                assert rerr <= 1e-9
            else:
                assert rerr > 1e-3


class TestRefineOcclusions:
    def _pipeline(self, bundle, backend, frames, grounding, drop_label=None, drop_pos=None):
        g = build_similarity_graph(frames, backend)
        tree = align_tree(frames, g, grounding, backend)
        labels = sorted({o.label for o in bundle.scene.objects})
        masks, depths = [], []
        for fr in frames:
            fr.depth = backend.estimate_depth(fr)
            depths.append(fr.depth)
            ms = backend.segment(fr, labels)
            masks.append(ms)
        if drop_label is not None:
            masks[drop_pos] = [m for m in masks[drop_pos] if m.label != drop_label]
        entries = fuse_objects(frames, masks, depths, tree)
        smap = build_semantic_map(entries, [
            FramePose(frame_index=frames[p].index, pose=tree.global_poses[p])
            for p in sorted(tree.global_poses)
        ], grounding)
        return tree, masks, depths, entries, smap

    def test_recovers_dropped_mask(self):
        obj = SceneObject(label="box", center=np.array([2.5, 0.45, 3.2]),
                          extents=np.array([0.9, 0.9, 0.7]), color=(60, 120, 200))
        poses = orbit_poses((2.5, 3.2), radius=2.0, n=6, sweep=0.9, start=-0.45)
        bundle = make_scene([obj], poses)
        backend = clean_backend(bundle)
        frames = bundle.frame_records()
        grounding = grounding_for(["box"])
        tree, masks, depths, entries, smap = self._pipeline(
            bundle, backend, frames, grounding, drop_label="box", drop_pos=2)
        assert all(m.label != "box" for m in masks[2])
        updated, events = refine_occlusions(tree, frames, masks, smap, backend)
        recovered = [m for m in updated[2] if m.label == "box"]
        assert len(recovered) == 1
        oracle = bundle.truth.truths[2].instance == 0
        inter = (recovered[0].mask & oracle).sum()
        union = (recovered[0].mask | oracle).sum()
        assert inter / union >= 0.5
        assert any(e.accepted and e.frame_position == 2 for e in events)

    def test_no_attempt_when_occluded_or_outside(self):
        # A camera arc swings from clear box views (0-1) to viewpoints
        # where a tall screen hides the box (2-4) and finally yaws away
        # so the box leaves the frustum entirely (5).
        box = SceneObject(label="box", center=np.array([2.5, 0.45, 3.6]),
                          extents=np.array([0.7, 0.9, 0.5]), color=(60, 120, 200))
        wall = SceneObject(label="screen", center=np.array([2.5, 0.7, 2.4]),
                           extents=np.array([2.4, 1.4, 0.2]), color=(120, 120, 60))
        poses = [
            pose_from_yaw([4.3, 1.5, 3.4], -np.pi / 2 + 0.15),
            pose_from_yaw([4.2, 1.5, 2.6], -np.pi / 2 + 0.5),
            pose_from_yaw([3.9, 1.5, 1.7], -0.9),
            pose_from_yaw([3.2, 1.5, 1.0], -0.45),
            pose_from_yaw([2.5, 1.5, 0.7], 0.0),
            pose_from_yaw([2.4, 1.5, 0.7], -0.5),
        ]
        bundle = make_scene([box, wall], poses)
        backend = clean_backend(bundle)
        frames = bundle.frame_records()
        grounding = grounding_for(["box", "screen"])
        for pos in (2, 3, 4):  # z-buffer occluded: in frustum, zero visible
            assert bundle.truth.truths[pos].visible_px[0] == 0
            assert bundle.truth.truths[pos].potential_px[0] > 0
        assert bundle.truth.truths[5].potential_px[0] == 0  # outside frustum
        tree, masks, depths, entries, smap = self._pipeline(bundle, backend, frames, grounding)
        assert len(tree.global_poses) == len(frames)
        updated, events = refine_occlusions(tree, frames, masks, smap, backend)
        assert not any(e.frame_position >= 2 and e.label == "box" for e in events)
        for pos in (2, 3, 4, 5):
            assert all(m.label != "box" for m in updated[pos])

    def test_never_removes_or_shrinks_masks(self):
        bundle, backend, frames, sel, grounding = scene_fixture()
        tree, masks, depths, entries, smap = self._pipeline(bundle, backend, frames, grounding)
        updated, _ = refine_occlusions(tree, frames, masks, smap, backend)
        for before, after in zip(masks, updated):
            assert len(after) >= len(before)
            for m in before:
                assert any(m2 is m for m2 in after)
