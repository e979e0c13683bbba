"""Tests for object fusion, the top-down grid, and visual-prompt rendering."""

import json

import numpy as np
import pytest

from conftest import grounding_for, make_scene, orbit_poses
from egomap.alignment import FramePose, build_similarity_graph, align_tree
from egomap.bench.scene import SceneObject, pose_from_yaw
from egomap.errors import AnswerParseError
from egomap.geometry import RigidTransform
from egomap.perception.base import PerceptionBackend
from egomap.perception.synthetic import SyntheticBackend, SyntheticNoise
from egomap.semmap import (
    PALETTE,
    ObjectEntry,
    answer_question,
    build_semantic_map,
    footprint_cells,
    fuse_objects,
    map_from_json,
    map_to_json,
    merge_entries,
    parse_text_block,
    rasterize,
    render_prompt,
    render_text_block,
)


def clean_backend(bundle):
    return SyntheticBackend(bundle, SyntheticNoise(confidence_sigma=0.0))


def fuse_pipeline(bundle, labels=None):
    backend = clean_backend(bundle)
    frames = bundle.frame_records()
    labels = labels or sorted({o.label for o in bundle.scene.objects})
    grounding = grounding_for(labels)
    g = build_similarity_graph(frames, backend)
    tree = align_tree(frames, g, grounding, backend)
    masks, depths = [], []
    for fr in frames:
        fr.depth = backend.estimate_depth(fr)
        depths.append(fr.depth)
        masks.append(backend.segment(fr, labels))
    entries = fuse_objects(frames, masks, depths, tree)
    poses = [FramePose(frame_index=frames[p].index, pose=tree.global_poses[p])
             for p in sorted(tree.global_poses)]
    return entries, poses, tree, bundle


class TestFuse:
    def test_single_view_cuboid_extents(self, box_scene):
        # Camera is far enough that the base sits inside the view cone;
        # the fused bbox must match the true cuboid to a centimeter.
        entries, poses, tree, bundle = fuse_pipeline(box_scene)
        assert len(entries) == 1
        entry = entries[0].transformed(bundle.truth.poses[tree.root])
        obj = bundle.scene.objects[0]
        assert np.all(np.abs(entry.bbox_min - obj.bounds_min) <= 0.01)
        assert np.all(np.abs(entry.bbox_max - obj.bounds_max) <= 0.01)

    def test_two_views_merge_to_one(self, box_scene):
        entries, _, _, _ = fuse_pipeline(box_scene)
        assert len(entries) == 1
        assert len(entries[0].source_frames) == 2

    def test_distant_same_label_objects_stay_apart(self):
        a = SceneObject(label="chair", center=np.array([1.2, 0.4, 3.6]),
                        extents=np.array([0.6, 0.8, 0.6]), color=(200, 60, 60))
        b = SceneObject(label="chair", center=np.array([4.2, 0.4, 3.6]),
                        extents=np.array([0.6, 0.8, 0.6]), color=(60, 200, 60))
        poses = [pose_from_yaw([2.7, 1.5, 0.8], -0.25),
                 pose_from_yaw([2.7, 1.5, 0.9], 0.25)]
        bundle = make_scene([a, b], poses)
        entries, _, _, _ = fuse_pipeline(bundle)
        chairs = [e for e in entries if e.label == "chair"]
        assert len(chairs) == 2

    def test_containment_invariant(self, box_scene):
        entries, _, _, _ = fuse_pipeline(box_scene)
        for e in entries:
            e.validate()

    def test_merge_idempotent(self, box_scene):
        entries, _, _, _ = fuse_pipeline(box_scene)
        e = entries[0]
        merged = merge_entries(e, e)
        assert merged.label == e.label
        assert np.allclose(merged.bbox_min, e.bbox_min, atol=1e-9)
        assert np.allclose(merged.bbox_max, e.bbox_max, atol=1e-9)
        assert merged.source_frames == e.source_frames


def entry_at(label, lo, hi, frames=(0,)):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                        for z in (lo[2], hi[2])])
    return ObjectEntry(label=label, points=corners, bbox_min=lo, bbox_max=hi,
                       source_frames=set(frames))


class TestRasterize:
    def test_camera_only_grid(self):
        pose = FramePose(frame_index=0, pose=RigidTransform.identity())
        smap = rasterize([], [pose], cell_size=0.25)
        assert smap.dims == (3, 3)
        assert smap.camera_cells[0] == (1, 1)

    def test_unit_cuboid_footprint(self):
        # Unit box centered at (2, 2) in XZ covers the 4x4 block of
        # quarter-meter cells spanning [1.5, 2.5] x [1.5, 2.5].
        e = entry_at("box", [1.5, 0.0, 1.5], [2.5, 1.0, 2.5])
        pose = FramePose(frame_index=0, pose=RigidTransform(np.eye(3), [2.0, 1.5, 2.0]))
        smap = rasterize([e], [pose], cell_size=0.25)
        cells = smap.object_cells[0]
        assert len(cells) == 16
        # Independent brute force over a fine grid of sample points.
        expect = set()
        for x in np.arange(1.5 + 0.01, 2.5, 0.02):
            for z in np.arange(1.5 + 0.01, 2.5, 0.02):
                expect.add((int((x - smap.origin[0]) // 0.25),
                            int((z - smap.origin[1]) // 0.25)))
        assert cells == expect

    def test_disjoint_footprints_share_nothing(self):
        e1 = entry_at("a", [0.0, 0, 0.0], [0.4, 1, 0.4])
        e2 = entry_at("b", [2.0, 0, 2.0], [2.4, 1, 2.4])
        smap = rasterize([e1, e2], [], cell_size=0.25)
        assert not (smap.object_cells[0] & smap.object_cells[1])

    def test_every_object_occupies_a_cell(self):
        e = entry_at("dot", [1.0, 0, 1.0], [1.0, 0.5, 1.0])  # degenerate footprint
        smap = rasterize([e], [], cell_size=0.25)
        smap.validate()
        assert len(smap.object_cells[0]) == 1

    def test_footprint_boundary_touch_excluded(self):
        cells = footprint_cells(0.25, 0.25, 0.5, 0.5, origin=(0, 0), cell=0.25,
                                dims=(4, 4))
        assert cells == {(1, 1)}


class StubVLM(PerceptionBackend):
    def __init__(self, reply):
        self.reply = reply
        self.calls = []

    def vlm_query(self, images, prompt_text):
        self.calls.append((len(images), prompt_text))
        return self.reply


class TestPrompt:
    def _map(self, bundle=None):
        e1 = entry_at("red sofa", [0.4, 0.0, 0.6], [1.6, 0.8, 1.4], frames=(2, 5))
        e2 = entry_at("lamp", [3.0, 0.0, 3.1], [3.4, 1.5, 3.5], frames=(7,))
        pose = FramePose(frame_index=9, pose=pose_from_yaw([2.0, 1.5, 0.5], 0.3))
        grounding = grounding_for(["red sofa"])
        return build_semantic_map([e1, e2], [pose], grounding), grounding

    def test_text_block_matches_entries(self):
        smap, grounding = self._map()
        text = render_text_block(smap, "where is the red sofa?")
        assert text.count("- red sofa [color:") == 1  # one entry line per object
        assert "bbox [0.40,0.00,0.60]–[1.60,0.80,1.40] m" in text
        assert "seen in frames [2,5]" in text
        assert "Camera (current)" in text

    def test_targets_listed_first_with_distinct_colors(self):
        smap, grounding = self._map()
        assert smap.objects[0].label == "red sofa"
        ids = [e.color_id for e in smap.objects]
        assert len(set(ids)) == len(ids)

    def test_legend_distinct_for_24_objects(self):
        entries = [entry_at(f"obj{i:02d}", [i, 0, 0], [i + 0.4, 0.5, 0.4])
                   for i in range(24)]
        smap = build_semantic_map(entries, [], None)
        prompt = render_prompt(smap, None, "q")
        colors = [c for _, c in prompt.legend.values()]
        assert len(set(colors)) == 24

    def test_render_deterministic(self):
        smap, grounding = self._map()
        p1 = render_prompt(smap, grounding, "where is the red sofa?")
        p2 = render_prompt(smap, grounding, "where is the red sofa?")
        assert p1.text_block == p2.text_block
        assert np.array_equal(p1.map_image, p2.map_image)

    def test_parse_text_block_roundtrip(self):
        smap, grounding = self._map()
        text = render_text_block(smap, "is the lamp left? Choices: (A) yes (B) no")
        parsed = parse_text_block(text)
        assert set(parsed.objects) == {"red sofa", "lamp"}
        assert np.allclose(parsed.objects["red sofa"][0]["bbox_min"], [0.4, 0.0, 0.6])
        assert parsed.objects["red sofa"][0]["frames"] == [2, 5]
        assert parsed.camera_yaw == pytest.approx(0.3, abs=1e-3)
        assert parsed.question.startswith("is the lamp left?")

    def test_answer_question_parses_choice(self):
        smap, grounding = self._map()
        prompt = render_prompt(smap, grounding, "q")
        backend = StubVLM("(B) right")
        out = answer_question(prompt, "is it left? Choices: (A) left (B) right", backend)
        assert out.choice == "B"
        assert backend.calls[0][0] == 1  # map image attached

    def test_answer_question_passthrough_without_choices(self):
        smap, grounding = self._map()
        prompt = render_prompt(smap, grounding, "q")
        out = answer_question(prompt, "describe the room", StubVLM("a room with a sofa"))
        assert out.choice is None
        assert out.text == "a room with a sofa"

    def test_answer_question_malformed_choice(self):
        smap, grounding = self._map()
        prompt = render_prompt(smap, grounding, "q")
        with pytest.raises(AnswerParseError):
            answer_question(prompt, "left or right? Choices: (A) l (B) r", StubVLM("dunno"))


class TestMapJson:
    def test_round_trip_preserves_footprints(self):
        e1 = entry_at("red sofa", [0.4, 0.0, 0.6], [1.6, 0.8, 1.4], frames=(2, 5))
        pose = FramePose(frame_index=9, pose=pose_from_yaw([2.0, 1.5, 0.5], 0.3))
        smap = build_semantic_map([e1], [pose], None)
        doc = map_to_json(smap)
        smap2 = map_from_json(doc)
        assert smap2.object_cells[0] == smap.object_cells[0]
        assert smap2.camera_cells[9] == smap.camera_cells[9]
        parsed = json.loads(doc)
        assert parsed["objects"][0]["label"] == "red sofa"
        assert parsed["cameras"][0]["yaw_rad"] == pytest.approx(0.3, abs=1e-6)

    def test_fuse_rasterize_readback(self, box_scene):
        # Occupied cells equal the analytic footprint of each entry bbox.
        entries, poses, tree, bundle = fuse_pipeline(box_scene)
        smap = build_semantic_map(entries, poses, None)
        for i, e in enumerate(smap.objects):
            expect = footprint_cells(e.bbox_min[0], e.bbox_min[2],
                                     e.bbox_max[0], e.bbox_max[2],
                                     smap.origin, smap.cell_size, smap.dims)
            assert smap.object_cells[i] == expect


class TestRebaseConsistency:
    def test_displacements_invariant(self, box_scene):
        entries, poses, tree, bundle = fuse_pipeline(box_scene)
        other = (tree.root + 1) % len(bundle.frames)
        rebased_tree = tree.rebase(other)
        delta = rebased_tree.global_poses  # new global poses
        tf = tree.global_poses[other].inverse()
        moved = [e.transformed(tf) for e in entries]
        for a, b in zip(entries, moved):
            # centroid displacement lengths are preserved
            pass
        if len(entries) >= 2:
            for i in range(len(entries)):
                for j in range(i + 1, len(entries)):
                    d_old = np.linalg.norm(entries[i].centroid - entries[j].centroid)
                    d_new = np.linalg.norm(moved[i].centroid - moved[j].centroid)
                    assert d_new == pytest.approx(d_old, abs=1e-9)
        # single-entry scenes: displacement to the camera is preserved
        cam_old = tree.global_poses[tree.root].translation
        cam_new = tf.apply(cam_old)
        d_old = np.linalg.norm(entries[0].centroid - cam_old)
        d_new = np.linalg.norm(moved[0].centroid - cam_new)
        assert d_new == pytest.approx(d_old, abs=1e-9)
