"""Oracle perception backend over a synthetic scene bundle.

Serves segmentation, depth, detection, embeddings, and pixel matches from
rendered ground truth with configurable degradation knobs, plus an
"oracle VLM" that answers grounding and spatial-QA prompts by reading
exactly what it is given: the attached semantic-map text for map QA, or
per-frame visibility for raw-frame QA (no cross-frame integration).

All noise streams derive from (seed, op, frame, ...) tuples, so outputs
are deterministic regardless of call order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from ..bench.questions import left_of, parse_question
from ..bench.scene import SceneBundle
from ..geometry import backproject_pixels, bilinear_inverse_depth, project_points
from ..imaging import PixelMatchSet
from ..perception.base import PerceptionBackend
from ..perception.types import Detection, DepthMap, FrameEmbedding, SegmentMask
from ..semmap import parse_text_block

_OP_DEPTH, _OP_DETECT, _OP_SEGMENT, _OP_MATCH = 1, 2, 3, 4

MATCH_STRIDE_TARGET = 360      # ceiling on candidate source pixels per pair
MIN_DETECTABLE_PIXELS = 6
# Oracle self-check separating occlusion and depth-discontinuity pixels
# (errors of mm to cm) from clean planar pairs, whose reconstruction error
# is bounded by float32 depth-buffer precision (~1e-6 m at room scale).
_EXACTNESS_TOL = 1e-5
_DIR_ENCODING_WEIGHT = 0.5
_POS_ENCODING_WEIGHT = 0.35


@dataclass(frozen=True)
class SyntheticNoise:
    """Degradation knobs; all default to the clean oracle except detection
    confidence jitter, which models a real detector's uncertainty.

    ``match_outlier_rate`` corrupts matches grossly (uniformly random
    targets); ``background_outlier_rate`` applies a subtle few-pixel
    shift to matches rooted on walls and floor, the way repetitive
    texture fools real matchers (these survive RANSAC gating).
    """

    depth_sigma: float = 0.0
    far_degradation_gain: float = 0.0   # extra relative noise past 60% range
    confidence_sigma: float = 0.05
    segment_dropout: float = 0.0
    match_dropout: float = 0.0
    match_outlier_rate: float = 0.0
    background_outlier_rate: float = 0.0
    background_outlier_px: float = 3.5


class SyntheticBackend(PerceptionBackend):
    def __init__(self, bundle: SceneBundle, noise: SyntheticNoise = SyntheticNoise(),
                 seed: int = 0):
        self.bundle = bundle
        self.noise = noise
        self.seed = seed
        ex, ez = bundle.scene.room_extent
        self._depth_norm = float(np.hypot(ex, ez))
        self._frame_lookup = {
            hashlib.sha1(img.tobytes()).hexdigest(): i
            for i, img in enumerate(bundle.frames)
        }

    # -- deterministic sub-streams -----------------------------------------
    def _rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *[k & 0x7FFFFFFF for k in key]])

    def _truth(self, frame):
        return self.bundle.truth.truths[frame.index]

    # -- capabilities --------------------------------------------------------
    def segment(self, frame, vocabulary, prompts=None):
        if not vocabulary:
            raise ValueError("vocabulary must be non-empty")
        truth = self._truth(frame)
        scene = self.bundle.scene
        wanted = set(vocabulary)
        out = []
        forced: set[int] = set()
        if prompts:
            for (u, v) in prompts:
                ui = int(round(u))
                vi = int(round(v))
                if 0 <= vi < truth.instance.shape[0] and 0 <= ui < truth.instance.shape[1]:
                    obj = int(truth.instance[vi, ui])
                    if obj >= 0 and scene.objects[obj].label in wanted:
                        forced.add(obj)
        for obj, so in enumerate(scene.objects):
            if so.label not in wanted or truth.visible_px[obj] == 0:
                continue
            if obj not in forced and self.noise.segment_dropout > 0:
                if self._rng(_OP_SEGMENT, frame.index, obj).random() < self.noise.segment_dropout:
                    continue
            mask = truth.instance == obj
            out.append(SegmentMask(
                label=so.label, instance_id=obj, mask=mask,
                prompt_points=list(prompts) if prompts else None))
        return out

    def estimate_depth(self, frame):
        truth = self._truth(frame)
        depth = truth.depth.astype(np.float64)
        if self.noise.depth_sigma > 0 or self.noise.far_degradation_gain > 0:
            rng = self._rng(_OP_DEPTH, frame.index)
            d_norm = np.clip(depth / self._depth_norm, 0.0, 1.0)
            sigma = self.noise.depth_sigma * (
                1.0 + self.noise.far_degradation_gain * np.maximum(0.0, d_norm - 0.6))
            depth = depth * (1.0 + sigma * rng.standard_normal(depth.shape))
            depth = np.maximum(depth, 1e-3)
        return DepthMap(depth=depth.astype(np.float32), valid=np.ones_like(depth, dtype=bool))

    def detect(self, frame, queries):
        truth = self._truth(frame)
        scene = self.bundle.scene
        wanted = set(queries)
        out = []
        for obj, so in enumerate(scene.objects):
            if so.label not in wanted:
                continue
            if truth.potential_px[obj] == 0 or truth.visible_px[obj] < MIN_DETECTABLE_PIXELS:
                continue
            vf = truth.visible_fraction(obj)
            conf = float(np.sqrt(np.clip(vf, 0.0, 1.0)))
            if self.noise.confidence_sigma > 0:
                conf += self.noise.confidence_sigma * float(
                    self._rng(_OP_DETECT, frame.index, obj).standard_normal())
            conf = float(np.clip(conf, 0.0, 1.0))
            if conf <= 0.0:
                continue
            vs, us = np.nonzero(truth.instance == obj)
            out.append(Detection(
                label=so.label,
                bbox_2d=(float(us.min()), float(vs.min()),
                         float(us.max() + 1), float(vs.max() + 1)),
                confidence=conf))
        return out

    def embed(self, frame):
        """Pose encoding (view direction + normalized position) concatenated
        with the visible-object indicator, unit-normalized. Guarantees
        cosine similarity tracks view overlap."""
        truth = self._truth(frame)
        pose = self.bundle.truth.poses[frame.index]
        fwd = pose.rotation[:, 2]
        pos = pose.translation / max(self._depth_norm, 1e-9)
        pot = np.maximum(truth.potential_px, 1)
        vis = truth.visible_px / pot
        vis = np.where(truth.potential_px == 0, 0.0, vis)
        vec = np.concatenate([_DIR_ENCODING_WEIGHT * fwd, _POS_ENCODING_WEIGHT * pos, vis])
        return FrameEmbedding(vector=vec / np.linalg.norm(vec))

    def match(self, frame_a, frame_b, region_mask=None):
        ta, tb = self._truth(frame_a), self._truth(frame_b)
        pose_a = self.bundle.truth.poses[frame_a.index]
        pose_b = self.bundle.truth.poses[frame_b.index]
        k = self.bundle.intrinsics
        h, w = ta.depth.shape
        stride = max(1, int(np.ceil(np.sqrt(h * w / MATCH_STRIDE_TARGET))))
        vs, us = np.mgrid[stride // 2 : h : stride, stride // 2 : w : stride]
        us, vs = us.ravel(), vs.ravel()
        if region_mask is not None:
            region_mask = np.asarray(region_mask, dtype=bool)
            keep = region_mask[vs, us]
            us, vs = us[keep], vs[keep]

        valid_all = np.ones((h, w), dtype=bool)
        src, dst = [], []
        for u, v in zip(us, vs):
            da = float(ta.depth[v, u])
            p_cam = backproject_pixels(np.array([[float(u), float(v)]]),
                                       np.array([da]), k)[0]
            world = pose_a.apply(p_cam)
            uvz, in_front = project_points(world[None], pose_b, k)
            if not in_front[0]:
                continue
            ub, vb, zb = uvz[0]
            if not (0 <= ub < w - 1 and 0 <= vb < h - 1):
                continue
            zb_interp = bilinear_inverse_depth(tb.depth, valid_all, float(ub), float(vb))
            if zb_interp is None:
                continue
            rec = pose_b.apply(backproject_pixels(
                np.array([[float(ub), float(vb)]]), np.array([zb_interp]), k)[0])
            if np.linalg.norm(rec - world) > _EXACTNESS_TOL:
                continue  # occluded in b, or a depth-discontinuity pixel
            src.append((float(u), float(v)))
            dst.append((float(ub), float(vb)))
        if not src:
            return PixelMatchSet.empty()

        src = np.array(src)
        dst = np.array(dst)
        rng = self._rng(_OP_MATCH, frame_a.index, frame_b.index)
        if self.noise.match_dropout > 0:
            keep = rng.random(len(src)) >= self.noise.match_dropout
            src, dst = src[keep], dst[keep]
        if len(src) and self.noise.match_outlier_rate > 0:
            flip = rng.random(len(src)) < self.noise.match_outlier_rate
            n_bad = int(flip.sum())
            dst[flip, 0] = rng.uniform(1, w - 2, n_bad)
            dst[flip, 1] = rng.uniform(1, h - 2, n_bad)
        if len(src) and self.noise.background_outlier_rate > 0:
            # Texture aliasing on featureless wall/floor expanses: one
            # coherent shift per frame pair, applied to a per-pixel
            # deterministic subset of matches rooted on background far
            # from any object silhouette (near objects the repeating
            # texture has anchors). The subset is mask-independent, so
            # paired filtered/unfiltered runs see identical corruption.
            pair_rng = self._rng(_OP_MATCH, frame_a.index, frame_b.index, 7)
            ang = pair_rng.uniform(0, 2 * np.pi)
            mag = pair_rng.uniform(1.5, self.noise.background_outlier_px)
            src_int = np.round(src).astype(np.int64)
            open_bg = self._open_background(frame_a.index)
            on_bg = open_bg[src_int[:, 1], src_int[:, 0]]
            pair_key = (self.seed * 1000003 + frame_a.index * 10007 + frame_b.index) & 0x7FFFFFFF
            hval = (src_int[:, 0] * 73856093) ^ (src_int[:, 1] * 19349663) ^ (pair_key * 83492791)
            unit = (hval & 0xFFFFFF) / float(0x1000000)
            flip = on_bg & (unit < self.noise.background_outlier_rate)
            dst[flip, 0] = np.clip(dst[flip, 0] + mag * np.cos(ang), 1, w - 2)
            dst[flip, 1] = np.clip(dst[flip, 1] + mag * np.sin(ang), 1, h - 2)
        conf = np.full(len(src), 0.95)
        return PixelMatchSet(src, dst, conf)

    def _open_background(self, frame_index: int, margin: int = 12) -> np.ndarray:
        """Background pixels with no object pixel within ``margin``."""
        if not hasattr(self, "_open_bg_cache"):
            self._open_bg_cache = {}
        if frame_index not in self._open_bg_cache:
            inst = self.bundle.truth.truths[frame_index].instance
            obj = (inst >= 0).astype(np.int64)
            pad = np.pad(obj, margin + 1)
            c = pad.cumsum(axis=0).cumsum(axis=1)
            k = 2 * margin + 1
            h, w = obj.shape
            window = (c[k:k + h, k:k + w] - c[:h, k:k + w]
                      - c[k:k + h, :w] + c[:h, :w])
            self._open_bg_cache[frame_index] = (inst < 0) & (window == 0)
        return self._open_bg_cache[frame_index]

    # -- oracle VLM ----------------------------------------------------------
    def vlm_query(self, images, prompt_text):
        if '"targets"' in prompt_text:
            return self._ground(prompt_text)
        if "Semantic map:" in prompt_text:
            return self._answer_from_map(prompt_text)
        if "Question:" in prompt_text:
            return self._answer_from_frames(images, prompt_text)
        return "not understood"

    def _question_from(self, prompt_text: str) -> str:
        marker = "Question:"
        idx = prompt_text.rfind(marker)
        return prompt_text[idx + len(marker):].strip() if idx >= 0 else prompt_text

    def _ground(self, prompt_text: str) -> str:
        question = self._question_from(prompt_text).splitlines()[0]
        scene = self.bundle.scene
        labels = sorted(set(scene.labels), key=len, reverse=True)
        hits = []
        for lbl in labels:
            pos = question.lower().find(lbl.lower())
            if pos >= 0:
                hits.append((pos, lbl))
        hits.sort()
        targets = [lbl for _, lbl in hits]
        if not targets:
            vis = self.bundle.truth.visible_fractions.sum(axis=0)
            order = np.argsort(-vis)
            targets = list(dict.fromkeys(scene.objects[int(i)].label for i in order[:2]))
        target_set = set(targets)
        # Cues: labels of objects nearest to any target instance.
        target_centers = [o.center for o in scene.objects if o.label in target_set]
        cand: dict[str, float] = {}
        for o in scene.objects:
            if o.label in target_set:
                continue
            d = min(float(np.linalg.norm(o.center - c)) for c in target_centers)
            cand[o.label] = min(cand.get(o.label, np.inf), d)
        cues = sorted(cand, key=lambda l: cand[l])[:4]
        doc = {
            "targets": [{"label": lbl, "relevance": 1.0} for lbl in targets],
            "cues": [{"label": lbl, "relevance": round(1.0 / (i + 2), 4)}
                     for i, lbl in enumerate(cues)],
        }
        return "```json\n" + json.dumps(doc) + "\n```"

    def _answer_from_map(self, prompt_text: str) -> str:
        parsed = parse_text_block(prompt_text)
        question = parsed.question or self._question_from(prompt_text)
        info = parse_question(question)
        if info is None:
            return "not understood"
        kind, slots, choices = info

        def centers(label):
            return parsed.centers(label)

        if kind == "relative_direction":
            c = centers(slots["c"])
            a = centers(slots["a"])
            b = centers(slots["b"])
            if not (c and a and b):
                return "not found"
            side = left_of(c[0], a[0], b[0], up=(0.0, -1.0, 0.0))
            return _pick_choice(choices, "left" if side > 0 else "right")
        if kind == "relative_distance":
            t = centers(slots["t"])
            if not t:
                return "not found"
            best_label, best_d = None, np.inf
            for letter, option in choices:
                o = centers(option)
                if not o:
                    continue
                d = float(np.linalg.norm(o[0] - t[0]))
                if d < best_d:
                    best_label, best_d = option, d
            if best_label is None:
                return "not found"
            return _pick_choice(choices, best_label)
        if kind == "absolute_distance":
            a, b = centers(slots["a"]), centers(slots["b"])
            if not (a and b):
                return "not found"
            return f"{float(np.linalg.norm(a[0] - b[0])):.2f}"
        if kind == "object_size":
            objs = parsed.objects.get(slots["a"])
            if not objs:
                return "not found"
            ext = objs[0]["bbox_max"] - objs[0]["bbox_min"]
            return f"{float(ext.max()):.2f}"
        if kind == "object_count":
            return str(len(parsed.objects.get(slots["l"], [])))
        if kind == "appearance_order":
            firsts = {}
            for label, entries in parsed.objects.items():
                fs = [min(e["frames"]) for e in entries if e["frames"]]
                if fs:
                    firsts[label] = min(fs)
            best = None
            for letter, option in choices:
                labels = [part.strip() for part in option.split(",")]
                if any(lbl not in firsts for lbl in labels):
                    continue
                order_vals = [firsts[lbl] for lbl in labels]
                if order_vals == sorted(order_vals):
                    best = letter, option
                    break
            if best is None:
                return "not found"
            return f"({best[0]}) {best[1]}"
        return "not understood"

    def _answer_from_frames(self, images, prompt_text: str) -> str:
        """Direct-input baseline: perfect per-frame perception, no
        cross-frame integration. Geometry is only computable when every
        needed object pair is co-visible in some single attached frame."""
        question = self._question_from(prompt_text)
        info = parse_question(question)
        if info is None:
            return "not understood"
        kind, slots, choices = info
        frame_ids = []
        for img in images:
            key = hashlib.sha1(np.ascontiguousarray(img).tobytes()).hexdigest()
            if key in self._frame_lookup:
                frame_ids.append(self._frame_lookup[key])
        per_frame = {fi: self._frame_objects(fi) for fi in frame_ids}

        def pair_distance(la, lb):
            for fi in frame_ids:
                objs = per_frame[fi]
                if la in objs and lb in objs:
                    return float(np.linalg.norm(objs[la] - objs[lb]))
            return None

        fallback = f"({choices[0][0]}) {choices[0][1]}" if choices else "cannot determine"
        if kind == "relative_direction":
            for fi in frame_ids:
                objs = per_frame[fi]
                if all(slots[key] in objs for key in ("a", "b", "c")):
                    side = left_of(objs[slots["c"]], objs[slots["a"]],
                                   objs[slots["b"]], up=(0.0, -1.0, 0.0))
                    return _pick_choice(choices, "left" if side > 0 else "right")
            return fallback
        if kind == "relative_distance":
            dists = {}
            for letter, option in choices:
                d = pair_distance(slots["t"], option)
                if d is not None:
                    dists[option] = d
            if not dists:
                return fallback
            best = min(dists, key=dists.get)
            return _pick_choice(choices, best)
        if kind == "absolute_distance":
            d = pair_distance(slots["a"], slots["b"])
            return f"{d:.2f}" if d is not None else "cannot determine"
        if kind == "object_size":
            for fi in frame_ids:
                if slots["a"] in per_frame[fi]:
                    for o in self.bundle.scene.objects:
                        if o.label == slots["a"]:
                            return f"{float(o.extents.max()):.2f}"
            return "cannot determine"
        if kind == "object_count":
            best = 0
            for fi in frame_ids:
                truth = self.bundle.truth.truths[fi]
                n = sum(1 for i, o in enumerate(self.bundle.scene.objects)
                        if o.label == slots["l"] and truth.visible_px[i] >= MIN_DETECTABLE_PIXELS)
                best = max(best, n)
            return str(best)
        if kind == "appearance_order":
            firsts = {}
            for fi in sorted(frame_ids):
                for lbl in per_frame[fi]:
                    firsts.setdefault(lbl, fi)
            for letter, option in choices:
                labels = [part.strip() for part in option.split(",")]
                if any(lbl not in firsts for lbl in labels):
                    continue
                vals = [firsts[lbl] for lbl in labels]
                if vals == sorted(vals):
                    return f"({letter}) {option}"
            return fallback
        return "not understood"

    def _frame_objects(self, frame_index: int, min_fraction: float = 0.15):
        """Labels visible in one frame -> object center in that camera frame.

        Duplicate labels keep the most visible instance (a single frame
        cannot tell instances of one label apart anyway).
        """
        truth = self.bundle.truth.truths[frame_index]
        pose_inv = self.bundle.truth.poses[frame_index].inverse()
        out = {}
        best_vf: dict[str, float] = {}
        for i, o in enumerate(self.bundle.scene.objects):
            vf = truth.visible_fraction(i)
            if vf >= min_fraction and vf > best_vf.get(o.label, 0.0):
                best_vf[o.label] = vf
                out[o.label] = pose_inv.apply(o.center)
        return out


def _pick_choice(choices, option_text: str) -> str:
    for letter, option in choices:
        if option == option_text:
            return f"({letter}) {option}"
    return option_text
