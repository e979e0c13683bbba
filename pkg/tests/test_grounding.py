"""Tests for task grounding: prompting, parsing, reprompting, defaults."""

import numpy as np
import pytest

from egomap.bench.scene import generate_scene
from egomap.errors import GroundingParseError
from egomap.grounding import (
    GroundedObject,
    TaskGrounding,
    ground_task,
    preprocess,
    sample_frame_indices,
)
from egomap.perception.base import PerceptionBackend
from egomap.perception.synthetic import SyntheticBackend, SyntheticNoise


class ScriptedVLM(PerceptionBackend):
    def __init__(self, replies):
        self.replies = list(replies)
        self.prompts = []

    def vlm_query(self, images, prompt_text):
        self.prompts.append(prompt_text)
        return self.replies.pop(0)


@pytest.fixture(scope="module")
def frames():
    bundle = generate_scene({"objects": "low", "scale": "low", "duration": "low"}, seed=5)
    return bundle.frame_records()


class TestTypes:
    def test_requires_target(self):
        with pytest.raises(ValueError):
            TaskGrounding(targets=(), cues=(), question="q")

    def test_relevance_ordering_enforced(self):
        with pytest.raises(ValueError):
            TaskGrounding(
                targets=(GroundedObject("a", 0.5), GroundedObject("b", 0.9)),
                cues=(), question="q")

    def test_relevance_range(self):
        with pytest.raises(ValueError):
            GroundedObject("a", 0.0)
        with pytest.raises(ValueError):
            GroundedObject("a", 1.5)
        with pytest.raises(ValueError):
            GroundedObject("", 0.5)


class TestGroundTask:
    def test_parses_fenced_json(self, frames):
        vlm = ScriptedVLM(['```json\n{"targets": [{"label": "red sofa", "relevance": 1.0}],'
                           ' "cues": [{"label": "lamp", "relevance": 0.5}]}\n```'])
        g = ground_task("what is left of the red sofa?", frames, 4, vlm)
        assert [t.label for t in g.targets] == ["red sofa"]
        assert [c.label for c in g.cues] == ["lamp"]
        assert g.question == "what is left of the red sofa?"

    def test_rank_default_relevance(self, frames):
        vlm = ScriptedVLM(['{"targets": ["sofa", "table"], "cues": ["door"]}'])
        g = ground_task("q", frames, 2, vlm)
        assert g.targets[0].relevance == pytest.approx(1.0)
        assert g.targets[1].relevance == pytest.approx(0.5)
        assert g.cues[0].relevance == pytest.approx(1.0)

    def test_reprompt_once_then_succeed(self, frames):
        vlm = ScriptedVLM(["no json here",
                           '{"targets": [{"label": "box", "relevance": 1.0}], "cues": []}'])
        g = ground_task("q", frames, 3, vlm)
        assert g.targets[0].label == "box"
        assert len(vlm.prompts) == 2
        assert "could not be parsed" in vlm.prompts[1]

    def test_empty_targets_fail_after_reprompt(self, frames):
        vlm = ScriptedVLM(['{"targets": [], "cues": []}', '{"targets": [], "cues": []}'])
        with pytest.raises(GroundingParseError):
            ground_task("q", frames, 2, vlm)

    def test_two_ranked_lists_structure(self, frames):
        # Targets and landmark cues come back as two ranked lists.
        vlm = ScriptedVLM(['{"targets": [{"label": "box", "relevance": 1.0},'
                           ' {"label": "lid", "relevance": 0.8}],'
                           ' "cues": [{"label": "shelf", "relevance": 0.6},'
                           ' {"label": "door", "relevance": 0.3}]}'])
        g = ground_task("which box should I take?", frames, 4, vlm)
        assert len(g.targets) == 2 and len(g.cues) == 2
        rels_t = [t.relevance for t in g.targets]
        rels_c = [c.relevance for c in g.cues]
        assert rels_t == sorted(rels_t, reverse=True)
        assert rels_c == sorted(rels_c, reverse=True)
        assert g.labels == ["box", "lid", "shelf", "door"]

    def test_deterministic_with_oracle(self, frames):
        bundle = generate_scene({"objects": "low", "scale": "low", "duration": "low"}, seed=5)
        backend = SyntheticBackend(bundle, SyntheticNoise(confidence_sigma=0.0))
        label = bundle.scene.objects[1].label
        q = f"how far is the {label}?"
        g1 = ground_task(q, frames, 4, backend)
        g2 = ground_task(q, frames, 4, backend)
        assert g1 == g2

    def test_precondition_errors(self, frames):
        vlm = ScriptedVLM([])
        with pytest.raises(ValueError):
            ground_task("q", frames, 0, vlm)
        with pytest.raises(ValueError):
            ground_task("q", [], 2, vlm)


def test_sample_frame_indices_spacing():
    assert sample_frame_indices(100, 4) == [0, 33, 66, 99]
    assert sample_frame_indices(3, 10) == [0, 1, 2]
    assert sample_frame_indices(1, 4) == [0]


def test_preprocess_delegates(frames):
    kept = preprocess([f.image for f in frames[:10]], ssim_threshold=0.999)
    assert kept[0] == 0
    assert kept == sorted(set(kept))
