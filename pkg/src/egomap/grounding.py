"""Task preprocessing: question -> ranked target/cue objects, frame dedup."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

from .errors import GroundingParseError
from .imaging import filter_redundant

GROUNDING_PROMPT = """You are helping with a spatial reasoning task over an egocentric video.
Question: {question}

List the objects needed to answer the question. Include the target objects
the question explicitly mentions and the cue objects that serve as landmarks
or contextual hints, each ranked by relevance to the question. Respond with
exactly one fenced JSON block of the form:
```json
{{"targets": [{{"label": "...", "relevance": 1.0}}], "cues": [{{"label": "...", "relevance": 0.5}}]}}
```"""

REPROMPT_SUFFIX = (
    "\n\nYour previous reply could not be parsed. Reply with only the fenced "
    "JSON block in the requested format."
)


@dataclass(frozen=True)
class GroundedObject:
    label: str
    relevance: float

    def __post_init__(self):
        if not self.label:
            raise ValueError("label must be a non-empty string")
        if not (0.0 < self.relevance <= 1.0):
            raise ValueError(f"relevance {self.relevance} outside (0, 1]")


@dataclass(frozen=True)
class TaskGrounding:
    """Ranked target and cue objects for one question."""

    targets: tuple[GroundedObject, ...]
    cues: tuple[GroundedObject, ...]
    question: str

    def __post_init__(self):
        if not self.targets:
            raise ValueError("grounding needs at least one target")
        for group in (self.targets, self.cues):
            rels = [g.relevance for g in group]
            if any(b > a for a, b in zip(rels, rels[1:])):
                raise ValueError("relevance must be non-increasing within a list")

    @property
    def objects(self) -> tuple[GroundedObject, ...]:
        return self.targets + self.cues

    @property
    def labels(self) -> list[str]:
        return [g.label for g in self.objects]


def _parse_grounding_reply(text: str, question: str) -> TaskGrounding:
    block = re.search(r"```(?:json)?\s*(\{.*?\})\s*```", text, re.DOTALL)
    raw = block.group(1) if block else None
    if raw is None:
        brace = re.search(r"\{.*\}", text, re.DOTALL)
        raw = brace.group(0) if brace else None
    if raw is None:
        raise GroundingParseError("no JSON object in VLM reply")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise GroundingParseError(f"invalid JSON: {exc}") from exc

    def coerce(entries) -> tuple[GroundedObject, ...]:
        out = []
        for rank, entry in enumerate(entries or [], start=1):
            if isinstance(entry, str):
                label, rel = entry, None
            else:
                label = entry.get("label", "")
                rel = entry.get("relevance")
            if rel is None:
                rel = 1.0 / rank  # rank-default when the VLM omits scores
            out.append(GroundedObject(label=str(label), relevance=float(rel)))
        out.sort(key=lambda g: -g.relevance)
        return tuple(out)

    targets = coerce(doc.get("targets"))
    cues = coerce(doc.get("cues"))
    if not targets:
        raise GroundingParseError("grounding reply has no targets")
    return TaskGrounding(targets=targets, cues=cues, question=question)


def sample_frame_indices(n_frames: int, n_sample: int) -> list[int]:
    """Uniformly spaced frame indices (deterministic grounding context)."""
    n_sample = min(n_sample, n_frames)
    return sorted(set(int(round(x)) for x in np.linspace(0, n_frames - 1, n_sample)))


def ground_task(question: str, frames, n_sample: int, backend) -> TaskGrounding:
    """Derive ranked target/cue objects for the question via one VLM call.

    Prompts with the question plus ``n_sample`` uniformly spaced frames;
    reprompts once on a parse failure.

    Raises:
        GroundingParseError: unparseable VLM output after the reprompt.
    """
    if n_sample < 1:
        raise ValueError("n_sample must be >= 1")
    if not frames:
        raise ValueError("frames must be non-empty")
    idx = sample_frame_indices(len(frames), n_sample)
    images = [frames[i].image for i in idx]
    prompt = GROUNDING_PROMPT.format(question=question)
    reply = backend.vlm_query(images, prompt)
    try:
        return _parse_grounding_reply(reply, question)
    except GroundingParseError:
        reply = backend.vlm_query(images, prompt + REPROMPT_SUFFIX)
        return _parse_grounding_reply(reply, question)


def preprocess(frames, ssim_threshold: float) -> list[int]:
    """Redundant-frame removal; see imaging.filter_redundant."""
    return filter_redundant(frames, ssim_threshold)
