"""Backend interface and per-capability routing."""

from __future__ import annotations

from ..errors import UnsupportedCapability

CAPABILITIES = ("segment", "depth", "detect", "embed", "match", "vlm")

_CAPABILITY_METHODS = {
    "segment": "segment",
    "depth": "estimate_depth",
    "detect": "detect",
    "embed": "embed",
    "match": "match",
    "vlm": "vlm_query",
}


class PerceptionBackend:
    """Interface for learned-model capabilities.

    Concrete backends override the methods for the capabilities they
    advertise; unimplemented calls raise UnsupportedCapability. All
    methods must be safe for concurrent independent calls.
    """

    @property
    def capabilities(self) -> frozenset:
        return frozenset(
            cap
            for cap, name in _CAPABILITY_METHODS.items()
            if getattr(type(self), name) is not getattr(PerceptionBackend, name)
        )

    def segment(self, frame, vocabulary, prompts=None):
        raise UnsupportedCapability("segment")

    def estimate_depth(self, frame):
        raise UnsupportedCapability("depth")

    def detect(self, frame, queries):
        raise UnsupportedCapability("detect")

    def embed(self, frame):
        raise UnsupportedCapability("embed")

    def match(self, frame_a, frame_b, region_mask=None):
        raise UnsupportedCapability("match")

    def vlm_query(self, images, prompt_text):
        raise UnsupportedCapability("vlm")


class CompositeBackend(PerceptionBackend):
    """Routes each capability to an independently chosen backend.

    Lets a run mix, say, synthetic depth with a remote segmenter, which
    is how per-capability degradation experiments are wired up.
    """

    def __init__(self, segment=None, depth=None, detect=None, embed=None, match=None, vlm=None):
        self._routes = {
            "segment": segment,
            "depth": depth,
            "detect": detect,
            "embed": embed,
            "match": match,
            "vlm": vlm,
        }

    @property
    def capabilities(self) -> frozenset:
        return frozenset(c for c, b in self._routes.items() if b is not None)

    def _route(self, capability: str) -> PerceptionBackend:
        backend = self._routes.get(capability)
        if backend is None:
            raise UnsupportedCapability(capability)
        return backend

    def segment(self, frame, vocabulary, prompts=None):
        return self._route("segment").segment(frame, vocabulary, prompts=prompts)

    def estimate_depth(self, frame):
        return self._route("depth").estimate_depth(frame)

    def detect(self, frame, queries):
        return self._route("detect").detect(frame, queries)

    def embed(self, frame):
        return self._route("embed").embed(frame)

    def match(self, frame_a, frame_b, region_mask=None):
        return self._route("match").match(frame_a, frame_b, region_mask=region_mask)

    def vlm_query(self, images, prompt_text):
        return self._route("vlm").vlm_query(images, prompt_text)
