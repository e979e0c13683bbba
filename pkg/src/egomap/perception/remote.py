"""JSON-over-HTTP perception client: one POST endpoint per capability.

Wire format: images as base64 PNG, bulk float arrays as little-endian
base64, masks as row-major run-length counts. Every call has a timeout
and a bounded retry budget; exhausting it raises BackendUnavailable.
"""

from __future__ import annotations

import base64
import io
import time

import numpy as np
import requests
from PIL import Image as PILImage

from ..errors import BackendUnavailable
from ..imaging import PixelMatchSet
from .base import PerceptionBackend
from .rle import decode_rle, encode_rle
from .types import Detection, DepthMap, FrameEmbedding, SegmentMask

DEFAULT_TIMEOUT_S = 10.0
DEFAULT_RETRIES = 2


def encode_image_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    PILImage.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image_b64(data: str) -> np.ndarray:
    with PILImage.open(io.BytesIO(base64.b64decode(data))) as im:
        return np.asarray(im.convert("RGB"))


def encode_f32_b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.asarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_f32_b64(data: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(data), dtype="<f4").copy()


class RemoteBackend(PerceptionBackend):
    """Proxies capabilities to a model server speaking the /v1 protocol."""

    def __init__(self, base_url: str, timeout_s: float = DEFAULT_TIMEOUT_S,
                 retries: int = DEFAULT_RETRIES, session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self.retries = retries
        self.session = session or requests.Session()

    def _post(self, endpoint: str, payload: dict) -> dict:
        url = f"{self.base_url}/v1/{endpoint}"
        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.session.post(url, json=payload, timeout=self.timeout_s)
                resp.raise_for_status()
                return resp.json()
            except (requests.ConnectionError, requests.Timeout, requests.HTTPError,
                    ValueError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(min(0.2 * (attempt + 1), 1.0))
        raise BackendUnavailable(f"{url}: {last}") from last

    def segment(self, frame, vocabulary, prompts=None):
        payload = {"image_b64": encode_image_b64(frame.image),
                   "vocabulary": list(vocabulary)}
        if prompts:
            payload["prompt_points"] = [[float(u), float(v)] for u, v in prompts]
        doc = self._post("segment", payload)
        out = []
        for m in doc.get("masks", []):
            out.append(SegmentMask(label=m["label"], instance_id=int(m["instance_id"]),
                                   mask=decode_rle(m["rle_mask"]),
                                   prompt_points=list(prompts) if prompts else None))
        return out

    def estimate_depth(self, frame):
        doc = self._post("depth", {"image_b64": encode_image_b64(frame.image)})
        depth = decode_f32_b64(doc["depth_f32_b64"]).reshape(doc["height"], doc["width"])
        valid = np.isfinite(depth) & (depth > 0)
        return DepthMap(depth=depth, valid=valid)

    def detect(self, frame, queries):
        doc = self._post("detect", {"image_b64": encode_image_b64(frame.image),
                                    "queries": list(queries)})
        return [
            Detection(label=d["label"], bbox_2d=tuple(float(v) for v in d["bbox"]),
                      confidence=float(d["confidence"]))
            for d in doc.get("detections", [])
        ]

    def embed(self, frame):
        doc = self._post("embed", {"image_b64": encode_image_b64(frame.image)})
        vec = np.asarray(doc["vector"], dtype=float)
        n = np.linalg.norm(vec)
        return FrameEmbedding(vector=vec / n if n > 0 else vec)

    def match(self, frame_a, frame_b, region_mask=None):
        payload = {"image_a_b64": encode_image_b64(frame_a.image),
                   "image_b_b64": encode_image_b64(frame_b.image)}
        if region_mask is not None:
            payload["region_mask_rle"] = encode_rle(np.asarray(region_mask, dtype=bool))
        doc = self._post("match", payload)
        pairs = doc.get("pairs", [])
        if not pairs:
            return PixelMatchSet.empty()
        arr = np.asarray(pairs, dtype=float)
        return PixelMatchSet(arr[:, 0:2], arr[:, 2:4], arr[:, 4]).sorted_by_confidence()

    def vlm_query(self, images, prompt_text):
        payload = {"images_b64": [encode_image_b64(img) for img in images],
                   "prompt": prompt_text}
        return self._post("chat", payload)["text"]
