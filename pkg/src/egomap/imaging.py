"""Image-level primitives: similarity metrics, redundancy filtering, block matching."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DimensionMismatch, NoMatches

# SSIM constants (canonical choices for 8-bit images).
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 255.0
SSIM_WINDOW = 8

PSNR_CAP_DB = 100.0
HIST_BINS = 32

# Keypoint-displacement gate used before the SSIM stage of filter_redundant:
# frames whose tracked corners move more than this are kept without an SSIM
# check (assumed non-redundant).
GATE_DISPLACEMENT_PX = 2.0


def as_image(a) -> np.ndarray:
    """Coerce to an HxWx3 uint8 array, validating shape."""
    a = np.asarray(a)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {a.shape}")
    return a.astype(np.uint8, copy=False)


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_png(path, image) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(as_image(image), mode="RGB").save(path, format="PNG")


def _check_same_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")


def luma(image) -> np.ndarray:
    """Integer BT.601 luma (weights 77/150/29 out of 256), returned as float."""
    img = as_image(image).astype(np.int64)
    y = (77 * img[:, :, 0] + 150 * img[:, :, 1] + 29 * img[:, :, 2]) >> 8
    return y.astype(float)


def ssim(a, b) -> float:
    """Structural similarity over non-overlapping 8x8 luma windows.

    Symmetric in its arguments; 1.0 for identical images.
    """
    a = as_image(a)
    b = as_image(b)
    _check_same_dims(a, b)
    ya, yb = luma(a), luma(b)
    h = (ya.shape[0] // SSIM_WINDOW) * SSIM_WINDOW
    w = (ya.shape[1] // SSIM_WINDOW) * SSIM_WINDOW
    if h == 0 or w == 0:
        raise DimensionMismatch("images smaller than one SSIM window")
    blk = (
        lambda y: y[:h, :w]
        .reshape(h // SSIM_WINDOW, SSIM_WINDOW, w // SSIM_WINDOW, SSIM_WINDOW)
        .transpose(0, 2, 1, 3)
        .reshape(-1, SSIM_WINDOW * SSIM_WINDOW)
    )
    xa, xb = blk(ya), blk(yb)
    mu_a = xa.mean(axis=1)
    mu_b = xb.mean(axis=1)
    var_a = xa.var(axis=1)
    var_b = xb.var(axis=1)
    cov = ((xa - mu_a[:, None]) * (xb - mu_b[:, None])).mean(axis=1)
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical images."""
    a = as_image(a)
    b = as_image(b)
    _check_same_dims(a, b)
    mse = np.mean((a.astype(float) - b.astype(float)) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(SSIM_L**2 / mse)))


def _channel_histograms(img: np.ndarray) -> np.ndarray:
    # Bin width 256 / HIST_BINS = 8, so a 3-bit shift is the bin index.
    out = np.empty((3, HIST_BINS))
    for c in range(3):
        out[c] = np.bincount(img[:, :, c].ravel() >> 3, minlength=HIST_BINS)
    return out


def histogram_similarity(a, b) -> float:
    """Mean per-channel Pearson correlation of 32-bin intensity histograms.

    Channels where either histogram is constant across bins contribute
    1.0 when the two histograms are identical and 0.0 otherwise.
    """
    a = as_image(a)
    b = as_image(b)
    ha = _channel_histograms(a)
    hb = _channel_histograms(b)
    vals = []
    for c in range(3):
        x, y = ha[c], hb[c]
        sx, sy = x.std(), y.std()
        if sx == 0 or sy == 0:
            vals.append(1.0 if np.array_equal(x, y) else 0.0)
            continue
        vals.append(float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy)))
    return float(np.mean(vals))


def harris_corners(gray: np.ndarray, max_corners: int = 64, min_distance: int = 4) -> np.ndarray:
    """Top corner locations by Harris response, as an (N, 2) array of (u, v).

    Plain-numpy implementation; good enough as a cheap gate and as seeds
    for block matching.
    """
    gy, gx = np.gradient(gray)
    ixx = _box_filter(gx * gx, 2)
    iyy = _box_filter(gy * gy, 2)
    ixy = _box_filter(gx * gy, 2)
    resp = ixx * iyy - ixy**2 - 0.05 * (ixx + iyy) ** 2
    # Suppress borders so match patches stay in-bounds.
    m = 6
    resp[:m], resp[-m:], resp[:, :m], resp[:, -m:] = -np.inf, -np.inf, -np.inf, -np.inf
    thresh = max(1e-4, 0.01 * resp.max()) if np.isfinite(resp.max()) else np.inf
    order = np.argsort(resp.ravel())[::-1]
    corners = []
    taken = np.zeros_like(gray, dtype=bool)
    for flat in order:
        v, u = np.unravel_index(flat, gray.shape)
        if resp[v, u] < thresh:
            break
        if taken[v, u]:
            continue
        corners.append((u, v))
        v0, v1 = max(0, v - min_distance), v + min_distance + 1
        u0, u1 = max(0, u - min_distance), u + min_distance + 1
        taken[v0:v1, u0:u1] = True
        if len(corners) >= max_corners:
            break
    return np.array(corners, dtype=int).reshape(-1, 2)


def _box_filter(a: np.ndarray, r: int) -> np.ndarray:
    """Mean over a (2r+1)^2 window via cumulative sums (edge-padded)."""
    pad = np.pad(a, r, mode="edge")
    c = pad.cumsum(axis=0).cumsum(axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    k = 2 * r + 1
    h, w = a.shape
    total = c[k : k + h, k : k + w] - c[:h, k : k + w] - c[k : k + h, :w] + c[:h, :w]
    return total / (k * k)


def _median_corner_displacement(ga: np.ndarray, gb: np.ndarray, search: int = 4) -> float:
    """Median displacement of tracked corners between two grayscale frames.

    Returns inf when no corner can be tracked (treated as large motion).
    """
    corners = harris_corners(ga, max_corners=16)
    if len(corners) == 0:
        return 0.0 if np.array_equal(ga, gb) else np.inf
    disps = []
    half = 3
    for u, v in corners:
        patch = ga[v - half : v + half + 1, u - half : u + half + 1]
        best, best_d = None, None
        for dv in range(-search, search + 1):
            for du in range(-search, search + 1):
                vv, uu = v + dv, u + du
                if (
                    vv - half < 0
                    or uu - half < 0
                    or vv + half + 1 > gb.shape[0]
                    or uu + half + 1 > gb.shape[1]
                ):
                    continue
                cand = gb[vv - half : vv + half + 1, uu - half : uu + half + 1]
                d = float(np.sum((patch - cand) ** 2))
                if best is None or d < best:
                    best, best_d = d, np.hypot(du, dv)
        if best_d is not None:
            disps.append(best_d)
    return float(np.median(disps)) if disps else np.inf


def filter_redundant(frames, ssim_threshold: float) -> list[int]:
    """Drop frames nearly identical to the last kept frame.

    Two stages: a cheap corner-displacement gate marks frames with clear
    motion as kept outright; only low-motion candidates pay for an SSIM
    check against the last kept frame and are dropped iff that SSIM
    exceeds ``ssim_threshold``. The first frame is always kept. The gate
    assumes visibly-moving frames would pass the SSIM check anyway.
    """
    if len(frames) < 1:
        raise ValueError("need at least one frame")
    kept = [0]
    last_gray = luma(frames[0])
    last_img = frames[0]
    for i in range(1, len(frames)):
        gray = luma(frames[i])
        disp = _median_corner_displacement(last_gray, gray)
        if disp > GATE_DISPLACEMENT_PX:
            keep = True
        else:
            keep = ssim(last_img, frames[i]) <= ssim_threshold
        if keep:
            kept.append(i)
            last_gray = gray
            last_img = frames[i]
    return kept


@dataclass(frozen=True)
class PixelMatchSet:
    """Pixel correspondences between two images, sorted by confidence.

    ``source`` and ``target`` are (N, 2) float arrays of (u, v) pixels;
    ``confidence`` is (N,) in [0, 1].
    """

    source: np.ndarray
    target: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.source, dtype=float).reshape(-1, 2)
        t = np.asarray(self.target, dtype=float).reshape(-1, 2)
        c = np.asarray(self.confidence, dtype=float).reshape(-1)
        if not (len(s) == len(t) == len(c)):
            raise ValueError("source/target/confidence lengths differ")
        if len(c) and (c.min() < 0 or c.max() > 1):
            raise ValueError("confidence must lie in [0, 1]")
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "target", t)
        object.__setattr__(self, "confidence", c)

    def __len__(self) -> int:
        return len(self.confidence)

    @staticmethod
    def empty() -> "PixelMatchSet":
        return PixelMatchSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))

    def sorted_by_confidence(self) -> "PixelMatchSet":
        order = np.argsort(-self.confidence, kind="stable")
        return PixelMatchSet(self.source[order], self.target[order], self.confidence[order])


def block_match(a, b, region_mask=None, max_corners: int = 64, search: int = 12) -> PixelMatchSet:
    """Corner detection plus normalized cross-correlation block search.

    Fallback pixel matcher when no learned matcher backend is configured.
    Source pixels are restricted to ``region_mask`` when given. Matches
    come back sorted by descending confidence ((ncc + 1) / 2).
    """
    a = as_image(a)
    b = as_image(b)
    _check_same_dims(a, b)
    ga, gb = luma(a), luma(b)
    if region_mask is not None:
        region_mask = np.asarray(region_mask, dtype=bool)
        if region_mask.shape != ga.shape:
            raise NoMatches(f"region mask shape {region_mask.shape} != image {ga.shape}")
    corners = harris_corners(ga, max_corners=max_corners)
    if region_mask is not None and len(corners):
        corners = corners[region_mask[corners[:, 1], corners[:, 0]]]
    half = 4
    src, dst, conf = [], [], []
    for u, v in corners:
        patch = ga[v - half : v + half + 1, u - half : u + half + 1]
        pm = patch.mean()
        pn = patch - pm
        pstd = np.sqrt((pn**2).sum())
        if pstd < 1e-9:
            continue
        v0, v1 = max(half, v - search), min(gb.shape[0] - half - 1, v + search)
        u0, u1 = max(half, u - search), min(gb.shape[1] - half - 1, u + search)
        best_ncc, best_uv = -2.0, None
        for vv in range(v0, v1 + 1):
            rows = gb[vv - half : vv + half + 1]
            for uu in range(u0, u1 + 1):
                cand = rows[:, uu - half : uu + half + 1]
                cn = cand - cand.mean()
                cstd = np.sqrt((cn**2).sum())
                if cstd < 1e-9:
                    continue
                ncc = float((pn * cn).sum() / (pstd * cstd))
                if ncc > best_ncc:
                    best_ncc, best_uv = ncc, (uu, vv)
        if best_uv is not None:
            src.append((u, v))
            dst.append(best_uv)
            conf.append((best_ncc + 1.0) / 2.0)
    if not src:
        return PixelMatchSet.empty()
    return PixelMatchSet(
        np.array(src, dtype=float), np.array(dst, dtype=float), np.clip(conf, 0.0, 1.0)
    ).sorted_by_confidence()
