"""Key-frame selection by iterative temporal search.

A budgeted subset of frames is found by repeatedly sampling a discrete
distribution over frame indices, scoring the sampled frames against the
task grounding, and boosting the distribution around high-scoring frames
with a Gaussian kernel whose width tracks local frame similarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grounding import TaskGrounding
from .imaging import histogram_similarity


def k_from_alpha(alpha: float) -> float:
    """Band half-width k with erf(k / sqrt(2)) = alpha, by bisection.

    alpha is the probability mass a Gaussian holds within +-k standard
    deviations: 0.6827 -> k ~ 1, 0.9545 -> k ~ 2.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha {alpha} outside (0, 1)")
    lo, hi = 0.0, 1.0
    while math.erf(hi / math.sqrt(2.0)) < alpha:
        hi *= 2.0
    for _ in range(200):
        mid = (lo + hi) / 2.0
        if math.erf(mid / math.sqrt(2.0)) < alpha:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    return (lo + hi) / 2.0


@dataclass(frozen=True)
class KernelParams:
    """Gaussian kernel configuration for the sampling-distribution update.

    sigma bounds derive from k and the time window radius: sigma_min = 1/k,
    sigma_max = window_r/k, so at k=2, r=3 the width runs over [1/2, 3/2].
    explore_floor mixes the refined distribution with uniform-over-unscored
    so kernel boosts can never extinguish undiscovered regions.
    """

    alpha: float = 0.9545
    window_r: int = 3
    k: float | None = None
    explore_floor: float = 0.15
    sigma_min: float = field(init=False)
    sigma_max: float = field(init=False)

    def __post_init__(self):
        if self.window_r < 1:
            raise ValueError("window_r must be a positive integer")
        if not (0.0 <= self.explore_floor < 1.0):
            raise ValueError("explore_floor must lie in [0, 1)")
        k = self.k if self.k is not None else k_from_alpha(self.alpha)
        if k <= 0:
            raise ValueError("k must be positive")
        object.__setattr__(self, "k", float(k))
        object.__setattr__(self, "sigma_min", 1.0 / self.k)
        object.__setattr__(self, "sigma_max", self.window_r / self.k)


def kernel_sigma(s: float, params: KernelParams) -> float:
    """Interpolated kernel width: sigma_min + (sigma_max - sigma_min) * s."""
    s = min(1.0, max(0.0, float(s)))
    return params.sigma_min + (params.sigma_max - params.sigma_min) * s


@dataclass(frozen=True)
class FrameScore:
    frame_index: int
    likelihood: float

    def __post_init__(self):
        if not np.isfinite(self.likelihood) or self.likelihood < 0:
            raise ValueError(f"likelihood must be finite and >= 0, got {self.likelihood}")


@dataclass
class SamplingState:
    """Distribution over frame indices plus the scored/selected bookkeeping."""

    weights: np.ndarray
    scored: dict[int, FrameScore]
    selected: list[int]
    iteration: int = 0

    @classmethod
    def uniform(cls, n_frames: int) -> "SamplingState":
        if n_frames < 1:
            raise ValueError("need at least one frame")
        return cls(weights=np.full(n_frames, 1.0 / n_frames), scored={}, selected=[])

    def validate(self) -> None:
        total = float(self.weights.sum())
        if self.scored.keys() and len(self.weights) == len(self.scored):
            pass  # fully scored states may carry an all-zero distribution
        elif abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights sum {total} != 1")
        for i in self.scored:
            if self.weights[i] != 0.0:
                raise ValueError(f"scored frame {i} has nonzero weight")

    def unscored(self) -> np.ndarray:
        mask = np.ones(len(self.weights), dtype=bool)
        mask[list(self.scored.keys())] = False
        return np.nonzero(mask)[0]


def score_frame(frame, grounding: TaskGrounding, backend) -> FrameScore:
    """Likelihood of one frame: sum of relevance-weighted detection maxima."""
    labels = grounding.labels
    detections = backend.detect(frame, labels)
    best: dict[str, float] = {}
    for det in detections:
        best[det.label] = max(best.get(det.label, 0.0), det.confidence)
    likelihood = sum(g.relevance * best.get(g.label, 0.0) for g in grounding.objects)
    return FrameScore(frame_index=frame.index, likelihood=likelihood)


def apply_kernel(state: SamplingState, score: FrameScore, similarity_window,
                 params: KernelParams, threshold: float) -> SamplingState:
    """Boost unscored indices around a scored frame and renormalize.

    The kernel is centered on the frame index; its amplitude is
    min(1, likelihood / threshold) and its width follows the mean
    neighbor similarity through kernel_sigma. Scored indices stay at
    zero weight so they are never resampled.
    """
    i = score.frame_index
    if i not in state.scored:
        raise ValueError(f"frame {i} must be recorded in state.scored first")
    sims = np.asarray(list(similarity_window), dtype=float)
    s = float(np.clip(sims.mean(), 0.0, 1.0)) if sims.size else 0.0
    sigma = kernel_sigma(s, params)
    amplitude = 1.0 if threshold <= 0 else min(1.0, score.likelihood / threshold)

    weights = state.weights.copy()
    n = len(weights)
    lo, hi = max(0, i - params.window_r), min(n - 1, i + params.window_r)
    for x in range(lo, hi + 1):
        if x not in state.scored:
            weights[x] += amplitude * math.exp(-((x - i) ** 2) / (2.0 * sigma**2))
    weights[list(state.scored.keys())] = 0.0
    total = weights.sum()
    if total > 0:
        weights /= total
    elif len(state.scored) < n:
        unscored = [x for x in range(n) if x not in state.scored]
        weights[unscored] = 1.0 / len(unscored)
    return SamplingState(weights=weights, scored=state.scored, selected=state.selected,
                         iteration=state.iteration)


def _mix_exploration_floor(state: SamplingState, floor: float) -> None:
    """Blend the distribution with uniform-over-unscored, once per batch."""
    unscored = state.unscored()
    if len(unscored) == 0 or floor <= 0:
        return
    total = state.weights.sum()
    if total > 0:
        state.weights *= (1 - floor) / total
        state.weights[unscored] += floor / len(unscored)
    else:
        state.weights[unscored] = 1.0 / len(unscored)


def _apply_kernel_batch(state: SamplingState, scores, sims: dict, params: KernelParams,
                        threshold: float) -> SamplingState:
    """One batch's kernel updates against the pre-batch distribution.

    All kernel contributions are computed from the same starting weights
    and summed before a single renormalization, so simultaneously active
    video segments keep their boosts on equal footing (the sum is also
    independent of scoring order, matching the post-batch update
    contract). Equivalent to apply_kernel for a single score.
    """
    weights = state.weights.copy()
    n = len(weights)
    for score in scores:
        i = score.frame_index
        s_vals = np.asarray(sims[i], dtype=float)
        s = float(np.clip(s_vals.mean(), 0.0, 1.0)) if s_vals.size else 0.0
        sigma = kernel_sigma(s, params)
        amplitude = 1.0 if threshold <= 0 else min(1.0, score.likelihood / threshold)
        lo, hi = max(0, i - params.window_r), min(n - 1, i + params.window_r)
        for x in range(lo, hi + 1):
            if x not in state.scored:
                weights[x] += amplitude * math.exp(-((x - i) ** 2) / (2.0 * sigma**2))
    weights[list(state.scored.keys())] = 0.0
    total = weights.sum()
    if total > 0:
        weights /= total
    elif len(state.scored) < n:
        unscored = [x for x in range(n) if x not in state.scored]
        weights[unscored] = 1.0 / len(unscored)
    return SamplingState(weights=weights, scored=state.scored, selected=state.selected,
                         iteration=state.iteration)


def neighbor_similarity(frames, i: int, window_r: int) -> list[float]:
    """Histogram similarity of frame i to its +-window_r neighbors, clamped to [0, 1]."""
    sims = []
    for j in range(i - window_r, i + window_r + 1):
        if j == i or not (0 <= j < len(frames)):
            continue
        sims.append(min(1.0, max(0.0, histogram_similarity(frames[i].image, frames[j].image))))
    return sims


@dataclass
class SearchResult:
    selected: list[int]
    state: SamplingState
    scoring_order: list[int]

    @property
    def sampled_fraction(self) -> float:
        return len(self.state.scored) / len(self.state.weights)


def iterative_search(frames, grounding: TaskGrounding, budget: int, threshold: float,
                     n_iterations: int, batch: int | None, backend,
                     params: KernelParams = KernelParams(), seed: int = 0,
                     fill: bool = True) -> SearchResult:
    """Select up to ``budget`` key frames by guided sampling.

    Each iteration draws ``batch`` unscored indices without replacement
    proportionally to the sampling distribution, scores them in frame
    order, selects those at or above ``threshold``, and applies one
    kernel update per scored frame. Stops when the budget is reached,
    iterations run out, or every frame is scored. When ``fill`` is on
    and the budget was not met, the remainder is taken from scored
    frames by descending likelihood (ties by index).

    Returns a SearchResult; ``selected`` is sorted ascending.
    """
    n = len(frames)
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if batch is None:
        batch = max(1, math.ceil(n / 20))
    rng = np.random.default_rng(seed)
    state = SamplingState.uniform(n)
    sim_cache: dict[int, list[float]] = {}
    scoring_order: list[int] = []

    for _ in range(n_iterations):
        unscored = state.unscored()
        if len(unscored) == 0 or len(state.selected) >= budget:
            break
        take = min(batch, len(unscored))
        p = state.weights[unscored]
        total = p.sum()
        if total <= 0:
            p = np.full(len(unscored), 1.0 / len(unscored))
        else:
            p = p / total
        picked = rng.choice(unscored, size=take, replace=False, p=p)
        picked = np.sort(picked)

        batch_scores = []
        for i in picked:
            if len(state.selected) >= budget:
                break  # budget met mid-batch; skip the remaining scores
            score = score_frame(frames[int(i)], grounding, backend)
            batch_scores.append(score)
            state.scored[int(i)] = score
            scoring_order.append(int(i))
            if score.likelihood >= threshold:
                state.selected.append(score.frame_index)
        for score in batch_scores:
            if score.frame_index not in sim_cache:
                sim_cache[score.frame_index] = neighbor_similarity(
                    frames, score.frame_index, params.window_r)
        state = _apply_kernel_batch(state, batch_scores, sim_cache, params, threshold)
        _mix_exploration_floor(state, params.explore_floor)
        state.iteration += 1
        if len(state.selected) >= budget:
            break

    if fill and len(state.selected) < budget:
        rest = sorted(
            (s for i, s in state.scored.items() if i not in set(state.selected)),
            key=lambda s: (-s.likelihood, s.frame_index),
        )
        for score in rest:
            if len(state.selected) >= budget:
                break
            state.selected.append(score.frame_index)

    return SearchResult(selected=sorted(state.selected), state=state,
                        scoring_order=scoring_order)


def uniform_indices(n_frames: int, count: int) -> list[int]:
    """Evenly spaced frame indices; the uniform-sampling baseline."""
    count = min(count, n_frames)
    return sorted(set(int(round(x)) for x in np.linspace(0, n_frames - 1, count)))
