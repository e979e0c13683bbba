"""End-to-end orchestration: configuration, run stages, artifacts, bench driver."""

from __future__ import annotations

import json
import logging
import os
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .alignment import FramePose, PartialAlignment, align_tree, build_similarity_graph, refine_occlusions
from .bench.metrics import EvalReport, eval_alignment, eval_keyframes, map_fidelity
from .bench.questions import QUESTION_KINDS, generate_questions
from .bench.scene import COMPLEXITY_LEVELS, SceneBundle, generate_scene, load_bundle, save_bundle
from .errors import AnswerParseError, ConfigError, EgomapError, PlacementFailure
from .geometry import CameraIntrinsics, RansacParams
from .grounding import ground_task, preprocess
from .imaging import read_png, write_png
from .keyframe import KernelParams, iterative_search, score_frame, uniform_indices
from .perception.base import CAPABILITIES, CompositeBackend
from .perception.types import FrameRecord
from .semmap import Answer, answer_question, build_semantic_map, fuse_objects, map_to_json, render_prompt

logger = logging.getLogger(__name__)

_DIRECT_QA_INSTRUCTION = (
    "You are given video key frames from an egocentric recording. Answer the "
    "spatial question using only what is visible in the attached frames. For "
    "multiple-choice questions reply with the choice letter in parentheses."
)

_STAGES = ("preprocess", "ground", "keyframes", "align", "fuse", "refine",
           "map", "prompt", "answer")


@dataclass
class KeyframeConfig:
    budget: int = 25
    threshold: float = 1.5
    iterations: int = 20
    batch: int | None = None


@dataclass
class KernelConfig:
    alpha: float = 0.9545
    window_r: int = 3


@dataclass
class MapConfig:
    cell_size: float = 0.25


@dataclass
class NoiseConfig:
    depth_sigma: float = 0.0
    confidence_sigma: float = 0.05
    segment_dropout: float = 0.0
    match_outlier_rate: float = 0.0
    background_outlier_rate: float = 0.0


@dataclass
class RunConfig:
    frames_dir: str = ""
    question: str = ""
    backend: dict = field(default_factory=lambda: {"all": "synthetic"})
    keyframe: KeyframeConfig = field(default_factory=KeyframeConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    map: MapConfig = field(default_factory=MapConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    output_dir: str = "out"
    ssim_threshold: float = 0.98
    n_ground_frames: int = 4
    mode: str = "map"  # "map" | "direct" (raw-keyframes ablation)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        for key, value in doc.items():
            if key in ("keyframe", "kernel", "map", "noise"):
                section = getattr(cfg, key)
                for k2, v2 in value.items():
                    if not hasattr(section, k2):
                        raise ConfigError(f"unknown field {key}.{k2}")
                    setattr(section, k2, v2)
            elif hasattr(cfg, key):
                setattr(cfg, key, value)
            else:
                raise ConfigError(f"unknown config field {key!r}")
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        doc = yaml.safe_load(Path(path).read_text())
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        return cls.from_dict(doc)

    def resolved_backends(self) -> dict[str, str]:
        default = self.backend.get("all", "synthetic")
        out = {}
        for cap in CAPABILITIES:
            spec = self.backend.get(cap, default)
            out[cap] = spec
        return out

    def validate(self) -> None:
        if not self.frames_dir:
            raise ConfigError("frames_dir is required")
        if not Path(self.frames_dir).exists():
            raise ConfigError(f"frames_dir {self.frames_dir} does not exist")
        if self.mode not in ("map", "direct"):
            raise ConfigError(f"mode must be 'map' or 'direct', got {self.mode!r}")
        if self.keyframe.budget < 1 or self.keyframe.iterations < 1:
            raise ConfigError("keyframe budget and iterations must be >= 1")
        if not (0.0 < self.kernel.alpha < 1.0):
            raise ConfigError("kernel.alpha must lie in (0, 1)")
        if self.kernel.window_r < 1:
            raise ConfigError("kernel.window_r must be >= 1")
        if self.map.cell_size <= 0:
            raise ConfigError("map.cell_size must be positive")
        for cap, spec in self.resolved_backends().items():
            if not (spec == "synthetic" or spec.startswith("synthetic:")
                    or spec.startswith("remote:")):
                raise ConfigError(f"backend for {cap}: unknown spec {spec!r}")


def stage_seed(seed: int, stage: str) -> int:
    """Independent per-stage randomness from the single run seed."""
    return int(np.random.default_rng([seed, _STAGES.index(stage)]).integers(2**31))


def build_backend(config: RunConfig, bundle: SceneBundle | None):
    """Per-capability backend routing from the config."""
    from .perception.remote import RemoteBackend
    from .perception.synthetic import SyntheticBackend, SyntheticNoise

    noise = SyntheticNoise(
        depth_sigma=config.noise.depth_sigma,
        confidence_sigma=config.noise.confidence_sigma,
        segment_dropout=config.noise.segment_dropout,
        match_outlier_rate=config.noise.match_outlier_rate,
        background_outlier_rate=config.noise.background_outlier_rate,
    )
    cache: dict[str, object] = {}
    routes = {}
    for cap, spec in config.resolved_backends().items():
        if spec not in cache:
            if spec.startswith("remote:"):
                cache[spec] = RemoteBackend(spec.split(":", 1)[1])
            else:
                path = spec.split(":", 1)[1] if ":" in spec else None
                scene_bundle = load_bundle(path) if path else bundle
                if scene_bundle is None:
                    raise ConfigError(
                        f"backend {cap}={spec} needs a scene bundle in frames_dir")
                cache[spec] = SyntheticBackend(scene_bundle, noise, seed=config.seed)
        routes[cap] = cache[spec]
    return CompositeBackend(
        segment=routes["segment"], depth=routes["depth"], detect=routes["detect"],
        embed=routes["embed"], match=routes["match"], vlm=routes["vlm"])


def load_frames(frames_dir) -> tuple[list[FrameRecord], SceneBundle | None]:
    root = Path(frames_dir)
    if (root / "scene.json").exists():
        bundle = load_bundle(root)
        return bundle.frame_records(), bundle
    paths = sorted(root.glob("*.png")) or sorted((root / "frames").glob("*.png"))
    if not paths:
        raise ConfigError(f"no frames found under {frames_dir}")
    images = [read_png(p) for p in paths]
    h, w = images[0].shape[:2]
    k = CameraIntrinsics(fx=1.2 * w, fy=0.9 * w, cx=(w - 1) / 2, cy=(h - 1) / 2,
                         width=w, height=h)
    return [FrameRecord(image=img, index=i, intrinsics=k)
            for i, img in enumerate(images)], None


@dataclass
class RunArtifacts:
    answer_text: str
    answer_choice: str | None
    map_json: str | None
    prompt_text: str | None
    keyframes: list[int]
    diagnostics: dict
    output_dir: Path
    semantic_map: object | None = None


class _OutputLock:
    """One pipeline per output_dir."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output_dir {self.path.parent} is locked by another run")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def run_pipeline(config: RunConfig) -> RunArtifacts:
    """Execute the full stage sequence and persist artifacts.

    Stage order: preprocess, task grounding, key-frame search, similarity
    graph + tree alignment (with rebase to the top-scoring key frame),
    fusion, occlusion refinement, re-fusion, rasterization, prompt
    rendering, VLM answer. PartialAlignment downgrades to a warning.
    """
    config.validate()
    frames, bundle = load_frames(config.frames_dir)
    backend = build_backend(config, bundle)
    out = Path(config.output_dir)
    with _OutputLock(out):
        return _run_stages(config, frames, backend, out)


def run_on_bundle(config: RunConfig, bundle: SceneBundle, backend=None,
                  persist: bool = False) -> RunArtifacts:
    """In-memory variant used by the bench driver (no disk I/O unless asked)."""
    backend = backend or build_backend(config, bundle)
    out = Path(config.output_dir)
    return _run_stages(config, bundle.frame_records(), backend, out if persist else None)


def _write(out: Path | None, name: str, text: str) -> None:
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


def _run_stages(config: RunConfig, frames, backend, out: Path | None) -> RunArtifacts:
    diagnostics: dict = {"stages": {}, "warnings": []}
    t_start = time.perf_counter()

    def tick(stage):
        diagnostics["stages"][stage] = round(time.perf_counter() - t_start, 4)

    _write(out, "run_config.json", json.dumps(asdict(config), indent=1, sort_keys=True))

    kept = preprocess([f.image for f in frames], config.ssim_threshold)
    working = [frames[i] for i in kept]
    _write(out, "preprocess.json", json.dumps({"kept": kept}))
    tick("preprocess")

    grounding = ground_task(config.question, working, config.n_ground_frames, backend)
    _write(out, "grounding.json", json.dumps({
        "question": config.question,
        "targets": [{"label": g.label, "relevance": g.relevance} for g in grounding.targets],
        "cues": [{"label": g.label, "relevance": g.relevance} for g in grounding.cues],
    }, indent=1))
    tick("ground")

    params = KernelParams(alpha=config.kernel.alpha, window_r=config.kernel.window_r)
    search = iterative_search(
        working, grounding, budget=config.keyframe.budget,
        threshold=config.keyframe.threshold, n_iterations=config.keyframe.iterations,
        batch=config.keyframe.batch, backend=backend, params=params,
        seed=stage_seed(config.seed, "keyframes"))
    key_positions = search.selected
    keyframes = [working[p] for p in key_positions]
    _write(out, "keyframes.json", json.dumps({
        "selected": [f.index for f in keyframes],
        "sampled_fraction": search.sampled_fraction,
        "scores": {str(working[p].index): s.likelihood
                   for p, s in sorted(search.state.scored.items())},
    }, indent=1))
    tick("keyframes")

    if config.mode == "direct":
        return _direct_answer(config, keyframes, backend, out, diagnostics)

    graph = build_similarity_graph(keyframes, backend)
    try:
        tree = align_tree(keyframes, graph, grounding, backend,
                          ransac=RansacParams(seed=stage_seed(config.seed, "align")))
    except PartialAlignment as exc:
        diagnostics["warnings"].append(str(exc))
        logger.warning("%s; proceeding with the aligned component", exc)
        tree = exc.tree
    # Re-anchor the map on the most task-relevant key frame.
    top = max(key_positions,
              key=lambda p: (search.state.scored[p].likelihood, -p))
    top_node = key_positions.index(top)
    if top_node in tree.global_poses and top_node != tree.root:
        tree = tree.rebase(top_node)
        diagnostics["map_origin_frame"] = keyframes[top_node].index
    else:
        diagnostics["map_origin_frame"] = keyframes[tree.root].index
    _write(out, "tree.json", tree.to_json(frame_indices=[f.index for f in keyframes]))
    tick("align")

    labels = grounding.labels
    masks, depths = [], []
    for fr in keyframes:
        if fr.depth is None:
            fr.depth = backend.estimate_depth(fr)
        depths.append(fr.depth)
        fr.masks = backend.segment(fr, labels)
        masks.append(fr.masks)
    entries = fuse_objects(keyframes, masks, depths, tree,
                           depth_sigma=config.noise.depth_sigma)
    tick("fuse")

    poses = [FramePose(frame_index=keyframes[p].index, pose=tree.global_poses[p])
             for p in sorted(tree.global_poses)]
    draft = build_semantic_map(entries, poses, grounding, config.map.cell_size)
    masks, events = refine_occlusions(tree, keyframes, masks, draft, backend,
                                      depth_sigma=config.noise.depth_sigma)
    diagnostics["refinement_attempts"] = len(events)
    diagnostics["refinement_accepted"] = sum(1 for e in events if e.accepted)
    entries = fuse_objects(keyframes, masks, depths, tree,
                           depth_sigma=config.noise.depth_sigma)
    tick("refine")

    smap = build_semantic_map(entries, poses, grounding, config.map.cell_size)
    map_doc = map_to_json(smap)
    _write(out, "map.json", map_doc)
    tick("map")

    prompt = render_prompt(smap, grounding, config.question)
    _write(out, "prompt.txt", prompt.text_block)
    if out is not None:
        write_png(out / "map.png", prompt.map_image)
    tick("prompt")

    try:
        answer = answer_question(prompt, config.question, backend)
    except AnswerParseError as exc:
        diagnostics["warnings"].append(f"answer parse failed: {exc}")
        answer = Answer(text=getattr(exc, "raw_text", ""), choice=None)
    _write(out, "answer.json", json.dumps(
        {"text": answer.text, "choice": answer.choice}, indent=1, sort_keys=True))
    tick("answer")
    _write(out, "diagnostics.json", json.dumps(diagnostics, indent=1, sort_keys=True))

    return RunArtifacts(answer_text=answer.text, answer_choice=answer.choice,
                        map_json=map_doc, prompt_text=prompt.text_block,
                        keyframes=[f.index for f in keyframes],
                        diagnostics=diagnostics, output_dir=out or Path("."),
                        semantic_map=smap)


def _direct_answer(config, keyframes, backend, out, diagnostics) -> RunArtifacts:
    """Raw-keyframes ablation: no map, per-frame information only."""
    import re

    prompt = f"{_DIRECT_QA_INSTRUCTION}\n\nQuestion: {config.question}"
    reply = backend.vlm_query([f.image for f in keyframes], prompt)
    m = re.search(r"\(([A-F])\)", reply)
    _write(out, "answer.json", json.dumps(
        {"text": reply, "choice": m.group(1) if m else None}, indent=1, sort_keys=True))
    _write(out, "diagnostics.json", json.dumps(diagnostics, indent=1, sort_keys=True))
    return RunArtifacts(answer_text=reply, answer_choice=m.group(1) if m else None,
                        map_json=None, prompt_text=None,
                        keyframes=[f.index for f in keyframes],
                        diagnostics=diagnostics, output_dir=out or Path("."))


# --- benchmark driver --------------------------------------------------------

DEFAULT_QA_KINDS = ("relative_direction", "relative_distance")


def evaluate_scene(bundle: SceneBundle, config: RunConfig, questions,
                   backend=None) -> EvalReport:
    """Run the pipeline per question on one scene and score everything."""
    backend = backend or build_backend(config, bundle)
    correct, mras = [], []
    wall = 0.0
    fidelity = None
    keyframe_stats = None
    for item in questions:
        cfg = RunConfig.from_dict({})
        for name in ("keyframe", "kernel", "map", "noise"):
            setattr(cfg, name, getattr(config, name))
        cfg.seed = config.seed
        cfg.mode = config.mode
        cfg.question = item.question
        t0 = time.perf_counter()
        art = run_on_bundle(cfg, bundle, backend=backend)
        wall += time.perf_counter() - t0
        if item.answer is not None:
            correct.append(1.0 if art.answer_choice == item.answer else 0.0)
        elif item.answer_value is not None:
            try:
                pred = float(art.answer_text.split()[0])
            except (ValueError, IndexError):
                pred = np.nan
            from .bench.metrics import eval_mra
            mras.append(0.0 if np.isnan(pred) else eval_mra(pred, item.answer_value))
        if fidelity is None and art.map_json is not None and config.mode == "map":
            fidelity = _score_map(art, bundle, config)
            keyframe_stats = _score_keyframes(art, item.question, bundle, backend, config)
    report = EvalReport(
        keyframe=keyframe_stats or {},
        alignment={},
        map={k: fidelity[k] for k in ("bbox_center_err_m", "bev_iou")} if fidelity else {},
        qa={"accuracy": float(np.mean(correct)) if correct else 1.0,
            "mra": float(np.mean(mras)) if mras else 1.0,
            "wall_time_s": wall},
    )
    report.validate()
    return report


def _score_map(art: RunArtifacts, bundle: SceneBundle, config: RunConfig) -> dict:
    origin_frame = art.diagnostics.get("map_origin_frame")
    origin_pose = bundle.truth.poses[origin_frame]
    # Task maps are only accountable for the labels they grounded.
    entries = art.semantic_map.objects
    labels = {e.label for e in entries}
    return map_fidelity(entries, bundle.scene, origin_pose, config.map.cell_size,
                        labels=labels, method="points")


def _score_keyframes(art: RunArtifacts, question: str, bundle: SceneBundle, backend,
                     config: RunConfig) -> dict:
    # Oracle reference: exhaustive scoring of every frame.
    frames = bundle.frame_records()
    grounding = ground_task(question, frames, config.n_ground_frames, backend)
    scores = [score_frame(f, grounding, backend).likelihood for f in frames]
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    oracle = sorted(int(i) for i in order[: len(art.keyframes)])
    p, r, f1 = eval_keyframes(art.keyframes, oracle)
    return {"precision": p, "recall": r, "f1": f1}


def run_bench(out_dir, repeats: int = 1, seed: int = 0, cells=None,
              kinds=DEFAULT_QA_KINDS, questions_per_scene: int = 6,
              config: RunConfig | None = None) -> dict:
    """Complexity-grid driver: generate scenes, run the pipeline, aggregate.

    ``cells`` is a list of {"objects","scale","duration"} level mappings
    (defaults to the full 3x3x3 grid). Failed cells are recorded and do
    not abort the others. Writes report.json and report.txt to out_dir.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cells is None:
        levels = ("low", "med", "high")
        cells = [{"objects": o, "scale": s, "duration": d}
                 for o in levels for s in levels for d in levels]
    base = config or RunConfig()
    results = {}
    for cell in cells:
        key = "-".join(cell[a] for a in ("objects", "scale", "duration"))
        per_seed = []
        for rep in range(repeats):
            key_code = zlib.crc32(key.encode()) & 0xFFFF
            cell_seed = int(np.random.default_rng([seed, rep, key_code]).integers(2**31))
            try:
                bundle = generate_scene(cell, seed=cell_seed)
                questions = generate_questions(bundle, kinds, questions_per_scene,
                                               seed=cell_seed)
                report = evaluate_scene(bundle, base, questions)
                per_seed.append(report)
            except (PlacementFailure, EgomapError) as exc:
                logger.warning("cell %s rep %s failed: %s", key, rep, exc)
                results.setdefault(key, {"failed": []})
                results[key].setdefault("failed", []).append(str(exc))
        if per_seed:
            agg = {}
            for section in ("keyframe", "map", "qa"):
                keys = set()
                for r in per_seed:
                    keys |= set(getattr(r, section))
                agg[section] = {
                    k: {"mean": float(np.mean([getattr(r, section)[k] for r in per_seed
                                               if k in getattr(r, section)])),
                        "std": float(np.std([getattr(r, section)[k] for r in per_seed
                                             if k in getattr(r, section)]))}
                    for k in sorted(keys)
                }
            results.setdefault(key, {}).update(agg)
    (out / "report.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    lines = []
    for key in sorted(results):
        lines.append(key)
        for section, vals in sorted(results[key].items()):
            if section == "failed":
                lines.append(f"  failed: {len(vals)}")
                continue
            for metric, stat in sorted(vals.items()):
                lines.append(f"  {section}.{metric}: {stat['mean']:.4f} +- {stat['std']:.4f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    return results
