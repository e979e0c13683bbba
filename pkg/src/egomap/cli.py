"""Command-line entry points: run, bench, scene, eval, render."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import EgomapError
from .pipeline import DEFAULT_QA_KINDS, RunConfig, run_bench, run_pipeline


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file; flags override file values")
    p.add_argument("--frames-dir", help="frame directory or scene bundle")
    p.add_argument("--question", help="natural-language spatial question")
    p.add_argument("--output-dir", help="artifact directory (default: out)")
    p.add_argument("--seed", type=int, help="run seed (default: 0)")
    p.add_argument("--mode", choices=["map", "direct"],
                   help="map = full pipeline; direct = raw-keyframe ablation")
    p.add_argument("--backend", action="append", metavar="CAP=SPEC", default=None,
                   help="per-capability backend, e.g. depth=synthetic or "
                        "vlm=remote:http://host:8000 (repeatable; CAP 'all' sets the default)")
    p.add_argument("--budget", type=int, help="key-frame budget (default: 25)")
    p.add_argument("--threshold", type=float,
                   help="likelihood-score selection threshold (default: 1.5)")
    p.add_argument("--iterations", type=int,
                   help="temporal-search iterations (default: 20)")
    p.add_argument("--batch", type=int,
                   help="frames scored per iteration (default: ceil(N/20))")
    p.add_argument("--alpha", type=float,
                   help="kernel mass fraction within +-k sigma (default: 0.9545)")
    p.add_argument("--window-r", type=int,
                   help="kernel time-window radius in frames (default: 3)")
    p.add_argument("--cell-size", type=float,
                   help="map grid cell size in meters (default: 0.25)")
    p.add_argument("--depth-sigma", type=float,
                   help="synthetic relative depth noise (default: 0)")
    p.add_argument("--segment-dropout", type=float,
                   help="synthetic segmentation dropout rate (default: 0)")


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.frames_dir:
        cfg.frames_dir = args.frames_dir
    if args.question:
        cfg.question = args.question
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mode:
        cfg.mode = args.mode
    if args.backend:
        for spec in args.backend:
            cap, _, value = spec.partition("=")
            cfg.backend[cap] = value
    for flag, section, name in [
        ("budget", "keyframe", "budget"), ("threshold", "keyframe", "threshold"),
        ("iterations", "keyframe", "iterations"), ("batch", "keyframe", "batch"),
        ("alpha", "kernel", "alpha"), ("window_r", "kernel", "window_r"),
        ("cell_size", "map", "cell_size"), ("depth_sigma", "noise", "depth_sigma"),
        ("segment_dropout", "noise", "segment_dropout"),
    ]:
        value = getattr(args, flag)
        if value is not None:
            setattr(getattr(cfg, section), name, value)
    return cfg


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    art = run_pipeline(cfg)
    print(f"answer: {art.answer_text}")
    if art.answer_choice:
        print(f"choice: {art.answer_choice}")
    print(f"artifacts: {art.output_dir}")
    return 0


def cmd_scene(args) -> int:
    from .bench.scene import generate_scene, save_bundle

    bundle = generate_scene({"objects": args.objects, "scale": args.scale,
                             "duration": args.duration}, seed=args.seed)
    save_bundle(bundle, args.out)
    if args.questions > 0:
        from .bench.questions import generate_questions

        items = generate_questions(bundle, list(args.kinds), args.questions,
                                   seed=args.seed)
        doc = [{"kind": q.kind, "question": q.question, "choices": q.choices,
                "answer": q.answer, "answer_value": q.answer_value,
                "derivation": q.derivation} for q in items]
        (Path(args.out) / "questions.json").write_text(json.dumps(doc, indent=1))
    print(f"scene bundle written to {args.out} "
          f"({len(bundle.frames)} frames, {len(bundle.scene.objects)} objects)")
    return 0


def cmd_bench(args) -> int:
    levels = {"objects": args.objects.split(","), "scale": args.scale.split(","),
              "duration": args.duration.split(",")}
    cells = [{"objects": o, "scale": s, "duration": d}
             for o in levels["objects"] for s in levels["scale"]
             for d in levels["duration"]]
    results = run_bench(args.out, repeats=args.repeats, seed=args.seed, cells=cells,
                        questions_per_scene=args.questions)
    print((Path(args.out) / "report.txt").read_text())
    return 0 if results else 1


def cmd_eval(args) -> int:
    import numpy as np

    from .bench.metrics import eval_alignment, map_fidelity
    from .bench.scene import load_bundle
    from .geometry import RigidTransform
    from .semmap import map_from_json

    bundle = load_bundle(args.scene)
    art_dir = Path(args.artifacts)
    out = {}
    map_path = art_dir / "map.json"
    if map_path.exists():
        smap = map_from_json(map_path.read_text())
        diag = json.loads((art_dir / "diagnostics.json").read_text())
        origin = bundle.truth.poses[diag["map_origin_frame"]]
        out["map"] = map_fidelity(smap.objects, bundle.scene, origin,
                                   smap.cell_size,
                                   labels={e.label for e in smap.objects},
                                   method="boxes")
    tree_path = art_dir / "tree.json"
    if tree_path.exists():
        doc = json.loads(tree_path.read_text())
        est, truth = [], []
        for p in doc["global_poses"]:
            est.append(RigidTransform(np.asarray(p["R"]).reshape(3, 3),
                                      np.asarray(p["t"])))
            truth.append(bundle.truth.poses[p["frame"]])
        ate, rot = eval_alignment(est, truth)
        out["alignment"] = {"ate_m": ate, "max_rot_err_rad": rot}
    text = json.dumps(out, indent=1, sort_keys=True)
    (art_dir / "eval.json").write_text(text)
    print(text)
    return 0


def cmd_render(args) -> int:
    from .imaging import write_png
    from .semmap import map_from_json, render_prompt

    smap = map_from_json(Path(args.map).read_text())
    prompt = render_prompt(smap, None, args.question)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "map.png", prompt.map_image)
    (out / "prompt.txt").write_text(prompt.text_block)
    print(f"rendered {out / 'map.png'} and {out / 'prompt.txt'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="egomap",
        description="Egocentric frames + a spatial question -> global semantic "
                    "map + VLM answer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the full pipeline on one question")
    _add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_scene = sub.add_parser("scene", help="generate a synthetic scene bundle")
    p_scene.add_argument("--objects", default="low", choices=["low", "med", "high"])
    p_scene.add_argument("--scale", default="low", choices=["low", "med", "high"])
    p_scene.add_argument("--duration", default="low", choices=["low", "med", "high"])
    p_scene.add_argument("--seed", type=int, default=0)
    p_scene.add_argument("--questions", type=int, default=0,
                         help="also generate this many QA items")
    p_scene.add_argument("--kinds", nargs="+", default=list(DEFAULT_QA_KINDS))
    p_scene.add_argument("--out", required=True)
    p_scene.set_defaults(func=cmd_scene)

    p_bench = sub.add_parser("bench", help="run the complexity-grid benchmark")
    p_bench.add_argument("--objects", default="low,med,high")
    p_bench.add_argument("--scale", default="low,med,high")
    p_bench.add_argument("--duration", default="low,med,high")
    p_bench.add_argument("--repeats", type=int, default=1)
    p_bench.add_argument("--questions", type=int, default=6)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", required=True)
    p_bench.set_defaults(func=cmd_bench)

    p_eval = sub.add_parser("eval", help="score saved artifacts against a scene's truth")
    p_eval.add_argument("--scene", required=True, help="scene bundle directory")
    p_eval.add_argument("--artifacts", required=True, help="run output directory")
    p_eval.set_defaults(func=cmd_eval)

    p_render = sub.add_parser("render", help="re-render the prompt from a map JSON")
    p_render.add_argument("--map", required=True)
    p_render.add_argument("--question", default="")
    p_render.add_argument("--out", required=True)
    p_render.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EgomapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
