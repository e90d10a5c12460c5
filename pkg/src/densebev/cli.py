"""Command-line interface.

Exit codes: 0 success, 2 missing file or parse error, 3 invalid flags or
configuration, 4 non-finite training loss, 1 failed gradient check.
"""
from __future__ import annotations

import argparse
import json
import math
import statistics
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_PARSE = 2
EXIT_USAGE = 3
EXIT_NAN = 4

MODE_ALIASES = {"plain": "plain", "class": "class_aware", "scale": "scale", "class+scale": "class_aware+scale"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_USAGE, f"{self.prog}: {message}")


def _read_text(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_PARSE, f"no such file: {path}")
    return p.read_text()


def _emit(obj, out=None):
    from .io import dumps
    line = dumps(obj)
    if out:
        Path(out).write_text(line + "\n")
    print(line)


# ---------------------------------------------------------------------------
# nms / mask


def _parse_factors(text):
    if text is None:
        return None
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise CliError(EXIT_USAGE, f"bad --scale-factors {text!r}") from None


def _load_dets(path):
    from .io import ParseError, parse_detections
    try:
        return parse_detections(_read_text(path))
    except ParseError as e:
        raise CliError(EXIT_PARSE, f"{path}: {e}") from None


def cmd_nms(args) -> int:
    from .io import format_detections
    from .suppression import Prefilter, bev_nms_class_aware, confidence_order

    mode = MODE_ALIASES.get(args.mode)
    if mode is None:
        raise CliError(EXIT_USAGE, f"unknown --mode {args.mode!r}")
    if not 0.0 <= args.tau <= 1.0:
        raise CliError(EXIT_USAGE, f"--tau must lie in [0, 1], got {args.tau}")
    factors = _parse_factors(args.scale_factors)
    if "scale" in mode and factors is None:
        raise CliError(EXIT_USAGE, "--mode with scale requires --scale-factors")
    if "scale" not in mode and factors is not None:
        raise CliError(EXIT_USAGE, "--scale-factors given without a scale mode")
    try:
        pre = Prefilter.parse(args.prefilter)
    except ValueError as e:
        raise CliError(EXIT_USAGE, str(e)) from None

    header, dets = _load_dets(args.input)
    conf = np.array([d.confidence for d in dets])
    src = np.array([d.source_index for d in dets], dtype=np.int64)
    cand = pre.select(conf, src) if dets else np.zeros(0, dtype=np.int64)
    try:
        keep_local = bev_nms_class_aware([dets[i] for i in cand], args.tau, mode, factors,
                                         heuristics=not args.no_heuristics)
    except ValueError as e:
        raise CliError(EXIT_USAGE, str(e)) from None
    keep = cand[keep_local]
    order = keep[confidence_order(conf[keep], src[keep])]
    kept = [dets[i] for i in order]
    classes = header.get("classes") if header else None
    grid = header.get("grid") if header else None
    text = format_detections(kept, classes, grid)
    if args.output:
        Path(args.output).write_text(text)
        Path(str(args.output) + ".keep.json").write_text(json.dumps(sorted(int(i) for i in keep)) + "\n")
    else:
        sys.stdout.write(text)
    print(f"kept {len(kept)} of {len(dets)} ({len(cand)} after prefilter)", file=sys.stderr)
    return EXIT_OK


def _parse_index_list(text):
    if not text.strip():
        return []
    try:
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise CliError(EXIT_USAGE, f"bad index list {text!r}") from None


def cmd_mask(args) -> int:
    from .suppression import bev_nms, build_attention_mask, merge_mask

    if (args.input is None) == (args.keep is None):
        raise CliError(EXIT_USAGE, "give exactly one of --input or --keep")
    if args.input is not None:
        _, dets = _load_dets(args.input)
        n_q = len(dets)
        keep = bev_nms(dets, args.tau)
    else:
        if args.n_q is None:
            raise CliError(EXIT_USAGE, "--keep needs --n-q")
        n_q = args.n_q
        keep = _parse_index_list(args.keep)
    try:
        mask = build_attention_mask(keep, n_q)
        for extra in args.merge or []:
            mask = merge_mask(mask, _parse_index_list(extra))
    except IndexError as e:
        raise CliError(EXIT_USAGE, str(e)) from None
    bits = mask.bits.astype(int)
    _emit({"n_q": n_q, "keep": [int(i) for i in mask.active_indices()],
           "suppressed_bits": int(bits.sum()), "bits": ["".join(map(str, r)) for r in bits]}, args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _parse_grid(text):
    try:
        n, m = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise CliError(EXIT_USAGE, f"bad --grid {text!r}; expected NxM") from None
    if n < 1 or m < 1:
        raise CliError(EXIT_USAGE, "grid dimensions must be positive")
    return n, m


def cmd_simulate(args) -> int:
    from .io import write_scenes
    from .training.scenes import PackingError, SceneConfig, generate_dataset

    n, m = _parse_grid(args.grid)
    if args.frames < 1 or args.sequences < 1:
        raise CliError(EXIT_USAGE, "--frames and --sequences must be >= 1")
    cfg = SceneConfig(grid_n=n, grid_m=m, extent_x=m * args.cell / 2, extent_y=n * args.cell / 2,
                      noise=args.noise, ego_speed=args.ego_speed, dt=args.dt)
    try:
        data = generate_dataset(args.seed, args.sequences, cfg, args.frames)
    except PackingError as e:
        raise CliError(EXIT_USAGE, str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "scenes.jsonl"
    write_scenes(path, data, {"seed": args.seed, "grid": [n, m], "extent": [cfg.extent_x, cfg.extent_y],
                              "classes": ["car", "small"]})
    print(f"wrote {sum(len(s) for s in data)} frames to {path}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval


SCENE_KEYS = {"num_train": 400, "num_test": 20, "frames": 1, "data_seed": 0, "test_seed": 99,
              "noise": 0.05, "min_objects": 4, "max_objects": 10, "ego_speed": 0.0, "dt": 0.5,
              "small_fraction": 0.5}


def _coerce(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(float(x) for x in raw.split(",") if x.strip())
    return raw


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines (``#`` comments) into model/train/scene dicts."""
    from .model import DenseBEVConfig
    from .training.trainer import TrainConfig

    model_defaults = {f.name: getattr(DenseBEVConfig(), f.name) for f in fields(DenseBEVConfig)}
    train_defaults = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}
    known = {**model_defaults, **train_defaults, **SCENE_KEYS}
    model, train, scene = {}, {}, {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise CliError(EXIT_PARSE, f"config line {n}: expected key = value")
        if key not in known:
            raise CliError(EXIT_USAGE, f"config line {n}: unknown key {key!r}")
        try:
            v = _coerce(value, known[key])
        except ValueError as e:
            raise CliError(EXIT_USAGE, f"config line {n}: {key}: {e}") from None
        if key in model_defaults:
            model[key] = v
        if key in train_defaults:
            train[key] = v
        if key in SCENE_KEYS:
            scene[key] = v
    return {"model": model, "train": train, "scene": {**SCENE_KEYS, **scene}}


def scene_config_for(model_cfg, scene: dict):
    from .training.scenes import SceneConfig
    f = scene["small_fraction"]
    return SceneConfig(grid_n=model_cfg.grid_n, grid_m=model_cfg.grid_m, extent_x=model_cfg.extent_x,
                       extent_y=model_cfg.extent_y, noise=scene["noise"],
                       num_objects=(scene["min_objects"], scene["max_objects"]),
                       class_probs=(1.0 - f, f), ego_speed=scene["ego_speed"], dt=scene["dt"])


def cmd_train(args) -> int:
    from .io import dumps, save_checkpoint, write_scenes
    from .model import DenseBEV, DenseBEVConfig
    from .training.scenes import generate_dataset
    from .training.trainer import NonFiniteLoss, TrainConfig, evaluate_model, train

    parsed = parse_config(_read_text(args.config)) if args.config else parse_config("")
    try:
        mcfg = DenseBEVConfig(**parsed["model"])
        tcfg = TrainConfig(**parsed["train"])
        if tcfg.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {tcfg.optimizer!r}")
    except (ValueError, TypeError) as e:
        raise CliError(EXIT_USAGE, str(e)) from None
    sc = parsed["scene"]
    scfg = scene_config_for(mcfg, sc)
    if args.data:
        from .io import read_scenes
        _, train_data = read_scenes(args.data)
    else:
        train_data = generate_dataset(sc["data_seed"], sc["num_train"], scfg, sc["frames"])
    test_data = generate_dataset(sc["test_seed"], sc["num_test"], scfg, sc["frames"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = (out / "metrics.jsonl").open("w")

    def on_epoch(rec):
        log.write(dumps(rec) + "\n")
        log.flush()

    def on_log(rec):
        if not args.quiet:
            print(f"step {rec['step']} loss {rec['loss']:.4f}", file=sys.stderr)

    model = DenseBEV(mcfg)
    try:
        history = train(model, train_data, tcfg, on_log=on_log, on_epoch=on_epoch)
    except NonFiniteLoss as e:
        log.write(dumps({"error": "non-finite loss", "step": e.step}) + "\n")
        log.close()
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NAN
    metrics = evaluate_model(model, test_data, args.iou)
    summary = {"final": True, "steps": len(history), "initial_loss": history[0] if history else None,
               "final_loss": float(np.mean(history[-20:])) if history else None,
               **{k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in metrics.items()}}
    log.write(dumps(summary) + "\n")
    log.close()
    save_checkpoint(out / "model.json", model)
    write_scenes(out / "test_scenes.jsonl", test_data)
    _emit(summary)
    return EXIT_OK


def _group_predictions(text):
    from .io import ParseError, record_to_detection
    frames = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise CliError(EXIT_PARSE, f"line {n}: invalid JSON: {e.msg}") from None
        if rec.get("type") == "header":
            continue
        try:
            det = record_to_detection(rec)
        except (KeyError, TypeError, ValueError) as e:
            raise CliError(EXIT_PARSE, f"line {n}: bad detection record: {e}") from None
        frames.setdefault((int(rec.get("sequence", 0)), int(rec.get("frame", 0))), []).append(det)
    return frames


def cmd_eval(args) -> int:
    from .geometry import boxes_to_array
    from .io import ParseError, load_checkpoint, read_scenes
    from .training.metrics import evaluate_many
    from .training.trainer import predict_sequences

    if (args.model is None) == (args.predictions is None):
        raise CliError(EXIT_USAGE, "give exactly one of --model or --predictions")
    if not 0.0 < args.iou < 1.0:
        raise CliError(EXIT_USAGE, f"--iou must lie in (0, 1), got {args.iou}")
    _read_text(args.data)
    try:
        _, data = read_scenes(args.data)
    except ParseError as e:
        raise CliError(EXIT_PARSE, f"{args.data}: {e}") from None
    if args.model:
        _read_text(args.model)
        try:
            model = load_checkpoint(args.model)
        except (ParseError, KeyError) as e:
            raise CliError(EXIT_PARSE, f"{args.model}: {e}") from None
        frames = predict_sequences(model, data, args.score_threshold)
    else:
        preds = _group_predictions(_read_text(args.predictions))
        frames = []
        for s, seq in enumerate(data):
            for f, scene in enumerate(seq):
                dets = [d for d in preds.get((s, f), []) if d.confidence >= (args.score_threshold or 0.0)]
                frames.append((boxes_to_array([d.box for d in dets]), np.array([d.confidence for d in dets]),
                               np.array([d.label for d in dets], dtype=np.int64),
                               boxes_to_array(scene.gt_boxes), scene.gt_labels))
    metrics = evaluate_many(frames, args.iou, use_labels=not args.class_agnostic)
    _emit({k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in metrics.items()},
          args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / bench


def cmd_gradcheck(args) -> int:
    from .diagnostics import GRAD_TOL, run_all

    results = run_all(args.seed)
    worst = 0.0
    for name, err in results.items():
        status = "ok" if err <= args.tol else "FAIL"
        print(f"{name:32s} {err:.3e} {status}")
        worst = max(worst, err)
    print(f"max error {worst:.3e} (tolerance {args.tol:.0e})")
    return EXIT_OK if worst <= args.tol else EXIT_CHECK_FAILED


def bench_candidates(n: int, seed: int = 0, extent: float = 51.2):
    """Synthetic dense-grid candidates: one jittered box per cell of a square grid."""
    rng = np.random.default_rng(seed)
    side = int(math.ceil(math.sqrt(n)))
    cell = 2 * extent / side
    idx = np.arange(n)
    cx = (idx % side + 0.5) * cell - extent + rng.normal(0, 0.3 * cell, n)
    cy = (idx // side + 0.5) * cell - extent + rng.normal(0, 0.3 * cell, n)
    w = cell * rng.uniform(0.6, 2.5, n)
    l = w * rng.uniform(1.0, 2.5, n)
    yaw = rng.uniform(-math.pi, math.pi, n)
    conf = rng.random(n)
    return np.column_stack([cx, cy, w, l, yaw]), conf


def run_bench(n: int, repeats: int, tau: float = 0.1, seed: int = 0) -> dict:
    from .suppression import nms_arrays

    boxes, conf = bench_candidates(n, seed)
    nms_arrays(boxes[:16], conf[:16], tau)  # compile outside the timed region
    report = {"candidates": n, "repeats": repeats, "tau": tau}
    keeps = {}
    for label, heur in (("heuristics_on", True), ("heuristics_off", False)):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            keep = nms_arrays(boxes, conf, tau, heuristics=heur)
            times.append(time.perf_counter() - t0)
        keeps[label] = keep
        times.sort()
        report[label] = {"median_s": statistics.median(times),
                         "p95_s": times[min(len(times) - 1, math.ceil(0.95 * len(times)) - 1)],
                         "kept": int(len(keep))}
    report["identical_keep_sets"] = bool(np.array_equal(keeps["heuristics_on"], keeps["heuristics_off"]))
    report["speedup"] = report["heuristics_off"]["median_s"] / report["heuristics_on"]["median_s"]
    return report


def cmd_bench(args) -> int:
    if args.candidates < 1 or args.repeats < 1:
        raise CliError(EXIT_USAGE, "--candidates and --repeats must be >= 1")
    if args.threads != 1:
        raise CliError(EXIT_USAGE, "only --threads 1 is supported")
    _emit(run_bench(args.candidates, args.repeats, args.tau, args.seed), args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="densebev", description="Dense BEV query pipeline toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("nms", help="suppress duplicates in a detection dump")
    s.add_argument("--input", required=True)
    s.add_argument("--tau", type=float, default=0.1)
    s.add_argument("--mode", default="plain", help="plain, class, scale or class+scale")
    s.add_argument("--scale-factors", help="comma-separated per-class factors")
    s.add_argument("--prefilter", default="none", help="none, topk:K or conf:T")
    s.add_argument("--no-heuristics", action="store_true")
    s.add_argument("--output")
    s.set_defaults(func=cmd_nms)

    s = sub.add_parser("mask", help="build a suppression mask")
    s.add_argument("--input", help="detections to suppress with NMS")
    s.add_argument("--tau", type=float, default=0.1)
    s.add_argument("--keep", help="comma-separated kept indices")
    s.add_argument("--n-q", type=int)
    s.add_argument("--merge", action="append", help="further keep lists merged in order")
    s.add_argument("--output")
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("simulate", help="generate synthetic scene sequences")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=1)
    s.add_argument("--sequences", type=int, default=1)
    s.add_argument("--grid", default="32x32")
    s.add_argument("--cell", type=float, default=1.0, help="cell size in metres")
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--ego-speed", type=float, default=0.0)
    s.add_argument("--dt", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train the toy model")
    s.add_argument("--config")
    s.add_argument("--data", help="scenes file; generated from the config when omitted")
    s.add_argument("--out", required=True)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint or a prediction dump")
    s.add_argument("--model")
    s.add_argument("--predictions")
    s.add_argument("--data", required=True)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--score-threshold", type=float)
    s.add_argument("--class-agnostic", action="store_true")
    s.add_argument("--output")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="time BEV-NMS with and without pruning heuristics")
    s.add_argument("--candidates", type=int, default=40000)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--tau", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--output")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except SystemExit as e:  # --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
