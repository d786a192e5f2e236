"""Command-line entry point: one subcommand per pipeline stage.

Every run writes into a fresh output directory (built under a temporary name
and renamed into place on success) together with ``run_config.json``, the
fully resolved configuration. Options resolve as: command-line flag, then
the matching key of ``--config``, then the built-in default.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import dataset as ds
from .bboxprep import ROI_SIZE, box_from_corners, preprocess_roi
from .classifier import checkpoint
from .classifier.network import NetConfig
from .classifier.optim import TrainConfig
from .classifier.training import decide, evaluate, predict_proba, train, write_history_csv
from .errors import FlowMotionError
from .flowcore import load_flow, render_colorwheel, save_flow, save_png
from .flowestim import HsConfig, estimate_flow, load_gray
from .synth import SuiteConfig, generate, make_suite, write_scene

log = logging.getLogger("flowmotion")

RUN_CONFIG = "run_config.json"
MANIFEST = "manifest.jsonl"
CHECKPOINT = "model.fmck"
HISTORY = "history.csv"
METRICS = "metrics.json"

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _resolve(args: argparse.Namespace, file_cfg: Dict[str, Any], defaults: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(defaults)
    for key in defaults:
        if key in file_cfg:
            out[key] = file_cfg[key]
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
    return out


def _load_config(path: Optional[str], section: str) -> Dict[str, Any]:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    with open(p) as fh:
        cfg = json.load(fh)
    # a config file may be flat or keyed by subcommand
    return dict(cfg.get(section, cfg)) if isinstance(cfg, dict) else {}


class _RunDir:
    """Output directory populated under a temporary name and renamed on success."""

    def __init__(self, out: str):
        self.final = Path(out).resolve()
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.path = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.", dir=self.final.parent))

    def commit(self, resolved: Dict[str, Any]) -> Path:
        (self.path / RUN_CONFIG).write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n")
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.path, self.final)
        return self.final

    def abort(self) -> None:
        shutil.rmtree(self.path, ignore_errors=True)


def _scene_dirs(paths: Sequence[str]) -> List[Path]:
    """Expand each argument to scene directories (a dir with meta.json, or a root of them)."""
    found: List[Path] = []
    for raw in paths:
        p = Path(raw)
        if (p / ds.META_FILE).is_file():
            found.append(p)
        elif p.is_dir():
            subs = sorted(d for d in p.iterdir() if (d / ds.META_FILE).is_file())
            if not subs:
                raise UsageError(f"no scenes found under {p}")
            found.extend(subs)
        else:
            raise UsageError(f"scene path not found: {p}")
    return found


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _pair_mode(every: Optional[int]) -> ds.PairMode:
    return ds.KEYFRAMES if not every else int(every)


def _load_rois(samples: Sequence[ds.SampleRecord]) -> np.ndarray:
    rois = []
    for s in samples:
        if not s.roi_path:
            raise FlowMotionError(f"sample {s.scene_id}/{s.object_id} has no ROI; run 'preprocess' first")
        rois.append(load_flow(s.roi_path).data.transpose(2, 0, 1))
    return np.ascontiguousarray(np.stack(rois), dtype=np.float32)


def _labels(samples: Sequence[ds.SampleRecord]) -> np.ndarray:
    return np.array([s.label.as_int for s in samples], dtype=np.int64)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, file_cfg, run: _RunDir) -> Dict[str, Any]:
    base = SuiteConfig.threshold() if args.preset == "threshold" else SuiteConfig.separable()
    fields = {f.name: getattr(base, f.name) for f in dataclasses.fields(SuiteConfig)}
    resolved = _resolve(args, file_cfg, fields)
    suite = SuiteConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in resolved.items()})
    for cfg in make_suite(suite):
        write_scene(generate(cfg), run.path)
    return dict(resolved, preset=args.preset)


def cmd_flow(args, file_cfg, run: _RunDir) -> Dict[str, Any]:
    defaults = {"alpha": HsConfig.alpha, "iterations": HsConfig.iterations, "levels": HsConfig.pyramid_levels, "every": None}
    resolved = _resolve(args, file_cfg, defaults)
    hs = HsConfig(resolved["alpha"], resolved["iterations"], resolved["levels"])
    mode = _pair_mode(resolved["every"])
    for scene_dir in _scene_dirs(args.scenes):
        scene = ds.load_scene(scene_dir)
        out_dir = run.path / scene_dir.name
        (out_dir / "flow").mkdir(parents=True)
        heads = {}
        for a, b in ds.build_pairs(scene, mode):
            fa, fb = scene.frames[a], scene.frames[b]
            flow = estimate_flow(load_gray(scene.resolve(fa.image_ref)), load_gray(scene.resolve(fb.image_ref)), hs)
            ref = f"flow/{a:06d}.npy"
            save_flow(flow, out_dir / ref)
            heads[a] = ref
            log.info("flow %s frame %d -> %d", scene.scene_id, a, b)
        final_dir = run.final / scene_dir.name
        frames = tuple(
            dataclasses.replace(
                f,
                image_ref=os.path.relpath(scene.resolve(f.image_ref).resolve(), final_dir),
                flow_ref=heads.get(i),
            )
            for i, f in enumerate(scene.frames)
        )
        ds.save_scene(dataclasses.replace(scene, frames=frames), out_dir)
    return dict(resolved, scenes=[str(Path(s).resolve()) for s in args.scenes])


def _criteria(args, file_cfg) -> ds.FilterCriteria:
    base = ds.FilterCriteria.generalized() if args.generalized else ds.FilterCriteria()
    fields = base.to_json()
    resolved = _resolve(args, file_cfg.get("criteria", {}), fields)
    return ds.FilterCriteria.from_json(resolved)


def cmd_filter(args, file_cfg, run: _RunDir) -> Dict[str, Any]:
    defaults = {"every": None, "eval_fraction": 0.2, "seed": 0, "threshold": 2.0}
    resolved = _resolve(args, file_cfg, defaults)
    criteria = _criteria(args, file_cfg)
    scenes = [ds.load_scene(p) for p in _scene_dirs(args.scenes)]
    kept = ds.filter_scenes(scenes, criteria)
    samples: List[ds.SampleRecord] = []
    for scene in kept:
        samples.extend(ds.build_samples(scene, criteria, _pair_mode(resolved["every"]), resolved["threshold"]))
    if not samples:
        raise FlowMotionError("no samples survive filtering")
    samples = ds.split_samples(samples, resolved["eval_fraction"], resolved["seed"])
    ds.write_manifest(samples, run.path / MANIFEST)
    n_eval = sum(s.split is ds.Split.EVAL for s in samples)
    log.info("%d scenes kept of %d; %d samples (%d eval)", len(kept), len(scenes), len(samples), n_eval)
    return dict(resolved, criteria=criteria.to_json(), scenes=[str(Path(s).resolve()) for s in args.scenes])


def cmd_preprocess(args, file_cfg, run: _RunDir) -> Dict[str, Any]:
    resolved = _resolve(args, file_cfg, {"roi_size": ROI_SIZE})
    samples = ds.read_manifest(_require_file(args.manifest, "manifest"))
    (run.path / "rois").mkdir()
    out = []
    cache: Dict[str, Any] = {}
    for i, s in enumerate(samples):
        if not s.flow_path:
            raise FlowMotionError(f"sample {s.scene_id}/{s.object_id} has no flow file")
        if s.flow_path not in cache:
            cache = {s.flow_path: load_flow(s.flow_path)}
        roi = preprocess_roi(cache[s.flow_path], s.roi_box, resolved["roi_size"])
        name = f"rois/{i:06d}.npy"
        save_flow(roi, run.path / name)
        out.append(dataclasses.replace(s, roi_path=str(run.final / name)))
    ds.write_manifest(out, run.path / MANIFEST)
    return dict(resolved, manifest=str(Path(args.manifest).resolve()))


def _net_config(resolved: Dict[str, Any], roi_size: int) -> NetConfig:
    if resolved["net"] == "resnet18":
        return dataclasses.replace(NetConfig.resnet18(), input_size=roi_size)
    return NetConfig.tiny(resolved["width"], roi_size)


def cmd_train(args, file_cfg, run: _RunDir) -> Dict[str, Any]:
    tc = TrainConfig()
    defaults = {
        "epochs": tc.epochs, "batch_size": tc.batch_size, "lr": tc.learning_rate, "wd": tc.weight_decay,
        "momentum": tc.momentum, "step_size": tc.step_size, "gamma": tc.gamma, "seed": tc.seed,
        "flip_p": tc.flip_probability, "net": "resnet18", "width": 8,
    }
    resolved = _resolve(args, file_cfg, defaults)
    samples = ds.read_manifest(_require_file(args.manifest, "manifest"))
    train_s = [s for s in samples if s.split is not ds.Split.EVAL]
    eval_s = [s for s in samples if s.split is ds.Split.EVAL]
    if not train_s:
        raise FlowMotionError("manifest has no training samples")
    x_train = _load_rois(train_s)
    eval_set = (_load_rois(eval_s), _labels(eval_s)) if eval_s else None
    net_cfg = _net_config(resolved, x_train.shape[-1])
    train_cfg = TrainConfig(
        batch_size=resolved["batch_size"], learning_rate=resolved["lr"], weight_decay=resolved["wd"],
        momentum=resolved["momentum"], step_size=resolved["step_size"], gamma=resolved["gamma"],
        epochs=resolved["epochs"], seed=resolved["seed"], flip_probability=resolved["flip_p"],
    )
    result = train((x_train, _labels(train_s)), eval_set, net_cfg, train_cfg)
    checkpoint.save(run.path / CHECKPOINT, result.params, result.momentum, {"train": train_cfg.to_dict()})
    write_history_csv(result.history, run.path / HISTORY)
    return dict(resolved, manifest=str(Path(args.manifest).resolve()), net_config=net_cfg.to_dict())


def cmd_eval(args, file_cfg, run: _RunDir) -> Dict[str, Any]:
    resolved = _resolve(args, file_cfg, {"split": "eval"})
    params, _, _ = checkpoint.load(_require_file(args.checkpoint, "checkpoint"))
    samples = ds.read_manifest(_require_file(args.manifest, "manifest"))
    if resolved["split"] != "all":
        samples = [s for s in samples if (s.split or ds.Split.TRAIN).value == resolved["split"]]
    if not samples:
        raise FlowMotionError(f"no samples in split {resolved['split']!r}")
    rep = evaluate(params, _load_rois(samples), _labels(samples))
    (run.path / METRICS).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    print(json.dumps(rep, sort_keys=True))
    return dict(resolved, checkpoint=str(Path(args.checkpoint).resolve()), manifest=str(Path(args.manifest).resolve()))


STILL_COLOR = (0, 0, 255)
MOVING_COLOR = (255, 0, 0)


def cmd_infer(args, file_cfg, run: _RunDir) -> Dict[str, Any]:
    from PIL import Image, ImageDraw

    params, _, _ = checkpoint.load(_require_file(args.checkpoint, "checkpoint"))
    criteria = _criteria(args, file_cfg)
    size = params.config.input_size
    predictions = []
    (run.path / "frames").mkdir()
    for scene_dir in _scene_dirs(args.scenes):
        scene = ds.load_scene(scene_dir)
        for frame in scene.frames:
            if not frame.flow_ref:
                continue
            flow = load_flow(scene.resolve(frame.flow_ref))
            anns = ds.filter_annotations(frame, criteria)
            boxes = [box_from_corners(a.corners) for a in anns]
            rois = [preprocess_roi(flow, b, size).data.transpose(2, 0, 1) for b in boxes]
            probs = predict_proba(params, np.stack(rois)) if rois else []
            with Image.open(scene.resolve(frame.image_ref)) as im:
                canvas = im.convert("RGB")
            draw = ImageDraw.Draw(canvas)
            for ann, box, prob in zip(anns, boxes, probs):
                label = decide(float(prob))
                color = MOVING_COLOR if label.as_int else STILL_COLOR
                draw.rectangle([box.xmin, box.ymin, box.xmax - 1, box.ymax - 1], outline=color)
                predictions.append({
                    "scene_id": scene.scene_id, "timestamp": frame.timestamp, "object_id": ann.object_id,
                    "probability": float(prob), "label": label.value,
                })
            canvas.save(run.path / "frames" / f"{scene.scene_id}_{frame.timestamp}.png", format="PNG")
    ds_path = run.path / "predictions.jsonl"
    ds_path.write_text("".join(json.dumps(p, sort_keys=True) + "\n" for p in predictions))
    return {"checkpoint": str(Path(args.checkpoint).resolve()), "criteria": criteria.to_json()}


def cmd_render(args, file_cfg, run: _RunDir) -> Dict[str, Any]:
    resolved = _resolve(args, file_cfg, {"max_magnitude": None})
    flow = load_flow(_require_file(args.flow, "flow file"))
    save_png(render_colorwheel(flow, resolved["max_magnitude"]), run.path / (Path(args.flow).stem + ".png"))
    return dict(resolved, flow=str(Path(args.flow).resolve()))


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_criteria_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--generalized", action="store_true", help="admit vehicles closer than 30 m")
    p.add_argument("--min-distance", dest="min_distance", type=float)
    p.add_argument("--max-distance", dest="max_distance", type=float)
    p.add_argument("--min-visibility", dest="min_visibility", type=float)
    p.add_argument("--max-visibility", dest="max_visibility", type=float)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flat, or keyed by subcommand)")
    common.add_argument("--out", required=True, help="output directory (replaced if it exists)")
    common.add_argument("--seed", type=int)

    parser = argparse.ArgumentParser(prog="flowmotion", description="Optical-flow motion classification pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic scenes")
    p.add_argument("--preset", choices=("separable", "threshold"), default="separable")
    p.add_argument("--n-moving", dest="n_moving", type=int)
    p.add_argument("--n-still", dest="n_still", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--keyframe-every", dest="keyframe_every", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("flow", parents=[common], help="estimate optical flow for frame pairs")
    p.add_argument("scenes", nargs="+", help="scene directories or roots containing them")
    p.add_argument("--alpha", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--every", type=int, help="pair frames n apart instead of consecutive keyframes")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("filter", parents=[common], help="filter annotations and write a sample manifest")
    p.add_argument("scenes", nargs="+")
    _add_criteria_flags(p)
    p.add_argument("--every", type=int)
    p.add_argument("--eval-fraction", dest="eval_fraction", type=float)
    p.add_argument("--threshold", type=float, help="speed threshold in m/s")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("preprocess", parents=[common], help="crop and resize ROIs")
    p.add_argument("manifest")
    p.add_argument("--roi-size", dest="roi_size", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train the classifier")
    p.add_argument("manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--wd", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--step-size", dest="step_size", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--flip-p", dest="flip_p", type=float)
    p.add_argument("--net", choices=("resnet18", "tiny"))
    p.add_argument("--width", type=int, help="channel width of the tiny network")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    p.add_argument("manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "eval", "all"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="draw predictions onto scene frames")
    p.add_argument("scenes", nargs="+")
    p.add_argument("--checkpoint", required=True)
    _add_criteria_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("render", parents=[common], help="color-wheel visualization of a flow file")
    p.add_argument("flow")
    p.add_argument("--max-magnitude", dest="max_magnitude", type=float)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=os.environ.get("FLOWMOTION_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        file_cfg = _load_config(args.config, args.command)
        run = _RunDir(args.out)
    except (UsageError, json.JSONDecodeError) as exc:
        print(f"flowmotion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        resolved = args.func(args, file_cfg, run)
        resolved = {"command": args.command, "version": __version__, **resolved}
        if args.seed is not None:
            resolved["seed"] = args.seed
        run.commit(resolved)
    except UsageError as exc:
        run.abort()
        print(f"flowmotion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FlowMotionError, ValueError, OSError) as exc:
        run.abort()
        print(f"flowmotion {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
