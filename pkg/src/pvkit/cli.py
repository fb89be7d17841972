"""Command line: generate data, train, detect, evaluate, ablate, self-check.

The toy profile is the default everywhere; ``--config`` applies
key=value overrides on top of the chosen profile and ``--seed``
overrides the seed last. ``PVKIT_THREADS`` caps the scene-generation
worker pool (and, when set before the interpreter loads numpy, the
BLAS thread count).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np

from .checks import run_gradient_checks, run_invariant_checks
from .config import DetectorConfig, load_config, save_config
from .evaluate import evaluate_detections
from .kitti_io import read_labels, read_predictions, write_predictions
from .model import Detector
from .synthetic import (
    EVAL_SPLIT,
    TRAIN_SPLIT,
    generate_dataset,
    list_scene_indices,
    load_scene,
)
from .train import curve_to_csv, train_detector

_PROFILES = {
    "toy": DetectorConfig.toy,
    "full": DetectorConfig,
    "ablation": DetectorConfig.ablation,
}


def _workers() -> int:
    raw = os.environ.get("PVKIT_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _resolve_config(args) -> DetectorConfig:
    cfg = _PROFILES[args.profile]()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _add_common(sub, default_profile: str = "toy") -> None:
    sub.add_argument("--profile", choices=sorted(_PROFILES), default=default_profile,
                     help="base configuration profile")
    sub.add_argument("--config", default=None, help="key=value override file")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")


def _load_split(root, split_name: str):
    indices = list_scene_indices(root, split_name)
    if not indices:
        raise SystemExit(f"no scenes under {root}/{split_name}; run `pvkit gen` first")
    return indices, [load_scene(root, split_name, i) for i in indices]


def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    workers = _workers()
    start = time.perf_counter()
    generate_dataset(cfg, out, "train", cfg.train_scenes, TRAIN_SPLIT, workers=workers)
    generate_dataset(cfg, out, "eval", cfg.eval_scenes, EVAL_SPLIT, workers=workers)
    took = time.perf_counter() - start
    print(f"wrote {cfg.train_scenes} train + {cfg.eval_scenes} eval scenes "
          f"to {out} in {took:.1f}s (workers={workers})")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    _, scenes = _load_split(args.data, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = Detector(cfg)
    start = time.perf_counter()
    result = train_detector(model, scenes, steps=args.steps, log_every=args.log_every)
    took = time.perf_counter() - start
    model.save(out / "model.npz")
    (out / "loss_curve.csv").write_text(curve_to_csv(result.curve), encoding="utf-8")
    save_config(cfg, out / "config.txt")
    print(f"trained {result.steps} steps in {took:.1f}s")
    print(f"loss: initial {result.initial_loss:.4f} -> "
          f"final {result.final_loss:.4f} (mean over last {result.window} steps)")
    return 0


def cmd_detect(args) -> int:
    cfg = _resolve_config(args)
    indices, scenes = _load_split(args.data, args.split)
    model = Detector(cfg)
    model.load(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total = 0
    start = time.perf_counter()
    for index, scene in zip(indices, scenes):
        detections = model.detect(scene.points)
        total += len(detections)
        write_predictions(
            out / f"{index:06d}.txt", detections, sidecar_path=out / f"{index:06d}.jsonl"
        )
    took = time.perf_counter() - start
    print(f"wrote {total} detections over {len(indices)} scenes to {out} in {took:.1f}s")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    indices = list_scene_indices(args.data, args.split)
    if not indices:
        raise SystemExit(f"no scenes under {args.data}/{args.split}")
    pred_dir = Path(args.pred)
    per_scene_dets = []
    per_scene_gts = []
    for index in indices:
        pred_path = pred_dir / f"{index:06d}.txt"
        if not pred_path.is_file():
            raise SystemExit(f"missing prediction file {pred_path}")
        per_scene_dets.append(read_predictions(pred_path))
        items = read_labels(Path(args.data) / args.split / "label_2" / f"{index:06d}.txt")
        per_scene_gts.append(([name for name, _ in items], [box for _, box in items]))
    report = evaluate_detections(per_scene_dets, per_scene_gts, cfg)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise SystemExit("need at least one seed")
    modes = ("cph+pph", "gph")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = _workers()
    rows = []
    for seed in seeds:
        seeded = dataclasses.replace(cfg, seed=seed)
        data = out / f"data-seed{seed}"
        generate_dataset(seeded, data, "train", seeded.train_scenes, TRAIN_SPLIT, workers=workers)
        generate_dataset(seeded, data, "eval", seeded.eval_scenes, EVAL_SPLIT, workers=workers)
        _, train_scenes = _load_split(data, "train")
        _, eval_scenes = _load_split(data, "eval")
        for mode in modes:
            run_cfg = dataclasses.replace(seeded, pooling_mode=mode)
            model = Detector(run_cfg)
            start = time.perf_counter()
            train_detector(model, train_scenes)
            dets = [model.detect(s.points) for s in eval_scenes]
            gts = [(s.labels, s.boxes) for s in eval_scenes]
            report = evaluate_detections(dets, gts, run_cfg)
            took = time.perf_counter() - start
            car_ap = report.classes[run_cfg.class_names[0]].ap
            rows.append((seed, mode, car_ap, report.mean_ap, took))
            ap_text = "n/a" if car_ap is None else f"{car_ap:.4f}"
            print(f"seed {seed}  mode {mode:<8} car AP {ap_text}  ({took:.1f}s)", flush=True)
    lines = ["seed,mode,car_ap,mean_ap,seconds"]
    for seed, mode, car_ap, mean_ap, took in rows:
        car = "" if car_ap is None else f"{car_ap:.6f}"
        mean = "" if mean_ap is None else f"{mean_ap:.6f}"
        lines.append(f"{seed},{mode},{car},{mean},{took:.1f}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for mode in modes:
        vals = [r[2] for r in rows if r[1] == mode and r[2] is not None]
        if vals:
            print(f"mean car AP [{mode}]: {np.mean(vals):.4f} over {len(vals)} seeds")
    return 0


def cmd_check(args) -> int:
    seeds = 5 if args.quick else args.seeds
    failures = 0
    for result in run_gradient_checks(seeds=seeds):
        status = "PASS" if result.ok else "FAIL"
        failures += 0 if result.ok else 1
        print(f"{status} gradient/{result.name}: {result.detail}")
    for result in run_invariant_checks():
        status = "PASS" if result.ok else "FAIL"
        failures += 0 if result.ok else 1
        print(f"{status} invariant/{result.name}: {result.detail}")
    if failures:
        print(f"{failures} check(s) failed")
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pvkit", description="toy point-voxel detector pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic train/eval dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset root directory")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a detector on a generated dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint and curve")
    p.add_argument("--steps", type=int, default=None, help="override the training step count")
    p.add_argument("--log-every", type=int, default=0, help="print progress every N steps")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("detect", help="run inference and write prediction files")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="directory for prediction files")
    p.add_argument("--split", default="eval")
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("eval", help="score prediction files against labels")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True, help="directory holding prediction files")
    p.add_argument("--split", default="eval")
    p.add_argument("--out", default=None, help="also write the report as CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="compare pooling modes over several seeds")
    _add_common(p, default_profile="ablation")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    p.add_argument("--out", required=True, help="working directory for data and results")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("check", help="run gradient and invariant self-checks")
    p.add_argument("--seeds", type=int, default=50, help="random instances per gradient check")
    p.add_argument("--quick", action="store_true", help="5 seeds per check")
    p.set_defaults(fn=cmd_check)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
