"""Command-line entry point: synth, train, detect, evaluate, gradcheck.

All tunables live in one JSON config; every command is deterministic given
(config, seed). The ODAS_SEED environment variable overrides the config
seed. Exit codes: 0 ok, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .core import (ConfigError, DataError, EvalConfig, ModelConfig,
                   OdasError, ShapeError, StreamError,
                   TrainingDivergedError)
from . import dataset as ds
from . import detector as det
from . import evaluation as ev
from . import nn
from . import training as tr

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc


def resolve_seed(cfg: dict, override: int | None = None) -> int:
    if override is not None:
        return override
    env = os.environ.get("ODAS_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"ODAS_SEED must be an integer, got {env!r}") from exc
    return int(cfg.get("seed", 0))


def model_config(cfg: dict) -> ModelConfig:
    section = cfg.get("model")
    if not isinstance(section, dict):
        raise ConfigError("config is missing the 'model' section")
    try:
        return ModelConfig(**section)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def train_config(cfg: dict, seed: int) -> tr.TrainConfig:
    section = dict(cfg.get("train", {}))
    section.setdefault("similarity_weight",
                       cfg.get("model", {}).get("similarity_weight", 1.0))
    section["seed"] = seed
    try:
        return tr.TrainConfig(**section)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def eval_config(cfg: dict) -> EvalConfig:
    section = cfg.get("eval", {})
    offsets = section.get("offset_thresholds", list(range(1, 11)))
    return EvalConfig(offset_thresholds=tuple(float(t) for t in offsets),
                      ap_depth=float(section.get("ap_depth", 1.0)))


def synth_configs(cfg: dict, seed: int):
    section = dict(cfg.get("synth", {}))
    model = model_config(cfg)
    n_train = int(section.pop("num_train_videos", 100))
    n_test = int(section.pop("num_test_videos", 100))
    if n_train < 1 or n_test < 1:
        raise ConfigError("num_train_videos and num_test_videos must be >= 1")
    try:
        sc = ds.SynthConfig(seed=seed, num_classes=model.num_classes,
                            feature_dim=model.feature_dim,
                            num_videos=n_train + n_test,
                            window_len=model.window_len, **section)
    except TypeError as exc:
        raise ConfigError(f"bad synth config: {exc}") from exc
    return sc, n_train, n_test


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(cfg)
    sc, n_train, n_test = synth_configs(cfg, seed)
    anns, streams = ds.synth_corpus(sc)
    out = Path(args.out_dir)
    splits = (("train", anns[:n_train]), ("test", anns[n_train:]))
    for name, split_anns in splits:
        ds.write_corpus(out / name, split_anns,
                        {a.video_id: streams[a.video_id] for a in split_anns})
        n_inst = sum(len(a.instances) for a in split_anns)
        n_windows = sum(max(0, a.num_frames - sc.window_len + 1)
                        for a in split_anns)
        print(f"{name}: {len(split_anns)} videos, {n_inst} instances, "
              f"{n_windows} windows")
    print(f"seed {seed}, {sc.num_classes} classes, "
          f"feature dim {sc.feature_dim}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(cfg)
    mc = model_config(cfg)
    tc = train_config(cfg, seed)
    methods = tr.Methods.from_string(args.methods)
    anns, streams = ds.load_corpus(args.data_dir)
    samples, pairs = ds.build_corpus_dataset(anns, streams, mc)
    out = tr.run_training(samples, pairs, mc, tc, methods)
    out_model = Path(args.out_model)
    out_model.parent.mkdir(parents=True, exist_ok=True)
    nn.save_discriminator(out_model, out.discriminator)
    if methods.gan and tc.gan_iters > 0:
        nn.save_generator(out_model.with_name(out_model.name + ".gen"),
                          out.generator)
    log_path = args.log or out_model.with_name(out_model.name + ".losses.csv")
    tr.write_training_log(log_path, out.rows)
    last = out.rows[-1] if out.rows else None
    print(f"trained on {len(samples)} windows ({len(pairs)} pairs), "
          f"methods adaptive={methods.adaptive} tc={methods.tc} "
          f"gan={methods.gan}")
    if last is not None and last.loss_cls is not None:
        print(f"final classification loss {last.loss_cls:.6f}")
    print(f"checkpoint written to {out_model}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = load_config(args.config)
    mc = model_config(cfg)
    d = nn.load_discriminator(args.model)
    anns, streams = ds.load_corpus(args.data_dir)
    dims = {fs.dim for fs in streams.values()}
    if dims != {d.feature_dim}:
        raise ShapeError(f"model expects feature dim {d.feature_dim}, "
                         f"streams have {sorted(dims)}")
    stride = args.stride if args.stride is not None else mc.stride
    scorer = det.model_scorer(d)
    if args.threshold == "auto":
        if not args.calibration_dir:
            raise ConfigError("--threshold auto needs --calibration-dir "
                              "(the training split)")
        cal_anns, cal_streams = ds.load_corpus(args.calibration_dir)
        theta = det.grid_search_threshold(
            scorer, cal_anns, cal_streams, ds.ground_truths(cal_anns),
            d.num_classes, mc.window_len, eval_config(cfg),
            grid=cfg.get("detector", {}).get("threshold_grid",
                                             det.DEFAULT_THRESHOLD_GRID),
            stride=stride)
        print(f"grid-searched threshold: {theta}")
    else:
        try:
            theta = float(args.threshold)
        except ValueError as exc:
            raise ConfigError(
                f"--threshold must be 'auto' or a number, got "
                f"{args.threshold!r}") from exc
        if not 0.0 <= theta <= 1.0:
            raise ConfigError("--threshold must lie in [0, 1]")
    preds = []
    for ann in sorted(anns, key=lambda a: a.video_id):
        preds.extend(det.detect_stream(scorer, streams[ann.video_id], ann.fps,
                                       d.num_classes, mc.window_len, theta,
                                       stride))
    det.save_predictions(args.out, preds)
    print(f"{len(preds)} predictions over {len(anns)} streams "
          f"(threshold {theta}, stride {stride}) -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    preds = det.load_predictions(args.predictions)
    anns = ds.load_annotations(args.ground_truth)
    gts = ds.ground_truths(anns)
    if args.num_classes is not None:
        num_classes = args.num_classes
    else:
        classes = [g.action_class for g in gts] + [p.action_class for p in preds]
        if not classes:
            raise DataError("nothing to evaluate: no ground truths and no "
                            "predictions")
        num_classes = max(classes)
    if args.offsets:
        offsets = tuple(float(t) for t in args.offsets.split(","))
    else:
        offsets = tuple(float(t) for t in range(1, 11))
    cfg = EvalConfig(offset_thresholds=offsets, ap_depth=args.depth)
    report = ev.evaluate(preds, gts, cfg, num_classes)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.curves:
        ev.save_curves(args.curves, ev.pr_curve_rows(preds, gts, cfg,
                                                     num_classes))
    for off in cfg.offset_thresholds:
        print(f"mAP @ {off:g}s: {report.map_per_offset[off]:.4f}")
    print(f"average mAP: {report.average_map:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(cfg, args.seed)
    mc = model_config(cfg)
    checks = tr.run_gradient_checks(mc, seed)
    width = max(len(c.loss_name) for c in checks)
    failed = False
    for c in checks:
        worst = c.worst
        status = "PASS" if c.passed else "FAIL"
        failed = failed or not c.passed
        print(f"{c.loss_name:<{width}}  max rel err {worst.max_rel_err:.3e} "
              f"({worst.name}[{worst.worst_index}])  "
              f"isolation {'ok' if c.isolation_ok else 'BROKEN'}  {status}")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odas",
        description="Online action-start detection over feature streams")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus split")
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir", required=True,
                   help="corpus split with annotations.json and features/")
    p.add_argument("--out-model", required=True)
    p.add_argument("--methods", default="adaptive,tc,gan",
                   help="comma-separated subset of adaptive,tc,gan "
                        "(empty string trains a plain classifier)")
    p.add_argument("--log", default=None, help="loss-curve CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="stream videos through the detector")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.add_argument("--threshold", default="auto",
                   help="'auto' (grid search on --calibration-dir) or a value")
    p.add_argument("--calibration-dir", default=None)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--ground-truth", required=True,
                   help="annotations JSON; instance starts are the AS points")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--curves", default=None, help="PR-curve CSV path")
    p.add_argument("--offsets", default=None,
                   help="comma-separated offset thresholds in seconds")
    p.add_argument("--depth", type=float, default=1.0, help="AP depth in (0,1]")
    p.add_argument("--num-classes", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OdasError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def cli() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    cli()
