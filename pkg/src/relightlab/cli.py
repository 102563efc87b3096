"""Operator surface: dataset generation, estimator training, relighting
training, sampling, evaluation, benchmarking, and plot emission.

Exit codes: 0 success, 1 runtime failure (one-line `error: ...` on stderr),
2 usage. Config precedence is defaults < --config file < flags, and every
command echoes its fully resolved config into the output directory before
doing any work.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (
    BenchConfig,
    ConfigError,
    DataConfig,
    EstimatorConfig,
    ModelConfig,
    TrainConfig,
    apply_flat,
    flatten_config,
    load_flat_config,
    render_flat,
)

_COMMANDS = ("gen-data", "train-estimator", "train", "sample", "eval", "bench", "plot")


def _echo_config(out_dir: Path, command: str, sections: dict[str, object], extras: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    mapping: dict[str, str] = {"command": command}
    mapping.update(extras)
    for prefix, obj in sections.items():
        mapping.update(flatten_config(obj, prefix=f"{prefix}."))
    (out_dir / "config_echo.cfg").write_text(render_flat(mapping, header="resolved run config"))


def _apply_config_file(args, sections: dict[str, object]) -> None:
    if not getattr(args, "config", None):
        return
    mapping = load_flat_config(args.config)
    mapping.pop("command", None)
    mapping.pop("seed", None)  # seed is a flag-level concern; echoed separately
    consumed: set[str] = set()
    for prefix, obj in sections.items():
        consumed |= apply_flat(obj, mapping, prefix=f"{prefix}.")
    leftovers = set(mapping) - consumed - {k for k in mapping if "." not in k}
    if leftovers:
        raise ConfigError(f"unknown config keys: {sorted(leftovers)}")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=str, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relightlab",
        description="synthetic relighting lab: data, training, evaluation, benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset split")
    _add_common(p)
    p.add_argument("--n", type=int, default=None, help="number of samples")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--size", type=int, default=None, help="square frame size in pixels")
    p.add_argument("--programs-per-scene", type=int, default=None)
    p.add_argument("--fill-mode", choices=("gaussian", "pure"), default=None)
    p.add_argument("--albedo", choices=("texture", "constant"), default=None)

    p = sub.add_parser("train-estimator", help="train and freeze the geometry estimator")
    _add_common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("train", help="train the relighting model")
    _add_common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--estimator", type=str, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--k-max", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument(
        "--disable-loss",
        action="append",
        choices=("fast", "phy", "depth", "normal"),
        default=None,
        help="ablation switches; repeatable",
    )
    p.add_argument("--augment", choices=("on", "off"), default=None)
    p.add_argument("--resume", type=str, default=None)

    p = sub.add_parser("sample", help="sample relit videos for a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--n", type=int, default=None, help="limit the number of samples")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--estimator", type=str, default=None)
    p.add_argument("--steps", type=str, default="16", help="comma-separated step budgets")

    p = sub.add_parser("bench", help="attribute-controllability benchmark")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--estimator", type=str, default=None)
    p.add_argument("--n-per-attribute", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("plot", help="render figures from report files")
    _add_common(p)
    p.add_argument("reports", nargs="*", help="loss CSVs, bench reports, steps-vs-PSNR CSVs")

    return parser


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    from .datagen import generate_dataset
    from .dataset_io import persist_dataset

    cfg = DataConfig()
    _apply_config_file(args, {"data": cfg})
    if args.n is not None:
        cfg.n_samples = args.n
    if args.frames is not None:
        cfg.bounds.frames = args.frames
    if args.size is not None:
        cfg.bounds.height = cfg.bounds.width = args.size
    if args.programs_per_scene is not None:
        cfg.programs_per_scene = args.programs_per_scene
    if args.fill_mode is not None:
        cfg.fill_mode = args.fill_mode
    if args.albedo is not None:
        cfg.bounds.albedo_mode = args.albedo
    cfg.validate()
    out = Path(args.out)
    _echo_config(out, "gen-data", {"data": cfg}, {"seed": str(args.seed)})
    records = generate_dataset(cfg, args.seed)
    manifest = persist_dataset(
        records, out, seed=args.seed, camera=cfg.bounds.camera, fill_mode=cfg.fill_mode
    )
    print(f"wrote {manifest['count']} samples to {out}")
    return 0


def _cmd_train_estimator(args) -> int:
    from .dataset_io import load_dataset
    from .geometry import save_estimator, train_estimator

    cfg = EstimatorConfig(seed=args.seed)
    _apply_config_file(args, {"estimator": cfg})
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.channels is not None:
        cfg.channels = args.channels
    if args.lr is not None:
        cfg.learning_rate = args.lr
    cfg.seed = args.seed
    out = Path(args.out)
    _echo_config(out, "train-estimator", {"estimator": cfg}, {
        "seed": str(args.seed), "data": args.data,
    })
    records, _ = load_dataset(args.data)
    model, report = train_estimator(records, cfg)
    save_estimator(out / "estimator", model, cfg, report)
    with (out / "estimator_loss.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for i, value in enumerate(report.loss_curve):
            writer.writerow([i, repr(value)])
    print(
        f"estimator: rel depth error {report.val_rel_depth_error:.4f}, "
        f"normal angle {report.val_normal_angle_deg:.2f} deg -> {out / 'estimator'}"
    )
    return 0


def _cmd_train(args) -> int:
    from .dataset_io import load_dataset
    from .geometry import load_estimator
    from .trainer import train
    from .config import Camera

    cfg = TrainConfig(seed=args.seed)
    model_cfg = ModelConfig()
    _apply_config_file(args, {"train": cfg, "model": model_cfg})
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.lr is not None:
        cfg.learning_rate = args.lr
    if args.k_max is not None:
        cfg.k_max = args.k_max
    if args.hidden is not None:
        model_cfg.hidden = args.hidden
    if args.blocks is not None:
        model_cfg.blocks = args.blocks
    for switch in args.disable_loss or ():
        if switch == "fast":
            cfg.disable_fast = True
        elif switch == "phy":
            cfg.disable_phy = True
        elif switch == "depth":
            cfg.use_depth = False
        elif switch == "normal":
            cfg.use_normal = False
    if args.augment is not None:
        cfg.augment = args.augment == "on"
    cfg.seed = args.seed
    cfg.validate()

    records, manifest = load_dataset(args.data)
    frames, h, w = records[0].tuple.v_real.shape[:3]
    model_cfg.frames, model_cfg.height, model_cfg.width = frames, h, w
    camera = Camera(**manifest.get("camera", {}))

    out = Path(args.out)
    _echo_config(out, "train", {"train": cfg, "model": model_cfg}, {
        "seed": str(args.seed), "data": args.data,
        "estimator": str(args.estimator),
    })

    estimator = None
    if cfg.lambda_phy > 0 and not cfg.disable_phy:
        if args.estimator is None:
            raise ConfigError("geometry feedback enabled: pass --estimator or --disable-loss phy")
        estimator, _ = load_estimator(args.estimator)

    final = train(
        cfg, records, estimator=estimator, out_dir=out, model_cfg=model_cfg,
        camera=camera, resume_from=args.resume,
    )
    print(f"final checkpoint: {final}")
    return 0


def _load_model_and_kmax(checkpoint: str):
    from .model import load_model

    model, meta = load_model(checkpoint)
    k_max = int(meta.get("train_config", {}).get("k_max", 7))
    return model, meta, k_max


def _cmd_sample(args) -> int:
    from .dataset_io import load_dataset
    from .evalbench import sample_video

    model, meta, k_max = _load_model_and_kmax(args.checkpoint)
    records, _ = load_dataset(args.data)
    if args.n is not None:
        records = records[: args.n]
    out = Path(args.out)
    _echo_config(out, "sample", {}, {
        "seed": str(args.seed), "checkpoint": args.checkpoint, "data": args.data,
        "steps": str(args.steps),
    })
    arrays = {}
    for index, rec in enumerate(records):
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, index]))
        arrays[f"pred_{index:05d}"] = sample_video(model, rec.tuple, args.steps, rng, k_max=k_max)
    np.savez(out / "predictions.npz", **arrays)
    print(f"wrote {len(arrays)} predictions to {out / 'predictions.npz'}")
    return 0


def _cmd_eval(args) -> int:
    from .dataset_io import load_dataset
    from .evalbench import evaluate_model
    from .geometry import load_estimator

    model, meta, k_max = _load_model_and_kmax(args.checkpoint)
    estimator = None
    if args.estimator:
        estimator, _ = load_estimator(args.estimator)
    records, _ = load_dataset(args.data)
    steps_list = [int(s) for s in args.steps.split(",") if s.strip()]
    if not steps_list:
        raise ConfigError("--steps must name at least one budget")
    out = Path(args.out)
    _echo_config(out, "eval", {}, {
        "seed": str(args.seed), "checkpoint": args.checkpoint, "data": args.data,
        "estimator": str(args.estimator), "steps": ",".join(map(str, steps_list)),
    })
    metrics = {}
    for steps in steps_list:
        metrics[str(steps)] = evaluate_model(
            model, records, estimator, steps=steps, seed=args.seed, k_max=k_max
        )
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    with (out / "psnr_by_steps.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["steps", "psnr"])
        for steps in steps_list:
            writer.writerow([steps, repr(metrics[str(steps)]["psnr"])])
    for steps in steps_list:
        m = metrics[str(steps)]
        line = f"steps={steps} psnr={m['psnr']:.3f} ssim={m['ssim']:.4f}"
        if "dense_l2_error" in m:
            line += f" dense_l2={m['dense_l2_error']:.4f}"
        print(line)
    return 0


def _cmd_bench(args) -> int:
    from .evalbench import bench_generate, bench_run
    from .geometry import load_estimator

    model, meta, k_max = _load_model_and_kmax(args.checkpoint)
    estimator = None
    if args.estimator:
        estimator, _ = load_estimator(args.estimator)
    cfg = BenchConfig(seed=args.seed)
    _apply_config_file(args, {"bench": cfg})
    if args.n_per_attribute is not None:
        cfg.n_per_attribute = args.n_per_attribute
    if args.steps is not None:
        cfg.sample_steps = args.steps
    cfg.seed = args.seed
    mc = model.cfg
    cfg.bounds = replace(cfg.bounds, frames=mc.frames, height=mc.height, width=mc.width)
    out = Path(args.out)
    _echo_config(out, "bench", {"bench": cfg}, {
        "seed": str(args.seed), "checkpoint": args.checkpoint,
        "estimator": str(args.estimator),
    })
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    suite = bench_generate(rng, cfg.n_per_attribute, cfg.bounds, cfg.bounds.camera)
    report = bench_run(
        model, estimator, suite, steps=cfg.sample_steps, seed=cfg.seed,
        bootstrap_resamples=cfg.bootstrap_resamples, k_max=k_max,
    )
    (out / "bench_report.json").write_text(report.to_json())
    report.write_csv(out / "bench_report.csv")
    (out / "bench_report.md").write_text(report.to_markdown())
    print(report.to_markdown())
    return 0


def _cmd_plot(args) -> int:
    from .plots import emit_plots

    written = emit_plots(args.reports, args.out)
    for path in written:
        print(path)
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train-estimator": _cmd_train_estimator,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "plot": _cmd_plot,
}


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return _HANDLERS[args.command](args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # noqa: BLE001  (CLI boundary: map to one-line errors)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
