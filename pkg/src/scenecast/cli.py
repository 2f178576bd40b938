"""Command-line front end.

Subcommands: gen, train, finetune-bptt, eval, predict, viz, baseline,
steering-train, steering-eval.  All outputs are files; logs go to stderr
as JSON lines.  Config files are flat JSON whose keys mirror the CLI flags
one-to-one; explicit flags override file values.

Exit codes: 0 ok; 2 usage/config/format problems; 3 evaluation errors;
4 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, dataio, flowio
from .errors import (
    ConfigError,
    EvaluationError,
    ScenecastError,
    TrainingDivergedError,
    UsageError,
)
from .fields import SegMap
from .metrics import BASELINES, evaluate_baseline
from .nets import JointModel, ModelConfig, model_from_checkpoint, with_steering_head
from .steering import evaluate_steering, train_steering, write_steering_csv
from .synthgen import CLASS_TABLES, SceneConfig
from .trainer import (
    SGD,
    TrainConfig,
    bptt_finetune,
    evaluate_model,
    fit,
    load_training_state,
    rollout,
    save_training_state,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_EVAL = 3
EXIT_DIVERGED = 4


def _log(event: str, **kw) -> None:
    print(json.dumps({"event": event, **kw}), file=sys.stderr, flush=True)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def _build(cls, file_cfg: dict, args: argparse.Namespace, reserved=()):
    """Dataclass from defaults <- config file <- explicit flags."""
    fields = {f.name for f in dataclasses.fields(cls)}
    values = {k: v for k, v in file_cfg.items() if k in fields}
    for name in fields:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    for k, v in reserved:
        values[k] = v
    return cls(**values)


def _check_unknown_keys(file_cfg: dict, *classes) -> None:
    known: set[str] = {"num_samples"}
    for cls in classes:
        known |= {f.name for f in dataclasses.fields(cls)}
    unknown = set(file_cfg) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")


def _dataset_samples(path: str):
    ds = dataio.Dataset(path)
    return ds, [ds[i] for i in range(len(ds))]


# -- subcommands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    file_cfg = _load_config_file(args.config)
    _check_unknown_keys(file_cfg, SceneConfig)
    cfg = _build(SceneConfig, file_cfg, args)
    n = args.num_samples if args.num_samples is not None else int(
        file_cfg.get("num_samples", 16)
    )
    manifest = dataio.write_dataset(cfg, n, args.out)
    _log("gen", out=str(args.out), num_samples=n)
    print(json.dumps({
        "num_samples": manifest["num_samples"],
        "height": manifest["height"],
        "width": manifest["width"],
        "sequence_length": manifest["sequence_length"],
        "class_table": manifest["class_table"]["name"],
    }))
    return EXIT_OK


def _model_and_train_cfg(args, num_classes: int):
    file_cfg = _load_config_file(args.config)
    _check_unknown_keys(file_cfg, ModelConfig, TrainConfig)
    mcfg = _build(ModelConfig, file_cfg, args, reserved=[("num_classes", num_classes)])
    tcfg = _build(TrainConfig, file_cfg, args)
    return mcfg, tcfg


def cmd_train(args) -> int:
    ds, samples = _dataset_samples(args.data)
    mcfg, tcfg = _model_and_train_cfg(args, ds.num_classes)
    model = JointModel(mcfg, init_seed=tcfg.seed)
    _log("train-start", params=model.num_parameters(), data=str(args.data))
    opt, history = fit(
        model, samples, tcfg, ds.class_table,
        num_steps=args.steps, log=lambda rec: _log("train", **rec),
    )
    meta = {"step": len(history), "phase": "single", "train": dataclasses.asdict(tcfg)}
    save_training_state(args.out, model, opt, meta=meta)
    _log("train-done", out=str(args.out), steps=len(history))
    return EXIT_OK


def cmd_finetune_bptt(args) -> int:
    cfg_file = _load_config_file(args.config)
    _check_unknown_keys(cfg_file, TrainConfig)
    tcfg = _build(TrainConfig, cfg_file, args)
    model, opt, meta = load_training_state(args.ckpt, tcfg)
    if args.fresh_momentum:
        opt = None
    _log("bptt-start", ckpt=str(args.ckpt), bptt_steps=tcfg.bptt_steps)
    opt, history = bptt_finetune(
        model, _dataset_samples(args.data)[1], tcfg,
        dataio.Dataset(args.data).class_table,
        num_steps=args.steps, opt=opt, log=lambda rec: _log("bptt", **rec),
    )
    meta = {"step": len(history), "phase": "bptt", "train": dataclasses.asdict(tcfg)}
    save_training_state(args.out, model, opt, meta=meta)
    _log("bptt-done", out=str(args.out), steps=len(history))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = model_from_checkpoint(args.ckpt)
    ds, samples = _dataset_samples(args.data)
    report = evaluate_model(model, samples, ds.class_table, horizon=args.horizon)
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_baseline(args) -> int:
    if args.name not in BASELINES:
        raise UsageError(f"unknown baseline {args.name!r} (have {sorted(BASELINES)})")
    ds, samples = _dataset_samples(args.data)
    report = evaluate_baseline(
        args.name, samples, ds.class_table, args.history_len, horizon=args.horizon
    )
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _, _ = model_from_checkpoint(args.ckpt)
    sample = dataio.read_sample(args.sample)
    table = CLASS_TABLES[sample.class_table_name]
    k = model.cfg.history_len
    if sample.num_frames < k:
        raise UsageError(f"sample has {sample.num_frames} frames, need {k}")
    preds = rollout(model, sample.frames[:k], sample.segs[:k], table, args.horizon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    palette = table.palette_array()
    for i, (flow, seg) in enumerate(preds, start=1):
        flowio.write_flo(flow, out / f"flow_{i:03d}.flo")
        flowio.write_label_image(seg.labels, palette, out / f"parse_{i:03d}.ppm")
    _log("predict", out=str(out), steps=len(preds))
    return EXIT_OK


def cmd_viz(args) -> int:
    src = Path(args.input)
    suffix = src.suffix.lower()
    if suffix == ".flo":
        flow = flowio.read_flo(src)
        rgb = flowio.flow_to_color(flow, max_magnitude=args.max_flow)
        flowio.write_ppm(rgb, args.out)
    elif suffix == ".segm":
        arr = flowio.read_segm(src)
        labels = arr if arr.ndim == 2 else SegMap(arr).labels
        table = CLASS_TABLES[args.class_table_name or "desk8"]
        flowio.write_label_image(labels, table.palette_array(), args.out)
    else:
        raise UsageError(f"viz supports .flo and .segm inputs, got {src.name}")
    _log("viz", input=str(src), out=str(args.out))
    return EXIT_OK


def cmd_steering_train(args) -> int:
    cfg_file = _load_config_file(args.config)
    _check_unknown_keys(cfg_file, TrainConfig)
    tcfg = _build(TrainConfig, cfg_file, args)
    base, _, _ = model_from_checkpoint(args.ckpt)
    model = with_steering_head(base, init_seed=tcfg.seed)
    _, samples = _dataset_samples(args.data)
    n_val = max(1, int(len(samples) * args.val_frac)) if len(samples) > 1 else 0
    train_samples = samples[: len(samples) - n_val] if n_val else samples
    val_samples = samples[len(samples) - n_val :] if n_val else []
    curve = train_steering(
        model, train_samples, val_samples, tcfg,
        finetune_backbone=not args.freeze_backbone,
        num_steps=args.steps, log=lambda rec: _log("steering", **rec),
    )
    opt = SGD(list(model.named_parameters()), tcfg.momentum, tcfg.weight_decay)
    save_training_state(args.out, model, opt, meta={"phase": "steering", "val_mse_curve": curve})
    print(json.dumps({"val_mse_curve": curve}))
    return EXIT_OK


def cmd_steering_eval(args) -> int:
    model, _, _ = model_from_checkpoint(args.ckpt)
    _, samples = _dataset_samples(args.data)
    mse, rows = evaluate_steering(model, samples)
    if args.out:
        write_steering_csv(args.out, rows)
    print(json.dumps({"steering_mse": mse, "n": len(rows)}))
    return EXIT_OK


# -- argument plumbing ---------------------------------------------------------------


def _add_scene_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scene config (mirrors config JSON keys)")
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--num-classes", type=int, dest="num_classes")
    g.add_argument("--sequence-length", type=int, dest="sequence_length")
    g.add_argument("--num-shapes", type=int, dest="num_shapes")
    g.add_argument("--max-speed", type=int, dest="max_speed")
    g.add_argument("--shape-size", type=int, nargs=2, dest="shape_size",
                   metavar=("LO", "HI"), help="mover extent range, px")
    g.add_argument("--camera-yaw-rate", type=float, dest="camera_yaw_rate")
    g.add_argument("--max-yaw", type=int, dest="max_yaw")
    g.add_argument("--annotate-every", type=int, dest="annotate_every")
    g.add_argument("--logit-magnitude", type=float, dest="logit_magnitude")
    g.add_argument("--class-table-name", choices=sorted(CLASS_TABLES),
                   dest="class_table_name")
    g.add_argument("--seed", type=int)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model config")
    g.add_argument("--history-len", type=int, dest="history_len")
    g.add_argument("--base-channels", type=int, dest="base_channels")
    g.add_argument("--encoder-blocks", type=int, dest="encoder_blocks")
    g.add_argument("--branch-blocks", type=int, dest="branch_blocks")
    g.add_argument("--transform-blocks", type=int, dest="transform_blocks")
    g.add_argument("--use-transform", action=argparse.BooleanOptionalAction,
                   dest="use_transform", default=None)
    g.add_argument("--inject-features", action=argparse.BooleanOptionalAction,
                   dest="inject_features", default=None)
    g.add_argument("--predict-residual", action=argparse.BooleanOptionalAction,
                   dest="predict_residual", default=None)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config")
    g.add_argument("--learning-rate", type=float, dest="learning_rate")
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", type=float, dest="weight_decay")
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--epochs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--bptt-steps", type=int, dest="bptt_steps")
    g.add_argument("--rollout-horizon", type=int, dest="rollout_horizon")
    g.add_argument("--seg-weight", type=float, dest="seg_weight")
    g.add_argument("--through-warp", action=argparse.BooleanOptionalAction,
                   dest="through_warp", default=None)
    g.add_argument("--steps", type=int, help="override total optimizer steps")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="scenecast",
        description="Joint future scene parsing and flow anticipation on "
                    "synthetic video.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    sp.add_argument("--config", help="flat JSON config file")
    sp.add_argument("--out", required=True, help="dataset directory")
    sp.add_argument("--num-samples", type=int, dest="num_samples")
    _add_scene_flags(sp)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("train", help="phase-1 single-step training")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    _add_model_flags(sp)
    _add_train_flags(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("finetune-bptt", help="phase-2 recurrent fine-tuning")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--fresh-momentum", action="store_true",
                    help="reset optimizer velocity instead of resuming it")
    _add_train_flags(sp)
    sp.set_defaults(fn=cmd_finetune_bptt)

    sp = sub.add_parser("eval", help="evaluate a checkpoint; prints the report JSON")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--horizon", type=int, default=1)
    sp.add_argument("--out", help="also write the report JSON here")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("baseline", help="evaluate copy-last / warp-last")
    sp.add_argument("--name", required=True, choices=sorted(BASELINES))
    sp.add_argument("--data", required=True)
    sp.add_argument("--history-len", type=int, default=4, dest="history_len")
    sp.add_argument("--horizon", type=int, default=1)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_baseline)

    sp = sub.add_parser("predict", help="write flow (.flo) and parse (PPM) rollouts")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--sample", required=True, help="one sample directory")
    sp.add_argument("--horizon", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("viz", help="render a .flo or .segm file to PPM")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-flow", type=float, dest="max_flow",
                    help="fixed color-coding magnitude (default: 99th percentile)")
    sp.add_argument("--class-table-name", choices=sorted(CLASS_TABLES),
                    dest="class_table_name")
    sp.set_defaults(fn=cmd_viz)

    sp = sub.add_parser("steering-train", help="attach/fine-tune the steering head")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True, help="pretrained joint checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--val-frac", type=float, default=0.2, dest="val_frac")
    sp.add_argument("--freeze-backbone", action="store_true")
    _add_train_flags(sp)
    sp.set_defaults(fn=cmd_steering_train)

    sp = sub.add_parser("steering-eval", help="steering MSE + prediction CSV")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", help="CSV path (frame_id, predicted_deg, gt_deg)")
    sp.set_defaults(fn=cmd_steering_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except TrainingDivergedError as e:
        _log("error", kind="diverged", message=str(e))
        return EXIT_DIVERGED
    except EvaluationError as e:
        _log("error", kind="evaluation", message=str(e))
        return EXIT_EVAL
    except (ScenecastError, OSError) as e:
        _log("error", kind=type(e).__name__, message=str(e))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
