"""Directional benchmark: the trained joint model against non-learned
baselines and its own ablations, on a fixed synthetic protocol.

Per seed: generate train/eval datasets, train the joint model and the
raw-feature-injection ablation with the default schedule, recurrently
fine-tune a copy of the joint model, then evaluate

  * 1-step EPE / mIoU for the joint model, copy-last and warp-last;
  * 1-step mIoU for the no-transform ablation;
  * 10-step mIoU with and without the recurrent fine-tuning.

Everything is seeded; reports are plain dicts ready for JSON.
"""

from __future__ import annotations

import copy
import dataclasses
import time

from .metrics import evaluate_baseline
from .nets import JointModel, ModelConfig
from .synthgen import DESK8, SceneConfig, generate_dataset
from .trainer import TrainConfig, bptt_finetune, evaluate_model, fit

EVAL_SEED_OFFSET = 10_000

BENCH_SCENE = SceneConfig(
    height=64,
    width=128,
    sequence_length=14,
    num_shapes=5,
    max_speed=3,
    annotate_every=5,
)

BENCH_MODEL = ModelConfig(history_len=4, num_classes=8)

BENCH_TRAIN = TrainConfig(
    learning_rate=0.01,
    momentum=0.9,
    weight_decay=5e-4,
    batch_size=4,
    bptt_steps=2,
)

TRAIN_SAMPLES = 200
EVAL_SAMPLES = 40
TRAIN_STEPS = 300
BPTT_STEPS = 80
BPTT_LR = 0.001
LONG_HORIZON = 10


def _scene(seed: int) -> SceneConfig:
    return dataclasses.replace(BENCH_SCENE, seed=seed)


def run_seed(
    seed: int,
    train_steps: int = TRAIN_STEPS,
    bptt_steps: int = BPTT_STEPS,
    n_train: int = TRAIN_SAMPLES,
    n_eval: int = EVAL_SAMPLES,
    log=None,
) -> dict:
    """All artifacts for one seed; returns {name: evaluation report}."""
    t_start = time.monotonic()

    def say(msg, **kw):
        if log is not None:
            log({"event": msg, "seed": seed,
                 "elapsed_s": round(time.monotonic() - t_start, 1), **kw})

    train_data = generate_dataset(_scene(seed), n_train)
    eval_data = generate_dataset(_scene(seed + EVAL_SEED_OFFSET), n_eval)
    say("data-ready")
    table = DESK8
    tcfg = dataclasses.replace(BENCH_TRAIN, seed=seed)
    k = BENCH_MODEL.history_len

    out: dict = {}
    out["copy"] = evaluate_baseline("copy", eval_data, table, k, horizon=1)
    out["warp"] = evaluate_baseline("warp", eval_data, table, k, horizon=1)
    out["copy10"] = evaluate_baseline("copy", eval_data, table, k, horizon=LONG_HORIZON)
    out["warp10"] = evaluate_baseline("warp", eval_data, table, k, horizon=LONG_HORIZON)
    say("baselines-done")

    joint = JointModel(BENCH_MODEL, init_seed=seed)
    fit(joint, train_data, tcfg, table, num_steps=train_steps, log=log)
    out["joint"] = evaluate_model(joint, eval_data, table, horizon=1)
    out["joint10"] = evaluate_model(joint, eval_data, table, horizon=LONG_HORIZON)
    say("joint-done", report=out["joint"])

    ablation_cfg = dataclasses.replace(BENCH_MODEL, use_transform=False)
    ablation = JointModel(ablation_cfg, init_seed=seed)
    fit(ablation, train_data, tcfg, table, num_steps=train_steps, log=log)
    out["wo_transform"] = evaluate_model(ablation, eval_data, table, horizon=1)
    say("ablation-done", report=out["wo_transform"])

    tuned = copy.deepcopy(joint)
    ft_cfg = dataclasses.replace(tcfg, learning_rate=BPTT_LR)
    bptt_finetune(tuned, train_data, ft_cfg, table, num_steps=bptt_steps, log=log)
    out["joint_bptt10"] = evaluate_model(tuned, eval_data, table, horizon=LONG_HORIZON)
    out["joint_bptt"] = evaluate_model(tuned, eval_data, table, horizon=1)
    say("bptt-done", report=out["joint_bptt10"])
    out["wall_s"] = round(time.monotonic() - t_start, 1)
    return out


def directional_checks(per_seed: dict[int, dict]) -> dict:
    """The three claims, evaluated over all seeds."""
    seeds = sorted(per_seed)
    beats = all(
        per_seed[s]["joint"]["epe"] < per_seed[s]["copy"]["epe"]
        and per_seed[s]["joint"]["epe"] < per_seed[s]["warp"]["epe"]
        and per_seed[s]["joint"]["miou"] > per_seed[s]["copy"]["miou"]
        and per_seed[s]["joint"]["miou"] > per_seed[s]["warp"]["miou"]
        for s in seeds
    )
    mean = lambda key, name: sum(per_seed[s][name][key] for s in seeds) / len(seeds)
    return {
        "beats_baselines_all_seeds": beats,
        "mean_miou_joint": mean("miou", "joint"),
        "mean_miou_wo_transform": mean("miou", "wo_transform"),
        "transform_helps": mean("miou", "joint") >= mean("miou", "wo_transform"),
        "mean_miou10_bptt": mean("miou", "joint_bptt10"),
        "mean_miou10_plain": mean("miou", "joint10"),
        "bptt_helps": mean("miou", "joint_bptt10") >= mean("miou", "joint10"),
    }


def run_benchmark(seeds=(1, 2, 3), log=None, **kw) -> dict:
    per_seed = {s: run_seed(s, log=log, **kw) for s in seeds}
    verdict = directional_checks(per_seed)
    return {"per_seed": {str(s): r for s, r in per_seed.items()}, "verdict": verdict}
