"""Steering-angle regression from the static-group branch features.

The head is a single linear map over the globally average-pooled STA
branch trunk output, so the prediction is exactly linear in the pooled
feature vector.  Training minimizes MSE in degrees^2; the backbone is
fine-tuned along with the head by default and can be frozen.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import TrainingDivergedError, UsageError
from .nets import JointModel
from .trainer import SGD, TrainConfig, lr_at, num_anchors, schedule_picks


def steering_forward(model: JointModel, frames) -> float:
    """Predicted steering angle in degrees for one history window."""
    k = model.cfg.history_len
    if len(frames) != k:
        raise UsageError(f"need exactly {k} history frames, got {len(frames)}")
    with no_grad():
        feats = model.flow_features(Tensor(np.concatenate(frames)[None]))
        out = model.steering(feats)
    return float(out.data[0, 0])


def _frame_batch(samples, picks, k: int):
    frames = np.stack(
        [np.concatenate(samples[i].frames[t0 : t0 + k]) for i, t0 in picks]
    )
    targets = np.asarray([samples[i].steering_angle for i, _ in picks], np.float32)
    return frames, targets


def evaluate_steering(model: JointModel, samples) -> tuple[float, list[tuple]]:
    """MSE over one window per sequence; rows are (frame_id, pred, gt)."""
    k = model.cfg.history_len
    rows = []
    sq = 0.0
    for i, s in enumerate(samples):
        pred = steering_forward(model, s.frames[:k])
        rows.append((i, pred, s.steering_angle))
        sq += (pred - s.steering_angle) ** 2
    if not rows:
        raise UsageError("no samples to evaluate")
    return sq / len(rows), rows


def train_steering(
    model: JointModel,
    train_samples,
    val_samples,
    cfg: TrainConfig,
    finetune_backbone: bool = True,
    num_steps: int | None = None,
    log=None,
) -> list[float]:
    """Fit the head (and optionally the backbone); returns held-out MSE per epoch."""
    cfg.validate()
    if not model.cfg.with_steering:
        raise UsageError("model was built without a steering head")
    k = model.cfg.history_len
    anchors = num_anchors(train_samples[0].num_frames, k, 0)
    steps_per_epoch = max(1, math.ceil(len(train_samples) * anchors / cfg.batch_size))
    epochs = max(1, cfg.epochs)
    total = num_steps if num_steps is not None else epochs * steps_per_epoch
    if finetune_backbone:
        named = list(model.named_parameters())
    else:
        named = [
            (n, p) for n, p in model.named_parameters() if n.startswith("steering_head")
        ]
    opt = SGD(named, cfg.momentum, cfg.weight_decay)
    curve: list[float] = []
    for step in range(total):
        picks = schedule_picks(
            cfg.seed, step, len(train_samples), anchors, cfg.batch_size
        )
        frames, targets = _frame_batch(train_samples, picks, k)
        feats = model.flow_features(Tensor(frames))
        pred = model.steering(feats)
        diff = pred - Tensor(targets[:, None])
        loss = (diff * diff).mean()
        if not math.isfinite(float(loss.data)):
            raise TrainingDivergedError(f"non-finite steering loss at step {step}")
        model.zero_grad()
        loss.backward()
        opt.step(lr_at(step, total, cfg.learning_rate))
        if log is not None:
            log({"step": step, "steering_mse": float(loss.data)})
        if (step + 1) % steps_per_epoch == 0 or step + 1 == total:
            if val_samples:
                curve.append(evaluate_steering(model, val_samples)[0])
    return curve


def write_steering_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame_id", "predicted_deg", "gt_deg"])
        for frame_id, pred, gt in rows:
            w.writerow([frame_id, f"{pred:.6f}", f"{gt:.6f}"])


def read_steering_csv(path) -> list[tuple[int, float, float]]:
    rows = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header[:3] != ["frame_id", "predicted_deg", "gt_deg"]:
            raise UsageError(f"{path}: unexpected steering CSV header {header}")
        for rec in r:
            rows.append((int(rec[0]), float(rec[1]), float(rec[2])))
    return rows
