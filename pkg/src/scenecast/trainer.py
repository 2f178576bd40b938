"""Optimization loop, recursive multi-step inference, and BPTT fine-tuning.

Training phase 1 fits single-step anticipation; phase 2 fine-tunes the same
weights on short recursive unrolls (default two steps), backpropagating
through the warped next frame and the reused score predictions.

Determinism contract: the batch drawn at global step ``i`` is a pure
function of (seed, i), so a save/load/resume run is bitwise identical to an
uninterrupted one.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, concat_channels, no_grad, slice_axis, slice_channels
from .errors import ConfigError, TrainingDivergedError, UsageError
from .fields import FlowField, SegMap
from .losses import (
    LossBreakdown,
    flow_group_loss,
    seg_ce_loss,
    seg_l1_gdl_loss,
)
from .metrics import ReportAccumulator
from .nets import JointModel, joint_forward, model_from_checkpoint, save_checkpoint
from .synthgen import ClassTable, VideoSample
from .warp import backward_warp, warp_image

LR_DECAY_FACTOR = 0.1
LR_DECAY_FRACTION = 2.0 / 3.0  # of the total planned steps


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 2
    seed: int = 0
    bptt_steps: int = 2
    rollout_horizon: int = 1
    seg_weight: float = 1.0
    through_warp: bool = True  # BPTT gradients pass through the warped frame

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.bptt_steps < 1 or self.rollout_horizon < 1:
            raise ConfigError("bptt_steps and rollout_horizon must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1, epochs >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")


class SGD:
    """SGD with classical momentum and decoupled-as-L2 weight decay."""

    def __init__(self, named_params, momentum: float, weight_decay: float):
        self.named_params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {
            name: np.zeros_like(p.data) for name, p in self.named_params
        }

    def step(self, lr: float):
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - lr * v

    def state_blobs(self) -> dict[str, np.ndarray]:
        return {f"opt/v/{name}": v for name, v in self.velocity.items()}

    def load_state(self, blobs: dict[str, np.ndarray]):
        for name in self.velocity:
            key = f"opt/v/{name}"
            if key in blobs:
                self.velocity[name] = blobs[key].astype(np.float32).copy()


# -- window / batch assembly ---------------------------------------------------------


@dataclass
class Batch:
    """History stacks plus ``steps`` consecutive targets per window."""

    frames: np.ndarray        # [N, 3k, H, W]
    segs: np.ndarray          # [N, kC, H, W] teacher scores
    group_mask: np.ndarray    # [N, H, W] from the last history seg
    flow_targets: np.ndarray  # [S, N, 2, H, W]
    labels: np.ndarray        # [S, N, H, W]
    teacher: np.ndarray       # [S, N, C, H, W]
    annotated: np.ndarray     # [S, N] bool

    @property
    def steps(self) -> int:
        return self.flow_targets.shape[0]


def num_anchors(sample_len: int, history_len: int, steps: int) -> int:
    """Valid window start positions in a sequence of ``sample_len`` frames."""
    return sample_len - history_len - steps + 1


def make_batch(samples, picks, history_len: int, steps: int, table: ClassTable) -> Batch:
    """Materialize windows ``(sample_index, t0)``; targets are frames
    t0+k .. t0+k+steps-1."""
    k = history_len
    lut = table.group_lut()
    frames, segs, gmask = [], [], []
    flows = [[] for _ in range(steps)]
    labels = [[] for _ in range(steps)]
    teacher = [[] for _ in range(steps)]
    annotated = [[] for _ in range(steps)]
    for i, t0 in picks:
        s = samples[i]
        if t0 < 0 or t0 + k + steps > s.num_frames:
            raise UsageError(f"window (sample {i}, t0={t0}) exceeds sequence length")
        frames.append(np.concatenate([s.frames[t] for t in range(t0, t0 + k)]))
        segs.append(np.concatenate([s.segs[t].scores for t in range(t0, t0 + k)]))
        gmask.append(lut[s.segs[t0 + k - 1].labels])
        for j in range(steps):
            t = t0 + k + j
            flows[j].append(s.flow_into(t).as_array())
            labels[j].append(s.segs[t].labels)
            teacher[j].append(s.segs[t].scores)
            annotated[j].append(s.annotated[t])
    return Batch(
        frames=np.stack(frames),
        segs=np.stack(segs),
        group_mask=np.stack(gmask),
        flow_targets=np.stack([np.stack(f) for f in flows]),
        labels=np.stack([np.stack(x) for x in labels]),
        teacher=np.stack([np.stack(x) for x in teacher]),
        annotated=np.asarray(annotated, dtype=bool),
    )


def schedule_picks(
    seed: int, step: int, n_samples: int, n_anchors: int, batch_size: int
) -> list[tuple[int, int]]:
    """The batch for a global step, as a pure function of (seed, step)."""
    if n_samples < 1 or n_anchors < 1:
        raise UsageError("dataset has no valid training windows")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xB47C4, step])
    flat = rng.integers(0, n_samples * n_anchors, size=batch_size)
    return [(int(f) // n_anchors, int(f) % n_anchors) for f in flat]


# -- loss over an unroll ---------------------------------------------------------------


def _seg_loss_per_window(logits, batch: Batch, step: int, seg_weight: float):
    """Mean over windows of CE (annotated) or l1+GDL (teacher) at one step."""
    n = logits.shape[0]
    terms = []
    modes = []
    for i in range(n):
        sl = slice_axis(logits, 0, i, i + 1)
        if batch.annotated[step, i]:
            terms.append(seg_ce_loss(sl, batch.labels[step, i][None]))
            modes.append("ce")
        else:
            terms.append(seg_l1_gdl_loss(sl, batch.teacher[step, i][None]))
            modes.append("l1gdl")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    mode = modes[0] if len(set(modes)) == 1 else "mixed"
    return total * (seg_weight / n), mode


def compute_unrolled_loss(
    model: JointModel,
    batch: Batch,
    table: ClassTable,
    unroll_steps: int,
    through_warp: bool = True,
    seg_weight: float = 1.0,
) -> LossBreakdown:
    """Forward ``unroll_steps`` recursive predictions and sum their losses.

    Step 0 consumes the teacher history; later steps consume the model's own
    warped frame and predicted scores, with the routing mask re-derived from
    the newest predicted segmentation.
    """
    if unroll_steps > batch.steps:
        raise UsageError(f"batch provides {batch.steps} targets, need {unroll_steps}")
    k, c = model.cfg.history_len, model.cfg.num_classes
    lut = table.group_lut()
    frames = Tensor(batch.frames)
    segs = Tensor(batch.segs)
    gmask = batch.group_mask
    combined = None
    flow_total = 0.0
    per_group_acc = np.zeros(3)
    seg_total = 0.0
    modes = []
    for s in range(unroll_steps):
        out = joint_forward(model, frames, segs, gmask)
        flow_term, per_group = flow_group_loss(
            out.branch_fields, batch.flow_targets[s], gmask
        )
        seg_term, mode = _seg_loss_per_window(out.logits, batch, s, seg_weight)
        step_loss = flow_term + seg_term
        combined = step_loss if combined is None else combined + step_loss
        flow_total += float(flow_term.data)
        per_group_acc += np.asarray(per_group)
        seg_total += float(seg_term.data)
        modes.append(mode)
        if s + 1 < unroll_steps:
            last_frame = slice_channels(frames, 3 * (k - 1), 3 * k)
            flow_in = out.flow if through_warp else Tensor(out.flow.data)
            warped = backward_warp(last_frame, flow_in)
            frames = concat_channels([slice_channels(frames, 3, 3 * k), warped])
            segs = concat_channels([slice_channels(segs, c, k * c), out.logits])
            gmask = lut[np.argmax(out.logits.data, axis=1)]
    return LossBreakdown(
        flow_total=flow_total,
        flow_per_group=tuple(per_group_acc.tolist()),
        seg_total=seg_total,
        seg_mode=modes[0] if len(set(modes)) == 1 else "mixed",
        combined=float(combined.data),
        graph=combined,
    )


def train_one_step(
    model: JointModel,
    opt: SGD,
    batch: Batch,
    lr: float,
    table: ClassTable,
    unroll_steps: int = 1,
    through_warp: bool = True,
    seg_weight: float = 1.0,
) -> LossBreakdown:
    """One optimizer update; ``unroll_steps > 1`` is BPTT fine-tuning."""
    breakdown = compute_unrolled_loss(
        model, batch, table, unroll_steps, through_warp, seg_weight
    )
    if not math.isfinite(breakdown.combined):
        raise TrainingDivergedError(
            f"non-finite loss {breakdown.combined} "
            f"(flow {breakdown.flow_total}, seg {breakdown.seg_total})"
        )
    model.zero_grad()
    breakdown.graph.backward()
    opt.step(lr)
    for name, p in opt.named_params:
        if not np.isfinite(p.data).all():
            raise TrainingDivergedError(f"parameter {name!r} became non-finite")
    return breakdown


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps > 0 and step >= int(total_steps * LR_DECAY_FRACTION):
        return base_lr * LR_DECAY_FACTOR
    return base_lr


def fit(
    model: JointModel,
    samples,
    cfg: TrainConfig,
    table: ClassTable,
    unroll_steps: int = 1,
    num_steps: int | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
    opt: SGD | None = None,
    log=None,
) -> tuple[SGD, list[dict]]:
    """Run the step loop; returns the optimizer (for checkpointing) and the
    per-step log records.

    ``num_steps`` is the *planned* schedule length (it fixes the decay
    boundary); ``start_step``/``stop_step`` bound the executed slice so an
    interrupted run resumes bitwise.
    """
    cfg.validate()
    n_samples = len(samples)
    seq_len = samples[0].num_frames if n_samples else 0
    anchors = num_anchors(seq_len, model.cfg.history_len, unroll_steps)
    steps_per_epoch = max(1, math.ceil(n_samples * max(anchors, 0) / cfg.batch_size))
    total = num_steps if num_steps is not None else cfg.epochs * steps_per_epoch
    if opt is None:
        opt = SGD(list(model.named_parameters()), cfg.momentum, cfg.weight_decay)
    history = []
    for step in range(start_step, total if stop_step is None else min(stop_step, total)):
        t0 = time.monotonic()
        picks = schedule_picks(cfg.seed, step, n_samples, anchors, cfg.batch_size)
        batch = make_batch(samples, picks, model.cfg.history_len, unroll_steps, table)
        lr = lr_at(step, total, cfg.learning_rate)
        breakdown = train_one_step(
            model, opt, batch, lr, table, unroll_steps, cfg.through_warp, cfg.seg_weight
        )
        record = {
            "step": step,
            "lr": lr,
            "loss": breakdown.as_dict(),
            "wall_s": round(time.monotonic() - t0, 4),
        }
        history.append(record)
        if log is not None:
            log(record)
    return opt, history


def bptt_finetune(
    model: JointModel,
    samples,
    cfg: TrainConfig,
    table: ClassTable,
    num_steps: int | None = None,
    opt: SGD | None = None,
    log=None,
):
    """Phase-2 recurrent fine-tuning at ``cfg.bptt_steps`` unrolled steps."""
    return fit(
        model, samples, cfg, table,
        unroll_steps=cfg.bptt_steps, num_steps=num_steps, opt=opt, log=log,
    )


# -- inference ---------------------------------------------------------------------


def rollout(
    model: JointModel,
    frames: list[np.ndarray],
    segs: list[SegMap],
    table: ClassTable,
    horizon: int,
) -> list[tuple[FlowField, SegMap]]:
    """Recursive multi-step prediction (no gradients, parameters untouched).

    Each step predicts (flow, seg) one frame further: the last history frame
    is warped by the predicted flow to stand in for the unseen next frame,
    and the predicted score map joins the segmentation history.
    """
    if horizon < 1:
        raise UsageError("rollout horizon must be >= 1")
    k = model.cfg.history_len
    if len(frames) != k or len(segs) != k:
        raise UsageError(f"need exactly {k} history frames and score maps")
    lut = table.group_lut()
    frame_hist = [np.asarray(f, np.float32) for f in frames]
    score_hist = [s.scores for s in segs]
    gmask = lut[segs[-1].labels]
    preds: list[tuple[FlowField, SegMap]] = []
    with no_grad():
        for _ in range(horizon):
            fr = Tensor(np.concatenate(frame_hist)[None])
            sg = Tensor(np.concatenate(score_hist)[None])
            out = joint_forward(model, fr, sg, gmask[None])
            flow = FlowField.from_array(out.flow.data[0])
            seg = SegMap(out.logits.data[0].copy())
            preds.append((flow, seg))
            frame_hist = frame_hist[1:] + [warp_image(frame_hist[-1], flow)]
            score_hist = score_hist[1:] + [seg.scores]
            gmask = lut[seg.labels]
    return preds


def evaluate_model(
    model: JointModel,
    samples,
    table: ClassTable,
    horizon: int = 1,
) -> dict:
    """Roll the model out on each sequence; score the final predicted frame."""
    k = model.cfg.history_len
    acc = ReportAccumulator(table)
    for sample in samples:
        t_eval = k - 1 + horizon
        if t_eval >= sample.num_frames:
            raise UsageError(
                f"sample too short: need frame {t_eval}, have {sample.num_frames}"
            )
        preds = rollout(
            model, sample.frames[:k], sample.segs[:k], table, horizon
        )
        flow, seg = preds[-1]
        acc.add(flow, seg, sample, t_eval)
    return acc.report()


# -- training checkpoints ---------------------------------------------------------


def save_training_state(path, model: JointModel, opt: SGD, meta: dict | None = None):
    save_checkpoint(path, model, extra_blobs=opt.state_blobs(), meta=meta)


def load_training_state(path, train_cfg: TrainConfig):
    """Returns (model, opt, meta) ready to resume bitwise."""
    model, meta, blobs = model_from_checkpoint(path)
    opt = SGD(
        list(model.named_parameters()), train_cfg.momentum, train_cfg.weight_decay
    )
    opt.load_state(blobs)
    return model, opt, meta
