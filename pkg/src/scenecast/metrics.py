"""Evaluation criteria (EPE, mIoU, steering MSE) and non-learned baselines."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, EvaluationError, UsageError
from .fields import FlowField, Group, GroupMask, SegMap
from .synthgen import ClassTable, VideoSample
from .warp import warp_flow, warp_scores


class ConfusionMatrix:
    """C x C counts, rows = ground truth, cols = prediction."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise UsageError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, gt_labels, pred_labels, ignore_id: int | None = None):
        gt = np.asarray(gt_labels).reshape(-1).astype(np.int64)
        pred = np.asarray(pred_labels).reshape(-1).astype(np.int64)
        if gt.shape != pred.shape:
            raise DimensionError(f"label shapes differ: {gt.shape} vs {pred.shape}")
        keep = (gt >= 0) & (gt < self.num_classes)
        if ignore_id is not None:
            keep &= gt != ignore_id
        gt, pred = gt[keep], pred[keep]
        if np.any((pred < 0) | (pred >= self.num_classes)):
            raise EvaluationError("prediction labels outside [0, num_classes)")
        flat = np.bincount(
            gt * self.num_classes + pred, minlength=self.num_classes**2
        )
        self.counts += flat.reshape(self.num_classes, self.num_classes)
        return self

    def iou(self) -> tuple[float, list[float | None]]:
        """(mIoU, per-class IoU); classes absent from both sides are excluded."""
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(axis=1) + self.counts.sum(axis=0) - np.diag(self.counts)
        valid = denom > 0
        if not valid.any():
            raise EvaluationError("no class present in ground truth or prediction")
        per_class: list[float | None] = [
            float(tp[c] / denom[c]) if valid[c] else None
            for c in range(self.num_classes)
        ]
        return float(np.mean(tp[valid] / denom[valid])), per_class


def miou(
    pred_labels, gt_labels, num_classes: int, ignore_id: int | None = None
) -> tuple[float, list[float | None]]:
    cm = ConfusionMatrix(num_classes).update(gt_labels, pred_labels, ignore_id)
    return cm.iou()


def epe(pred: FlowField, gt: FlowField, select: np.ndarray | None = None) -> float:
    """Mean Euclidean endpoint distance, optionally over a pixel subset."""
    if pred.shape != gt.shape:
        raise DimensionError(f"flow shapes differ: {pred.shape} vs {gt.shape}")
    dist = np.sqrt((pred.u - gt.u) ** 2 + (pred.v - gt.v) ** 2)
    if select is not None:
        select = np.asarray(select, dtype=bool)
        if select.shape != dist.shape:
            raise DimensionError("selector shape does not match flow")
        dist = dist[select]
    if dist.size == 0:
        raise EvaluationError("EPE over an empty pixel selection")
    return float(dist.mean())


def steering_mse(pred_deg, gt_deg) -> float:
    pred = np.asarray(pred_deg, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt_deg, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise UsageError(f"length mismatch: {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise UsageError("steering MSE needs at least one pair")
    return float(np.mean((pred - gt) ** 2))


# -- non-learned baselines ---------------------------------------------------------


def baseline_copy_last(
    flow_hist: list[FlowField], seg_hist: list[SegMap]
) -> tuple[FlowField, SegMap]:
    """Predict by repeating the most recent flow and segmentation."""
    if not flow_hist or not seg_hist:
        raise UsageError("copy-last baseline needs non-empty history")
    return flow_hist[-1], seg_hist[-1]


def baseline_warp_last(
    flow_hist: list[FlowField], seg_hist: list[SegMap]
) -> tuple[FlowField, SegMap]:
    """Warp both the segmentation scores and the flow field by the last flow.

    Scores are warped and only then argmaxed, so soft class evidence moves
    before any label decision is made.
    """
    if not flow_hist or not seg_hist:
        raise UsageError("warp-last baseline needs non-empty history")
    carrier = flow_hist[-1]
    seg = SegMap(warp_scores(seg_hist[-1].scores, carrier))
    flow = warp_flow(carrier, carrier)
    return flow, seg


BASELINES = {"copy": baseline_copy_last, "warp": baseline_warp_last}


def rollout_baseline(
    kind: str,
    flow_hist: list[FlowField],
    seg_hist: list[SegMap],
    steps: int,
) -> list[tuple[FlowField, SegMap]]:
    """Iterate a baseline, feeding its own predictions back as history."""
    if kind not in BASELINES:
        raise UsageError(f"unknown baseline {kind!r} (have {sorted(BASELINES)})")
    if steps < 1:
        raise UsageError("steps must be >= 1")
    fn = BASELINES[kind]
    flows = list(flow_hist)
    segs = list(seg_hist)
    out = []
    for _ in range(steps):
        flow, seg = fn(flows, segs)
        out.append((flow, seg))
        flows.append(flow)
        segs.append(seg)
    return out


# -- report assembly ---------------------------------------------------------------

_GROUP_KEYS = {Group.MOV: "epe_moving", Group.STA: "epe_static", Group.OTH: "epe_other"}


class ReportAccumulator:
    """Accumulates per-frame predictions into the evaluation report dict."""

    def __init__(self, table: ClassTable):
        self.table = table
        self.cm = ConfusionMatrix(table.num_classes)
        self._epe_sum = 0.0
        self._epe_n = 0
        self._group_sum = {g: 0.0 for g in Group}
        self._group_n = {g: 0 for g in Group}
        self._steer_pred: list[float] = []
        self._steer_gt: list[float] = []
        self.n_frames = 0

    def add(
        self,
        pred_flow: FlowField | None,
        pred_seg: SegMap | None,
        sample: VideoSample,
        t: int,
    ):
        """Score predictions for frame ``t`` against the sample's ground truth."""
        gt_seg = sample.segs[t]
        if pred_seg is not None:
            self.cm.update(gt_seg.labels, pred_seg.labels)
        if pred_flow is not None:
            gt_flow = sample.flow_into(t)
            dist = np.sqrt(
                (pred_flow.u - gt_flow.u) ** 2 + (pred_flow.v - gt_flow.v) ** 2
            )
            self._epe_sum += float(dist.sum())
            self._epe_n += dist.size
            groups = self.table.group_lut()[gt_seg.labels]
            for g in Group:
                sel = groups == int(g)
                self._group_sum[g] += float(dist[sel].sum())
                self._group_n[g] += int(sel.sum())
        self.n_frames += 1

    def add_steering(self, pred_deg: float, gt_deg: float):
        self._steer_pred.append(float(pred_deg))
        self._steer_gt.append(float(gt_deg))

    def report(self) -> dict:
        if self.n_frames == 0:
            raise EvaluationError("nothing was evaluated")
        out: dict = {"n_frames": self.n_frames}
        try:
            m, per_class = self.cm.iou()
            out["miou"] = m
            out["per_class_iou"] = per_class
        except EvaluationError:
            out["miou"] = None
            out["per_class_iou"] = None
        out["epe"] = self._epe_sum / self._epe_n if self._epe_n else None
        for g, key in _GROUP_KEYS.items():
            n = self._group_n[g]
            out[key] = self._group_sum[g] / n if n else None
        out["steering_mse"] = (
            steering_mse(self._steer_pred, self._steer_gt) if self._steer_pred else None
        )
        return out


def evaluate_baseline(
    kind: str,
    samples,
    table: ClassTable,
    history_len: int,
    horizon: int = 1,
) -> dict:
    """Run a baseline on every sample; score the frame ``history_len-1+horizon``.

    History handed to the baseline ends at frame index history_len-1, so a
    1-step prediction is scored against frame history_len.
    """
    if horizon < 1:
        raise UsageError("horizon must be >= 1")
    acc = None
    for sample in samples:
        if acc is None:
            acc = ReportAccumulator(table)
        t_eval = history_len - 1 + horizon
        if t_eval >= sample.num_frames:
            raise UsageError(
                f"sample too short: need frame {t_eval}, have {sample.num_frames}"
            )
        flow_hist = [sample.flow_into(t) for t in range(1, history_len)]
        seg_hist = [sample.segs[t] for t in range(history_len)]
        preds = rollout_baseline(kind, flow_hist, seg_hist, horizon)
        flow, seg = preds[-1]
        acc.add(flow, seg, sample, t_eval)
    if acc is None:
        raise EvaluationError("no samples to evaluate")
    return acc.report()
