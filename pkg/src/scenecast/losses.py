"""Training objectives.

Flow: per-group mean of per-pixel Euclidean error norms, one term per
object group, evaluated only on the branch that owns each pixel; the group
masks therefore also gate the gradients — a branch receives exactly zero
gradient outside its region.

Parsing: cross-entropy against human annotation when the target frame is
annotated, otherwise an l1 + gradient-difference penalty against the
teacher's score maps (the inputs of the softmax, not probabilities).

All sums are normalized to per-element means so loss scale is independent
of image size; the combined objective is the unweighted sum of both parts
(a weight knob exists and defaults to 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, absolute, log_softmax_channels, slice_axis, sqrt
from .errors import DimensionError, EvaluationError
from .fields import Group, GroupMask

_MODE_CE = "ce"
_MODE_L1GDL = "l1gdl"


@dataclass
class LossBreakdown:
    flow_total: float
    flow_per_group: tuple[float, float, float]
    seg_total: float
    seg_mode: str
    combined: float
    graph: Tensor  # scalar node; call .backward() on it

    def as_dict(self) -> dict:
        return {
            "flow_total": self.flow_total,
            "flow_per_group": list(self.flow_per_group),
            "seg_total": self.seg_total,
            "seg_mode": self.seg_mode,
            "combined": self.combined,
        }


def _as_mask_array(mask, n: int, h: int, w: int) -> np.ndarray:
    if isinstance(mask, GroupMask):
        mask = mask.assignment
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.shape != (n, h, w):
        raise DimensionError(f"group mask {mask.shape} does not match fields {(n, h, w)}")
    return mask


def flow_group_loss(
    branch_fields, target: np.ndarray, mask
) -> tuple[Tensor, tuple[float, float, float]]:
    """Sum over groups of the masked mean Euclidean flow error.

    branch_fields: 3 tensors [N,2,H,W] (MOV, STA, OTH order).
    target: [N,2,H,W] or [2,H,W]; mask: [N,H,W] or HxW group ids.
    Empty groups contribute exactly 0.
    """
    target = np.asarray(target, dtype=np.float32)
    if target.ndim == 3:
        target = target[None]
    n, two, h, w = branch_fields[0].shape
    if target.shape != (n, two, h, w):
        raise DimensionError(f"flow target {target.shape} != {(n, two, h, w)}")
    mask = _as_mask_array(mask, n, h, w)

    total: Tensor | None = None
    per_group = []
    for g in Group:
        region = mask == int(g)
        count = int(region.sum())
        if count == 0:
            per_group.append(0.0)
            continue
        diff = branch_fields[int(g)] - Tensor(target)
        norms = sqrt((diff * diff).sum(axis=1))  # [N,H,W]
        sel = Tensor(region.astype(np.float32))
        term = (norms * sel).sum() / count
        per_group.append(float(term.data))
        total = term if total is None else total + term
    if total is None:
        total = Tensor(np.float32(0.0))
    return total, tuple(per_group)


def seg_ce_loss(
    pred_logits: Tensor, gt_labels: np.ndarray, ignore_id: int | None = None
) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[true class]."""
    gt = np.asarray(gt_labels)
    if gt.ndim == 2:
        gt = gt[None]
    n, c, h, w = pred_logits.shape
    if gt.shape != (n, h, w):
        raise DimensionError(f"labels {gt.shape} do not match logits {(n, h, w)}")
    keep = (gt >= 0) & (gt < c)
    if ignore_id is not None:
        keep &= gt != ignore_id
    n_valid = int(keep.sum())
    if n_valid == 0:
        raise EvaluationError("cross-entropy: every pixel is ignored")
    onehot = np.zeros((n, c, h, w), dtype=np.float32)
    ni, yi, xi = np.nonzero(keep)
    onehot[ni, gt[keep], yi, xi] = 1.0
    logp = log_softmax_channels(pred_logits)
    return -(logp * Tensor(onehot)).sum() / n_valid


def _abs_grads(x: Tensor, axis: int) -> Tensor:
    size = x.shape[axis]
    return absolute(slice_axis(x, axis, 1, size) - slice_axis(x, axis, 0, size - 1))


def seg_l1_gdl_loss(pred_logits: Tensor, teacher_scores) -> Tensor:
    """Mean |S - S_hat| plus the mean over neighbor pairs (both axes, all
    channels) of ||grad S| - |grad S_hat||."""
    teacher = teacher_scores if isinstance(teacher_scores, Tensor) else Tensor(
        np.asarray(teacher_scores, dtype=np.float32)
    )
    if teacher.shape != pred_logits.shape:
        raise DimensionError(
            f"teacher {teacher.shape} != prediction {pred_logits.shape}"
        )
    l1 = absolute(pred_logits - teacher).mean()
    hax, wax = pred_logits.ndim - 2, pred_logits.ndim - 1
    gdl_terms = []
    n_pairs = 0
    for axis in (hax, wax):
        d = absolute(_abs_grads(pred_logits, axis) - _abs_grads(teacher, axis))
        gdl_terms.append(d.sum())
        n_pairs += int(np.prod(d.shape))
    gdl = (gdl_terms[0] + gdl_terms[1]) / n_pairs
    return l1 + gdl


def total_loss(
    branch_fields,
    pred_logits: Tensor,
    flow_target: np.ndarray,
    group_mask,
    annotated: bool,
    gt_labels: np.ndarray | None = None,
    teacher_scores=None,
    ignore_id: int | None = None,
    seg_weight: float = 1.0,
) -> LossBreakdown:
    """Combined objective: flow loss + (CE if annotated else l1+GDL)."""
    flow_term, per_group = flow_group_loss(branch_fields, flow_target, group_mask)
    if annotated:
        if gt_labels is None:
            raise EvaluationError("annotated target needs gt_labels")
        seg_term = seg_ce_loss(pred_logits, gt_labels, ignore_id)
        mode = _MODE_CE
    else:
        if teacher_scores is None:
            raise EvaluationError("unannotated target needs teacher_scores")
        seg_term = seg_l1_gdl_loss(pred_logits, teacher_scores)
        mode = _MODE_L1GDL
    combined = flow_term + seg_term * seg_weight
    return LossBreakdown(
        flow_total=float(flow_term.data),
        flow_per_group=tuple(per_group),
        seg_total=float(seg_term.data),
        seg_mode=mode,
        combined=float(combined.data),
        graph=combined,
    )
