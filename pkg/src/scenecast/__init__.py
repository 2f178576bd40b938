"""Joint future scene-parsing and optical-flow anticipation on synthetic video.

Two coupled convolutional networks predict the next frame's semantic
segmentation and optical flow from a short history, trained with a
group-masked flow loss and a dual-mode parsing loss on a generator whose
ground truth is analytically exact.  Everything — the autodiff engine,
warping, training, metrics, and file formats — is self-contained.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, grad_check, no_grad
from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    EvaluationError,
    FormatError,
    ScenecastError,
    TrainingDivergedError,
    UsageError,
)
from .fields import FlowField, Group, GroupMask, SegMap
from .losses import LossBreakdown, flow_group_loss, seg_ce_loss, seg_l1_gdl_loss, total_loss
from .metrics import (
    ConfusionMatrix,
    baseline_copy_last,
    baseline_warp_last,
    epe,
    evaluate_baseline,
    miou,
    steering_mse,
)
from .nets import JointModel, ModelConfig, joint_forward, load_checkpoint, save_checkpoint
from .synthgen import (
    CITYSCAPES19,
    CLASS_TABLES,
    DESK8,
    ClassTable,
    SceneConfig,
    VideoSample,
    class_to_group,
    generate_dataset,
    generate_sequence,
    group_mask_from_seg,
)
from .trainer import TrainConfig, bptt_finetune, evaluate_model, fit, rollout
from .warp import backward_warp, warp_flow, warp_image, warp_scores

__all__ = [
    "Tensor", "grad_check", "no_grad",
    "FlowField", "Group", "GroupMask", "SegMap",
    "SceneConfig", "VideoSample", "ClassTable", "DESK8", "CITYSCAPES19",
    "CLASS_TABLES", "class_to_group", "generate_dataset", "generate_sequence",
    "group_mask_from_seg",
    "backward_warp", "warp_flow", "warp_image", "warp_scores",
    "ConfusionMatrix", "epe", "miou", "steering_mse",
    "baseline_copy_last", "baseline_warp_last", "evaluate_baseline",
    "LossBreakdown", "flow_group_loss", "seg_ce_loss", "seg_l1_gdl_loss", "total_loss",
    "JointModel", "ModelConfig", "joint_forward", "save_checkpoint", "load_checkpoint",
    "TrainConfig", "fit", "bptt_finetune", "rollout", "evaluate_model",
    "ScenecastError", "ConfigError", "UsageError", "DimensionError", "DomainError",
    "FormatError", "EvaluationError", "TrainingDivergedError",
]
