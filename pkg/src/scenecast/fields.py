"""Dense per-pixel field types: flow fields, segmentation maps, group masks."""

from __future__ import annotations

from enum import IntEnum

import numpy as np

from .errors import DimensionError, DomainError


class Group(IntEnum):
    """Object-motion groups; every semantic class belongs to exactly one."""

    MOV = 0  # independently moving objects
    STA = 1  # static surfaces whose apparent motion is pure ego-motion
    OTH = 2  # everything else (diverse shapes/motion statistics)


class FlowField:
    """Per-pixel displacement in pixels: u is x-displacement (right-positive),
    v is y-displacement (down-positive).

    Flows are target-indexed and consumed by *backward* sampling:
    ``out(p) = source(p - flow(p))``.  See :mod:`scenecast.warp` for why.
    """

    __slots__ = ("u", "v")

    def __init__(self, u: np.ndarray, v: np.ndarray):
        u = np.asarray(u, dtype=np.float32)
        v = np.asarray(v, dtype=np.float32)
        if u.ndim != 2 or u.shape != v.shape:
            raise DimensionError(f"flow components must be HxW and equal: {u.shape} vs {v.shape}")
        self.u = u
        self.v = v

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width), np.float32), np.zeros((height, width), np.float32))

    @classmethod
    def constant(cls, height: int, width: int, u: float, v: float) -> "FlowField":
        return cls(
            np.full((height, width), u, np.float32),
            np.full((height, width), v, np.float32),
        )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FlowField":
        """From a [2,H,W] array (channel 0 = u, channel 1 = v)."""
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise DimensionError(f"expected [2,H,W], got {arr.shape}")
        return cls(arr[0], arr[1])

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def as_array(self) -> np.ndarray:
        """[2,H,W] float32 view-copy."""
        return np.stack([self.u, self.v])

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.u.astype(np.float64) ** 2 + self.v.astype(np.float64) ** 2)

    def copy(self) -> "FlowField":
        return FlowField(self.u.copy(), self.v.copy())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FlowField)
            and np.array_equal(self.u, other.u)
            and np.array_equal(self.v, other.v)
        )

    def __repr__(self) -> str:
        return f"FlowField({self.height}x{self.width})"


class SegMap:
    """Per-pixel class score map (pre-softmax logits) with a derived label view.

    Teacher maps produced by the synthetic generator are two-valued (+m for
    the true class, -m elsewhere), so they are stored compactly as a label
    map plus the magnitude and materialized to dense scores on demand.
    """

    __slots__ = ("_scores", "_labels", "_magnitude", "_num_classes")

    def __init__(self, scores: np.ndarray):
        scores = np.asarray(scores, dtype=np.float32)
        if scores.ndim != 3:
            raise DimensionError(f"scores must be [C,H,W], got {scores.shape}")
        self._scores: np.ndarray | None = scores
        self._labels: np.ndarray | None = None
        self._magnitude = 0.0
        self._num_classes = scores.shape[0]

    @classmethod
    def from_labels(cls, labels: np.ndarray, num_classes: int, magnitude: float = 5.0) -> "SegMap":
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise DimensionError(f"labels must be HxW, got {labels.shape}")
        if labels.min() < 0 or labels.max() >= num_classes:
            raise DomainError(
                f"labels contain ids outside [0,{num_classes}): "
                f"[{labels.min()},{labels.max()}]"
            )
        obj = cls.__new__(cls)
        obj._scores = None
        obj._labels = labels.astype(np.uint8)
        obj._magnitude = float(magnitude)
        obj._num_classes = int(num_classes)
        return obj

    @property
    def num_classes(self) -> int:
        return self._num_classes

    @property
    def height(self) -> int:
        return self._scores.shape[1] if self._scores is not None else self._labels.shape[0]

    @property
    def width(self) -> int:
        return self._scores.shape[2] if self._scores is not None else self._labels.shape[1]

    @property
    def scores(self) -> np.ndarray:
        """[C,H,W] float32 logits (materialized if stored compactly)."""
        if self._scores is not None:
            return self._scores
        c = self._num_classes
        one_hot = self._labels[None, :, :] == np.arange(c, dtype=np.uint8)[:, None, None]
        return np.where(one_hot, self._magnitude, -self._magnitude).astype(np.float32)

    @property
    def labels(self) -> np.ndarray:
        """HxW argmax view; ties break to the lowest class index."""
        if self._labels is not None:
            return self._labels
        return np.argmax(self._scores, axis=0).astype(np.uint8)

    def copy(self) -> "SegMap":
        if self._scores is not None:
            return SegMap(self._scores.copy())
        return SegMap.from_labels(self._labels.copy(), self._num_classes, self._magnitude)

    def __repr__(self) -> str:
        return f"SegMap(C={self.num_classes}, {self.height}x{self.width})"


class GroupMask:
    """HxW assignment of each pixel to a :class:`Group` (total partition)."""

    __slots__ = ("assignment",)

    def __init__(self, assignment: np.ndarray):
        assignment = np.asarray(assignment, dtype=np.uint8)
        if assignment.ndim != 2:
            raise DimensionError(f"group mask must be HxW, got {assignment.shape}")
        if assignment.size and assignment.max() > max(Group):
            raise DomainError("group mask contains values outside {MOV,STA,OTH}")
        self.assignment = assignment

    def region(self, group: Group) -> np.ndarray:
        """Boolean HxW selector for one group."""
        return self.assignment == int(group)

    def counts(self) -> dict[Group, int]:
        return {g: int((self.assignment == int(g)).sum()) for g in Group}

    @property
    def shape(self) -> tuple[int, int]:
        return self.assignment.shape

    def __repr__(self) -> str:
        return f"GroupMask({self.assignment.shape[0]}x{self.assignment.shape[1]})"
