"""Deterministic synthetic street-scene videos with exact ground truth.

Each sequence is a scrolling textured world (horizontal bands of
static-surface classes plus textured patches of the "other" group, all
displaced uniformly by the camera yaw rate), and a set of textured shapes
(the moving group) that translate with integer per-frame velocities and
bounce off the frame borders.  All displacements are integers, which makes
the analytic flow fields *exact* under bilinear backward warping and keeps
frames bit-identical through the 8-bit PPM roundtrip.

Ground truth emitted per sequence: frames in [0,1], pre-softmax teacher
score maps (+m for the true class, -m elsewhere), exact flow fields, a
warp-validity mask (pixels visible in both frames and not dis-occluded),
sparse annotation flags, and a steering angle proportional to the camera
yaw (10 degrees per pixel/frame of yaw).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DomainError, UsageError
from .fields import FlowField, Group, GroupMask, SegMap

STEERING_DEG_PER_PX = 10.0

_PATCH_SIZE_RANGE = (12, 28)
_NOISE_AMPLITUDE = 14  # +- around the class base color, uint8 steps


@dataclass(frozen=True)
class ClassTable:
    """Semantic classes with their motion-group assignment and palette."""

    name: str
    class_names: tuple[str, ...]
    groups: tuple[Group, ...]
    palette: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if not (len(self.class_names) == len(self.groups) == len(self.palette)):
            raise ConfigError(f"class table {self.name}: inconsistent lengths")
        present = {g for g in self.groups}
        if present != set(Group):
            raise ConfigError(f"class table {self.name}: every group needs >= 1 class")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def ids_in_group(self, group: Group) -> list[int]:
        return [i for i, g in enumerate(self.groups) if g == group]

    def palette_array(self) -> np.ndarray:
        return np.asarray(self.palette, dtype=np.uint8)

    def group_lut(self) -> np.ndarray:
        return np.asarray([int(g) for g in self.groups], dtype=np.uint8)


DESK8 = ClassTable(
    name="desk8",
    class_names=(
        "road", "sidewalk", "sky", "car", "person", "bicycle", "building", "vegetation",
    ),
    groups=(
        Group.STA, Group.STA, Group.STA, Group.MOV, Group.MOV, Group.MOV,
        Group.OTH, Group.OTH,
    ),
    palette=(
        (128, 64, 128), (244, 35, 232), (70, 130, 180), (0, 0, 142),
        (220, 20, 60), (119, 11, 32), (70, 70, 70), (107, 142, 35),
    ),
)

CITYSCAPES19 = ClassTable(
    name="cityscapes19",
    class_names=(
        "road", "sidewalk", "building", "wall", "fence", "pole",
        "traffic light", "traffic sign", "vegetation", "terrain", "sky",
        "person", "rider", "car", "truck", "bus", "train", "motorcycle",
        "bicycle",
    ),
    groups=(
        Group.STA, Group.STA, Group.OTH, Group.OTH, Group.OTH, Group.STA,
        Group.STA, Group.STA, Group.OTH, Group.OTH, Group.STA,
        Group.MOV, Group.MOV, Group.MOV, Group.MOV, Group.MOV, Group.MOV,
        Group.MOV, Group.MOV,
    ),
    palette=(
        (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156),
        (190, 153, 153), (153, 153, 153), (250, 170, 30), (220, 220, 0),
        (107, 142, 35), (152, 251, 152), (70, 130, 180), (220, 20, 60),
        (255, 0, 0), (0, 0, 142), (0, 0, 70), (0, 60, 100), (0, 80, 100),
        (0, 0, 230), (119, 11, 32),
    ),
)

CLASS_TABLES = {t.name: t for t in (DESK8, CITYSCAPES19)}


def class_to_group(class_id: int, table: ClassTable = DESK8) -> Group:
    """Total, deterministic class -> motion-group mapping."""
    if not 0 <= class_id < table.num_classes:
        raise DomainError(
            f"class id {class_id} outside [0,{table.num_classes}) for table {table.name}"
        )
    return table.groups[class_id]


def group_mask_from_seg(seg: SegMap, table: ClassTable = DESK8) -> GroupMask:
    """Per-pixel argmax label mapped through the class table."""
    if seg.num_classes != table.num_classes:
        raise DomainError(
            f"seg has {seg.num_classes} classes, table {table.name} has {table.num_classes}"
        )
    return GroupMask(table.group_lut()[seg.labels])


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 128
    num_classes: int = 8
    sequence_length: int = 14
    num_shapes: int = 5
    max_speed: int = 3
    shape_size: tuple[int, int] = (9, 21)  # mover extent range, inclusive-exclusive px
    camera_yaw_rate: float | None = None  # None: draw an integer in [-max_yaw, max_yaw]
    max_yaw: int = 2
    annotate_every: int = 5
    logit_magnitude: float = 5.0
    class_table_name: str = "desk8"
    seed: int = 0

    def __post_init__(self):
        # JSON configs deliver lists; keep the field hashable
        object.__setattr__(self, "shape_size", tuple(self.shape_size))

    @property
    def class_table(self) -> ClassTable:
        table = CLASS_TABLES.get(self.class_table_name)
        if table is None:
            raise ConfigError(f"unknown class table {self.class_table_name!r}")
        return table

    def validate(self) -> None:
        table = self.class_table
        if self.num_classes != table.num_classes:
            raise ConfigError(
                f"num_classes={self.num_classes} but table {table.name} "
                f"defines {table.num_classes}"
            )
        if self.num_classes < 4:
            raise ConfigError("need at least one class per group plus background")
        if self.sequence_length < 2:
            raise ConfigError("sequence_length must be >= 2")
        if self.max_speed < 0 or self.max_yaw < 0 or self.num_shapes < 0:
            raise ConfigError("max_speed, max_yaw and num_shapes must be >= 0")
        lo, hi = self.shape_size
        if lo < 3 or hi <= lo:
            raise ConfigError("shape_size must satisfy 3 <= lo < hi")
        if self.annotate_every < 1:
            raise ConfigError("annotate_every must be >= 1")
        if self.height < 16 or self.width < 16:
            raise ConfigError("scene must be at least 16x16")
        if self.camera_yaw_rate is not None and self.camera_yaw_rate != int(self.camera_yaw_rate):
            raise ConfigError(
                "camera_yaw_rate must be an integer pixel count per frame "
                "(integer displacements keep the analytic flow exact under warping)"
            )


@dataclass
class VideoSample:
    """A generated sequence plus all its ground truth.

    ``flows[i]`` maps frame i to frame i+1 (so there are
    ``len(frames) - 1`` of them); use :meth:`flow_into` for O_t indexing.
    ``valid[i]`` marks the pixels of frame i+1 whose backward-warp source
    in frame i shows the same object (no dis-occlusion, in bounds).
    """

    frames: list[np.ndarray]          # [3,H,W] float32 in [0,1]
    segs: list[SegMap]                # teacher score maps per frame
    flows: list[FlowField]
    valid: list[np.ndarray]           # HxW bool, aligned with flows
    annotated: list[bool]
    steering_angle: float             # degrees
    camera_yaw: float                 # px/frame, duplicated for convenience
    seed: int
    class_table_name: str = "desk8"

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def class_table(self) -> ClassTable:
        return CLASS_TABLES[self.class_table_name]

    def flow_into(self, t: int) -> FlowField:
        """O_t: the flow from frame t-1 to frame t (t in [1, num_frames))."""
        if not 1 <= t < self.num_frames:
            raise UsageError(f"flow_into({t}) outside [1,{self.num_frames})")
        return self.flows[t - 1]

    def valid_into(self, t: int) -> np.ndarray:
        if not 1 <= t < self.num_frames:
            raise UsageError(f"valid_into({t}) outside [1,{self.num_frames})")
        return self.valid[t - 1]


def _blit(target: np.ndarray, patch: np.ndarray, mask: np.ndarray, y: int, x: int):
    h, w = mask.shape
    region = target[..., y : y + h, x : x + w]
    region[..., mask] = patch[..., mask] if patch.ndim == region.ndim else patch[mask]


def _texture(rng: np.random.Generator, color, shape_hw) -> np.ndarray:
    base = np.asarray(color, dtype=np.int16)[:, None, None]
    noise = rng.integers(
        -_NOISE_AMPLITUDE, _NOISE_AMPLITUDE + 1, size=(3,) + shape_hw, dtype=np.int16
    )
    return np.clip(base + noise, 0, 255).astype(np.uint8)


class _Sprite:
    """A rigid textured blob with integer per-frame displacements."""

    def __init__(self, class_id, texture, mask, y, x, vy, vx):
        self.class_id = class_id
        self.texture = texture
        self.mask = mask
        self.y = y
        self.x = x
        self.vy = vy
        self.vx = vx
        self.displacement = (0, 0)  # movement into the current frame

    def step(self, height, width):
        h, w = self.mask.shape
        y0, x0 = self.y, self.x
        # flip velocity before moving so each frame is a pure translation
        if not 0 <= self.y + self.vy <= height - h:
            self.vy = -self.vy
        if not 0 <= self.x + self.vx <= width - w:
            self.vx = -self.vx
        if 0 <= self.y + self.vy <= height - h:
            self.y += self.vy
        if 0 <= self.x + self.vx <= width - w:
            self.x += self.vx
        self.displacement = (self.y - y0, self.x - x0)


def generate_sequence(cfg: SceneConfig) -> VideoSample:
    """Render one sequence; bitwise deterministic in (cfg, cfg.seed)."""
    cfg.validate()
    table = cfg.class_table
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    height, width, n = cfg.height, cfg.width, cfg.sequence_length

    if cfg.camera_yaw_rate is not None:
        yaw = int(cfg.camera_yaw_rate)
    else:
        yaw = int(rng.integers(-cfg.max_yaw, cfg.max_yaw + 1))

    # background: horizontal bands of STA classes (sky on top), textured canvas
    sta_ids = table.ids_in_group(Group.STA)
    band_ids = [sta_ids[i % len(sta_ids)] for i in range(3)]
    rng.shuffle(band_ids)
    cuts = np.sort(rng.integers(height // 6, height - height // 6, size=2))
    bounds = [0, int(cuts[0]), int(max(cuts[1], cuts[0] + 1)), height]
    bg_labels = np.empty((height, width), dtype=np.uint8)
    canvas = np.empty((3, height, width), dtype=np.uint8)
    for cid, lo, hi in zip(band_ids, bounds[:-1], bounds[1:]):
        bg_labels[lo:hi] = cid
        canvas[:, lo:hi] = _texture(rng, table.palette[cid], (hi - lo, width))

    # textured patches (OTH group) are baked into the canvas: part of the
    # static world, so they pan with the camera like the bands do
    oth_ids = table.ids_in_group(Group.OTH)
    for _ in range(int(rng.integers(2, 5))):
        ph = min(int(rng.integers(*_PATCH_SIZE_RANGE)), height - 2)
        pw = min(int(rng.integers(*_PATCH_SIZE_RANGE)), width - 2)
        py = int(rng.integers(0, height - ph))
        px = int(rng.integers(0, width - pw))
        cid = int(rng.choice(oth_ids))
        canvas[:, py : py + ph, px : px + pw] = _texture(
            rng, table.palette[cid], (ph, pw)
        )
        bg_labels[py : py + ph, px : px + pw] = cid

    # bouncing movers (MOV group)
    mov_ids = table.ids_in_group(Group.MOV)
    movers = []
    for _ in range(cfg.num_shapes):
        sh = min(int(rng.integers(*cfg.shape_size)), height - 4)
        sw = min(int(rng.integers(*cfg.shape_size)), width - 4)
        if rng.random() < 0.5:  # disc
            r = min(sh, sw) // 2
            yy, xx = np.mgrid[0 : 2 * r + 1, 0 : 2 * r + 1]
            mask = (yy - r) ** 2 + (xx - r) ** 2 <= r * r
        else:
            mask = np.ones((sh, sw), bool)
        mh, mw = mask.shape
        sy = int(rng.integers(0, height - mh))
        sx = int(rng.integers(0, width - mw))
        vy, vx = 0, 0
        while vy == 0 and vx == 0 and cfg.max_speed > 0:
            vy = int(rng.integers(-cfg.max_speed, cfg.max_speed + 1))
            vx = int(rng.integers(-cfg.max_speed, cfg.max_speed + 1))
        cid = int(rng.choice(mov_ids))
        movers.append(_Sprite(cid, _texture(rng, table.palette[cid], mask.shape), mask, sy, sx, vy, vx))

    sprites = movers  # drawn over the rolled world in z-order

    def render(t: int):
        shift = yaw * t
        frame = np.roll(canvas, shift, axis=2)
        labels = np.roll(bg_labels, shift, axis=1)
        owner = np.zeros((height, width), dtype=np.int16)  # 0 = static world
        for k, sp in enumerate(sprites, start=1):
            _blit(frame, sp.texture, sp.mask, sp.y, sp.x)
            _blit(labels, np.full(sp.mask.shape, sp.class_id, np.uint8), sp.mask, sp.y, sp.x)
            _blit(owner, np.full(sp.mask.shape, k, np.int16), sp.mask, sp.y, sp.x)
        return frame, labels, owner

    frames: list[np.ndarray] = []
    segs: list[SegMap] = []
    flows: list[FlowField] = []
    valids: list[np.ndarray] = []
    owners: list[np.ndarray] = []

    ys, xs = np.mgrid[0:height, 0:width]
    for t in range(n):
        if t > 0:
            for sp in movers:
                sp.step(height, width)
        frame, labels, owner = render(t)
        frames.append(frame.astype(np.float32) / 255.0)
        segs.append(SegMap.from_labels(labels, table.num_classes, cfg.logit_magnitude))
        owners.append(owner)
        if t > 0:
            u = np.full((height, width), float(yaw), np.float32)
            v = np.zeros((height, width), np.float32)
            disp = {0: (0, yaw)}
            for k, sp in enumerate(sprites, start=1):
                disp[k] = sp.displacement
            for k, (dy, dx) in disp.items():
                if k == 0:
                    continue
                sel = owner == k
                u[sel] = dx
                v[sel] = dy
            flow = FlowField(u, v)
            flows.append(flow)
            # a pixel is warp-consistent iff its backward source is in
            # bounds and showed the same object in the previous frame
            sy = ys - v.astype(np.int64)
            sx = xs - u.astype(np.int64)
            inb = (sy >= 0) & (sy < height) & (sx >= 0) & (sx < width)
            same = np.zeros((height, width), bool)
            prev = owners[t - 1]
            same[inb] = prev[sy[inb], sx[inb]] == owner[inb]
            valids.append(inb & same)

    annotated = [(t + 1) % cfg.annotate_every == 0 for t in range(n)]
    return VideoSample(
        frames=frames,
        segs=segs,
        flows=flows,
        valid=valids,
        annotated=annotated,
        steering_angle=STEERING_DEG_PER_PX * yaw,
        camera_yaw=float(yaw),
        seed=cfg.seed,
        class_table_name=table.name,
    )


def derive_sample_seed(base_seed: int, index: int) -> int:
    """Stable per-sample seed for dataset generation."""
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF, int(index)])
    return int(ss.generate_state(1)[0])


def generate_dataset(cfg: SceneConfig, num_samples: int) -> list[VideoSample]:
    if num_samples < 0:
        raise ConfigError(f"num_samples must be >= 0, got {num_samples}")
    out = []
    for i in range(num_samples):
        out.append(generate_sequence(replace(cfg, seed=derive_sample_seed(cfg.seed, i))))
    return out


def check_warp_consistency(sample: VideoSample, tol: float = 1e-6) -> float:
    """Max |warp(frame_{t-1}, O_t) - frame_t| over all validity-mask pixels.

    Raises if the generator's analytic-flow invariant is violated.
    """
    from .warp import warp_image

    worst = 0.0
    for t in range(1, sample.num_frames):
        warped = warp_image(sample.frames[t - 1], sample.flow_into(t))
        err = np.abs(warped - sample.frames[t])[:, sample.valid_into(t)]
        if err.size:
            worst = max(worst, float(err.max()))
    if worst > tol:
        raise AssertionError(f"warp consistency violated: max error {worst} > {tol}")
    return worst
