"""Model zoo: a shared miniature encoder, the flow anticipating network with
three object-group branches, the parsing anticipating network, and the
transform layer that feeds flow features into the parsing decoder.

Everything is built from the in-house autodiff Tensor, NCHW layout, float32.
Initialization policy: He-normal conv/linear weights with zero biases,
except the second conv of every residual block and the parse head, which
start at zero so fresh residual paths are identities and a fresh parse
prediction reproduces the last observed score map.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    Tensor,
    concat_channels,
    conv2d,
    linear,
    slice_channels,
    upsample_bilinear,
)
from .errors import ConfigError, DimensionError, FormatError, UsageError
from .fields import Group


@dataclass(frozen=True)
class ModelConfig:
    history_len: int = 4
    num_classes: int = 8
    base_channels: int = 16
    encoder_blocks: int = 3
    branch_blocks: int = 2
    transform_blocks: int = 1
    # wiring flags; defaults give the full joint model
    use_transform: bool = True      # False: inject raw flow features (ablation)
    inject_features: bool = True    # False: parse net runs alone (S2S variant)
    predict_residual: bool = True   # parse head adds the last seg scores
    with_steering: bool = False

    def validate(self):
        if self.history_len < 1:
            raise ConfigError("history_len must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.base_channels < 1 or self.encoder_blocks < 1:
            raise ConfigError("base_channels and encoder_blocks must be >= 1")
        if self.branch_blocks < 0 or self.transform_blocks < 0:
            raise ConfigError("block counts must be >= 0")

    @property
    def stride(self) -> int:
        return 2**self.encoder_blocks

    def stage_channels(self) -> list[int]:
        # base, 2*base, 2*base, ... — capped so desk-scale stays cheap
        return [self.base_channels * min(2, 2**i) for i in range(self.encoder_blocks)]


class Module:
    """Minimal parameter container with torch-like attribute registration."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._children: OrderedDict[str, Module] = OrderedDict()

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self.__dict__.setdefault("_params", OrderedDict())[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", OrderedDict())[name] = value
        elif isinstance(value, ModuleList):
            self.__dict__.setdefault("_children", OrderedDict())[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._list: list[Module] = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module):
        setattr(self, str(len(self._list)), mod)
        self._list.append(mod)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, pad=None, rng=None, zero_init=False):
        super().__init__()
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        if zero_init:
            wdata = np.zeros((cout, cin, k, k), dtype=np.float32)
        else:
            wdata = _he(rng, (cout, cin, k, k), cin * k * k)
        self.w = Tensor(wdata, requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, din, dout, rng=None, zero_init=False):
        super().__init__()
        wdata = (
            np.zeros((din, dout), dtype=np.float32)
            if zero_init
            else _he(rng, (din, dout), din)
        )
        self.w = Tensor(wdata, requires_grad=True)
        self.b = Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        return linear(x, self.w, self.b)


class ResBlock(Module):
    """y = x + conv(relu(conv(x))); the second conv is zero-initialized so a
    fresh block is the identity."""

    def __init__(self, channels, rng):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, rng=rng)
        self.conv2 = Conv2d(channels, channels, rng=rng, zero_init=True)

    def forward(self, x):
        return x + self.conv2(self.conv1(x).relu())


class Encoder(Module):
    """Stride-2 conv + residual block per stage."""

    def __init__(self, cin, cfg: ModelConfig, rng):
        super().__init__()
        self.stages = ModuleList()
        c_prev = cin
        for c in cfg.stage_channels():
            stage = Module()
            # 4x4/stride-2/pad-1 halves even dims exactly
            stage.down = Conv2d(c_prev, c, k=4, stride=2, pad=1, rng=rng)
            stage.block = ResBlock(c, rng)
            self.stages.append(stage)
            c_prev = c
        self.out_channels = c_prev

    def forward(self, x):
        for stage in self.stages:
            x = stage.block(stage.down(x).relu())
        return x


class Decoder(Module):
    """Conv stack at rising resolution ending in a linear prediction head.

    Flow fields are smooth, so the flow decoders predict at 1/2 resolution
    and bilinearly upsample the field (``full_res_head=False``).  Parsing
    residuals need pixel-sharp edits, so the parse decoder upsamples its
    features first and runs the head at full resolution.
    """

    def __init__(self, cin, cout, cfg: ModelConfig, rng, zero_head=False,
                 full_res_head=False):
        super().__init__()
        c = cfg.base_channels
        self.full_res_head = full_res_head
        self.convs = ModuleList()
        c_prev = cin
        for _ in range(cfg.encoder_blocks - 1):
            self.convs.append(Conv2d(c_prev, c, rng=rng))
            c_prev = c
        self.head = Conv2d(c_prev, cout, rng=rng, zero_init=zero_head)

    def forward(self, x):
        for conv in self.convs:
            x = conv(upsample_bilinear(x, 2)).relu()
        if self.full_res_head:
            return self.head(upsample_bilinear(x, 2))
        return upsample_bilinear(self.head(x), 2)


class Branch(Module):
    """One object-group branch: residual trunk + its own flow decoder."""

    def __init__(self, channels, cfg: ModelConfig, rng):
        super().__init__()
        self.blocks = ModuleList(ResBlock(channels, rng) for _ in range(cfg.branch_blocks))
        self.decoder = Decoder(channels, 2, cfg, rng)

    def trunk(self, feats):
        for b in self.blocks:
            feats = b(feats)
        return feats

    def forward(self, feats):
        return self.decoder(self.trunk(feats))


class JointModel(Module):
    """Flow anticipating net + parsing anticipating net, coupled by the
    transform layer (flow features are transformed, then concatenated into
    the parsing decoder)."""

    def __init__(self, cfg: ModelConfig, init_seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([init_seed, 0x6E657473]))
        k, c_cls = cfg.history_len, cfg.num_classes
        self.flow_encoder = Encoder(3 * k, cfg, rng)
        feat_c = self.flow_encoder.out_channels
        self.branches = ModuleList(Branch(feat_c, cfg, rng) for _ in Group)
        self.transform = ModuleList(
            ResBlock(feat_c, rng) for _ in range(cfg.transform_blocks)
        )
        self.parse_encoder = Encoder(c_cls * k, cfg, rng)
        dec_in = self.parse_encoder.out_channels + (feat_c if cfg.inject_features else 0)
        self.parse_fuse = Conv2d(dec_in, feat_c, rng=rng)
        # zero head + residual skip: a fresh model reproduces S_{t-1}, so early
        # rollouts stay near the copy-last regime instead of emitting noise
        self.parse_decoder = Decoder(
            feat_c, c_cls, cfg, rng, zero_head=True, full_res_head=True
        )
        if cfg.with_steering:
            # reads the pooled static-branch field (the ego-motion estimate)
            self.steering_head = Linear(2, 1, rng=rng)

    # -- flow pathway ------------------------------------------------------------

    def _check_spatial(self, h, w):
        s = self.cfg.stride
        if h % s or w % s:
            raise DimensionError(f"spatial dims {h}x{w} not divisible by {s}")

    def flow_features(self, frames: Tensor) -> Tensor:
        n, c, h, w = frames.shape
        if c != 3 * self.cfg.history_len:
            raise UsageError(
                f"expected {self.cfg.history_len} stacked RGB frames "
                f"({3 * self.cfg.history_len} channels), got {c}"
            )
        self._check_spatial(h, w)
        return self.flow_encoder(frames)

    def flow_forward(self, frames: Tensor, group_mask: np.ndarray):
        """Returns (merged [N,2,H,W], branch fields 3x[N,2,H,W], features).

        ``merged(p)`` is the field of the branch owning ``group_mask(p)``;
        the mask routes gradients so each branch learns only on its region.
        """
        feats = self.flow_features(frames)
        fields = [branch(feats) for branch in self.branches]
        merged = self.merge_fields(fields, group_mask)
        return merged, fields, feats

    def merge_fields(self, fields, group_mask: np.ndarray) -> Tensor:
        group_mask = np.asarray(group_mask)
        if group_mask.ndim == 2:
            group_mask = group_mask[None]
        n, _, h, w = fields[0].shape
        if group_mask.shape != (n, h, w):
            raise DimensionError(
                f"group mask {group_mask.shape} does not match fields {(n, h, w)}"
            )
        merged = None
        for g in Group:
            sel = Tensor((group_mask == int(g)).astype(np.float32)[:, None])
            term = fields[int(g)] * sel
            merged = term if merged is None else merged + term
        return merged

    # -- parsing pathway -----------------------------------------------------------

    def transformed_features(self, feats: Tensor) -> Tensor:
        if not self.cfg.use_transform:
            return feats
        for block in self.transform:
            feats = block(feats)
        return feats

    def parse_forward(
        self,
        segs: Tensor,
        flow_feats: Tensor | None,
        prev_scores: Tensor | None = None,
    ) -> Tensor:
        n, c, h, w = segs.shape
        k, c_cls = self.cfg.history_len, self.cfg.num_classes
        if c != k * c_cls:
            raise DimensionError(
                f"expected {k} stacked {c_cls}-class score maps ({k * c_cls} "
                f"channels), got {c}"
            )
        self._check_spatial(h, w)
        enc = self.parse_encoder(segs)
        if self.cfg.inject_features:
            if flow_feats is None:
                raise UsageError("model is configured to inject flow features")
            enc = concat_channels([enc, flow_feats])
        logits = self.parse_decoder(self.parse_fuse(enc).relu())
        if self.cfg.predict_residual:
            base = prev_scores
            if base is None:
                base = slice_channels(segs, (k - 1) * c_cls, k * c_cls)
            logits = logits + base
        return logits

    # -- joint ---------------------------------------------------------------------

    def forward(self, frames: Tensor, segs: Tensor, group_mask: np.ndarray):
        return joint_forward(self, frames, segs, group_mask)

    def steering(self, feats: Tensor) -> Tensor:
        """Predicted steering angle [N,1] in degrees.

        The static-group branch anticipates the camera-induced field, so its
        spatial mean is a direct pan-rate estimate; the wheel angle is a
        linear function of that.  (Feature-map pooling does not work here:
        the scene wraps cyclically, so pooled conv activations are nearly
        shift-invariant and carry almost no ego-motion signal.)
        """
        if not self.cfg.with_steering:
            raise UsageError("model was built without a steering head")
        field = self.branches[int(Group.STA)](feats)
        pooled = field.mean(axis=(2, 3))
        return self.steering_head(pooled)


@dataclass
class JointOutput:
    flow: Tensor                 # merged field [N,2,H,W]
    branch_fields: list          # 3 x [N,2,H,W]
    logits: Tensor               # [N,C,H,W]
    flow_feats: Tensor           # encoder tap [N,F,H/s,W/s]
    injected: Tensor | None      # what the parse decoder consumed


def joint_forward(
    model: JointModel, frames: Tensor, segs: Tensor, group_mask: np.ndarray
) -> JointOutput:
    """Run both networks; the parsing decoder consumes transformed flow features."""
    merged, fields, feats = model.flow_forward(frames, group_mask)
    injected = None
    if model.cfg.inject_features:
        injected = model.transformed_features(feats)
    logits = model.parse_forward(segs, injected)
    return JointOutput(merged, fields, logits, feats, injected)


# -- checkpoints ---------------------------------------------------------------------

CKPT_MAGIC = b"JANT"
CKPT_VERSION = 1


def save_checkpoint(
    path,
    model: JointModel,
    extra_blobs: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    """magic, version u32, config JSON, then named float32 blobs (LE)."""
    doc = json.dumps({"model": asdict(model.cfg), "meta": meta or {}}).encode()
    blobs: list[tuple[str, np.ndarray]] = list(model.named_parameters())
    blobs = [(name, p.data) for name, p in blobs]
    for name, arr in (extra_blobs or {}).items():
        blobs.append((name, arr))
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(doc)))
        f.write(doc)
        f.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            arr = np.asarray(arr, dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict, dict[str, np.ndarray]]:
    """Returns (config, meta, name->array)."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (doc_len,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    doc = json.loads(raw[pos : pos + doc_len].decode())
    pos += doc_len
    (n_blobs,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    blobs: dict[str, np.ndarray] = {}
    for _ in range(n_blobs):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode()
        pos += name_len
        ndim = raw[pos]
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        blobs[name] = (
            np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
            .reshape(shape)
            .copy()
        )
        pos += 4 * count
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    cfg = ModelConfig(**doc["model"])
    return cfg, doc.get("meta", {}), blobs


def with_steering_head(model: JointModel, init_seed: int = 0) -> JointModel:
    """Copy of the model with a fresh steering head attached."""
    import dataclasses

    if model.cfg.with_steering:
        return model
    new = JointModel(
        dataclasses.replace(model.cfg, with_steering=True), init_seed=init_seed
    )
    src = dict(model.named_parameters())
    for name, p in new.named_parameters():
        if name in src:
            p.data = src[name].data.copy()
    return new


def model_from_checkpoint(path) -> tuple[JointModel, dict, dict[str, np.ndarray]]:
    """Rebuild a model; leftover blobs (e.g. optimizer state) are returned."""
    cfg, meta, blobs = load_checkpoint(path)
    model = JointModel(cfg)
    for name, p in model.named_parameters():
        if name not in blobs:
            raise FormatError(f"checkpoint is missing parameter {name!r}")
        arr = blobs.pop(name)
        if arr.shape != p.data.shape:
            raise FormatError(
                f"checkpoint parameter {name!r}: shape {arr.shape} != {p.data.shape}"
            )
        p.data = arr
    return model, meta, blobs
