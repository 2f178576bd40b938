"""Dataset persistence: one directory per sample, codec-free formats.

Layout::

    <root>/manifest.json            dataset summary + class/group tables
    <root>/sample_00000/
        manifest.json               per-sample: seed, steering, annotation flags
        frame_000.ppm .. frame_T-1  8-bit P6, exact under the /255 quantisation
        labels_000.segm ..          uint8 label maps [1,H,W]
        flow_001.flo .. flow_T-1    flow *into* frame t (from frame t-1)
        valid_001.segm ..           warp-validity masks, uint8 0/1 [1,H,W]

Teacher score maps are not stored: they are exactly +-logit_magnitude
one-hot in the label, so they are rebuilt on load.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import flowio
from .errors import FormatError
from .fields import FlowField, SegMap
from .synthgen import (
    CLASS_TABLES,
    SceneConfig,
    VideoSample,
    derive_sample_seed,
    generate_sequence,
)

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "scenecast-dataset"
DATASET_VERSION = 1


def _sample_dir_name(index: int) -> str:
    return f"sample_{index:05d}"


def write_sample(sample: VideoSample, dirpath: str | Path, logit_magnitude: float) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(sample.frames):
        rgb = np.round(frame * 255.0).astype(np.uint8)
        flowio.write_ppm(rgb.transpose(1, 2, 0), d / f"frame_{t:03d}.ppm")
        flowio.write_segm(sample.segs[t].labels, d / f"labels_{t:03d}.segm")
    for t in range(1, sample.num_frames):
        flowio.write_flo(sample.flow_into(t), d / f"flow_{t:03d}.flo")
        flowio.write_segm(sample.valid_into(t).astype(np.uint8), d / f"valid_{t:03d}.segm")
    manifest = {
        "seed": sample.seed,
        "num_frames": sample.num_frames,
        "steering_angle": sample.steering_angle,
        "camera_yaw": sample.camera_yaw,
        "annotated": sample.annotated,
        "class_table": sample.class_table_name,
        "logit_magnitude": logit_magnitude,
    }
    (d / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))


def read_sample(dirpath: str | Path) -> VideoSample:
    d = Path(dirpath)
    try:
        manifest = json.loads((d / MANIFEST_NAME).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable sample manifest in {d}: {e}") from e
    n = int(manifest["num_frames"])
    table = CLASS_TABLES[manifest["class_table"]]
    m = float(manifest["logit_magnitude"])
    frames, segs, flows, valids = [], [], [], []
    for t in range(n):
        rgb = flowio.read_ppm(d / f"frame_{t:03d}.ppm").transpose(2, 0, 1)
        frames.append(np.ascontiguousarray(rgb).astype(np.float32) / 255.0)
        labels = flowio.read_segm(d / f"labels_{t:03d}.segm")
        segs.append(SegMap.from_labels(labels, table.num_classes, m))
    for t in range(1, n):
        flows.append(flowio.read_flo(d / f"flow_{t:03d}.flo"))
        valids.append(flowio.read_segm(d / f"valid_{t:03d}.segm").astype(bool))
    return VideoSample(
        frames=frames,
        segs=segs,
        flows=flows,
        valid=valids,
        annotated=[bool(a) for a in manifest["annotated"]],
        steering_angle=float(manifest["steering_angle"]),
        camera_yaw=float(manifest["camera_yaw"]),
        seed=int(manifest["seed"]),
        class_table_name=manifest["class_table"],
    )


def write_dataset(cfg: SceneConfig, num_samples: int, root: str | Path) -> dict:
    """Generate and persist ``num_samples`` sequences; returns the manifest."""
    cfg.validate()
    rootp = Path(root)
    rootp.mkdir(parents=True, exist_ok=True)
    table = cfg.class_table
    entries = []
    for i in range(num_samples):
        seed_i = derive_sample_seed(cfg.seed, i)
        sample = generate_sequence(
            SceneConfig(**{**asdict(cfg), "seed": seed_i})
        )
        name = _sample_dir_name(i)
        write_sample(sample, rootp / name, cfg.logit_magnitude)
        entries.append(
            {
                "dir": name,
                "seed": seed_i,
                "steering_angle": sample.steering_angle,
                "camera_yaw": sample.camera_yaw,
            }
        )
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "num_samples": num_samples,
        "height": cfg.height,
        "width": cfg.width,
        "num_classes": cfg.num_classes,
        "sequence_length": cfg.sequence_length,
        "annotate_every": cfg.annotate_every,
        "logit_magnitude": cfg.logit_magnitude,
        "base_seed": cfg.seed,
        "class_table": {
            "name": table.name,
            "class_names": list(table.class_names),
            "groups": [int(g) for g in table.groups],
            "palette": [list(c) for c in table.palette],
        },
        "samples": entries,
    }
    (rootp / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return manifest


class Dataset:
    """Random access over a persisted dataset, with optional RAM caching."""

    def __init__(self, root: str | Path, cache: bool = True):
        self.root = Path(root)
        try:
            self.manifest = json.loads((self.root / MANIFEST_NAME).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise FormatError(f"not a dataset directory: {self.root} ({e})") from e
        if self.manifest.get("format") != DATASET_FORMAT:
            raise FormatError(f"{self.root}: manifest format tag mismatch")
        self._cache: dict[int, VideoSample] = {}
        self._do_cache = cache

    def __len__(self) -> int:
        return int(self.manifest["num_samples"])

    def __getitem__(self, i: int) -> VideoSample:
        if i < 0 or i >= len(self):
            raise IndexError(i)
        if i in self._cache:
            return self._cache[i]
        sample = read_sample(self.root / self.manifest["samples"][i]["dir"])
        if self._do_cache:
            self._cache[i] = sample
        return sample

    @property
    def class_table(self):
        return CLASS_TABLES[self.manifest["class_table"]["name"]]

    @property
    def num_classes(self) -> int:
        return int(self.manifest["num_classes"])
