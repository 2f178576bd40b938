"""The ten acceptance checks, one test each, in order.

Each test prints a single PASS/FAIL line (run with ``pytest -s`` to stream
them).  These are end-to-end gates layered on top of the per-module unit
tests; several re-derive their expectations from scratch (brute-force loops,
byte-level oracles) on purpose.
"""

import dataclasses
import json
import os
import struct
import subprocess
import sys
import time

import numpy as np
import pytest

from scenecast import flowio
from scenecast.autodiff import (
    Tensor,
    absolute,
    concat,
    concat_channels,
    conv2d,
    exp,
    grad_check,
    linear,
    log,
    log_softmax_channels,
    reshape,
    slice_axis,
    slice_channels,
    softmax_channels,
    sqrt,
    upsample_bilinear,
)
from scenecast.bench import run_benchmark
from scenecast.fields import FlowField, Group, SegMap
from scenecast.losses import flow_group_loss, seg_ce_loss, seg_l1_gdl_loss, total_loss
from scenecast.metrics import epe, miou
from scenecast.nets import JointModel, load_checkpoint, save_checkpoint
from scenecast.steering import evaluate_steering, train_steering
from scenecast.synthgen import (
    DESK8,
    SceneConfig,
    check_warp_consistency,
    generate_dataset,
    generate_sequence,
)
from scenecast.trainer import (
    TrainConfig,
    bptt_finetune,
    compute_unrolled_loss,
    fit,
    make_batch,
)
from scenecast.warp import backward_warp, warp_image

from conftest import TINY_MODEL, TINY_SCENE


def _verdict(num: int, title: str, ok: bool, detail: str = "") -> None:
    tag = "PASS" if ok else "FAIL"
    line = f"[{tag}] criterion {num:2d}: {title}"
    if detail:
        line += f" ({detail})"
    print(line, flush=True)
    assert ok, line


# -- 1: gradient suite ---------------------------------------------------------------


def _far_from_kinks(pred: np.ndarray, teacher: np.ndarray, margin: float) -> bool:
    """True when no |.| in the l1+GDL graph sits within ``margin`` of its kink."""
    if np.min(np.abs(pred - teacher)) < margin:
        return False
    for ax in (-2, -1):
        dp = np.abs(np.diff(pred, axis=ax))
        dt = np.abs(np.diff(teacher, axis=ax))
        if dp.size and (dp.min() < margin or np.min(np.abs(dp - dt)) < margin):
            return False
    return True


def _op_battery(seed: int) -> float:
    r = np.random.default_rng(seed)

    def t(*shape, positive=False, spread=False):
        x = r.standard_normal(shape)
        if positive:
            x = np.abs(x) + 0.5
        if spread:  # keep |x| away from kinks of relu/abs/sqrt
            x = x + 0.5 * np.sign(x) + (x == 0)
        return Tensor(x, requires_grad=True, dtype=np.float64)

    worst = 0.0

    def check(f, *inputs):
        nonlocal worst
        worst = max(worst, grad_check(f, inputs))

    w = t(3, 2, 3, 3)
    b = t(3)
    check(lambda x, w, b: conv2d(x, w, b, stride=1, pad=1).sum(), t(2, 2, 4, 4), w, b)
    check(lambda x, w, b: conv2d(x, w, b, stride=2, pad=1).sum(), t(2, 2, 7, 7), w, b)
    check(lambda x, w, b: linear(x, w, b).sum(), t(3, 4), t(4, 2), t(2))
    check(lambda x: upsample_bilinear(x, 2).sum(), t(1, 2, 3, 4))
    check(lambda x: x.relu().sum(), t(2, 5, spread=True))
    check(lambda x: absolute(x).sum(), t(2, 5, spread=True))
    check(lambda x: sqrt(x).sum(), t(2, 5, positive=True))
    check(lambda x: exp(x).mean(), t(2, 3))
    check(lambda x: log(x).mean(), t(2, 3, positive=True))
    check(lambda a, b: (a * b + a - b).mean(), t(2, 1, 4), t(4))
    check(lambda x: (-x / 3.0).sum(), t(3, 3))
    check(lambda x: x.mean(axis=(1, 2), keepdims=True).sum(), t(2, 3, 4))
    check(lambda x: reshape(x, (4, 6)).sum(), t(2, 3, 4))
    check(lambda a, b: concat([a, b], axis=1).sum(), t(2, 2, 3), t(2, 1, 3))
    check(lambda a, b: concat_channels([a, b]).sum(), t(1, 2, 3, 3), t(1, 1, 3, 3))
    check(lambda x: slice_channels(x, 1, 3).sum(), t(1, 4, 3, 3))
    check(lambda x: slice_axis(x, 0, 0, 1).sum(), t(2, 3))
    check(lambda x: (softmax_channels(x) * softmax_channels(x)).sum(), t(1, 4, 2, 2))
    check(lambda x: log_softmax_channels(x).sum(), t(1, 4, 2, 2))
    src = t(1, 2, 4, 4)
    # fractional parts stay in (0.2, 0.8): off bilinear cell edges and clamps
    flow = Tensor(
        r.uniform(0.2, 0.8, (1, 2, 4, 4)), requires_grad=True, dtype=np.float64
    )
    check(lambda s, f: backward_warp(s, f).sum(), src, flow)

    # losses
    while True:
        fields = [t(1, 2, 3, 4, spread=True) for _ in Group]
        target = r.integers(-2, 3, (1, 2, 3, 4)).astype(np.float64)
        if all(
            np.min(np.hypot(*(f.data - target)[0])) > 0.02 for f in fields
        ):
            break
    mask = r.integers(0, 3, (1, 3, 4))
    check(lambda *fs: flow_group_loss(list(fs), target, mask)[0], *fields)
    labels = r.integers(0, 4, (1, 3, 4))
    check(lambda x: seg_ce_loss(x, labels), t(1, 4, 3, 4))
    while True:
        pred = t(1, 3, 4, 4)
        teach = r.standard_normal((1, 3, 4, 4))
        if _far_from_kinks(pred.data, teach, 0.02):
            break
    check(lambda x: seg_l1_gdl_loss(x, teach), pred)
    check(
        lambda *fs: total_loss(
            list(fs[:3]), fs[3], target, mask, annotated=True, gt_labels=labels[0]
        ).graph,
        *fields,
        t(1, 4, 3, 4),
    )
    return worst


def test_criterion_01_gradient_suite():
    t0 = time.monotonic()
    worst = max(_op_battery(seed) for seed in range(20))
    wall = time.monotonic() - t0
    ok = worst < 1e-3 and wall < 120.0
    _verdict(1, "gradient checks, 20 seeds", ok,
             f"max rel err {worst:.2e}, {wall:.1f}s")


# -- 2: metric oracles ---------------------------------------------------------------


def test_criterion_02_metric_oracles():
    r = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        pu, pv, gu, gv = (r.uniform(-4, 4, (8, 8)).astype(np.float32)
                          for _ in range(4))
        got = epe(FlowField(pu, pv), FlowField(gu, gv))
        want = np.mean([
            ((pu[y, x] - gu[y, x]) ** 2 + (pv[y, x] - gv[y, x]) ** 2) ** 0.5
            for y in range(8) for x in range(8)
        ])
        worst = max(worst, abs(got - want))

        c = int(r.integers(2, 6))
        pred = r.integers(0, c, (8, 8))
        gt = r.integers(0, c, (8, 8))
        got_miou, _ = miou(pred, gt, c)
        pers = []
        for cls in range(c):
            inter = sum(
                pred[y, x] == cls and gt[y, x] == cls
                for y in range(8) for x in range(8)
            )
            union = sum(
                pred[y, x] == cls or gt[y, x] == cls
                for y in range(8) for x in range(8)
            )
            if union:
                pers.append(inter / union)
        worst = max(worst, abs(got_miou - np.mean(pers)))
    _verdict(2, "epe/miou match brute force on 100 8x8 cases", worst < 1e-6,
             f"max abs diff {worst:.2e}")


# -- 3: warp exactness ---------------------------------------------------------------


def test_criterion_03_warp_exactness(tiny_sample):
    r = np.random.default_rng(3)
    img = r.random((3, 12, 16), dtype=np.float32)
    zero = FlowField.zeros(12, 16)
    identity_ok = np.array_equal(warp_image(img, zero), img)

    dy, dx = 3, -2
    shift = FlowField(np.full((12, 16), dx, np.float32),
                      np.full((12, 16), dy, np.float32))
    got = warp_image(img, shift)
    yy = np.clip(np.arange(12)[:, None] - dy, 0, 11)
    xx = np.clip(np.arange(16)[None, :] - dx, 0, 15)
    translation_ok = np.array_equal(got, img[:, yy, xx])

    worst = check_warp_consistency(tiny_sample, tol=1e-6)
    _verdict(3, "warp identity/translation/generator consistency",
             identity_ok and translation_ok and worst <= 1e-6,
             f"consistency {worst:.2e}")


# -- 4: format fidelity --------------------------------------------------------------


def test_criterion_04_format_fidelity(tmp_path):
    r = np.random.default_rng(4)
    flow = FlowField(
        r.standard_normal((5, 7)).astype(np.float32),
        r.standard_normal((5, 7)).astype(np.float32),
    )
    p = tmp_path / "x.flo"
    flowio.write_flo(flow, p)
    back = flowio.read_flo(p)
    flo_ok = (np.array_equal(flow.u, back.u, equal_nan=True)
              and np.array_equal(flow.v, back.v, equal_nan=True))

    one = tmp_path / "one.flo"
    flowio.write_flo(FlowField(np.array([[1.0]], np.float32),
                               np.array([[-2.0]], np.float32)), one)
    oracle = (struct.pack("<f", 202021.25)
              + b"\x01\x00\x00\x00" + b"\x01\x00\x00\x00"
              + struct.pack("<ff", 1.0, -2.0))
    bytes_ok = one.read_bytes() == oracle

    model = JointModel(TINY_MODEL, init_seed=11)
    ck = tmp_path / "m.ckpt"
    save_checkpoint(ck, model, meta={"note": "acceptance"})
    cfg, meta, blobs = load_checkpoint(ck)
    ckpt_ok = cfg == model.cfg and meta == {"note": "acceptance"} and all(
        np.array_equal(blobs[n], p_.data) for n, p_ in model.named_parameters()
    )
    _verdict(4, ".flo + checkpoint roundtrips, 20-byte oracle",
             flo_ok and bytes_ok and ckpt_ok)


# -- 5: flow loss semantics ----------------------------------------------------------


def test_criterion_05_flow_loss_semantics():
    # hand case: one MOV pixel with error (3,4), one STA pixel with error (1,0)
    fields = [Tensor(np.zeros((1, 2, 1, 2), np.float32), requires_grad=True)
              for _ in Group]
    target = np.zeros((1, 2, 1, 2), np.float32)
    target[0, :, 0, 0] = (-3.0, -4.0)
    target[0, :, 0, 1] = (-1.0, 0.0)
    mask = np.array([[[int(Group.MOV), int(Group.STA)]]])
    total, per_group = flow_group_loss(fields, target, mask)
    hand_ok = (abs(per_group[int(Group.MOV)] - 5.0) < 1e-6
               and abs(per_group[int(Group.STA)] - 1.0) < 1e-6
               and per_group[int(Group.OTH)] == 0.0)
    sum_ok = abs(float(total.data) - sum(per_group)) < 1e-6

    total.backward()
    mov_g = fields[int(Group.MOV)].grad
    sta_g = fields[int(Group.STA)].grad
    grad_ok = (
        mov_g[0, :, 0, 1].tolist() == [0.0, 0.0]       # MOV zero outside N_MOV
        and sta_g[0, :, 0, 0].tolist() == [0.0, 0.0]   # STA zero outside N_STA
        and np.abs(mov_g[0, :, 0, 0]).sum() > 0
        and fields[int(Group.OTH)].grad is None        # empty group: no gradient
    )
    _verdict(5, "flow loss per-group masking and hand case",
             hand_ok and sum_ok and grad_ok)


# -- 6: seg loss semantics -----------------------------------------------------------


def test_criterion_06_seg_loss_semantics(tiny_samples, desk8):
    errs = []
    for c in (2, 8, 19):
        uniform = Tensor(np.zeros((1, c, 3, 5), np.float32))
        labels = np.random.default_rng(c).integers(0, c, (1, 3, 5))
        errs.append(abs(float(seg_ce_loss(uniform, labels).data) - np.log(c)))
    ce_ok = max(errs) < 1e-5

    # teacher on a binary-fraction lattice so "+ constant" is exact in float32
    r = np.random.default_rng(6)
    teacher = (np.round(r.standard_normal((1, 4, 6, 6)) * 4) / 4).astype(np.float32)
    offs = []
    for off in (0.75, -1.25):
        loss = seg_l1_gdl_loss(Tensor(teacher + np.float32(off)), teacher)
        offs.append(abs(float(loss.data) - abs(off)))
    l1_ok = max(offs) < 1e-6

    # the mode switch follows the annotation flag of each target frame
    model = JointModel(TINY_MODEL, init_seed=2)
    annotated = [t for t in range(4, 8) if tiny_samples[0].annotated[t]]
    plain = [t for t in range(4, 8) if not tiny_samples[0].annotated[t]]
    b_ce = make_batch(tiny_samples, [(0, annotated[0] - 4)], 4, 1, desk8)
    b_l1 = make_batch(tiny_samples, [(0, plain[0] - 4)], 4, 1, desk8)
    mode_ok = (
        compute_unrolled_loss(model, b_ce, desk8, 1).seg_mode == "ce"
        and compute_unrolled_loss(model, b_l1, desk8, 1).seg_mode == "l1gdl"
    )
    _verdict(6, "seg loss: ln C uniform CE, |c| offset L1+GDL, mode switch",
             ce_ok and l1_ok and mode_ok,
             f"ce err {max(errs):.1e}, l1 err {max(offs):.1e}")


# -- 7: rollout / BPTT ---------------------------------------------------------------


def test_criterion_07_rollout_bptt(tiny_samples, desk8):
    from scenecast.nets import joint_forward
    from scenecast.trainer import rollout

    model = JointModel(TINY_MODEL, init_seed=3)
    s = tiny_samples[0]
    preds = rollout(model, s.frames[:4], s.segs[:4], desk8, horizon=1)
    frames = Tensor(np.concatenate(s.frames[:4])[None])
    segs = Tensor(np.concatenate([x.scores for x in s.segs[:4]])[None])
    out = joint_forward(model, frames, segs, desk8.group_lut()[s.segs[3].labels][None])
    roll_ok = (np.array_equal(preds[0][0].as_array(), out.flow.data[0])
               and np.array_equal(preds[0][1].scores, out.logits.data[0]))

    cfg = TrainConfig(learning_rate=1e-3, batch_size=2, seed=9, bptt_steps=1)
    a = JointModel(TINY_MODEL, init_seed=3)
    fit(a, tiny_samples, cfg, desk8, num_steps=2)
    b = JointModel(TINY_MODEL, init_seed=3)
    bptt_finetune(b, tiny_samples, cfg, desk8, num_steps=2)
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    bptt1_ok = all(np.array_equal(pa[n].data, pb[n].data) for n in pa)

    # unrolling a second step changes gradients: the step-2 loss reaches
    # the parameters through the step-1 prediction
    model = JointModel(TINY_MODEL, init_seed=3)
    batch = make_batch(tiny_samples, [(0, 0), (1, 1)], 4, 2, desk8)
    grads = {}
    for unroll in (1, 2):
        model.zero_grad()
        compute_unrolled_loss(model, batch, desk8, unroll).graph.backward()
        grads[unroll] = {n: (p.grad.copy() if p.grad is not None else None)
                         for n, p in model.named_parameters()}
    step2_ok = any(
        g1 is not None and g2 is not None and not np.array_equal(g1, g2)
        for (g1, g2) in ((grads[1][n], grads[2][n]) for n in grads[1])
    )
    _verdict(7, "rollout T=1 bitwise, BPTT(1) == plain step, step-2 gradient",
             roll_ok and bptt1_ok and step2_ok)


# -- 8: directional benchmark --------------------------------------------------------


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_criterion_08_directional_benchmark():
    t0 = time.monotonic()
    result = run_benchmark(seeds=(1, 2, 3))
    wall = time.monotonic() - t0
    v = result["verdict"]
    for seed, rep in result["per_seed"].items():
        print(
            f"    seed {seed}: joint epe {rep['joint']['epe']:.4f} "
            f"miou {rep['joint']['miou']:.4f} | copy {rep['copy']['epe']:.4f}"
            f"/{rep['copy']['miou']:.4f} | warp {rep['warp']['epe']:.4f}"
            f"/{rep['warp']['miou']:.4f} | wo_t miou "
            f"{rep['wo_transform']['miou']:.4f} | 10-step miou "
            f"{rep['joint10']['miou']:.4f} -> {rep['joint_bptt10']['miou']:.4f}",
            flush=True,
        )
    ok = (v["beats_baselines_all_seeds"] and v["transform_helps"]
          and v["bptt_helps"] and wall < 1800.0)
    _verdict(8, "joint model beats baselines; transform and BPTT help", ok,
             f"{wall/60:.1f} min")


# -- 9: steering ---------------------------------------------------------------------


def test_criterion_09_steering():
    t0 = time.monotonic()
    scene = dataclasses.replace(
        TINY_SCENE, height=64, width=64, num_shapes=2, sequence_length=6,
        max_yaw=2, seed=900,
    )
    data = generate_dataset(scene, 56)
    train, held = data[:44], data[44:]
    model = JointModel(
        dataclasses.replace(TINY_MODEL, with_steering=True), init_seed=5
    )
    cfg = TrainConfig(learning_rate=2e-3, batch_size=4, seed=5)
    train_steering(model, train, held, cfg, num_steps=260)
    mse, rows = evaluate_steering(model, held)
    gts = np.array([gt for _, _, gt in rows])
    var = float(np.var(gts))
    wall = time.monotonic() - t0
    ok = var > 0 and mse < 0.25 * var and wall < 300.0
    _verdict(9, "steering MSE beats predict-the-mean 4x", ok,
             f"mse {mse:.2f} vs var {var:.2f}, {wall:.0f}s")


# -- 10: determinism -----------------------------------------------------------------


def test_criterion_10_pipeline_determinism(tmp_path):
    def pipeline(root):
        env = dict(os.environ, OPENBLAS_NUM_THREADS="1")

        def cli(*argv):
            proc = subprocess.run(
                [sys.executable, "-m", "scenecast.cli", *argv],
                capture_output=True, text=True, env=env,
            )
            assert proc.returncode == 0, proc.stderr
            return proc

        data = root / "data"
        cli("gen", "--out", str(data), "--num-samples", "3", "--height", "32",
            "--width", "32", "--sequence-length", "6", "--num-shapes", "2",
            "--seed", "17")
        ckpt = root / "model.ckpt"
        cli("train", "--data", str(data), "--out", str(ckpt), "--steps", "4",
            "--learning-rate", "0.001", "--batch-size", "2",
            "--base-channels", "8", "--encoder-blocks", "2",
            "--branch-blocks", "1", "--seed", "17")
        report = cli("eval", "--ckpt", str(ckpt), "--data", str(data)).stdout
        return report, ckpt.read_bytes()

    a = pipeline(tmp_path / "run1")
    b = pipeline(tmp_path / "run2")
    _verdict(10, "gen->train->eval reproduces bitwise", a == b)
