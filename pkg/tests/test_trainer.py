"""Training loop invariants: SGD arithmetic, batch scheduling, determinism,
resume semantics, single-batch overfitting, and recursive-unroll gradients."""

import dataclasses

import numpy as np
import pytest

from scenecast.autodiff import Tensor
from scenecast.errors import TrainingDivergedError, UsageError
from scenecast.nets import JointModel, joint_forward
from scenecast.trainer import (
    LR_DECAY_FACTOR,
    LR_DECAY_FRACTION,
    SGD,
    TrainConfig,
    bptt_finetune,
    compute_unrolled_loss,
    evaluate_model,
    fit,
    load_training_state,
    lr_at,
    make_batch,
    num_anchors,
    rollout,
    save_training_state,
    schedule_picks,
    train_one_step,
)

from conftest import TINY_MODEL


def _tc(**kw):
    base = dict(learning_rate=3e-3, momentum=0.9, weight_decay=5e-4,
                batch_size=2, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def _params_equal(a, b):
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    assert pa.keys() == pb.keys()
    return all(np.array_equal(pa[k].data, pb[k].data) for k in pa)


# -- SGD ------------------------------------------------------------------------


def test_sgd_single_step_arithmetic():
    p = Tensor(np.array([2.0, -1.0], np.float32), requires_grad=True)
    opt = SGD([("p", p)], momentum=0.5, weight_decay=0.1)
    p.grad = np.array([1.0, 2.0], np.float32)
    opt.step(lr=0.1)
    # v = g + wd*p ; p' = p - lr*v
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 1.2, -1.0 - 0.1 * 1.9],
                               rtol=1e-6)
    p.grad = np.array([0.0, 0.0], np.float32)
    opt.step(lr=0.1)
    # v' = 0.5*v + wd*p
    v1 = np.array([1.2, 1.9])
    p1 = np.array([2.0, -1.0]) - 0.1 * v1
    v2 = 0.5 * v1 + 0.1 * p1
    np.testing.assert_allclose(p.data, (p1 - 0.1 * v2).astype(np.float32),
                               rtol=1e-6)


def test_sgd_skips_params_without_grads():
    p = Tensor(np.ones(3, np.float32), requires_grad=True)
    opt = SGD([("p", p)], momentum=0.9, weight_decay=0.5)
    opt.step(lr=1.0)
    np.testing.assert_array_equal(p.data, np.ones(3))


def test_zero_lr_changes_nothing(tiny_samples, desk8):
    model = JointModel(TINY_MODEL, init_seed=3)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    opt = SGD(list(model.named_parameters()), 0.9, 5e-4)
    batch = make_batch(tiny_samples, [(0, 0), (1, 1)], 4, 1, desk8)
    train_one_step(model, opt, batch, 0.0, desk8)
    for n, p in model.named_parameters():
        np.testing.assert_array_equal(p.data, before[n])


# -- batches and scheduling -------------------------------------------------------


def test_num_anchors():
    assert num_anchors(8, 4, 1) == 4
    assert num_anchors(8, 4, 2) == 3
    assert num_anchors(5, 4, 2) == 0


def test_make_batch_slices_the_right_frames(tiny_samples, desk8):
    s = tiny_samples[1]
    batch = make_batch(tiny_samples, [(1, 2)], 4, 2, desk8)
    np.testing.assert_array_equal(
        batch.frames[0], np.concatenate([s.frames[t] for t in range(2, 6)])
    )
    np.testing.assert_array_equal(
        batch.segs[0], np.concatenate([s.segs[t].scores for t in range(2, 6)])
    )
    np.testing.assert_array_equal(
        batch.group_mask[0], desk8.group_lut()[s.segs[5].labels]
    )
    assert batch.steps == 2
    np.testing.assert_array_equal(batch.flow_targets[0, 0],
                                  s.flow_into(6).as_array())
    np.testing.assert_array_equal(batch.flow_targets[1, 0],
                                  s.flow_into(7).as_array())
    np.testing.assert_array_equal(batch.labels[1, 0], s.segs[7].labels)
    assert batch.annotated[0, 0] == s.annotated[6]


def test_make_batch_rejects_out_of_range(tiny_samples, desk8):
    with pytest.raises(UsageError):
        make_batch(tiny_samples, [(0, 5)], 4, 1, desk8)  # needs frame 9 of 8
    with pytest.raises(UsageError):
        make_batch(tiny_samples, [(0, -1)], 4, 1, desk8)


def test_schedule_picks_are_pure_and_in_range():
    a = schedule_picks(7, 42, 11, 3, 8)
    b = schedule_picks(7, 42, 11, 3, 8)
    assert a == b
    assert schedule_picks(7, 43, 11, 3, 8) != a
    assert schedule_picks(8, 42, 11, 3, 8) != a
    assert all(0 <= i < 11 and 0 <= t < 3 for i, t in a)
    with pytest.raises(UsageError):
        schedule_picks(0, 0, 0, 3, 8)


def test_lr_schedule_decays_once():
    assert lr_at(0, 300, 0.01) == 0.01
    assert lr_at(199, 300, 0.01) == 0.01
    assert lr_at(200, 300, 0.01) == pytest.approx(0.001)
    assert LR_DECAY_FACTOR == 0.1
    assert LR_DECAY_FRACTION == pytest.approx(2 / 3)


# -- determinism and resume -------------------------------------------------------


def test_fit_is_deterministic(tiny_samples, desk8):
    runs = []
    for _ in range(2):
        model = JointModel(TINY_MODEL, init_seed=3)
        fit(model, tiny_samples, _tc(), desk8, num_steps=5)
        runs.append(model)
    assert _params_equal(*runs)


def test_resume_is_bitwise(tiny_samples, desk8, tmp_path):
    cfg = _tc()
    straight = JointModel(TINY_MODEL, init_seed=3)
    fit(straight, tiny_samples, cfg, desk8, num_steps=8)

    resumed = JointModel(TINY_MODEL, init_seed=3)
    opt, _ = fit(resumed, tiny_samples, cfg, desk8, num_steps=8, stop_step=3)
    ckpt = tmp_path / "state.ckpt"
    save_training_state(ckpt, resumed, opt, meta={"step": 3})
    loaded, opt2, meta = load_training_state(ckpt, cfg)
    assert meta["step"] == 3
    fit(loaded, tiny_samples, cfg, desk8, num_steps=8, start_step=3, opt=opt2)
    assert _params_equal(straight, loaded)


def test_fit_logs_loss_records(tiny_samples, desk8):
    model = JointModel(TINY_MODEL, init_seed=3)
    seen = []
    _, history = fit(model, tiny_samples, _tc(), desk8, num_steps=3,
                     log=seen.append)
    assert len(history) == 3 and seen == history
    assert [r["step"] for r in history] == [0, 1, 2]
    assert all(np.isfinite(r["loss"]["combined"]) for r in history)


# -- the training signal itself ----------------------------------------------------


def test_overfits_a_single_batch(tiny_samples, desk8):
    # the spec-level sanity bar: 200 repeats of one batch halve the loss
    model = JointModel(TINY_MODEL, init_seed=3)
    opt = SGD(list(model.named_parameters()), 0.9, 5e-4)
    batch = make_batch(tiny_samples, [(0, 0), (1, 2), (2, 3)], 4, 1, desk8)
    first = train_one_step(model, opt, batch, 3e-3, desk8).combined
    last = None
    for _ in range(199):
        last = train_one_step(model, opt, batch, 3e-3, desk8).combined
    assert last < 0.5 * first


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(tiny_samples, desk8):
    model = JointModel(TINY_MODEL, init_seed=3)
    opt = SGD(list(model.named_parameters()), 0.9, 5e-4)
    batch = make_batch(tiny_samples, [(0, 0)], 4, 1, desk8)
    with pytest.raises(TrainingDivergedError):
        for _ in range(50):
            train_one_step(model, opt, batch, 1e6, desk8)


# -- rollout and BPTT ---------------------------------------------------------------


def test_rollout_one_step_equals_single_forward(tiny_model, tiny_sample, desk8):
    k = tiny_model.cfg.history_len
    preds = rollout(tiny_model, tiny_sample.frames[:k], tiny_sample.segs[:k],
                    desk8, horizon=1)
    assert len(preds) == 1
    frames = Tensor(np.concatenate(tiny_sample.frames[:k])[None])
    segs = Tensor(np.concatenate([s.scores for s in tiny_sample.segs[:k]])[None])
    gmask = desk8.group_lut()[tiny_sample.segs[k - 1].labels][None]
    out = joint_forward(tiny_model, frames, segs, gmask)
    np.testing.assert_array_equal(preds[0][0].as_array(), out.flow.data[0])
    np.testing.assert_array_equal(preds[0][1].scores, out.logits.data[0])


def test_rollout_requires_full_history(tiny_model, tiny_sample, desk8):
    with pytest.raises(UsageError):
        rollout(tiny_model, tiny_sample.frames[:2], tiny_sample.segs[:2],
                desk8, horizon=1)
    k = tiny_model.cfg.history_len
    with pytest.raises(UsageError):
        rollout(tiny_model, tiny_sample.frames[:k], tiny_sample.segs[:k],
                desk8, horizon=0)


def test_bptt_steps_one_equals_plain_training(tiny_samples, desk8):
    cfg = _tc(bptt_steps=1)
    a = JointModel(TINY_MODEL, init_seed=3)
    fit(a, tiny_samples, cfg, desk8, num_steps=4)
    b = JointModel(TINY_MODEL, init_seed=3)
    bptt_finetune(b, tiny_samples, cfg, desk8, num_steps=4)
    assert _params_equal(a, b)


def _grads(model, samples, desk8, unroll, through_warp=True):
    batch = make_batch(samples, [(0, 0), (1, 1)], 4, unroll, desk8)
    model.zero_grad()
    bd = compute_unrolled_loss(model, batch, desk8, unroll,
                               through_warp=through_warp)
    bd.graph.backward()
    return {n: (None if p.grad is None else p.grad.copy())
            for n, p in model.named_parameters()}


def test_second_step_feeds_gradient_back(tiny_samples, desk8):
    # unrolling one more step must change the gradients: the extra loss
    # term backpropagates through the step-1 prediction
    model = JointModel(TINY_MODEL, init_seed=3)
    g1 = _grads(model, tiny_samples, desk8, unroll=1)
    g2 = _grads(model, tiny_samples, desk8, unroll=2)
    changed = [n for n in g1
               if g1[n] is not None and g2[n] is not None
               and not np.array_equal(g1[n], g2[n])]
    assert any(n.startswith("branches") for n in changed)
    assert any(n.startswith("flow_encoder") for n in changed)


def test_through_warp_toggle_changes_gradients(tiny_samples, desk8):
    model = JointModel(TINY_MODEL, init_seed=3)
    # open the parse head so seg gradients reach the flow pathway
    rng = np.random.default_rng(0)
    head = model.parse_decoder.head
    head.w.data = rng.standard_normal(head.w.shape).astype(np.float32) * 0.1
    g_on = _grads(model, tiny_samples, desk8, unroll=2, through_warp=True)
    g_off = _grads(model, tiny_samples, desk8, unroll=2, through_warp=False)
    assert any(
        g_on[n] is not None and g_off[n] is not None
        and not np.array_equal(g_on[n], g_off[n])
        for n in g_on
    )


def test_unroll_needs_enough_targets(tiny_samples, desk8):
    model = JointModel(TINY_MODEL, init_seed=3)
    batch = make_batch(tiny_samples, [(0, 0)], 4, 1, desk8)
    with pytest.raises(UsageError):
        compute_unrolled_loss(model, batch, desk8, unroll_steps=2)


# -- evaluation ---------------------------------------------------------------------


def test_evaluate_model_report_shape(tiny_model, tiny_samples, desk8):
    report = evaluate_model(tiny_model, tiny_samples, desk8, horizon=1)
    assert 0.0 <= report["miou"] <= 1.0
    assert report["epe"] >= 0.0
    assert report["n_frames"] == len(tiny_samples)
    # fresh model == copy-last segmentation: identical mIoU by construction
    from scenecast.metrics import evaluate_baseline
    base = evaluate_baseline("copy", tiny_samples, desk8, history_len=4)
    assert report["miou"] == pytest.approx(base["miou"], abs=1e-12)


def test_evaluate_model_rejects_long_horizon(tiny_model, tiny_samples, desk8):
    with pytest.raises(UsageError):
        evaluate_model(tiny_model, tiny_samples, desk8, horizon=10)
