"""Optimizer semantics, schedule, loop determinism, checkpoint resume."""

import numpy as np
import pytest

from histlift import data as hd
from histlift import train as htr
from histlift.errors import ConfigError, NumericError
from histlift.model import ModelConfig, PoseLifter
from histlift.tensor import Tensor
from histlift.train import AdamWState, RunConfig, TrainConfig, adamw_step, lr_at


def scalar_param(value):
    return Tensor(np.array([value]), requires_grad=True)


# -- adamw ---------------------------------------------------------------------


def test_adamw_zero_grad_no_decay_keeps_params():
    p = scalar_param(0.7)
    p.grad = np.zeros(1)
    named = [("w", p)]
    state = AdamWState.init(named)
    adamw_step(named, state, lr=1e-3, weight_decay=0.0)
    assert p.data[0] == 0.7


def test_adamw_first_step_closed_form():
    p = scalar_param(0.0)
    p.grad = np.ones(1)
    named = [("w", p)]
    state = AdamWState.init(named)
    adamw_step(named, state, lr=1e-3, weight_decay=0.0)
    # bias-corrected m-hat = v-hat = 1 after one step from zero moments
    expect = -1e-3 * 1.0 / (np.sqrt(1.0) + 1e-8)
    assert abs(p.data[0] - expect) < 1e-15
    assert abs(p.data[0] + 0.000999999990) < 1e-12


def test_adamw_pure_decay_with_zero_grads():
    p = scalar_param(2.0)
    p.grad = np.zeros(1)
    named = [("w", p)]
    state = AdamWState.init(named)
    adamw_step(named, state, lr=0.1, weight_decay=0.01)
    assert abs(p.data[0] - 2.0 * (1.0 - 0.1 * 0.01)) < 1e-15


def test_adamw_rejects_nonfinite_grads_without_mutation():
    good = scalar_param(1.0)
    bad = scalar_param(1.0)
    good.grad = np.ones(1)
    bad.grad = np.array([np.nan])
    named = [("ok", good), ("broken", bad)]
    state = AdamWState.init(named)
    with pytest.raises(NumericError) as err:
        adamw_step(named, state, lr=1e-3)
    assert "broken" in str(err.value)
    assert good.data[0] == 1.0  # step rejected before any update


def test_decay_exemptions():
    assert htr.is_decay_exempt("layer3.pseudo_query")
    assert htr.is_decay_exempt("embed.pos_joint")
    assert htr.is_decay_exempt("layer1.attn_gain")
    assert htr.is_decay_exempt("layer1.b_ff1")
    assert htr.is_decay_exempt("head.b2")
    assert not htr.is_decay_exempt("layer1.w_q")
    assert not htr.is_decay_exempt("layer2.dw_temporal")
    assert not htr.is_decay_exempt("head.w1")
    assert not htr.is_decay_exempt("embed.w")


def test_decay_exemption_audit_over_model():
    model = PoseLifter(ModelConfig(layers=2, channels=4, frames=2, joints=2, heads=2,
                                   e_temporal=2, e_spatial=2), seed=0)
    names = [name for name, _ in model.named_parameters()]
    exempt = {n for n in names if htr.is_decay_exempt(n)}
    # positional embeddings and pseudo-queries never decay
    assert {"embed.pos_joint", "embed.pos_frame"} <= exempt
    assert {n for n in names if n.endswith("pseudo_query")} <= exempt
    # projection and ffn weights always decay
    decayed = set(names) - exempt
    assert {"embed.w", "head.w1", "head.w2"} <= decayed
    assert all(not n.endswith(("gain", ".b", "b_ff1", "b_ff2", "b1", "b2")) for n in decayed)


# -- schedule --------------------------------------------------------------------------


def test_lr_schedule_values():
    assert lr_at(0) == 5e-4
    assert abs(lr_at(1) - 4.95e-4) < 1e-19
    assert abs(lr_at(90) - 5e-4 * 0.99 ** 90) < 1e-19
    assert abs(lr_at(90) - 2.024e-4) < 5e-8


def test_lr_schedule_strictly_decreasing_and_positive():
    values = [lr_at(e) for e in range(200)]
    assert all(v > 0 for v in values)
    assert all(a > b for a, b in zip(values, values[1:]))


# -- grad clipping ----------------------------------------------------------------------


def test_clip_grad_norm():
    a, b = scalar_param(0.0), scalar_param(0.0)
    a.grad = np.array([3.0])
    b.grad = np.array([4.0])
    norm = htr.clip_grad_norm([a, b], max_norm=1.0)
    assert abs(norm - 5.0) < 1e-12
    clipped = np.sqrt(a.grad[0] ** 2 + b.grad[0] ** 2)
    assert abs(clipped - 1.0) < 1e-12


# -- config --------------------------------------------------------------------------------


def test_run_config_unknown_keys():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epohcs": 3})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": {}, "train": {}, "extra": {}})
    cfg = RunConfig.from_dict({"model": {"layers": 2, "channels": 4, "heads": 2,
                                         "frames": 4, "joints": 3,
                                         "e_temporal": 2, "e_spatial": 2},
                               "train": {"epochs": 1}})
    assert cfg.model.layers == 2 and cfg.train.epochs == 1
    assert RunConfig.from_dict({}).train.epochs == 90  # all fields default


# -- training loop ---------------------------------------------------------------------------


def tiny_setup(frames=6, joints=17, clip_count=12, seed=0):
    skeleton = hd.Skeleton.default_human()
    camera = hd.CameraModel.default()
    clips = hd.gen_dataset(skeleton, camera, clip_count, frames, master_seed=seed)
    run = RunConfig(
        model=ModelConfig(layers=2, channels=8, frames=frames, joints=joints, heads=4,
                          e_temporal=2, e_spatial=4),
        train=TrainConfig(epochs=2, batch_size=4, eval_fraction=0.25, checkpoint_every=1),
    )
    return run, clips, skeleton


def test_zero_epochs_returns_initial_weights_and_baseline_row():
    run, clips, skeleton = tiny_setup()
    run.train.epochs = 0
    result = htr.train(run, clips, seed=5, skeleton=skeleton)
    reference = PoseLifter(run.model.resolved(), seed=5)
    for (na, a), (nb, b) in zip(result.model.named_parameters(), reference.named_parameters()):
        assert na == nb and np.array_equal(a.data, b.data)
    assert len(result.history) == 1 and result.history[0]["epoch"] == 0


def test_training_same_seed_bitwise_identical():
    run, clips, skeleton = tiny_setup()
    a = htr.train(run, clips, seed=3, skeleton=skeleton)
    b = htr.train(run, clips, seed=3, skeleton=skeleton)
    assert a.history == b.history
    for (_, pa), (_, pb) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert pa.data.tobytes() == pb.data.tobytes()
    c = htr.train(run, clips, seed=4, skeleton=skeleton)
    assert c.history != a.history


def test_history_row_count_and_fields():
    run, clips, skeleton = tiny_setup()
    result = htr.train(run, clips, seed=1, skeleton=skeleton)
    assert len(result.history) == run.train.epochs + 1
    assert result.history[0]["train_loss"] is None
    assert all(row["train_loss"] is not None for row in result.history[1:])
    csv_text = htr.history_to_csv(result.history)
    assert csv_text.splitlines()[0] == "epoch,lr,train_loss,eval_mpjpe,eval_pmpjpe"
    assert len(csv_text.splitlines()) == run.train.epochs + 2


def test_checkpoint_resume_bit_identical(tmp_path):
    run, clips, skeleton = tiny_setup()
    run.train.epochs = 4
    run.train.checkpoint_every = 2

    full_dir = tmp_path / "full"
    full_dir.mkdir()
    full = htr.train(run, clips, seed=7, skeleton=skeleton, out_dir=full_dir)

    half_dir = tmp_path / "half"
    half_dir.mkdir()
    short = RunConfig(model=run.model, train=TrainConfig(**{**run.train.to_dict(), "epochs": 2}))
    htr.train(short, clips, seed=7, skeleton=skeleton, out_dir=half_dir)
    resumed = htr.train(run, clips, seed=7, skeleton=skeleton, out_dir=half_dir,
                        resume_from=half_dir / "checkpoint_epoch0002.hpkc")

    assert len(resumed.history) == len(full.history)
    for ra, rb in zip(full.history, resumed.history):
        assert ra == rb
    for (_, pa), (_, pb) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert pa.data.tobytes() == pb.data.tobytes()
    assert (full_dir / "metrics.csv").read_bytes() == (half_dir / "metrics.csv").read_bytes()


def test_metrics_csv_written(tmp_path):
    run, clips, skeleton = tiny_setup()
    out = tmp_path / "run"
    out.mkdir()
    result = htr.train(run, clips, seed=2, skeleton=skeleton, out_dir=out)
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == run.train.epochs + 2
    assert result.checkpoint_path is not None


def test_flip_batch_matches_per_sample_flip():
    skeleton = hd.Skeleton.default_human()
    rng = np.random.default_rng(0)
    batch = rng.standard_normal((3, 4, 17, 3))
    fast = htr._flip_batch(batch, skeleton.flip_pairs)
    for i in range(3):
        assert np.array_equal(fast[i], hd.flip(batch[i], skeleton.flip_pairs))


def test_predict_flip_average_shape_and_determinism():
    run, clips, skeleton = tiny_setup()
    model = PoseLifter(run.model.resolved(), seed=0)
    inputs, targets, _ = htr.prepare_clips(clips, skeleton)
    a = htr.predict(model, inputs, skeleton.flip_pairs, flip_average=True)
    b = htr.predict(model, inputs, skeleton.flip_pairs, flip_average=True)
    assert a.shape == targets.shape
    assert np.array_equal(a, b)


def test_empty_dataset_rejected():
    run, _, skeleton = tiny_setup()
    with pytest.raises(ConfigError):
        htr.train(run, [], seed=0, skeleton=skeleton)


def test_toy_run_improves_train_mpjpe_five_fold():
    # ~1 min of training: 200 clips, 30 epochs, shallow model
    skeleton = hd.Skeleton.default_human()
    camera = hd.CameraModel.default()
    clips = hd.gen_dataset(skeleton, camera, clip_count=200, frames=27, master_seed=11)
    run = RunConfig(
        model=ModelConfig(layers=2, channels=16, frames=27, joints=17, heads=4),
        train=TrainConfig(epochs=30, batch_size=4, eval_fraction=0.1, base_lr=4e-3,
                          checkpoint_every=1000, dtype="float32"),
    )
    result = htr.train(run, clips, seed=0, skeleton=skeleton)
    baseline = result.history[0]["eval_mpjpe"]

    inputs, targets, _ = htr.prepare_clips(clips, skeleton)
    train_idx, _ = htr._split_indices(len(clips), run.train.eval_fraction, 0)
    trained = htr.evaluate_model(result.model, inputs[train_idx], targets[train_idx],
                                 skeleton.flip_pairs, flip_average=True)
    assert trained.mpjpe_mm * 5.0 <= baseline, (trained.mpjpe_mm, baseline)
