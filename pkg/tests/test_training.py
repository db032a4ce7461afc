import dataclasses
import math

import numpy as np
import pytest

from deepkin import autodiff as ad
from deepkin.datagen import ScenarioSpec, generate
from deepkin.geometry import Trajectory
from deepkin.kinematics import ControlInput, VehicleState
from deepkin.models import HeadOutput, ModelConfig, ModePrediction, PredictionSet, TrajectoryModel, make_batch
from deepkin.training import (
    METRICS_COLUMNS,
    ExtraLossWeights,
    NonFiniteLossError,
    TrainConfig,
    batch_loss,
    displacement_loss,
    multimodal_loss,
    supervised_extra_losses,
    train,
)

H = 10


def traj(xy, psi=0.0, v=0.0):
    return Trajectory(0.1, tuple(VehicleState(float(x), float(y), psi, v) for x, y in xy))


def test_displacement_loss_examples():
    zero = traj(np.zeros((H, 2)))
    assert displacement_loss(zero, zero) == 0.0
    assert displacement_loss(traj(np.tile([3.0, 4.0], (H, 1))), zero) == 5.0
    half = np.zeros((H, 2))
    half[: H // 2, 0] = 1.0
    assert displacement_loss(traj(half), zero) == 0.5
    assert displacement_loss(traj(half), zero, reduction="sum") == 5.0
    with pytest.raises(ValueError, match="length"):
        displacement_loss(traj(np.zeros((3, 2))), zero)


def test_multimodal_loss_examples():
    truth = traj(np.column_stack([np.arange(H), np.zeros(H)]))
    one = multimodal_loss(PredictionSet((ModePrediction(truth, 1.0),), "x"), truth)
    assert one.total == 0.0 and one.winning_mode_index == 0
    far = traj(np.full((H, 2), 9.0))
    two = multimodal_loss(PredictionSet((ModePrediction(truth, 0.5), ModePrediction(far, 0.5)), "x"), truth)
    assert two.total == pytest.approx(0.6931, abs=1e-4) and two.winning_mode_index == 0
    tie = multimodal_loss(PredictionSet((ModePrediction(far, 0.3), ModePrediction(far, 0.7)), "x"), truth)
    assert tie.winning_mode_index == 0


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0, 3.0])
def test_breakdown_sums(alpha):
    truth = traj(np.column_stack([np.arange(H), np.zeros(H)]))
    modes = tuple(ModePrediction(traj(np.column_stack([np.arange(H) * s, np.ones(H)])), p) for s, p in ((0.9, 0.2), (1.3, 0.8)))
    lb = multimodal_loss(PredictionSet(modes, "x"), truth, alpha)
    assert abs(lb.total - (lb.displacement + alpha * lb.mode_xent)) <= 1e-12
    assert lb.displacement >= 0 and lb.mode_xent >= 0


def test_supervised_extra_losses():
    truth = traj(np.zeros((H, 2)), v=5.0)
    ctrl = tuple(ControlInput(0.5, 0.01) for _ in range(H))
    pred = ModePrediction(traj(np.zeros((H, 2)), v=6.0), 1.0, ctrl)
    assert supervised_extra_losses(pred, truth, ctrl, ExtraLossWeights()) == 0.0
    assert supervised_extra_losses(pred, truth, ctrl, ExtraLossWeights(accel=1, steer=1)) == 0.0
    assert supervised_extra_losses(pred, truth, ctrl, ExtraLossWeights(speed=1)) == pytest.approx(1.0)


def test_schedule():
    cfg = TrainConfig()
    assert (cfg.lr0, cfg.lr_decay, cfg.lr_decay_every, cfg.batch_size, cfg.alpha) == (1e-4, 0.9, 20_000, 64, 1.0)
    assert cfg.lr_at(0) == cfg.lr_at(19_999) == 1e-4
    assert cfg.lr_at(20_000) == 0.9e-4


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(reduction="median")
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_json({"bogus": 1})
    cfg = TrainConfig(lr0=3e-3, extra={"speed": 0.5})
    assert TrainConfig.from_json(cfg.to_json()) == cfg


@pytest.fixture(scope="module")
def small_set():
    return generate(ScenarioSpec(kind="constant_turn", H=20), 12, 4)


def _model(head="dkm", **kw):
    return TrajectoryModel(ModelConfig(head=head, H=20, hidden=[16], **kw), seed=0)


def test_zero_lr_leaves_parameters(small_set):
    model = _model(input_norm="scale")
    before = {k: v.value.copy() for k, v in model.store.items()}
    train(model, small_set, TrainConfig(lr0=0.0, iterations=15, batch_size=4))
    for k, v in model.store.items():
        np.testing.assert_array_equal(v.value, before[k])


def test_overfits_single_sample():
    sample = generate(ScenarioSpec(kind="s_curve"), 1, 3)
    model = TrajectoryModel(ModelConfig(head="dkm", hidden=[32]), seed=0)
    res = train(model, sample, TrainConfig(lr0=1e-3, lr_decay_every=500, lr_decay=0.7, iterations=2000, batch_size=1))
    first, last = res.log[0]["loss_disp"], res.log[-1]["loss_disp"]
    assert last * 10 <= first


def test_training_is_deterministic(small_set, tmp_path):
    docs = []
    for _ in range(2):
        model = _model(head="um")
        res = train(model, small_set, TrainConfig(lr0=1e-3, iterations=20, batch_size=5, val_every=10), small_set[:3])
        docs.append(ad.dumps_checkpoint(ad.checkpoint_dict(model.store, res.optimizer)))
        res.write_log(tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(METRICS_COLUMNS)
    assert docs[0] == docs[1]
    assert res.log[9]["val_l2_6s"] is not None and "val_l2_6s" not in res.log[8]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_names_sample(small_set):
    bad = small_set[0]
    future = tuple(VehicleState(1e308, 1e308, 0.0, 0.0) for _ in bad.future)
    bad = dataclasses.replace(bad, id="poison", future=future)
    with pytest.raises(NonFiniteLossError, match="poison"):
        train(_model(input_norm="scale"), [bad], TrainConfig(iterations=3, batch_size=1))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(_model(), [], TrainConfig(iterations=1))


def _leaf_output(B=2, M=3, seed=0):
    rng = np.random.default_rng(seed)
    x = ad.tensor(rng.normal(size=(B, M, H)), requires_grad=True)
    y = ad.tensor(rng.normal(size=(B, M, H)), requires_grad=True)
    logits = ad.tensor(rng.normal(size=(B, M)), requires_grad=True)
    return HeadOutput(x, y, logits)


def test_winner_gradient_locality():
    out = _leaf_output()
    truth = np.zeros((2, H, 4))
    out.x.value[:, 1] = 0.01  # mode 1 is closest for every sample
    out.y.value[:, 1] = 0.0

    class B:
        pass

    batch = B()
    batch.truth, batch.controls = truth, None
    bl = batch_loss(out, batch, TrainConfig())
    assert list(bl.winners) == [1, 1]
    ad.backward(bl.loss)
    assert np.all(out.x.grad[:, [0, 2]] == 0) and np.all(out.y.grad[:, [0, 2]] == 0)
    assert np.any(out.x.grad[:, 1] != 0)
    assert np.all(out.logits.grad != 0)
    # the logit gradient is softmax minus the winner indicator, halved by the batch mean
    p = np.exp(out.logits.value) / np.exp(out.logits.value).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out.logits.grad, (p - np.eye(3)[[1, 1]]) / 2, atol=1e-12)


def test_batch_loss_matches_value_level(small_set):
    model = _model(head="poly2")
    batch = make_batch(small_set[:3], model.config.K)
    cfg = TrainConfig()
    bl = batch_loss(model.forward(batch), batch, cfg)
    for i, (preds, s) in enumerate(zip(model.predict(small_set[:3]), small_set[:3])):
        lb = multimodal_loss(preds, s.future_trajectory())
        assert bl.per_sample[i] == pytest.approx(lb.total, rel=1e-9)
        assert bl.winners[i] == lb.winning_mode_index
    assert math.isfinite(bl.displacement)
