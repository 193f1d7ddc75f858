import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mcam import tensor as T
from mcam.errors import ClassCoverageError, ConfigurationError
from mcam.models import ATTENTION_NAMES, AttentionKind, BackboneConfig, EEGNet
from mcam.training import (Adam, TrainConfig, accuracy, cell_violations, monotonicity_penalty,
                           penalty_grid, prepare_subject, repetition_streams, total_loss, train,
                           validation_set)

# ---------------------------------------------------------------- monotonicity penalty

GRID4 = penalty_grid(4)  # -1, -0.5, 0, 0.5, 1


def test_penalty_identity_under_m2():
    # every slope is 1; M2 wants a peak, so the two right cells are charged 1 each
    assert monotonicity_penalty(GRID4, "M2") == pytest.approx(2.0, abs=1e-12)


def test_penalty_conforming_shapes_are_free():
    assert monotonicity_penalty(-np.abs(GRID4), "M2") == 0.0
    assert monotonicity_penalty(np.abs(GRID4), "M3") == 0.0
    assert monotonicity_penalty(np.abs(GRID4), "M2") == pytest.approx(4.0, abs=1e-12)


def test_penalty_rejects_bad_grid_and_mode():
    with pytest.raises(ConfigurationError):
        monotonicity_penalty(np.zeros(4), "M2")  # N = 3
    with pytest.raises(ConfigurationError):
        monotonicity_penalty(np.zeros(5), "M1")
    with pytest.raises(ConfigurationError):
        TrainConfig(grid_n=41)


def conforms(f, mode):
    d = np.diff(f)
    half = d.size // 2
    peak = (d[:half] >= 0).all() and (d[half:] <= 0).all()
    valley = (d[:half] <= 0).all() and (d[half:] >= 0).all()
    return peak if mode == "M2" else valley


grids = arrays(np.float64, st.sampled_from([3, 5, 9, 41]), elements=st.floats(-5, 5))


@settings(max_examples=150, deadline=None)
@given(grids, st.sampled_from(["M2", "M3"]), st.floats(-10, 10))
def test_penalty_properties(f, mode, shift):
    p = monotonicity_penalty(f, mode)
    assert p >= 0.0
    assert monotonicity_penalty(f + shift, mode) == pytest.approx(p, rel=1e-9, abs=1e-9)
    assert (p == 0.0) == conforms(f, mode)
    np.testing.assert_allclose(cell_violations(f, mode).sum(), p, rtol=1e-12, atol=1e-12)


def test_penalty_tensor_gradient():
    f = T.parameter(np.random.default_rng(0).standard_normal(9))
    assert T.grad_check(lambda: monotonicity_penalty(f, "M3"), [f]) < 1e-6


# ---------------------------------------------------------------- total loss


def batch(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 1, 32, 128)), np.arange(n) % 4


def test_zero_weight_is_plain_cross_entropy():
    x, y = batch()
    m = EEGNet(kind=AttentionKind.parse("m2"), seed=0)
    logits = m(x)
    ce = T.softmax_cross_entropy(logits, y).item()
    assert total_loss(m, logits, y, penalty_weight=0.0).item() == ce
    f = m.mcam_map(penalty_grid(40)).data
    expected = ce + 0.1 * monotonicity_penalty(f, "M2")
    assert total_loss(m, logits, y, 0.1, 40).item() == pytest.approx(expected, rel=1e-14)


def test_m1_has_no_penalty():
    x, y = batch()
    m = EEGNet(kind=AttentionKind.parse("m1"), seed=0)
    logits = m(x)
    assert total_loss(m, logits, y, 10.0).item() == T.softmax_cross_entropy(logits, y).item()


def test_penalty_gradient_reaches_mlp():
    m = EEGNet(BackboneConfig(dropout=0.0), AttentionKind.parse("m3"), seed=1)
    mlp = [p for n, p in m.params.items() if n.startswith("att.")]
    fn = lambda: monotonicity_penalty(m.mcam_map(penalty_grid(40)), "M3")  # noqa: E731
    assert T.grad_check(fn, mlp) < 1e-5


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_keeps_params():
    p = T.parameter(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = T.parameter(np.array([0.5, 0.5]))
    opt = Adam([p], lr=1e-3)
    p.grad = np.array([1.0, -3.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.5 - 1e-3, 0.5 + 1e-3], rtol=0, atol=1e-10)


def test_adam_minimises_quadratic():
    p = T.parameter(np.array([3.0, -4.0]))
    opt = Adam([p], lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        T.backward(T.tsum(p * p))
        opt.step()
    assert np.abs(p.data).max() < 1e-3


@pytest.mark.parametrize("label", ATTENTION_NAMES)
def test_loss_decreases(label):
    x, y = batch(8, seed=2)
    m = EEGNet(kind=AttentionKind.parse(label), seed=3)
    opt = Adam(m.parameters(), lr=1e-2)
    rng = np.random.default_rng(0)
    before = total_loss(m, m(x), y).item()
    for _ in range(50):
        opt.zero_grad()
        T.backward(total_loss(m, m(x, train=True, rng=rng), y))
        opt.step()
    assert total_loss(m, m(x), y).item() < before


# ---------------------------------------------------------------- protocol

TINY = dict(batch=32, epochs=2, batches_per_epoch=3, val_batches=1, repetitions=1)


def test_single_repetition_has_zero_std(small_dataset):
    res = train(TrainConfig(attention="m3", **TINY), small_dataset)
    agg = res.aggregate()
    assert len(res.repetitions) == 1 and agg["accuracy"]["std"] == 0.0 and agg["f1"]["std"] == 0.0


def test_checkpoint_reproduces_best_val(small_dataset):
    cfg = TrainConfig(attention="se", **TINY)
    rep = train(cfg, small_dataset).repetitions[0]
    ck = rep.checkpoint
    assert ck.metadata["best_val_accuracy"] == rep.best_val_accuracy
    sd = prepare_subject(small_dataset, cfg)
    xv, yv = validation_set(sd, cfg, repetition_streams(cfg, 0)["val"])
    assert abs(accuracy(EEGNet.from_checkpoint(ck), xv, yv) - rep.best_val_accuracy) <= 1e-12


def test_training_is_deterministic(small_dataset):
    cfg = TrainConfig(attention="m2", **TINY, seed=4)
    a, b = train(cfg, small_dataset), train(cfg, small_dataset)
    assert a.to_json() == b.to_json()
    assert a.repetitions[0].checkpoint.to_bytes() == b.repetitions[0].checkpoint.to_bytes()
    c = train(TrainConfig(attention="m2", **TINY, seed=5), small_dataset)
    assert c.repetitions[0].checkpoint.to_bytes() != a.repetitions[0].checkpoint.to_bytes()


def test_missing_class_stops_training(small_dataset):
    from mcam.data import Dataset
    ds = Dataset({1: [tr for tr in small_dataset.trials(1) if tr.label != 1]})
    with pytest.raises(ClassCoverageError, match="HVLA"):
        train(TrainConfig(**TINY), ds)


def test_modest_budget_learns_synthetic_classes(small_dataset):
    cfg = TrainConfig(attention="m3", batch=64, epochs=8, batches_per_epoch=10, repetitions=1)
    rep = train(cfg, small_dataset).repetitions[0]
    assert rep.accuracy >= 0.9
