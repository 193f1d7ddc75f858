import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mcam import tensor as T
from mcam.errors import ConfigurationError, DimensionError, ValidationError
from mcam.models import (ATTENTION_NAMES, AttentionKind, BackboneConfig, Checkpoint, EEGNet,
                         gram_matrix, mcam_forward, mlp_map, param_count, se_forward, window_moments)

CFG = BackboneConfig()
NONE = AttentionKind.parse("none")


def delta(label, cfg=CFG):
    return param_count(cfg, AttentionKind.parse(label)) - param_count(cfg, NONE)


# ---------------------------------------------------------------- parameter accounting


@pytest.mark.parametrize("label,expected", [("m1", 41), ("m2", 41), ("m3", 41), ("se", 82),
                                            ("cbam", 180), ("qkv", 1088)])
def test_attention_deltas(label, expected):
    assert delta(label) == expected


def test_mcam_delta_independent_of_backbone():
    cfg = BackboneConfig(in_channels=14, samples=256, F1=4, D=4, F2=16, temporal_kernel=32)
    assert delta("m2", cfg) == 41


def test_backbone_count_is_reported():
    # standard EEGNet-8,2 at 32 channels / 128 samples
    assert param_count(CFG, NONE) == 1876
    assert EEGNet(CFG, NONE).param_count() == 1876


def test_backbone_config_validation():
    with pytest.raises(ConfigurationError):
        BackboneConfig(samples=100)
    with pytest.raises(ConfigurationError):
        BackboneConfig(F2=12)


def test_reduction_must_divide():
    with pytest.raises(ConfigurationError):
        EEGNet(CFG, AttentionKind("se", reduction=5))


def test_unknown_attention_lists_names():
    with pytest.raises(ConfigurationError) as exc:
        AttentionKind.parse("transformer")
    for name in ATTENTION_NAMES:
        assert name in str(exc.value)


# ---------------------------------------------------------------- gram / MCAM


def test_gram_orthogonal():
    C = gram_matrix(np.array([[1.0, 0.0], [0.0, 1.0]])).data
    np.testing.assert_allclose(C, np.eye(2), atol=1e-8)


def test_gram_antiparallel():
    v = np.array([0.3, -1.0, 2.0])
    C = gram_matrix(np.stack([v, -v], axis=1)).data
    assert abs(C[0, 1] + 1.0) < 1e-8


def test_gram_matches_loop_oracle():
    X = np.random.default_rng(0).standard_normal((6, 4))
    ref = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            a, b = X[:, i], X[:, j]
            ref[i, j] = a @ b / (np.sqrt(a @ a) * np.sqrt(b @ b) + 1e-8)
    np.testing.assert_allclose(gram_matrix(X).data, ref, atol=1e-12)


def test_gram_zero_column_is_finite():
    X = np.zeros((3, 2))
    X[:, 0] = [1.0, 2.0, 2.0]
    C = gram_matrix(X).data
    assert np.isfinite(C).all() and C[1, 1] == 0.0


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=st.floats(-1e3, 1e3)))
def test_gram_symmetric_and_bounded(X):
    C = gram_matrix(X).data
    np.testing.assert_array_equal(C, C.T)
    assert (np.abs(C) <= 1.0).all()


def mlp_params(rng, out_bias=None):
    shapes = [("att.f1.w", (1, 9)), ("att.f1.b", (9,)), ("att.f2.w", (9, 2)), ("att.f2.b", (2,)),
              ("att.f3.w", (2, 1)), ("att.f3.b", (1,))]
    p = {n: T.parameter(rng.standard_normal(s)) for n, s in shapes}
    if out_bias is not None:
        p["att.f3.w"].data[...] = 0.0
        p["att.f3.b"].data[...] = out_bias
    return p


def test_mcam_zero_map_is_identity():
    X = np.random.default_rng(1).standard_normal((4, 16))
    out = mcam_forward(X, mlp_params(np.random.default_rng(2), out_bias=-1e4))
    np.testing.assert_array_equal(out.data, X)


def test_mcam_saturated_single_column():
    v = np.array([[0.5], [-2.0], [1.0]])
    out = mcam_forward(v, mlp_params(np.random.default_rng(3), out_bias=1e4))
    np.testing.assert_array_equal(out.data, 2 * v)


def test_mcam_composition_oracle():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((4, 16))
    p = mlp_params(rng)
    P = {k: v.data for k, v in p.items()}
    norms = np.sqrt((X * X).sum(axis=0))
    C = (X.T @ X) / (np.outer(norms, norms) + 1e-8)
    t = C.reshape(-1, 1)
    h = np.tanh(t @ P["att.f1.w"] + P["att.f1.b"])
    h = np.tanh(h @ P["att.f2.w"] + P["att.f2.b"])
    A = (1.0 / (1.0 + np.exp(-(h @ P["att.f3.w"] + P["att.f3.b"])))).reshape(16, 16)
    np.testing.assert_allclose(mcam_forward(X, p).data, X + X @ A, atol=1e-12)
    batched = mcam_forward(np.stack([X, 2 * X]), p).data
    np.testing.assert_allclose(batched[1], 2 * X + 2 * X @ A, atol=1e-11)


def test_mlp_map_range_on_trace_grid():
    f = mlp_map(mlp_params(np.random.default_rng(5)), T.Tensor(np.linspace(-1, 1, 1001))).data
    assert ((f > 0) & (f < 1)).all()


def test_se_unit_gate_is_identity():
    rng = np.random.default_rng(6)
    fm = rng.standard_normal((2, 16, 1, 4))
    p = {"att.fc1.w": T.Tensor(rng.standard_normal((16, 2))), "att.fc1.b": T.Tensor(np.zeros(2)),
         "att.fc2.w": T.Tensor(np.zeros((2, 16))), "att.fc2.b": T.Tensor(np.full(16, 1e4))}
    np.testing.assert_array_equal(se_forward(T.Tensor(fm), p).data, fm)


# ---------------------------------------------------------------- full model


@pytest.mark.parametrize("label", ATTENTION_NAMES)
def test_forward_shape_and_determinism(label):
    x = np.random.default_rng(7).standard_normal((2, 1, 32, 128))
    m = EEGNet(CFG, AttentionKind.parse(label), seed=1)
    a, b = m.logits(x), m.logits(x)
    assert a.shape == (2, 4) and np.isfinite(a).all()
    np.testing.assert_array_equal(a, b)


def test_bad_input_shape():
    with pytest.raises(DimensionError):
        EEGNet().forward(np.zeros((2, 1, 31, 128)))


def test_mcam_with_zero_map_equals_backbone():
    x = np.random.default_rng(8).standard_normal((3, 1, 32, 128))
    base = EEGNet(CFG, NONE, seed=2)
    m = EEGNet(CFG, AttentionKind.parse("m3"), seed=5)
    for name, p in base.params.items():
        m.params[name].data[...] = p.data
    m.params["att.f3.w"].data[...] = 0.0
    m.params["att.f3.b"].data[...] = -1e4
    np.testing.assert_array_equal(m.logits(x), base.logits(x))


def test_window_moments_brute_force():
    rng = np.random.default_rng(9)
    xp = rng.standard_normal((5, 20))
    K, T_out = 6, 15
    win = np.stack([xp[:, t:t + K] for t in range(T_out)], axis=1).reshape(-1, K)
    m, R = window_moments(xp, T_out, K)
    np.testing.assert_allclose(m, win.mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(R, win.T @ win / win.shape[0], atol=1e-14)


@pytest.mark.parametrize("label", ["none", "cbam", "m2"])
@pytest.mark.parametrize("train", [True, False])
def test_factorized_first_block_matches_layers(label, train):
    rng = np.random.default_rng(10)
    x = rng.standard_normal((6, 1, 32, 128))
    kind = AttentionKind.parse(label)
    fac, lit = EEGNet(CFG, kind, seed=3), EEGNet(CFG, kind, seed=3, factorized=False)
    for m in (fac, lit):
        for name in m.buffers:  # non-trivial running stats for the eval branch
            m.buffers[name][...] = 0.3 if name.endswith("mean") else 1.7
    ya = fac(x, train=train, rng=np.random.default_rng(0))
    yb = lit(x, train=train, rng=np.random.default_rng(0))
    np.testing.assert_allclose(ya.data, yb.data, rtol=1e-10, atol=1e-12)
    for m, y in ((fac, ya), (lit, yb)):
        T.zero_grad(m.parameters())
        T.backward(T.softmax_cross_entropy(y, np.arange(6) % 4))
    for name in fac.params:
        np.testing.assert_allclose(fac.params[name].grad, lit.params[name].grad, rtol=1e-9, atol=1e-12)
    for name in fac.buffers:
        np.testing.assert_allclose(fac.buffers[name], lit.buffers[name], rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    m = EEGNet(CFG, AttentionKind.parse("cbam"), seed=4)
    m.buffers["bn2.running_var"][...] = np.arange(16) + 0.5
    ck = m.to_checkpoint({"subject": 3, "seed": 99})
    path = tmp_path / "a.ckpt"
    ck.save(path)
    back = Checkpoint.load(path)
    assert back.to_bytes() == ck.to_bytes()
    assert back.metadata == {"subject": 3, "seed": 99}
    x = np.random.default_rng(0).standard_normal((2, 1, 32, 128))
    np.testing.assert_array_equal(EEGNet.from_checkpoint(back).logits(x), m.logits(x))


def test_checkpoint_rejects_bad_files():
    ck = EEGNet(seed=0).to_checkpoint()
    with pytest.raises(ValidationError):
        Checkpoint.from_bytes(b"NOTACKPT" + ck.to_bytes()[8:])
    with pytest.raises(ValidationError):
        Checkpoint(ck.config, AttentionKind.parse("se"), ck.params, ck.buffers)
