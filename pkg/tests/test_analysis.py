import numpy as np
import pytest

from mcam.analysis import (DEFAULT_CUTOFFS, all_crossings_unique, crossing_is_unique, lowpass,
                           morph_crossing, morph_grid, morph_report, normalize_filters,
                           percentage_of_ideal, polar_vertices, scalp_stats, select_anchors,
                           spatial_filters, sweep, trace_f)
from mcam.errors import (ConfigurationError, ContractError, DegenerateFilterError, SelectionError,
                         ValidationError)
from mcam.models import AttentionKind, EEGNet

# ---------------------------------------------------------------- lowpass


def tone(f, n=1024, fs=128):
    return np.sin(2 * np.pi * f * np.arange(n) / fs)


def test_lowpass_passes_and_kills_tones():
    np.testing.assert_allclose(lowpass(tone(10.0), 20.0), tone(10.0), atol=1e-12)
    assert np.abs(lowpass(tone(40.0), 20.0)).max() < 1e-12


def test_lowpass_white_noise_energy():
    x = np.random.default_rng(0).standard_normal((64, 4096))
    kept = (lowpass(x, 16.0) ** 2).sum() / (x ** 2).sum()
    assert abs(kept - 0.25) < 0.01


def test_lowpass_idempotent_and_nyquist_identity():
    x = np.random.default_rng(1).standard_normal((3, 32, 128))
    once = lowpass(x, 30.0)
    np.testing.assert_allclose(lowpass(once, 30.0), once, atol=1e-13)
    full = lowpass(x, 64.0)
    assert full is not x and np.array_equal(full, x)


@pytest.mark.parametrize("fc", [0.0, -3.0, 64.5])
def test_lowpass_cutoff_range(fc):
    with pytest.raises(ConfigurationError):
        lowpass(np.zeros(128), fc)


# ---------------------------------------------------------------- sweep


def test_sweep_rows_and_identity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((24, 1, 32, 128))
    y = np.arange(24) % 4
    models = {"none": EEGNet(seed=0), "m3": EEGNet(kind=AttentionKind.parse("m3"), seed=1)}
    rep = sweep(models, x, y)
    assert rep.cutoffs == list(DEFAULT_CUTOFFS)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "cutoff_hz,none,m3" and len(lines) == 2 + len(DEFAULT_CUTOFFS)
    for m in models:
        assert rep.accuracy[m][-1] == rep.reference[m]
        assert rep.recall[m][-1] == rep.reference_recall[m]
    assert len(rep.recall_csv().splitlines()) == 1 + 2 * (1 + len(DEFAULT_CUTOFFS))


def test_sweep_rejects_unordered_cutoffs():
    with pytest.raises(ConfigurationError):
        sweep({}, np.zeros((1, 1, 32, 128)), [0], cutoffs=[20, 10])


# ---------------------------------------------------------------- morphism probing


class Linear:
    """Logits = x + b on 4-vectors; anchors e_k cross at u* = (1 + b_i - b_j) / 2."""

    def __init__(self, b=(0.013, -0.0045, 0.0215, 0.0)):
        self.b = np.asarray(b)

    def __call__(self, x):
        return np.asarray(x) + self.b


EYE = list(np.eye(4))


def test_linear_crossing_location():
    m = Linear()
    for i in range(4):
        for j in range(4):
            if i != j:
                star = (1 + m.b[i] - m.b[j]) / 2
                u = morph_crossing(m, EYE[i], EYE[j], i, j)
                assert star < u <= star + 0.01 + 1e-12
                assert crossing_is_unique(m, EYE[i], EYE[j], i, j)


def test_crossing_reversal_sums_to_one():
    m = Linear()
    u01 = morph_crossing(m, EYE[0], EYE[1], 0, 1)
    u10 = morph_crossing(m, EYE[1], EYE[0], 1, 0)
    assert abs(u01 + u10 - 1.0) <= 0.01 + 1e-12


def test_no_crossing_gives_one():
    m = Linear()
    assert morph_crossing(m, EYE[0], EYE[0], 0, 1) == 1.0
    assert not crossing_is_unique(m, EYE[0], EYE[0], 0, 1)
    with pytest.raises(ValidationError):
        morph_crossing(m, EYE[0], EYE[1], 2, 2)


def test_morph_report_sums():
    rep = morph_report(Linear(), EYE)
    assert all_crossings_unique(Linear(), EYE)
    off = rep.u[~np.eye(4, dtype=bool)]
    assert ((off >= 0) & (off <= 1)).all()
    assert abs(rep.scores.sum() - 6.0) <= 0.12
    np.testing.assert_allclose(rep.percentages, rep.scores / 6.0)
    np.testing.assert_allclose(rep.shares.sum(), 1.0)
    d = rep.to_dict()
    assert d["u"][2][2] is None and len(d["vertices"]["0"]) == 3


def test_percentage_rule_and_polar_angles():
    assert percentage_of_ideal([1.56, 1.5, 1.5, 1.44])[0] == pytest.approx(0.26, abs=1e-15)
    verts = polar_vertices([np.nan, 0.3, 0.6, 0.9], 0)
    assert [j for _, _, j in verts] == [1, 2, 3] and [r for r, _, _ in verts] == [0.3, 0.6, 0.9]
    np.testing.assert_allclose([th for _, th, _ in verts], [0.0, 2 * np.pi / 3, 4 * np.pi / 3])


def test_morph_grid():
    assert morph_grid(0.01).size == 101
    with pytest.raises(ConfigurationError):
        morph_grid(0.03)


def test_anchor_selection():
    x = np.tile(np.eye(4), (3, 1))
    y = np.arange(12) % 4
    assert select_anchors({"a": Linear()}, x, y) == [0, 1, 2, 3]
    flipped = lambda v: Linear()(v)[:, ::-1]  # noqa: E731
    with pytest.raises(SelectionError, match="HVHA"):
        select_anchors([Linear(), flipped], x, y)
    # a model that gets only window 0 wrong pushes the class-0 anchor to window 4
    picky = lambda v: np.where(np.arange(len(v))[:, None] == 0, -np.asarray(v), v)  # noqa: E731
    assert select_anchors([Linear(), picky], x, y) == [4, 1, 2, 3]


# ---------------------------------------------------------------- scalp


def ckpt_with_filters(w):
    m = EEGNet(seed=0)
    m.params["spatial.w"].data[:, 0, :, 0] = w
    return m.to_checkpoint()


def test_single_checkpoint_has_zero_std():
    w = np.random.default_rng(3).standard_normal((16, 32))
    rep = scalp_stats([ckpt_with_filters(w)])
    assert (rep.std == 0).all()
    assert (np.abs(rep.mean).max(axis=1) == 1.0).all()


def test_sign_flip_pair():
    w = np.random.default_rng(4).standard_normal((16, 32))
    rep = scalp_stats([ckpt_with_filters(w), ckpt_with_filters(-w)])
    assert np.abs(rep.mean).max() < 1e-15
    np.testing.assert_allclose(rep.std, np.abs(normalize_filters(w)), atol=1e-15)


def test_scalp_two_pass_oracle():
    rng = np.random.default_rng(5)
    cks = [ckpt_with_filters(rng.standard_normal((16, 32))) for _ in range(5)]
    ws = [normalize_filters(spatial_filters(c)) for c in cks]
    mean = sum(ws) / 5
    std = np.sqrt(sum((w - mean) ** 2 for w in ws) / 5)
    rep = scalp_stats(cks)
    np.testing.assert_allclose(rep.mean, mean, atol=1e-15)
    np.testing.assert_allclose(rep.std, std, atol=1e-15)
    assert rep.to_csv().splitlines()[1].startswith("0,Fp1,")


def test_scalp_errors():
    with pytest.raises(ValidationError):
        scalp_stats([])
    w = np.ones((16, 32))
    w[5] = 0.0
    with pytest.raises(DegenerateFilterError, match="filter 5"):
        scalp_stats([ckpt_with_filters(w)])
    other = EEGNet(kind=AttentionKind.parse("se"), seed=0).to_checkpoint()
    with pytest.raises(ValidationError):
        scalp_stats([ckpt_with_filters(np.ones((16, 32))), other])


# ---------------------------------------------------------------- learned map


def test_trace_f():
    ck = EEGNet(kind=AttentionKind.parse("m2"), seed=6).to_checkpoint()
    t, f = trace_f(ck)
    assert t.size == 1001 and t[0] == -1.0 and t[-1] == 1.0 and t[500] == 0.0
    assert ((f > 0) & (f < 1)).all()
    with pytest.raises(ContractError, match="cbam"):
        trace_f(EEGNet(kind=AttentionKind.parse("cbam")).to_checkpoint())
