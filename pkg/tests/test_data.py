import json
from importlib import resources

import numpy as np
import pytest

from mcam.analysis import lowpass
from mcam.data import (BASELINE_SAMPLES, CLASS_NAMES, DEFAULT_SYNTH_SPEC, TRIAL_SAMPLES, SplitSpec,
                       TrialRecording, balanced_batches, binarize_labels, class_counts,
                       load_dataset, preprocess, save_dataset, split_and_window, synth_generate)
from mcam.errors import (ClassCoverageError, ConfigurationError, DegenerateDataError,
                         ValidationError)


def trial(signal, v=7.0, a=7.0, tid=0):
    return TrialRecording(1, tid, np.asarray(signal, dtype=np.float64), v, a)


# ---------------------------------------------------------------- preprocessing


def test_constant_channel_becomes_one():
    out = preprocess(trial(np.full((32, TRIAL_SAMPLES), 2.0)))
    np.testing.assert_array_equal(out.signal, 1.0)


def test_scale_comes_from_baseline_only():
    sig = np.full((32, TRIAL_SAMPLES), 2.0)
    sig[:, 10] = -4.0  # baseline peak |x| = 4
    sig[:, BASELINE_SAMPLES + 5] = 100.0  # outside the baseline, ignored
    out = preprocess(trial(sig)).signal
    assert out[0, 0] == 0.5 and out[0, BASELINE_SAMPLES + 5] == 25.0


def test_preprocess_matches_loop_oracle():
    sig = np.random.default_rng(0).standard_normal((32, TRIAL_SAMPLES))
    out = preprocess(trial(sig)).signal
    for c in range(32):
        m = max(abs(v) for v in sig[c, :BASELINE_SAMPLES])
        np.testing.assert_allclose(out[c], sig[c] / m, rtol=0, atol=1e-15)
        assert np.abs(out[c, :BASELINE_SAMPLES]).max() == 1.0


def test_global_normalisation():
    sig = np.random.default_rng(1).standard_normal((32, TRIAL_SAMPLES))
    out = preprocess(trial(sig), per_channel=False).signal
    assert np.abs(out[:, :BASELINE_SAMPLES]).max() == 1.0


def test_zero_baseline_names_channel():
    sig = np.ones((32, TRIAL_SAMPLES))
    sig[7, :BASELINE_SAMPLES] = 0.0
    with pytest.raises(DegenerateDataError, match="channel 7"):
        preprocess(trial(sig))


@pytest.mark.parametrize("v,a,label", [(9, 9, 0), (9, 1, 1), (1, 9, 2), (5, 5, 3), (5.01, 5, 1),
                                       (5, 5.01, 2)])
def test_binarize(v, a, label):
    assert binarize_labels(v, a) == label


@pytest.mark.parametrize("v,a", [(0.5, 5), (5, 9.5), (float("nan"), 5)])
def test_binarize_out_of_range(v, a):
    with pytest.raises(ValidationError):
        binarize_labels(v, a)


# ---------------------------------------------------------------- splitting


def test_split_windows(small_dataset):
    trials = small_dataset.trials(1)
    sd = split_and_window(trials)
    assert sd.test_windows.shape == (16 * len(trials), 1, 32, 128)
    assert sd.test_origin[0].tolist() == [trials[0].trial_id, 6000]
    starts = sd.test_origin[sd.test_origin[:, 0] == trials[0].trial_id, 1]
    np.testing.assert_array_equal(starts, 6000 + 128 * np.arange(16))
    np.testing.assert_array_equal(sd.test_windows[1, 0], trials[0].signal[:, 6128:6256])
    assert sd.train[0][0].shape[1] == 5000 and sd.val[0][0].shape[1] == 1000


def test_split_full_subject_has_640_test_windows():
    tr = [trial(np.zeros((32, TRIAL_SAMPLES)), tid=i) for i in range(40)]
    assert split_and_window(tr).test_windows.shape[0] == 640


def test_split_regions_are_disjoint():
    sig = np.tile(np.arange(TRIAL_SAMPLES, dtype=np.float64), (32, 1))
    sd = split_and_window(trial(sig))
    tr, va = sd.train[0][0][0], sd.val[0][0][0]
    te = sd.test_windows[:, 0, 0].ravel()
    assert tr.max() < va.min() and va.max() < te.min()


def test_exclude_baseline():
    sig = np.tile(np.arange(TRIAL_SAMPLES, dtype=np.float64), (32, 1))
    sd = split_and_window(trial(sig), exclude_baseline=True)
    assert sd.train[0][0][0, 0] == BASELINE_SAMPLES


def test_split_spec_validation():
    with pytest.raises(ConfigurationError):
        SplitSpec(train=(0, 5500), val=(5000, 6000))
    with pytest.raises(ConfigurationError):
        SplitSpec(test=(6000, TRIAL_SAMPLES + 1))


# ---------------------------------------------------------------- balanced batches


def regions(n_classes=4, length=600):
    rng = np.random.default_rng(2)
    return [(rng.standard_normal((3, length)), k % n_classes) for k in range(2 * n_classes)]


def test_batch_is_balanced():
    x, y = next(balanced_batches(regions(), 256, seed=0))
    assert x.shape == (256, 1, 3, 128)
    assert np.bincount(y, minlength=4).tolist() == [64, 64, 64, 64]


def test_batch_remainder_goes_to_first_classes():
    assert class_counts(10) == [3, 3, 2, 2]
    _, y = next(balanced_batches(regions(), 10, seed=0))
    assert np.bincount(y, minlength=4).tolist() == [3, 3, 2, 2]


def test_batches_are_deterministic():
    a, b = balanced_batches(regions(), 32, seed=5), balanced_batches(regions(), 32, seed=5)
    for _ in range(3):
        (xa, ya), (xb, yb) = next(a), next(b)
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(ya, yb)


def test_batch_windows_are_contiguous_crops():
    ramp = [(np.tile(np.arange(600.0) + 1000 * k, (3, 1)), k) for k in range(4)]
    x, y = next(balanced_batches(ramp, 64, seed=1))
    for w, k in zip(x[:, 0, 0], y):
        assert w[0] - 1000 * k >= 0 and w[-1] - 1000 * k <= 599
        np.testing.assert_array_equal(np.diff(w), 1.0)


def test_missing_class_is_named():
    with pytest.raises(ClassCoverageError, match="LVLA"):
        next(balanced_batches([r for r in regions() if r[1] != 3], 16))


def test_label_histogram_chi_square():
    # exact balance means chi^2 = 0, far under the df=3 critical value at alpha 0.01
    gen = balanced_batches(regions(), 256, seed=3)
    counts = sum(np.bincount(next(gen)[1], minlength=4) for _ in range(100))
    expected = 100 * 256 / 4
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 11.345


# ---------------------------------------------------------------- synthetic generator


def periodogram_peak(x, fs=128):
    spec = np.abs(np.fft.rfft(x)) ** 2
    spec[0] = 0.0
    return np.fft.rfftfreq(x.size, 1 / fs)[spec.argmax()]


def test_noiseless_peaks_sit_in_class_bands():
    ds = synth_generate({"subjects": 1, "trials_per_class": 3, "noise_std": 0.0}, seed=4)
    for tr in ds.trials(1):
        bands = DEFAULT_SYNTH_SPEC["classes"][tr.label]["bands"]
        f = periodogram_peak(tr.signal[0])
        assert any(lo - 0.1 <= f <= hi + 0.1 for lo, hi, _ in bands), (CLASS_NAMES[tr.label], f)


def test_labels_interleave_and_scores_agree():
    ds = synth_generate({"subjects": 2, "trials_per_class": 2}, seed=0)
    for sid in ds.subject_ids:
        assert [tr.label for tr in ds.trials(sid)] == [0, 1, 2, 3] * 2


def test_synth_is_deterministic():
    spec = {"subjects": 1, "trials_per_class": 1}
    a, b = synth_generate(spec, seed=9), synth_generate(spec, seed=9)
    for x, y in zip(a.trials(1), b.trials(1)):
        np.testing.assert_array_equal(x.signal, y.signal)
        assert (x.valence, x.arousal) == (y.valence, y.arousal)
    c = synth_generate(spec, seed=10)
    assert not np.array_equal(a.trials(1)[0].signal, c.trials(1)[0].signal)


def test_band_above_nyquist_is_named():
    classes = [dict(c) for c in DEFAULT_SYNTH_SPEC["classes"]]
    classes[2] = {"name": "LVHA", "bands": [[60.0, 70.0, 1.0]]}
    with pytest.raises(ConfigurationError, match="LVHA"):
        synth_generate({"classes": classes})


def test_lowpass_20_removes_gamma_band_energy():
    ds = synth_generate({"subjects": 1, "trials_per_class": 1, "noise_std": 0.0}, seed=1)
    hvha = ds.trials(1)[0]
    freqs = np.fft.rfftfreq(TRIAL_SAMPLES, 1 / 128)
    band = (freqs >= 38) & (freqs <= 46)

    def energy(x):
        return (np.abs(np.fft.rfft(x, axis=-1)[:, band]) ** 2).sum()

    assert energy(lowpass(hvha.signal, 20.0)) < 1e-20 * energy(hvha.signal)


def test_packaged_default_spec_matches():
    text = resources.files("mcam").joinpath("specs/synth_default.json").read_text()
    assert json.loads(text) == DEFAULT_SYNTH_SPEC


# ---------------------------------------------------------------- container


def test_container_round_trip(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "a")
    back = load_dataset(tmp_path / "a")
    assert back.subject_ids == small_dataset.subject_ids
    for x, y in zip(small_dataset.trials(1), back.trials(1)):
        assert x.signal.tobytes() == y.signal.tobytes()
        assert (x.valence, x.arousal, x.trial_id) == (y.valence, y.arousal, y.trial_id)
    save_dataset(back, tmp_path / "b")
    for name in ("manifest.json", "labels.csv", "s01.f64"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_container_errors(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path)
    with pytest.raises(ValidationError, match="subject 5"):
        load_dataset(tmp_path, subjects=[5])
    raw = (tmp_path / "s01.f64").read_bytes()
    (tmp_path / "s01.f64").write_bytes(raw[:-8])
    with pytest.raises(ValidationError, match="expected"):
        load_dataset(tmp_path)
