"""DEAP-shaped recordings: container I/O, preprocessing, labels, splits, batching.

Also holds the synthetic generator used for desk-scale experiments: each
class carries oscillations in its own frequency bands on top of white noise.
"""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from mcam.errors import (ClassCoverageError, ConfigurationError, DegenerateDataError,
                         ValidationError)

SAMPLE_RATE = 128
N_CHANNELS = 32
TRIAL_SAMPLES = 63 * SAMPLE_RATE
BASELINE_SAMPLES = 3 * SAMPLE_RATE
WINDOW = SAMPLE_RATE

CLASS_NAMES = ("HVHA", "HVLA", "LVHA", "LVLA")

DEAP_CHANNELS = (
    "Fp1", "AF3", "F3", "F7", "FC5", "FC1", "C3", "T7", "CP5", "CP1", "P3", "P7",
    "PO3", "O1", "Oz", "Pz", "Fp2", "AF4", "Fz", "F4", "F8", "FC6", "FC2", "Cz",
    "C4", "T8", "CP6", "CP2", "P4", "P8", "PO4", "O2",
)


@dataclass
class TrialRecording:
    subject_id: int
    trial_id: int
    signal: np.ndarray
    valence: float
    arousal: float
    sample_rate: int = SAMPLE_RATE

    @property
    def label(self):
        return binarize_labels(self.valence, self.arousal)


@dataclass(frozen=True)
class SplitSpec:
    train: tuple = (0, 5000)
    val: tuple = (5000, 6000)
    test: tuple = (6000, TRIAL_SAMPLES)

    def __post_init__(self):
        bounds = [self.train, self.val, self.test]
        for lo, hi in bounds:
            if not 0 <= lo < hi <= TRIAL_SAMPLES:
                raise ConfigurationError(f"split range [{lo}, {hi}) outside the trial")
        if not (self.train[1] <= self.val[0] and self.val[1] <= self.test[0]):
            raise ConfigurationError("split ranges must be disjoint and ordered")


@dataclass
class Dataset:
    """Recordings grouped by subject, plus the channel montage."""

    subjects: dict
    channel_names: tuple = DEAP_CHANNELS
    sample_rate: int = SAMPLE_RATE
    info: dict = field(default_factory=dict)

    @property
    def subject_ids(self):
        return sorted(self.subjects)

    def trials(self, subject_id):
        try:
            return self.subjects[subject_id]
        except KeyError:
            raise ValidationError(f"subject {subject_id} not in dataset "
                                  f"(have {self.subject_ids})") from None


# ---------------------------------------------------------------- preprocessing & labels


def preprocess(trial, per_channel=True):
    """Divide the whole trial by the max |x| of its first three seconds.

    Per channel by default; ``per_channel=False`` uses one trial-wide maximum.
    """
    base = np.abs(trial.signal[:, :BASELINE_SAMPLES])
    if per_channel:
        scale = base.max(axis=1)
        bad = np.flatnonzero(scale == 0)
        if bad.size:
            raise DegenerateDataError(
                f"subject {trial.subject_id} trial {trial.trial_id}: all-zero baseline on "
                f"channel {bad[0]}")
        signal = trial.signal / scale[:, None]
    else:
        scale = base.max()
        if scale == 0:
            raise DegenerateDataError(
                f"subject {trial.subject_id} trial {trial.trial_id}: all-zero baseline")
        signal = trial.signal / scale
    return TrialRecording(trial.subject_id, trial.trial_id, signal, trial.valence, trial.arousal,
                          trial.sample_rate)


def binarize_labels(valence, arousal):
    """Class index in HVHA=0, HVLA=1, LVHA=2, LVLA=3; High means score > 5."""
    for name, v in (("valence", valence), ("arousal", arousal)):
        if not 1.0 <= v <= 9.0:
            raise ValidationError(f"{name} score {v} outside [1, 9]")
    high_v, high_a = valence > 5.0, arousal > 5.0
    return (0 if high_v else 2) + (0 if high_a else 1)


# ---------------------------------------------------------------- splitting


@dataclass
class SplitData:
    train: list
    val: list
    test_windows: np.ndarray
    test_labels: np.ndarray
    test_origin: np.ndarray


def split_and_window(trials, spec=SplitSpec(), exclude_baseline=False):
    """Train/val regions as (signal, label) pairs and fixed 1 s test windows.

    ``trials`` is one TrialRecording or a list. Test windows are the
    non-overlapping 1 s segments of the test range, shaped (n, 1, C, 128);
    ``test_origin`` rows are (trial_id, start sample).
    """
    if isinstance(trials, TrialRecording):
        trials = [trials]
    train, val, wins, labels, origin = [], [], [], [], []
    t_lo = max(spec.train[0], BASELINE_SAMPLES) if exclude_baseline else spec.train[0]
    for tr in trials:
        y = tr.label
        train.append((tr.signal[:, t_lo:spec.train[1]], y))
        val.append((tr.signal[:, spec.val[0]:spec.val[1]], y))
        for start in range(spec.test[0], spec.test[1] - WINDOW + 1, WINDOW):
            wins.append(tr.signal[:, start:start + WINDOW])
            labels.append(y)
            origin.append((tr.trial_id, start))
    test = np.stack(wins)[:, None] if wins else np.zeros((0, 1, N_CHANNELS, WINDOW))
    return SplitData(train, val, test, np.asarray(labels, dtype=np.int64),
                     np.asarray(origin, dtype=np.int64).reshape(-1, 2))


def class_counts(batch, n_classes=4):
    """Per-class window counts for a balanced batch: batch // n, remainder to the first classes."""
    base, extra = divmod(batch, n_classes)
    return [base + (1 if k < extra else 0) for k in range(n_classes)]


def balanced_batches(regions, batch=256, seed=0, n_classes=4, window=WINDOW):
    """Endless stream of (windows, labels) with an equal share of every class.

    Each window is a random 1 s crop: a trial of the class is drawn uniformly,
    then a start uniformly over the region's valid offsets.
    """
    by_class = [[sig for sig, y in regions if y == k] for k in range(n_classes)]
    missing = [CLASS_NAMES[k] if n_classes == 4 else str(k) for k, v in enumerate(by_class) if not v]
    if missing:
        raise ClassCoverageError(f"no trials for class(es) {', '.join(missing)}")
    for sigs in by_class:
        for s in sigs:
            if s.shape[1] < window:
                raise ConfigurationError(f"region of {s.shape[1]} samples shorter than a window")
    counts = class_counts(batch, n_classes)
    labels = np.repeat(np.arange(n_classes), counts)
    rng = np.random.default_rng(seed)
    C = by_class[0][0].shape[0]
    while True:
        out = np.empty((batch, 1, C, window))
        i = 0
        for k, sigs in enumerate(by_class):
            picks = rng.integers(0, len(sigs), size=counts[k])
            for p in picks:
                s = sigs[p]
                start = rng.integers(0, s.shape[1] - window + 1)
                out[i, 0] = s[:, start:start + window]
                i += 1
        order = rng.permutation(batch)
        yield out[order], labels[order]


# ---------------------------------------------------------------- synthetic generator


DEFAULT_SYNTH_SPEC = {
    "subjects": 4,
    "trials_per_class": 10,
    "noise_std": 1.0,
    "tones_per_band": 3,
    "profile_range": [0.5, 1.5],
    "classes": [
        {"name": "HVHA", "bands": [[38.0, 46.0, 1.0], [8.0, 12.0, 0.6]]},
        {"name": "HVLA", "bands": [[8.0, 12.0, 0.6]]},
        {"name": "LVHA", "bands": [[24.0, 30.0, 1.0]]},
        {"name": "LVLA", "bands": [[14.0, 18.0, 1.0]]},
    ],
}


def validate_synth_spec(spec):
    """Fill defaults and check the synthetic spec; returns a normalised copy."""
    spec = {**DEFAULT_SYNTH_SPEC, **spec}
    nyq = SAMPLE_RATE / 2
    if len(spec["classes"]) != 4:
        raise ConfigurationError("synthetic spec needs exactly four classes")
    for k, cls in enumerate(spec["classes"]):
        if not cls.get("bands"):
            raise ConfigurationError(f"class {k} lists no bands")
        for band in cls["bands"]:
            lo, hi = band[0], band[1]
            if hi > nyq:
                raise ConfigurationError(
                    f"class {cls.get('name', k)} band {lo}-{hi} Hz exceeds Nyquist ({nyq:g} Hz)")
            if not 0 < lo < hi:
                raise ConfigurationError(f"class {cls.get('name', k)} band {lo}-{hi} Hz is empty")
        prof = cls.get("profile")
        if prof is not None and len(prof) != N_CHANNELS:
            raise ConfigurationError(f"class {k} profile needs {N_CHANNELS} values")
    if spec["noise_std"] < 0 or spec["subjects"] < 1 or spec["trials_per_class"] < 1:
        raise ConfigurationError("noise_std must be >= 0 and counts >= 1")
    return spec


def _scores(rng, label):
    hv, ha = label in (0, 1), label in (0, 2)
    v = rng.uniform(5.5, 9.0) if hv else rng.uniform(1.0, 4.5)
    a = rng.uniform(5.5, 9.0) if ha else rng.uniform(1.0, 4.5)
    return float(v), float(a)


def synth_generate(spec=None, seed=0):
    """Synthetic DEAP-shaped dataset (32 x 8064 at 128 Hz per trial).

    Class k's trials carry, per listed band, a sum of sinusoids with random
    in-band frequencies and phases, spread over channels by a per-subject
    amplitude profile, plus white noise of ``noise_std``. Classes are
    interleaved in trial order.
    """
    spec = validate_synth_spec(spec or {})
    rng = np.random.default_rng(seed)
    t = np.arange(TRIAL_SAMPLES) / SAMPLE_RATE
    lo_p, hi_p = spec["profile_range"]
    n_tones = int(spec["tones_per_band"])
    subjects = {}
    for sid in range(1, int(spec["subjects"]) + 1):
        profiles = [np.asarray(c["profile"], dtype=np.float64) if c.get("profile") is not None
                    else rng.uniform(lo_p, hi_p, N_CHANNELS) for c in spec["classes"]]
        trials = []
        for j in range(int(spec["trials_per_class"]) * 4):
            label = j % 4
            source = np.zeros(TRIAL_SAMPLES)
            for lo, hi, amp in spec["classes"][label]["bands"]:
                freqs = rng.uniform(lo, hi, n_tones)
                phases = rng.uniform(0, 2 * np.pi, n_tones)
                source += (amp / np.sqrt(n_tones)) * np.sin(
                    2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None]).sum(axis=0)
            signal = profiles[label][:, None] * source[None, :]
            signal = signal + spec["noise_std"] * rng.standard_normal((N_CHANNELS, TRIAL_SAMPLES))
            v, a = _scores(rng, label)
            trials.append(TrialRecording(sid, j, signal, v, a))
        subjects[sid] = trials
    return Dataset(subjects, info={"synthetic": True, "seed": int(seed), "spec": spec})


# ---------------------------------------------------------------- container I/O

MANIFEST = "manifest.json"
LABELS = "labels.csv"


def _subject_file(sid):
    return f"s{sid:02d}.f64"


def save_dataset(ds, out_dir):
    """Write ``manifest.json``, ``labels.csv`` and one raw float64 file per subject."""
    os.makedirs(out_dir, exist_ok=True)
    subjects = ds.subject_ids
    shapes = {}
    with open(os.path.join(out_dir, LABELS), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "trial", "valence", "arousal"])
        for sid in subjects:
            trials = sorted(ds.subjects[sid], key=lambda tr: tr.trial_id)
            for tr in trials:
                w.writerow([sid, tr.trial_id, repr(float(tr.valence)), repr(float(tr.arousal))])
            block = np.stack([tr.signal for tr in trials]).astype("<f8")
            shapes[str(sid)] = list(block.shape)
            with open(os.path.join(out_dir, _subject_file(sid)), "wb") as fh2:
                fh2.write(block.tobytes())
    manifest = {
        "format": "mcam-eeg-container",
        "version": 1,
        "subjects": subjects,
        "trials": {str(s): len(ds.subjects[s]) for s in subjects},
        "channels": N_CHANNELS,
        "samples": TRIAL_SAMPLES,
        "sample_rate": ds.sample_rate,
        "channel_names": list(ds.channel_names),
        "files": {str(s): _subject_file(s) for s in subjects},
        "dtype": "float64-le",
        "order": "trial,channel,sample",
        "info": ds.info,
    }
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(data_dir, subjects=None):
    """Read a dataset container; ``subjects`` limits which subject files are loaded."""
    with open(os.path.join(data_dir, MANIFEST)) as fh:
        manifest = json.load(fh)
    scores = {}
    with open(os.path.join(data_dir, LABELS), newline="") as fh:
        for row in csv.DictReader(fh):
            scores[(int(row["subject"]), int(row["trial"]))] = (float(row["valence"]),
                                                               float(row["arousal"]))
    C, S = manifest["channels"], manifest["samples"]
    wanted = manifest["subjects"] if subjects is None else [int(s) for s in subjects]
    out = {}
    for sid in wanted:
        if sid not in manifest["subjects"]:
            raise ValidationError(f"subject {sid} not in {data_dir}")
        n = manifest["trials"][str(sid)]
        raw = np.fromfile(os.path.join(data_dir, manifest["files"][str(sid)]), dtype="<f8")
        if raw.size != n * C * S:
            raise ValidationError(f"{manifest['files'][str(sid)]}: expected {n * C * S} values, "
                                  f"found {raw.size}")
        block = raw.reshape(n, C, S).astype(np.float64)
        trial_ids = sorted(t for (s, t) in scores if s == sid)
        out[sid] = [TrialRecording(sid, tid, block[i], *scores[(sid, tid)],
                                   sample_rate=manifest["sample_rate"])
                    for i, tid in enumerate(trial_ids)]
    return Dataset(out, tuple(manifest["channel_names"]), manifest["sample_rate"],
                   manifest.get("info", {}))
