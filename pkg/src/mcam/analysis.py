"""Sensitivity analyses over trained models.

* lowpass sweep: accuracy of each model on brick-wall filtered test windows;
* morphism probing: where along ``(1-u) x_i + u x_j`` the softmax score of
  label i first falls below that of label j;
* scalp statistics of the spatial (depthwise) filters across checkpoints;
* the learned MCAM map traced over [-1, 1].
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from mcam.data import CLASS_NAMES, DEAP_CHANNELS, SAMPLE_RATE
from mcam.errors import (ConfigurationError, ContractError, DegenerateFilterError,
                         SelectionError, ValidationError)
from mcam import tensor as T
from mcam.models import AttentionKind, BackboneConfig, Checkpoint, EEGNet
from mcam.training import total_loss

DEFAULT_CUTOFFS = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 64.0)


def _logits(model, x):
    if hasattr(model, "logits"):
        return model.logits(x)
    return np.asarray(model(x))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- lowpass sweep


def lowpass(signal, fc, fs=SAMPLE_RATE):
    """Zero-phase brick-wall lowpass along the last axis.

    Bins strictly above ``fc`` are zeroed in the real FFT. When no bin is
    above ``fc`` the input is returned unchanged (as a copy).
    """
    if not 0.0 < fc <= fs / 2.0:
        raise ConfigurationError(f"cutoff {fc} Hz outside (0, {fs / 2:g}] Hz")
    x = np.asarray(signal, dtype=np.float64)
    n = x.shape[-1]
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    drop = freqs > fc
    if not drop.any():
        return x.copy()
    spec = np.fft.rfft(x, axis=-1)
    spec[..., drop] = 0.0
    return np.fft.irfft(spec, n=n, axis=-1)


@dataclass
class SweepReport:
    cutoffs: list
    models: list
    accuracy: dict
    reference: dict
    recall: dict
    reference_recall: dict

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cutoff_hz"] + self.models)
        w.writerow(["unfiltered"] + [_fmt(self.reference[m]) for m in self.models])
        for i, fc in enumerate(self.cutoffs):
            w.writerow([_fmt(fc)] + [_fmt(self.accuracy[m][i]) for m in self.models])
        return buf.getvalue()

    def recall_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "cutoff_hz"] + list(CLASS_NAMES))
        for m in self.models:
            w.writerow([m, "unfiltered"] + [_fmt(v) for v in self.reference_recall[m]])
            for i, fc in enumerate(self.cutoffs):
                w.writerow([m, _fmt(fc)] + [_fmt(v) for v in self.recall[m][i]])
        return buf.getvalue()


def _fmt(v):
    return repr(float(v))


def _recall(pred, labels, n_classes):
    out = []
    for k in range(n_classes):
        mask = labels == k
        out.append(float((pred[mask] == k).mean()) if mask.any() else float("nan"))
    return out


def sweep(models, windows, labels, cutoffs=DEFAULT_CUTOFFS, fs=SAMPLE_RATE, n_classes=4):
    """Accuracy and per-class recall of every model at every cutoff.

    ``models`` maps a display name to a model (or logits callable).
    """
    cutoffs = [float(c) for c in cutoffs]
    if any(b <= a for a, b in zip(cutoffs, cutoffs[1:])):
        raise ConfigurationError("cutoffs must be strictly increasing")
    for c in cutoffs:
        if not 0 < c <= fs / 2:
            raise ConfigurationError(f"cutoff {c} Hz outside (0, {fs / 2:g}] Hz")
    labels = np.asarray(labels)
    names = list(models)
    acc = {m: [] for m in names}
    rec = {m: [] for m in names}
    ref, ref_rec = {}, {}
    for m in names:
        pred = _logits(models[m], windows).argmax(axis=1)
        ref[m] = float((pred == labels).mean())
        ref_rec[m] = _recall(pred, labels, n_classes)
    for fc in cutoffs:
        filtered = lowpass(windows, fc, fs)
        for m in names:
            pred = _logits(models[m], filtered).argmax(axis=1)
            acc[m].append(float((pred == labels).mean()))
            rec[m].append(_recall(pred, labels, n_classes))
    return SweepReport(cutoffs, names, acc, ref, rec, ref_rec)


# ---------------------------------------------------------------- morphism probing


def select_anchors(models, windows, labels, n_classes=4):
    """Lowest-index window of each class that every model classifies correctly."""
    labels = np.asarray(labels)
    ok = np.ones(labels.shape, dtype=bool)
    for m in (models.values() if isinstance(models, dict) else models):
        ok &= _logits(m, windows).argmax(axis=1) == labels
    anchors = []
    for k in range(n_classes):
        idx = np.flatnonzero(ok & (labels == k))
        if idx.size == 0:
            name = CLASS_NAMES[k] if n_classes == len(CLASS_NAMES) else str(k)
            raise SelectionError(f"no window of class {name} is classified correctly by every model")
        anchors.append(int(idx[0]))
    return anchors


def morph_grid(step):
    n = int(round(1.0 / step))
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise ConfigurationError(f"grid step {step} must divide 1")
    return np.linspace(0.0, 1.0, n + 1)


def _path_scores(model, x_i, x_j, i, j, grid_step):
    if i == j:
        raise ValidationError("morph labels must differ")
    u = morph_grid(grid_step)
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    w = u.reshape((-1,) + (1,) * x_i.ndim)
    p = _softmax(_logits(model, (1.0 - w) * x_i + w * x_j))
    return u, p[:, i] - p[:, j]


def morph_crossing(model, x_i, x_j, i, j, grid_step=0.01):
    """Smallest grid u where softmax_i((1-u) x_i + u x_j) < softmax_j(...); 1.0 if none."""
    u, gap = _path_scores(model, x_i, x_j, i, j, grid_step)
    below = np.flatnonzero(gap < 0)
    return float(u[below[0]]) if below.size else 1.0


def crossing_is_unique(model, x_i, x_j, i, j, grid_step=0.01):
    """True when softmax_i - softmax_j changes sign exactly once along the grid path."""
    _, gap = _path_scores(model, x_i, x_j, i, j, grid_step)
    neg = gap < 0
    return bool(np.count_nonzero(neg[1:] != neg[:-1]) == 1)


def all_crossings_unique(model, anchor_windows, grid_step=0.01):
    n = len(anchor_windows)
    return all(crossing_is_unique(model, anchor_windows[i], anchor_windows[j], i, j, grid_step)
               for i in range(n) for j in range(n) if i != j)


@dataclass
class MorphReport:
    u: np.ndarray
    scores: np.ndarray
    vertices: dict
    std: float
    grid_step: float
    anchors: list = field(default_factory=list)

    @property
    def n_classes(self):
        return self.u.shape[0]

    @property
    def percentages(self):
        """S_i over the ideal total N(N-1)/2."""
        return percentage_of_ideal(self.scores)

    @property
    def shares(self):
        return self.scores / self.scores.sum()

    def to_dict(self):
        n = self.n_classes
        return {
            "classes": list(CLASS_NAMES[:n]) if n == len(CLASS_NAMES) else list(range(n)),
            "grid_step": self.grid_step,
            "anchors": self.anchors,
            "u": [[None if a == b else float(self.u[a, b]) for b in range(n)] for a in range(n)],
            "S": [float(s) for s in self.scores],
            "S_total": float(self.scores.sum()),
            "percentages": [float(p) for p in self.percentages],
            "shares": [float(p) for p in self.shares],
            "std": float(self.std),
            "vertices": {str(k): v for k, v in self.vertices.items()},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def percentage_of_ideal(scores):
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    return scores / (n * (n - 1) / 2.0)


def polar_vertices(u_row, i):
    """(rho, theta, j) per target j != i, theta = 2 pi v_j / (N - 1)."""
    n = len(u_row)
    targets = [j for j in range(n) if j != i]
    return [(float(u_row[j]), 2.0 * np.pi * v / (n - 1), int(j)) for v, j in enumerate(targets)]


def morph_report(model, anchor_windows, grid_step=0.01, anchors=None):
    """All pairwise crossings between one anchor window per class."""
    n = len(anchor_windows)
    u = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(n):
            if i != j:
                u[i, j] = morph_crossing(model, anchor_windows[i], anchor_windows[j], i, j, grid_step)
    scores = np.nansum(u, axis=1)
    verts = {i: polar_vertices(u[i], i) for i in range(n)}
    return MorphReport(u, scores, verts, float(np.std(scores)), grid_step, list(anchors or []))


# ---------------------------------------------------------------- scalp statistics


@dataclass
class ScalpReport:
    mean: np.ndarray
    std: np.ndarray
    channel_names: tuple
    n_checkpoints: int

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["filter", "channel", "mean", "std"])
        for f in range(self.mean.shape[0]):
            for c, name in enumerate(self.channel_names):
                w.writerow([f, name, _fmt(self.mean[f, c]), _fmt(self.std[f, c])])
        return buf.getvalue()


def spatial_filters(ckpt):
    w = ckpt.named_parameters()["spatial.w"]
    return w[:, 0, :, 0]


def normalize_filters(w):
    peak = np.abs(w).max(axis=1, keepdims=True)
    if (peak == 0).any():
        raise DegenerateFilterError(f"spatial filter {int(np.flatnonzero(peak[:, 0] == 0)[0])} is all zero")
    return w / peak


def scalp_stats(checkpoints, channel_names=DEAP_CHANNELS):
    """Mean and std across checkpoints of per-filter max-|w| normalised spatial weights."""
    if not checkpoints:
        raise ValidationError("scalp statistics need at least one checkpoint")
    first = checkpoints[0]
    for c in checkpoints[1:]:
        if c.config != first.config or c.kind != first.kind:
            raise ValidationError("checkpoints do not share one model spec")
    stack = np.stack([normalize_filters(spatial_filters(c)) for c in checkpoints])
    if stack.shape[2] != len(channel_names):
        raise ValidationError(f"{stack.shape[2]} channels but {len(channel_names)} channel names")
    return ScalpReport(stack.mean(axis=0), stack.std(axis=0), tuple(channel_names), len(checkpoints))


# ---------------------------------------------------------------- learned map


def trace_f(checkpoint, n_points=1001):
    """(t, f(t)) of a checkpoint's MCAM map on a uniform grid over [-1, 1]."""
    if checkpoint.kind.name != "mcam":
        raise ContractError(f"checkpoint has no MCAM module (attention={checkpoint.kind.label})")
    model = EEGNet.from_checkpoint(checkpoint)
    t = np.linspace(-1.0, 1.0, n_points)
    return t, model.mcam_map(t).data.copy()


def load_checkpoints(paths):
    return [Checkpoint.load(p) for p in paths]


# ---------------------------------------------------------------- gradient fidelity


def calibrate_batchnorm(model, x, passes=300):
    """Drive every running mean/var to the batch statistics of ``x``."""
    with T.no_grad():
        for _ in range(passes):
            model(x, train=True, rng=np.random.default_rng(0))


def model_grad_check(label, seed=0, batch=4, eps=1e-5, train_bn=False):
    """Max relative analytic-vs-numeric gradient error over every model parameter.

    Dropout is disabled and batch norm runs in eval mode by default, with
    running statistics first calibrated on the check batch. Left at their
    initial values (mean 0, var 1) the activations reaching the attention
    block are so small that its gradients (~1e-9) sit at the rounding floor of
    a central difference, which measures float64 noise, not the code. In train
    mode the first batch norm's shift has an exactly zero gradient (the second
    batch norm removes any constant offset), so its finite difference is pure
    rounding noise and the relative error is meaningless there. The loss is
    the training loss, so MCAM-M2/M3 include the monotonicity penalty.
    """
    cfg = BackboneConfig(dropout=0.0)
    model = EEGNet(cfg, AttentionKind.parse(label), seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, 1, cfg.in_channels, cfg.samples))
    y = np.arange(batch) % cfg.n_classes

    if not train_bn:
        calibrate_batchnorm(model, x)

    def forward():
        return total_loss(model, model(x, train=train_bn), y)

    return T.grad_check(forward, model.parameters(), eps)
