"""Losses, Adam, and the repeated train / best-val checkpoint / test protocol."""

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from mcam import tensor as T
from mcam.data import SplitSpec, balanced_batches, preprocess, split_and_window
from mcam.errors import ConfigurationError
from mcam.evalstats import confusion_matrix, metrics
from mcam.models import AttentionKind, BackboneConfig, EEGNet, config_hash, param_count

log = logging.getLogger(__name__)

RESULT_FORMAT = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 256
    dropout: float = 0.5
    penalty_weight: float = 0.1
    grid_n: int = 40
    epochs: int = 30
    batches_per_epoch: int = 20
    val_batches: int = 2
    repetitions: int = 10
    seed: int = 0
    attention: str = "none"
    subject: int = 1
    exclude_baseline: bool = False
    per_channel_norm: bool = True

    def __post_init__(self):
        if self.grid_n < 2 or self.grid_n % 2:
            raise ConfigurationError(f"grid size N={self.grid_n} must be even and >= 2")
        if self.penalty_weight < 0:
            raise ConfigurationError("penalty weight must be >= 0")
        if self.repetitions < 1 or self.epochs < 1 or self.batches_per_epoch < 1:
            raise ConfigurationError("repetitions, epochs and batches_per_epoch must be >= 1")
        AttentionKind.parse(self.attention)

    @property
    def kind(self):
        return AttentionKind.parse(self.attention)

    def backbone(self):
        return BackboneConfig(dropout=self.dropout)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return config_hash(self.to_dict())


# ---------------------------------------------------------------- losses


def monotonicity_penalty(f_grid, mode):
    """Finite-difference monotonicity penalty on a uniform grid over [-1, 1].

    ``f_grid`` holds f(t_0..t_N). With ``d_i = (f_{i+1} - f_i) / (2/N)``, M2
    charges ``(|d| - d)/2`` on cells i < N/2 and ``(|d| + d)/2`` on the rest;
    M3 swaps the halves. Accepts a Tensor (result stays in the graph) or an
    array (returns a float).
    """
    if mode not in ("M2", "M3"):
        raise ConfigurationError(f"penalty mode must be M2 or M3, got {mode!r}")
    is_tensor = isinstance(f_grid, T.Tensor)
    f = f_grid if is_tensor else T.Tensor(np.asarray(f_grid, dtype=np.float64))
    f = T.reshape(f, (-1,))
    N = f.shape[0] - 1
    if N < 2 or N % 2:
        raise ConfigurationError(f"grid must have an even number of cells, got N={N}")
    d = T.scale(T.getitem(f, slice(1, None)) - T.getitem(f, slice(None, -1)), N / 2.0)
    left, right = T.getitem(d, slice(0, N // 2)), T.getitem(d, slice(N // 2, None))
    sl, sr = (-1.0, 1.0) if mode == "M2" else (1.0, -1.0)
    pen = T.tsum(T.tabs(left) + T.scale(left, sl)) + T.tsum(T.tabs(right) + T.scale(right, sr))
    pen = T.scale(pen, 0.5)
    return pen if is_tensor else pen.item()


def cell_violations(f_grid, mode):
    """Per-cell penalty terms (slope units) on a grid; zero where the cell conforms."""
    f = np.asarray(f_grid, dtype=np.float64)
    N = f.size - 1
    d = np.diff(f) * (N / 2.0)
    sign = np.where(np.arange(N) < N // 2, -1.0, 1.0)
    if mode == "M3":
        sign = -sign
    return 0.5 * (np.abs(d) + sign * d)


def penalty_grid(n):
    return np.linspace(-1.0, 1.0, n + 1)


def total_loss(model, logits, labels, penalty_weight=0.1, grid_n=40):
    """Mean cross-entropy plus, for MCAM M2/M3, the weighted monotonicity penalty."""
    loss = T.softmax_cross_entropy(logits, labels)
    kind = model.kind
    if kind.name == "mcam" and kind.mode != "M1" and penalty_weight > 0:
        f = model.mcam_map(penalty_grid(grid_n))
        loss = loss + T.scale(monotonicity_penalty(f, kind.mode), penalty_weight)
    return loss


# ---------------------------------------------------------------- optimiser


class Adam:
    """Bias-corrected Adam over a list of leaf tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            adam_update(p.data, p.grad, m, v, c1, c2, self.lr, b1, b2, self.eps)

    def zero_grad(self):
        T.zero_grad(self.params)


def adam_update(param, grad, m, v, c1, c2, lr, beta1, beta2, eps):
    """One in-place Adam update; ``c1``/``c2`` are the bias-correction denominators."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- protocol


@dataclass
class RepetitionResult:
    repetition: int
    seed: int
    best_val_accuracy: float
    best_epoch: int
    accuracy: float
    specificity: float
    f1: float
    confusion: list
    checkpoint: object = field(default=None, repr=False)


@dataclass
class RunResult:
    config: TrainConfig
    repetitions: list
    param_count: int

    def aggregate(self):
        out = {}
        for key in ("accuracy", "specificity", "f1", "best_val_accuracy"):
            vals = np.array([getattr(r, key) for r in self.repetitions])
            out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def to_dict(self, checkpoint_names=None):
        reps = []
        for i, r in enumerate(self.repetitions):
            row = {k: getattr(r, k) for k in ("repetition", "seed", "best_val_accuracy", "best_epoch",
                                              "accuracy", "specificity", "f1", "confusion")}
            if checkpoint_names:
                row["checkpoint"] = checkpoint_names[i]
            reps.append(row)
        return {
            "format": RESULT_FORMAT,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "param_count": self.param_count,
            "repetitions": reps,
            "aggregate": self.aggregate(),
        }

    def to_json(self, checkpoint_names=None):
        return json.dumps(self.to_dict(checkpoint_names), indent=2, sort_keys=True) + "\n"


def repetition_seed(seed, rep):
    return int(np.random.SeedSequence([int(seed), int(rep)]).generate_state(1)[0])


def repetition_streams(config, rep):
    """Seeds of the four independent streams of one repetition: init, dropout, batches, validation."""
    seed = repetition_seed(config.seed, rep)
    init_ss, drop_ss, batch_ss, val_ss = np.random.SeedSequence(seed).spawn(4)
    return {"seed": seed, "init": int(init_ss.generate_state(1)[0]), "dropout": drop_ss,
            "batch": int(batch_ss.generate_state(1)[0]), "val": int(val_ss.generate_state(1)[0])}


def prepare_subject(dataset, config, split=SplitSpec()):
    trials = [preprocess(tr, per_channel=config.per_channel_norm) for tr in dataset.trials(config.subject)]
    return split_and_window(trials, split, exclude_baseline=config.exclude_baseline)


def validation_set(split_data, config, seed):
    gen = balanced_batches(split_data.val, config.batch, seed)
    xs, ys = zip(*(next(gen) for _ in range(config.val_batches)))
    return np.concatenate(xs), np.concatenate(ys)


def accuracy(model, x, y):
    return float((model.predict(x) == y).mean())


def train_repetition(config, split_data, rep):
    """One repetition: returns a RepetitionResult holding the best-val checkpoint."""
    streams = repetition_streams(config, rep)
    seed = streams["seed"]
    model = EEGNet(config.backbone(), config.kind, seed=streams["init"])
    drop_rng = np.random.default_rng(streams["dropout"])
    batches = balanced_batches(split_data.train, config.batch, streams["batch"])
    xv, yv = validation_set(split_data, config, streams["val"])
    opt = Adam(model.parameters(), lr=config.lr)
    best, best_acc, best_epoch = model.state(), -1.0, -1
    for epoch in range(config.epochs):
        for _ in range(config.batches_per_epoch):
            xb, yb = next(batches)
            opt.zero_grad()
            logits = model(xb, train=True, rng=drop_rng)
            loss = total_loss(model, logits, yb, config.penalty_weight, config.grid_n)
            T.backward(loss)
            opt.step()
        acc = accuracy(model, xv, yv)
        log.debug("rep %d epoch %d loss %.4f val %.4f", rep, epoch, loss.item(), acc)
        if acc > best_acc:
            best, best_acc, best_epoch = model.state(), acc, epoch
    model.load_state(best)
    pred = model.predict(split_data.test_windows)
    cm = confusion_matrix(split_data.test_labels, pred, config.backbone().n_classes)
    scores = metrics(cm)
    meta = {"subject": config.subject, "repetition": rep, "seed": seed,
            "best_val_accuracy": best_acc, "best_epoch": best_epoch, "config_hash": config.hash(),
            "exclude_baseline": config.exclude_baseline, "per_channel_norm": config.per_channel_norm}
    return RepetitionResult(rep, seed, best_acc, best_epoch, scores["accuracy"],
                            scores["specificity"], scores["f1"], cm.tolist(),
                            model.to_checkpoint(meta))


def train(config, dataset, split=SplitSpec()):
    """Run ``config.repetitions`` independent repetitions on one subject."""
    split_data = prepare_subject(dataset, config, split)
    reps = []
    for rep in range(config.repetitions):
        r = train_repetition(config, split_data, rep)
        log.info("subject %s %s rep %d: val %.3f test acc %.3f f1 %.3f", config.subject,
                 config.attention, rep, r.best_val_accuracy, r.accuracy, r.f1)
        reps.append(r)
    return RunResult(config, reps, param_count(config.backbone(), config.kind))


def with_overrides(config, **kw):
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
