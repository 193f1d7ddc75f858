"""EEGNet-style backbone with pluggable attention modules.

The feature map entering the attention slot is (batch, F2, 1, samples/32).
For MCAM each sample's map is read as a matrix ``X`` of shape (d, n) whose n
columns are the flattened channel vectors; the module returns ``X + X A``
with ``A = f(C)`` applied elementwise to the cosine Gram matrix ``C``.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from mcam import tensor as T
from mcam.errors import ConfigurationError, DimensionError, ValidationError

GRAM_EPS = 1e-8
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

MCAM_MODES = ("M1", "M2", "M3")
ATTENTION_NAMES = ("none", "se", "cbam", "qkv", "m1", "m2", "m3")


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 32
    samples: int = 128
    F1: int = 8
    D: int = 2
    F2: int = 16
    temporal_kernel: int = 64
    sep_kernel: int = 16
    pool1: int = 4
    pool2: int = 8
    dropout: float = 0.5
    n_classes: int = 4

    def __post_init__(self):
        if self.samples % (self.pool1 * self.pool2):
            raise ConfigurationError(
                f"samples={self.samples} not divisible by pool1*pool2={self.pool1 * self.pool2}")
        if self.F2 != self.F1 * self.D:
            raise ConfigurationError(f"F2={self.F2} must equal F1*D={self.F1 * self.D}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout {self.dropout} outside [0, 1)")

    @property
    def feature_len(self):
        """Spatial-temporal extent of one channel at the attention slot."""
        return self.samples // (self.pool1 * self.pool2)


@dataclass(frozen=True)
class AttentionKind:
    """Which module sits after the second pooling block.

    ``name`` is one of none/se/cbam/qkv/mcam; ``mode`` only applies to mcam.
    """

    name: str = "none"
    mode: str = None
    reduction: int = 8
    spatial_kernel: int = 7
    dim: int = 16
    hidden: tuple = (9, 2)

    def __post_init__(self):
        if self.name not in ("none", "se", "cbam", "qkv", "mcam"):
            raise ConfigurationError(f"unknown attention {self.name!r}")
        if self.name == "mcam" and self.mode not in MCAM_MODES:
            raise ConfigurationError(f"MCAM mode must be one of {MCAM_MODES}, got {self.mode!r}")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @classmethod
    def parse(cls, label):
        """Build from a CLI label: none, se, cbam, qkv, m1, m2 or m3."""
        key = str(label).strip().lower()
        if key not in ATTENTION_NAMES:
            raise ConfigurationError(
                f"unknown attention {label!r}; valid names: {', '.join(ATTENTION_NAMES)}")
        if key.startswith("m"):
            return cls("mcam", mode=key.upper())
        return cls(key)

    @property
    def label(self):
        return self.mode.lower() if self.name == "mcam" else self.name

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "hidden": tuple(d.get("hidden", (9, 2)))})


# ---------------------------------------------------------------- parameter layout


def parameter_shapes(cfg, kind):
    """Ordered (name, shape) of every trainable tensor."""
    C, F1, D, F2 = cfg.in_channels, cfg.F1, cfg.D, cfg.F2
    shapes = [
        ("temporal.w", (F1, 1, 1, cfg.temporal_kernel)),
        ("bn1.gamma", (F1,)), ("bn1.beta", (F1,)),
        ("spatial.w", (F1 * D, 1, C, 1)),
        ("bn2.gamma", (F1 * D,)), ("bn2.beta", (F1 * D,)),
        ("sep_depth.w", (F1 * D, 1, 1, cfg.sep_kernel)),
        ("sep_point.w", (F2, F1 * D, 1, 1)),
        ("bn3.gamma", (F2,)), ("bn3.beta", (F2,)),
    ]
    shapes += _attention_shapes(cfg, kind)
    shapes += [("dense.w", (F2 * cfg.feature_len, cfg.n_classes)), ("dense.b", (cfg.n_classes,))]
    return shapes


def _attention_shapes(cfg, kind):
    F2 = cfg.F2
    if kind.name == "none":
        return []
    if kind.name in ("se", "cbam"):
        if F2 % kind.reduction:
            raise ConfigurationError(f"F2={F2} not divisible by reduction={kind.reduction}")
        r = F2 // kind.reduction
        out = [("att.fc1.w", (F2, r)), ("att.fc1.b", (r,)),
               ("att.fc2.w", (r, F2)), ("att.fc2.b", (F2,))]
        if kind.name == "cbam":
            k = kind.spatial_kernel
            out.append(("att.spatial.w", (1, 2, k, k)))
        return out
    if kind.name == "qkv":
        d = kind.dim
        out = []
        for p in ("q", "k", "v"):
            out += [(f"att.{p}.w", (F2, d)), (f"att.{p}.b", (d,))]
        return out + [("att.o.w", (d, F2)), ("att.o.b", (F2,))]
    widths = (1,) + kind.hidden + (1,)
    out = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        out += [(f"att.f{i}.w", (a, b)), (f"att.f{i}.b", (b,))]
    return out


def param_count(cfg, kind):
    """Number of trainable scalars (batch-norm scale/shift in, running stats out)."""
    return int(sum(np.prod(s) for _, s in parameter_shapes(cfg, kind)))


def buffer_shapes(cfg):
    F1, F12, F2 = cfg.F1, cfg.F1 * cfg.D, cfg.F2
    return [("bn1.running_mean", (F1,)), ("bn1.running_var", (F1,)),
            ("bn2.running_mean", (F12,)), ("bn2.running_var", (F12,)),
            ("bn3.running_mean", (F2,)), ("bn3.running_var", (F2,))]


def _glorot(rng, shape):
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    else:
        fan_in, fan_out = shape[0], shape[-1]
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_parameters(cfg, kind, rng):
    params = {}
    for name, shape in parameter_shapes(cfg, kind):
        if name.endswith(".gamma"):
            val = np.ones(shape)
        elif name.endswith(".beta") or name.endswith(".b"):
            val = np.zeros(shape)
        else:
            val = _glorot(rng, shape)
        params[name] = T.parameter(val)
    return params


# ---------------------------------------------------------------- building blocks


def mlp_map(params, t, n_layers=3):
    """The MCAM scalar map f applied elementwise to ``t``; values in (0, 1)."""
    shape = t.shape
    h = T.reshape(t, (-1, 1))
    for i in range(1, n_layers + 1):
        h = T.matmul(h, params[f"att.f{i}.w"]) + params[f"att.f{i}.b"]
        h = T.tanh(h) if i < n_layers else T.sigmoid(h)
    return T.reshape(h, shape)


def gram_matrix(X, eps=GRAM_EPS):
    """Cosine Gram matrix of the columns of X.

    ``X`` is (d, n) or batched (b, d, n); returns (n, n) or (b, n, n) with
    ``C_ij = <x_i, x_j> / (|x_i| |x_j| + eps)``.
    """
    X = T.as_tensor(X)
    Xt = T.transpose(X, _swap_last(X.ndim))
    norms = T.l2norm(X, axis=-2, keepdims=True)
    denom = T.matmul(T.transpose(norms, _swap_last(norms.ndim)), norms) + eps
    return T.matmul(Xt, X) * T.reciprocal(denom)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def mcam_forward(X, params, n_layers=3):
    """``X + X f(C)`` for X of shape (d, n) or (b, d, n)."""
    X = T.as_tensor(X)
    A = mlp_map(params, gram_matrix(X), n_layers)
    return X + T.matmul(X, A)


def _feature_matrix(fm):
    # (B, F2, H, W) -> (B, d, n): columns are channel vectors
    B, F2 = fm.shape[:2]
    return T.transpose(T.reshape(fm, (B, F2, -1)), (0, 2, 1))


def _from_feature_matrix(X, shape):
    return T.reshape(T.transpose(X, (0, 2, 1)), shape)


def se_forward(fm, params):
    s = T.mean(fm, axis=(2, 3))
    h = T.relu(T.matmul(s, params["att.fc1.w"]) + params["att.fc1.b"])
    gate = T.sigmoid(T.matmul(h, params["att.fc2.w"]) + params["att.fc2.b"])
    return fm * T.reshape(gate, gate.shape + (1, 1))


def cbam_forward(fm, params):
    B, F2 = fm.shape[:2]

    def shared(v):
        h = T.relu(T.matmul(v, params["att.fc1.w"]) + params["att.fc1.b"])
        return T.matmul(h, params["att.fc2.w"]) + params["att.fc2.b"]

    avg = T.mean(fm, axis=(2, 3))
    mx = T.amax(T.reshape(fm, (B, F2, -1)), axis=2)
    ca = T.sigmoid(shared(avg) + shared(mx))
    fm = fm * T.reshape(ca, (B, F2, 1, 1))
    pooled = T.concat([T.mean(fm, axis=1, keepdims=True), T.amax(fm, axis=1, keepdims=True)], axis=1)
    sa = T.sigmoid(T.conv2d(pooled, params["att.spatial.w"], padding="same"))
    return fm * sa


def qkv_forward(fm, params, dim):
    # tokens are spatial-temporal positions carrying F2 channel features
    tokens = _feature_matrix(fm)
    q = T.matmul(tokens, params["att.q.w"]) + params["att.q.b"]
    k = T.matmul(tokens, params["att.k.w"]) + params["att.k.b"]
    v = T.matmul(tokens, params["att.v.w"]) + params["att.v.b"]
    att = T.softmax(T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dim)))
    out = tokens + T.matmul(T.matmul(att, v), params["att.o.w"]) + params["att.o.b"]
    return _from_feature_matrix(out, fm.shape)


def attention_forward(kind, fm, params):
    if kind.name == "none":
        return fm
    if kind.name == "se":
        return se_forward(fm, params)
    if kind.name == "cbam":
        return cbam_forward(fm, params)
    if kind.name == "qkv":
        return qkv_forward(fm, params, kind.dim)
    X = _feature_matrix(fm)
    return _from_feature_matrix(mcam_forward(X, params, len(kind.hidden) + 1), fm.shape)


def window_moments(xp, T_out, K):
    """First and second moments of every length-K window of ``xp`` rows.

    ``xp`` is (rows, T_out + K - 1). Returns ``m`` (K,) and ``R`` (K, K) with
    ``m[k] = mean_{r,t} xp[r, t+k]`` and ``R[k,l] = mean_{r,t} xp[r,t+k] xp[r,t+l]``
    over t < T_out.
    """
    n = xp.shape[0] * T_out
    col = np.concatenate([[0.0], np.cumsum(xp.sum(axis=0))])
    m = (col[T_out:T_out + K] - col[:K]) / n
    G = xp.T @ xp
    t = np.arange(T_out)[:, None, None]
    k = np.arange(K)[None, :, None]
    l = np.arange(K)[None, None, :]
    R = G[t + k, t + l].sum(axis=0) / n
    return m, 0.5 * (R + R.T)


# ---------------------------------------------------------------- the model


class EEGNet:
    """Backbone + attention with named parameters and batch-norm buffers.

    With ``factorized=True`` (default) the temporal conv, first batch norm and
    spatial depthwise conv are evaluated as spatial projection followed by a
    per-filter temporal conv, with the batch-norm statistics taken from the
    input's window moments. This is algebraically identical to the layer
    sequence (all three are linear per batch) and about 15x cheaper.
    """

    def __init__(self, cfg=None, kind=None, seed=0, factorized=True, params=None):
        self.cfg = cfg or BackboneConfig()
        self.kind = kind or AttentionKind()
        self.factorized = factorized
        _attention_shapes(self.cfg, self.kind)
        self.params = params if params is not None else init_parameters(
            self.cfg, self.kind, np.random.default_rng(seed))
        self.buffers = {name: (np.zeros(s) if name.endswith("mean") else np.ones(s))
                        for name, s in buffer_shapes(self.cfg)}

    # parameter plumbing
    def parameters(self):
        return list(self.params.values())

    def param_count(self):
        return int(sum(p.size for p in self.params.values()))

    def flat_parameters(self):
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def load_flat_parameters(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count():
            raise DimensionError(f"flat vector of {flat.size} for {self.param_count()} parameters")
        i = 0
        for p in self.params.values():
            p.data[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def state(self):
        """Copy of (flat parameters, buffers)."""
        return self.flat_parameters(), {k: v.copy() for k, v in self.buffers.items()}

    def load_state(self, state):
        flat, bufs = state
        self.load_flat_parameters(flat)
        for k, v in bufs.items():
            self.buffers[k][...] = v

    # forward
    def _bn(self, x, idx, train):
        return T.batchnorm(x, self.params[f"bn{idx}.gamma"], self.params[f"bn{idx}.beta"],
                           self.buffers[f"bn{idx}.running_mean"], self.buffers[f"bn{idx}.running_var"],
                           train, BN_MOMENTUM, BN_EPS)

    def _first_block_literal(self, x, train):
        h = T.conv2d(x, self.params["temporal.w"], padding="same")
        h = self._bn(h, 1, train)
        return T.conv2d(h, self.params["spatial.w"], groups=self.cfg.F1)

    def _first_block_factorized(self, x, train):
        cfg, p = self.cfg, self.params
        B, C, S, K = x.shape[0], cfg.in_channels, cfg.samples, cfg.temporal_kernel
        F1, FD = cfg.F1, cfg.F1 * cfg.D
        xp = np.pad(x.data[:, 0], ((0, 0), (0, 0), ((K - 1) // 2, K // 2)))
        L = xp.shape[-1]
        rep = np.repeat(np.arange(F1), cfg.D)
        s = T.reshape(p["spatial.w"], (FD, C))
        w = T.reshape(p["temporal.w"], (F1, K))
        proj = T.matmul(s, T.Tensor(xp))
        q = T.conv2d(T.reshape(proj, (B, FD, 1, L)), T.reshape(T.getitem(w, rep), (FD, 1, 1, K)),
                     groups=FD)
        rm, rv = self.buffers["bn1.running_mean"], self.buffers["bn1.running_var"]
        if train:
            m, R = window_moments(xp.reshape(B * C, L), S, K)
            mu = T.matmul(w, T.Tensor(m[:, None]))
            second = T.tsum(T.matmul(w, T.Tensor(R)) * w, axis=1, keepdims=True)
            var = second - mu * mu
            T.update_running(rm, rv, mu.data[:, 0], var.data[:, 0], BN_MOMENTUM)
        else:
            mu, var = T.Tensor(rm[:, None]), T.Tensor(rv[:, None])
        a = T.reshape(p["bn1.gamma"], (F1, 1)) * T.reciprocal(T.sqrt(var + BN_EPS))
        c = T.reshape(p["bn1.beta"], (F1, 1)) - a * mu
        a_rep = T.reshape(T.getitem(a, rep), (FD, 1, 1))
        shift = T.reshape(T.getitem(c, rep), (FD, 1, 1)) * T.reshape(T.tsum(s, axis=1), (FD, 1, 1))
        return q * a_rep + shift

    def forward(self, x, train=False, rng=None):
        """Logits (batch, n_classes) for windows shaped (batch, 1, channels, samples)."""
        cfg = self.cfg
        x = T.as_tensor(x)
        expect = (1, cfg.in_channels, cfg.samples)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise DimensionError(f"expected input (batch, {expect[0]}, {expect[1]}, {expect[2]}), "
                                 f"got {x.shape}")
        if train and cfg.dropout > 0 and rng is None:
            raise ConfigurationError("train-mode forward needs a dropout rng")
        if self.factorized and not x.requires_grad:
            h = self._first_block_factorized(x, train)
        else:
            h = self._first_block_literal(x, train)
        h = T.elu(self._bn(h, 2, train))
        h = T.avg_pool2d(h, (1, cfg.pool1))
        h = T.dropout(h, cfg.dropout, train, rng)
        h = T.conv2d(h, self.params["sep_depth.w"], groups=cfg.F1 * cfg.D, padding="same")
        h = T.conv2d(h, self.params["sep_point.w"])
        h = T.elu(self._bn(h, 3, train))
        h = T.avg_pool2d(h, (1, cfg.pool2))
        h = T.dropout(h, cfg.dropout, train, rng)
        h = attention_forward(self.kind, h, self.params)
        h = T.reshape(h, (h.shape[0], -1))
        return T.matmul(h, self.params["dense.w"]) + self.params["dense.b"]

    __call__ = forward

    def logits(self, x, batch_size=512):
        """Eval-mode logits as a NumPy array, computed in chunks without a graph."""
        x = np.asarray(x, dtype=np.float64)
        out = []
        with T.no_grad():
            for i in range(0, x.shape[0], batch_size):
                out.append(self.forward(x[i:i + batch_size], train=False).data)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.n_classes))

    def predict(self, x, batch_size=512):
        return self.logits(x, batch_size).argmax(axis=1)

    def mcam_map(self, t):
        """Evaluate the MCAM scalar map on ``t`` (Tensor or array)."""
        if self.kind.name != "mcam":
            raise ConfigurationError(f"model has no MCAM module (attention={self.kind.label})")
        return mlp_map(self.params, T.as_tensor(t), len(self.kind.hidden) + 1)

    # checkpoints
    def to_checkpoint(self, metadata=None):
        flat, bufs = self.state()
        return Checkpoint(self.cfg, self.kind, flat, bufs, dict(metadata or {}))

    @classmethod
    def from_checkpoint(cls, ckpt, factorized=True):
        model = cls(ckpt.config, ckpt.kind, factorized=factorized)
        model.load_state((ckpt.params, ckpt.buffers))
        return model


# ---------------------------------------------------------------- checkpoint container

MAGIC = b"MCAMCKPT"
FORMAT_VERSION = 1


def config_hash(*parts):
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    """A trained model as plain values.

    On disk: ``MCAMCKPT`` magic, little-endian u32 format version, u64 header
    length, a UTF-8 JSON header (backbone, attention, parameter and buffer
    names with shapes, metadata), then the parameter vector and the buffers as
    little-endian float64 in header order.
    """

    config: BackboneConfig
    kind: AttentionKind
    params: np.ndarray
    buffers: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = param_count(self.config, self.kind)
        if self.params.size != n:
            raise ValidationError(f"parameter vector has {self.params.size} entries, spec needs {n}")

    def named_parameters(self):
        out, i = {}, 0
        for name, shape in parameter_shapes(self.config, self.kind):
            size = int(np.prod(shape))
            out[name] = self.params[i:i + size].reshape(shape)
            i += size
        return out

    def to_bytes(self):
        header = {
            "format": FORMAT_VERSION,
            "backbone": asdict(self.config),
            "attention": self.kind.to_dict(),
            "params": [[n, list(s)] for n, s in parameter_shapes(self.config, self.kind)],
            "buffers": [[n, list(s)] for n, s in buffer_shapes(self.config)],
            "metadata": self.metadata,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = [np.asarray(self.params, dtype="<f8").tobytes()]
        body += [np.asarray(self.buffers[n], dtype="<f8").tobytes() for n, _ in buffer_shapes(self.config)]
        return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hb)) + hb + b"".join(body)

    @classmethod
    def from_bytes(cls, blob):
        if blob[:8] != MAGIC:
            raise ValidationError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<IQ", blob[8:20])
        if version != FORMAT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        header = json.loads(blob[20:20 + hlen].decode("utf-8"))
        cfg = BackboneConfig(**header["backbone"])
        kind = AttentionKind.from_dict(header["attention"])
        offset = 20 + hlen
        n = param_count(cfg, kind)
        params = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
        buffers = {}
        for name, shape in header["buffers"]:
            size = int(np.prod(shape))
            buffers[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
            offset += 8 * size
        return cls(cfg, kind, params, buffers, header["metadata"])

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
