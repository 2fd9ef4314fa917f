"""Lagged-sample construction and the PReLU multilayer perceptron.

Each sample at time ``t`` stacks, for every feature series, the band power
at ``t - 200, t - 150, ..., t`` ms, followed by the measured brake at the
same lags; the target is the brake at ``t + delta_t``.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .ica import IcaDecomposition, ica_from_bytes, ica_to_bytes
from .signal_model import BrakeTrace
from .spectral import FeatureSeries

LAG_STEP_MS = 50
N_LAGS = 5
HIDDEN = (30, 20, 10, 5)
PRELU_INIT = 0.25


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite in epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class Scaling:
    """Per-column affine standardization, frozen once fit."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Scaling":
        mean = x.mean(axis=0)
        sd = x.std(axis=0)
        return cls(mean, np.where(sd > 1e-12, sd, 1.0))

    @classmethod
    def identity(cls, n: int) -> "Scaling":
        return cls(np.zeros(n), np.ones(n))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale


@dataclass(frozen=True)
class SampleSet:
    inputs: np.ndarray  # raw, n x 5 (r + 1) or n x 5 r without brake history
    targets: np.ndarray
    timestamps_ms: np.ndarray  # feature time t; the target sits at t + delta_t
    delta_t_ms: int
    scaling: Scaling
    include_brake: bool = True

    def __len__(self):
        return self.targets.size

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[1]

    def scaled(self) -> np.ndarray:
        return self.scaling.apply(self.inputs)

    def with_scaling(self, scaling: Scaling) -> "SampleSet":
        return replace(self, scaling=scaling)


def _brake_values(brake, fs):
    if isinstance(brake, BrakeTrace):
        return brake.values, brake.fs
    if fs is None:
        raise ValueError("fs is required with a raw brake array")
    return np.asarray(brake, dtype=float), float(fs)


def build_samples(features: Sequence[FeatureSeries], brake, delta_t_ms: int,
                  include_brake: bool = True, scaling: Scaling | None = None,
                  fs: float | None = None) -> SampleSet:
    """Stack lagged features and brake history into a design matrix.

    ``scaling`` defaults to a fit on the returned samples; pass the training
    set's scaling when building validation or test samples.
    """
    if delta_t_ms not in (200, 300, 400):
        raise ValueError(f"delta_t must be 200, 300 or 400 ms, got {delta_t_ms}")
    if not features and not include_brake:
        raise ValueError("no inputs: no feature series and brake history disabled")
    values, fs = _brake_values(brake, fs)
    if features:
        ts = features[0].timestamps_ms
        for f in features:
            if not np.array_equal(f.timestamps_ms, ts):
                raise ValueError("feature series do not share a time grid")
        if ts.size > 1 and not np.allclose(np.diff(ts), LAG_STEP_MS):
            raise ValueError(f"feature series must step by {LAG_STEP_MS} ms")
    else:
        ts = np.arange(0.0, values.size * 1000.0 / fs, LAG_STEP_MS)
    first = N_LAGS - 1
    times = ts[first:]
    tgt = np.round((times + delta_t_ms) * fs / 1000.0).astype(np.int64)
    ok = tgt < values.size
    rows = np.flatnonzero(ok) + first
    if rows.size == 0:
        raise ValueError("no timestamp has a full lag window and a target")
    cols = []
    for f in features:
        cols.extend(f.values[rows - lag] for lag in range(first, -1, -1))
    if include_brake:
        for lag in range(first, -1, -1):
            idx = np.round((ts[rows] - lag * LAG_STEP_MS) * fs / 1000.0).astype(np.int64)
            if idx.min() < 0:
                raise ValueError("brake history precedes the brake trace")
            cols.append(values[idx])
    x = np.column_stack(cols)
    y = values[tgt[ok]]
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite entries in samples")
    if scaling is None:
        scaling = Scaling.fit(x)
    elif scaling.mean.size != x.shape[1]:
        raise ValueError(f"scaling has {scaling.mean.size} columns, samples have {x.shape[1]}")
    return SampleSet(x, y, ts[rows], int(delta_t_ms), scaling, include_brake)


def concat(sets: Sequence[SampleSet], scaling: Scaling | None = None) -> SampleSet:
    """Join per-trial sample sets; refits scaling on the union unless given."""
    if not sets:
        raise ValueError("nothing to concatenate")
    x = np.vstack([s.inputs for s in sets])
    y = np.concatenate([s.targets for s in sets])
    t = np.concatenate([s.timestamps_ms for s in sets])
    return SampleSet(x, y, t, sets[0].delta_t_ms, scaling or Scaling.fit(x),
                     sets[0].include_brake)


# --------------------------------------------------------------------------
# model

@dataclass
class MlpModel:
    weights: list  # W_l shaped (out, in)
    biases: list
    slopes: np.ndarray  # one PReLU slope per hidden layer
    loss_curve: list = field(default_factory=list)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.slopes.copy(), list(self.loss_curve))

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, self.slopes]


def init_mlp(n_inputs: int, hidden: Sequence[int] = HIDDEN, seed: int = 0,
             slope: float = PRELU_INIT) -> MlpModel:
    """Kaiming-uniform weights (PReLU gain), zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [n_inputs, *hidden, 1]
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        g = gain if i < len(hidden) else 1.0
        bound = g * np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, np.full(len(hidden), float(slope)))


def _forward(model: MlpModel, x: np.ndarray):
    pre, acts = [], [x]
    h = x
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        if i < last:
            pre.append(z)
            h = np.where(z >= 0, z, model.slopes[i] * z)
            acts.append(h)
        else:
            h = z
    return h[:, 0], pre, acts


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    """Predictions for a batch (n x inputs) or a single input vector."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.shape[1] != model.sizes[0]:
        raise ValueError(f"input has {x2.shape[1]} features, model expects {model.sizes[0]}")
    out = _forward(model, x2)[0]
    return out[0] if single else out


def mlp_loss(model: MlpModel, x, y) -> float:
    r = mlp_forward(model, x) - np.asarray(y, dtype=float)
    return float(np.mean(r ** 2))


def mlp_gradient(model: MlpModel, x, y):
    """Gradient of the batch-mean squared error.

    Returns
    -------
    loss : float
    grads : list matching ``model.params()``
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    out, pre, acts = _forward(model, x)
    n = x.shape[0]
    resid = out - y
    delta = (2.0 / n) * resid[:, None]
    L = len(model.weights)
    gW, gb = [None] * L, [None] * L
    gs = np.zeros_like(model.slopes)
    for i in range(L - 1, -1, -1):
        gW[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            dh = delta @ model.weights[i]
            z = pre[i - 1]
            neg = z < 0
            gs[i - 1] = float(np.sum(dh * np.where(neg, z, 0.0)))
            delta = dh * np.where(neg, model.slopes[i - 1], 1.0)
    return float(np.mean(resid ** 2)), [*gW, *gb, gs]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    include_brake: bool = True

    def fingerprint(self) -> str:
        text = ";".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(model: MlpModel, samples: SampleSet, cfg: TrainConfig = TrainConfig()) -> MlpModel:
    """Minibatch Adam on the standardized inputs; returns a new model."""
    if len(samples) == 0:
        raise ValueError("empty training set")
    model = model.copy()
    x = samples.scaled()
    y = samples.targets
    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    n = len(samples)
    # overflow is caught below as a non-finite loss
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.epochs + 1):
            perm = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                loss, grads = mlp_gradient(model, x[idx], y[idx])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(epoch)
                opt.step(params, grads)
            loss = mlp_loss(model, x, y)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            model.loss_curve.append(loss)
    return model


def predict_samples(model: MlpModel, samples: SampleSet) -> np.ndarray:
    return mlp_forward(model, samples.scaled())


@dataclass(frozen=True)
class PredictedTrace:
    timestamps_ms: np.ndarray  # t + delta_t
    predicted: np.ndarray
    measured: np.ndarray


def rolling_predict(model: MlpModel, features: Sequence[FeatureSeries], brake,
                    delta_t_ms: int, scaling: Scaling, include_brake: bool = True,
                    fs: float | None = None) -> PredictedTrace:
    """Open-loop predictions every 50 ms, each stamped at its target time."""
    s = build_samples(features, brake, delta_t_ms, include_brake, scaling, fs)
    return PredictedTrace(s.timestamps_ms + delta_t_ms, predict_samples(model, s), s.targets)


# --------------------------------------------------------------------------
# archive: "EBMA" | version u32 | sections of (tag 4s, length u64, payload)
#   MLP0: n_layers u32, sizes u32 * (n_layers + 1), then f64 W_l, b_l, slopes
#   SCAL: n u32, mean f64 * n, scale f64 * n
#   ICA0: optional decomposition section
#   META: UTF-8 "key = value" lines

ARCHIVE_MAGIC = b"EBMA"
ARCHIVE_VERSION = 1


@dataclass
class ModelBundle:
    model: MlpModel
    scaling: Scaling
    meta: dict
    decomposition: IcaDecomposition | None = None


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def bundle_to_bytes(bundle: ModelBundle) -> bytes:
    m = bundle.model
    sizes = m.sizes
    mlp = io.BytesIO()
    mlp.write(struct.pack("<I", len(m.weights)))
    mlp.write(struct.pack(f"<{len(sizes)}I", *sizes))
    for a in (*m.weights, *m.biases, m.slopes):
        mlp.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    sc = bundle.scaling
    scal = struct.pack("<I", sc.mean.size) + sc.mean.astype("<f8").tobytes() + \
        sc.scale.astype("<f8").tobytes()
    meta = "".join(f"{k} = {v}\n" for k, v in sorted(bundle.meta.items())).encode()
    parts = [ARCHIVE_MAGIC, struct.pack("<I", ARCHIVE_VERSION),
             _section(b"MLP0", mlp.getvalue()), _section(b"SCAL", scal)]
    if bundle.decomposition is not None:
        parts.append(_section(b"ICA0", ica_to_bytes(bundle.decomposition)))
    parts.append(_section(b"META", meta))
    return b"".join(parts)


def bundle_from_bytes(buf: bytes) -> ModelBundle:
    if buf[:4] != ARCHIVE_MAGIC:
        raise ValueError("not a model archive")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != ARCHIVE_VERSION:
        raise ValueError(f"unsupported archive version {version}")
    pos, sections = 8, {}
    while pos < len(buf):
        tag = buf[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", buf, pos + 4)
        sections[tag] = buf[pos + 12:pos + 12 + length]
        pos += 12 + length
    for need in (b"MLP0", b"SCAL", b"META"):
        if need not in sections:
            raise ValueError(f"archive lacks the {need.decode()} section")
    raw = sections[b"MLP0"]
    (n_layers,) = struct.unpack_from("<I", raw, 0)
    sizes = struct.unpack_from(f"<{n_layers + 1}I", raw, 4)
    p = 4 + 4 * (n_layers + 1)

    def take(shape):
        nonlocal p
        count = int(np.prod(shape))
        a = np.frombuffer(raw, "<f8", count, p).reshape(shape).copy()
        p += 8 * count
        return a

    weights = [take((sizes[i + 1], sizes[i])) for i in range(n_layers)]
    biases = [take((sizes[i + 1],)) for i in range(n_layers)]
    slopes = take((n_layers - 1,))
    raw = sections[b"SCAL"]
    (n,) = struct.unpack_from("<I", raw, 0)
    mean = np.frombuffer(raw, "<f8", n, 4).copy()
    scale = np.frombuffer(raw, "<f8", n, 4 + 8 * n).copy()
    meta = {}
    for line in sections[b"META"].decode().splitlines():
        k, _, v = line.partition(" = ")
        meta[k] = v
    decomp = ica_from_bytes(sections[b"ICA0"]) if b"ICA0" in sections else None
    return ModelBundle(MlpModel(weights, biases, slopes), Scaling(mean, scale), meta, decomp)
