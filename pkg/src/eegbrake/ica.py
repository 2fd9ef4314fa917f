"""Infomax blind source separation.

The unmixing matrix is learned on sphered data by stochastic natural-gradient
ascent of the joint entropy of logistic-squashed outputs::

    u = W z + b,   y = 1 / (1 + exp(-u))
    W <- W + lr * (B * I + (1 - 2 y) u^T) W
    b <- b + lr * sum(1 - 2 y)

summed over each block of ``B`` samples. The learning rate is annealed when
successive epoch updates turn by more than ``anneal_angle_deg``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)


class RankDeficiencyError(ValueError):
    def __init__(self, rank: int, n_channels: int):
        super().__init__(
            f"covariance has rank {rank} < {n_channels} channels; drop channels or "
            f"request rank-reduced whitening (n_components={rank})")
        self.rank = rank


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class InfomaxConfig:
    seed: int = 0
    learning_rate: float | None = None  # None -> 1e-3 / ln(m + 1)
    batch_size: int = 256
    max_epochs: int = 512
    tolerance: float = 1e-6
    anneal_factor: float = 0.9
    anneal_angle_deg: float = 60.0
    max_weight_norm: float = 1e9


@dataclass(frozen=True)
class SpheringTransform:
    mean: np.ndarray
    matrix: np.ndarray  # k x m
    rank: int

    def apply(self, data: np.ndarray) -> np.ndarray:
        return self.matrix @ (np.asarray(data, dtype=float) - self.mean[:, None])


@dataclass(frozen=True)
class IcaDecomposition:
    """``sources = unmixing @ (data - mean)``; ``mixing @ sources`` rebuilds data."""

    unmixing: np.ndarray  # k x m
    mixing: np.ndarray  # m x k
    mean: np.ndarray
    converged: bool
    iterations: int
    final_entropy_delta: float
    entropy_log: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_components(self) -> int:
        return self.unmixing.shape[0]

    @property
    def n_channels(self) -> int:
        return self.unmixing.shape[1]


def data_rank(data, tol: float = 1e-10) -> int:
    x = np.asarray(data, dtype=float)
    xc = x - x.mean(axis=1, keepdims=True)
    ev = np.linalg.eigvalsh(xc @ xc.T / xc.shape[1])
    return int(np.sum(ev > tol * max(ev.max(), np.finfo(float).tiny)))


def whiten(data, n_components: int | None = None, tol: float = 1e-10):
    """Sphere ``data`` (channels x samples).

    With full rank and no ``n_components`` the symmetric (ZCA) sphering
    matrix is used; otherwise the data are projected onto the leading
    ``n_components`` principal axes and scaled to unit variance.

    Returns
    -------
    whitened : ndarray, k x samples
    transform : SpheringTransform
    """
    x = np.asarray(data, dtype=float)
    m, n = x.shape
    if n <= m:
        raise ValueError(f"need more samples ({n}) than channels ({m})")
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    evals, evecs = np.linalg.eigh(xc @ xc.T / n)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    rank = int(np.sum(evals > tol * max(evals[0], np.finfo(float).tiny)))
    if n_components is None:
        if rank < m:
            raise RankDeficiencyError(rank, m)
        matrix = (evecs / np.sqrt(evals)) @ evecs.T
    else:
        if not 1 <= n_components <= rank:
            raise ValueError(f"n_components must be in [1, {rank}]")
        k = n_components
        matrix = (evecs[:, :k] / np.sqrt(evals[:k])).T
    transform = SpheringTransform(mean, matrix, rank)
    return matrix @ xc, transform


def entropy_surrogate(W: np.ndarray, b: np.ndarray, z: np.ndarray) -> float:
    """ln|det W| + mean over samples of sum_i ln y_i (1 - y_i)."""
    u = W @ z + b[:, None]
    # ln(y(1-y)) = -|u| - 2 ln(1 + exp(-|u|)), stable for large |u|
    log_slope = -np.abs(u) - 2.0 * np.log1p(np.exp(-np.abs(u)))
    return float(np.linalg.slogdet(W)[1] + log_slope.sum(axis=0).mean())


def _train(z: np.ndarray, cfg: InfomaxConfig):
    k, n = z.shape
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate if cfg.learning_rate is not None else 1e-3 / np.log(k + 1.0)
    W = np.eye(k)
    b = np.zeros(k)
    eye = np.eye(k)
    prev_delta = None
    entropy = [entropy_surrogate(W, b, z)]
    converged = False
    epoch = 0
    cos_limit = np.cos(np.deg2rad(cfg.anneal_angle_deg))
    for epoch in range(1, cfg.max_epochs + 1):
        W_start = W.copy()
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            zb = z[:, perm[start:start + cfg.batch_size]]
            u = W @ zb + b[:, None]
            g = 1.0 - 2.0 * expit(u)
            W = W + lr * (zb.shape[1] * eye + g @ u.T) @ W
            b = b + lr * g.sum(axis=1)
            if not np.isfinite(W).all() or np.abs(W).max() > cfg.max_weight_norm:
                raise DivergenceError(
                    f"weights diverged in epoch {epoch} at learning rate {lr:.3g}; "
                    "retry with a smaller learning rate")
        delta = W - W_start
        change = float(np.sum(delta ** 2) / np.sum(W_start ** 2))
        entropy.append(entropy_surrogate(W, b, z))
        if prev_delta is not None:
            denom = np.sqrt(np.sum(delta ** 2) * np.sum(prev_delta ** 2))
            if denom > 0 and np.sum(delta * prev_delta) / denom < cos_limit:
                lr *= cfg.anneal_factor
        prev_delta = delta
        log.debug("epoch %d change %.3g lr %.3g entropy %.6f", epoch, change, lr, entropy[-1])
        if change < cfg.tolerance:
            converged = True
            break
    return W, b, converged, epoch, np.asarray(entropy)


def fit_infomax(whitened, cfg: InfomaxConfig = InfomaxConfig(),
                sphering: SpheringTransform | None = None) -> IcaDecomposition:
    """Learn an infomax unmixing on sphered data.

    When ``sphering`` is given, the returned matrices act on the original
    channel space. Components are canonicalized: decorrelated unit-variance
    sources, ordered by decreasing scalp-projection norm, and signed so that
    each scalp column's largest-magnitude entry is positive.
    """
    z = np.asarray(whitened, dtype=float)
    k = z.shape[0]
    if sphering is None:
        sphering = SpheringTransform(np.zeros(k), np.eye(k), k)
    W, b, converged, epochs, entropy = _train(z, cfg)

    # symmetric decorrelation: sources come out exactly white even where the
    # infomax fixed point leaves residual correlation (Gaussian directions)
    s = W @ z
    cov = np.cov(s, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    root = (evecs / np.sqrt(evals)) @ evecs.T
    W = root @ W
    b = root @ b
    unmixing = W @ sphering.matrix
    mixing = np.linalg.pinv(unmixing)

    order = np.argsort(-np.linalg.norm(mixing, axis=0), kind="stable")
    unmixing, mixing, b = unmixing[order], mixing[:, order], b[order]
    peak = mixing[np.argmax(np.abs(mixing), axis=0), np.arange(k)]
    sign = np.where(peak < 0, -1.0, 1.0)
    unmixing *= sign[:, None]
    mixing *= sign[None, :]
    b *= sign

    delta = float(entropy[-1] - entropy[-2]) if entropy.size > 1 else 0.0
    if not converged:
        log.warning("infomax stopped at %d epochs without converging", epochs)
    return IcaDecomposition(unmixing, mixing, sphering.mean.copy(), converged, epochs,
                            delta, entropy, b)


def decompose(data, cfg: InfomaxConfig = InfomaxConfig(),
              n_components: int | None = None) -> IcaDecomposition:
    """Whiten and fit in one call."""
    z, sph = whiten(data, n_components)
    return fit_infomax(z, cfg, sph)


def sources(decomp: IcaDecomposition, data) -> np.ndarray:
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != decomp.n_channels:
        raise ValueError(f"data has {x.shape[0]} channels, decomposition expects "
                         f"{decomp.n_channels}")
    return decomp.unmixing @ (x - decomp.mean[:, None])


def scalp_column(decomp: IcaDecomposition, i: int) -> np.ndarray:
    if not 0 <= i < decomp.n_components:
        raise IndexError(f"IC index {i} out of range [0, {decomp.n_components})")
    return decomp.mixing[:, i].copy()


def amari_index(P: np.ndarray) -> float:
    """Distance of ``P`` from a scaled permutation, normalized to [0, 1]."""
    a = np.abs(np.asarray(P, dtype=float))
    m = a.shape[0]
    if a.shape != (m, m) or m < 2:
        raise ValueError("amari_index needs a square matrix of size >= 2")
    rows = (a.sum(axis=1) / a.max(axis=1) - 1.0).sum()
    cols = (a.sum(axis=0) / a.max(axis=0) - 1.0).sum()
    return float((rows + cols) / (2.0 * m * (m - 1)))


# --------------------------------------------------------------------------
# binary section: tag "ICA1", then k, m (u32), converged (u8), iterations (u32),
# final_entropy_delta (f64), entropy length (u32), then f64 row-major arrays:
# unmixing k*m, mixing m*k, mean m, bias k, entropy log.

_ICA_HEAD = struct.Struct("<4sIIBIdI")


def ica_to_bytes(d: IcaDecomposition) -> bytes:
    k, m = d.unmixing.shape
    head = _ICA_HEAD.pack(b"ICA1", k, m, int(d.converged), d.iterations,
                          d.final_entropy_delta, d.entropy_log.size)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in
                    (d.unmixing, d.mixing, d.mean, d.bias, d.entropy_log))
    return head + body


def ica_from_bytes(buf: bytes) -> IcaDecomposition:
    tag, k, m, conv, iters, delta, n_ent = _ICA_HEAD.unpack_from(buf, 0)
    if tag != b"ICA1":
        raise ValueError(f"not an ICA section (tag {tag!r})")
    pos = _ICA_HEAD.size
    out = []
    for shape in ((k, m), (m, k), (m,), (k,), (n_ent,)):
        count = int(np.prod(shape))
        out.append(np.frombuffer(buf, "<f8", count, pos).reshape(shape).copy())
        pos += 8 * count
    if pos != len(buf):
        raise ValueError("ICA section length mismatch")
    W, A, mean, bias, ent = out
    return IcaDecomposition(W, A, mean, bool(conv), iters, delta, ent, bias)
