"""Comparison feature extractors: common spatial patterns and DMD spectra."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg

from .spectral import DELTA_THETA, FeatureSeries, _samples, sliding_band_power


class CspRankError(ValueError):
    def __init__(self, rank: int, n_channels: int):
        super().__init__(f"class covariance has rank {rank} < {n_channels} channels; "
                         "use reduce_rank=True after average referencing")
        self.rank = rank


@dataclass(frozen=True)
class CspFilters:
    filters: np.ndarray  # n_filters x channels, unit-norm rows
    eigvals: np.ndarray  # descending


def _mean_normalized_cov(segments) -> np.ndarray:
    covs = []
    for seg in segments:
        x = np.asarray(seg, dtype=float)
        x = x - x.mean(axis=1, keepdims=True)
        c = x @ x.T
        tr = np.trace(c)
        if tr <= 0:
            raise ValueError("segment with zero variance")
        covs.append(c / tr)
    return np.mean(covs, axis=0)


def csp_fit(class_a: Sequence, class_b: Sequence, n_filters: int = 3,
            reduce_rank: bool = False, tol: float = 1e-10) -> CspFilters:
    """Filters maximizing class-A over class-B variance.

    Each segment (channels x samples) is trace-normalized, covariances are
    averaged per class and ``Ca w = lambda Cb w`` is solved. With
    ``reduce_rank`` both problems are first projected onto the principal
    subspace of ``Ca + Cb``, which is needed after average referencing.
    """
    if len(class_a) < 2 or len(class_b) < 2:
        raise ValueError("CSP needs at least two segments per class")
    ca = _mean_normalized_cov(class_a)
    cb = _mean_normalized_cov(class_b)
    m = ca.shape[0]
    ev, vec = np.linalg.eigh(ca + cb)
    rank = int(np.sum(ev > tol * ev.max()))
    if rank < m:
        if not reduce_rank:
            raise CspRankError(rank, m)
        P = vec[:, -rank:]
    else:
        P = np.eye(m)
    lam, w = linalg.eigh(P.T @ ca @ P, P.T @ cb @ P)
    order = np.argsort(lam)[::-1][:n_filters]
    filt = (P @ w[:, order]).T
    filt /= np.linalg.norm(filt, axis=1, keepdims=True)
    # sign: largest-magnitude weight positive
    peak = filt[np.arange(filt.shape[0]), np.argmax(np.abs(filt), axis=1)]
    filt *= np.where(peak < 0, -1.0, 1.0)[:, None]
    return CspFilters(filt, lam[order])


def csp_class_segments(epochs, fs: float | None = None, quiet_gap_ms: float = 500.0,
                       active_ms: float = 500.0):
    """Split epochs into non-braking and braking segments.

    Non-braking runs from the epoch start to ``quiet_gap_ms`` before onset;
    braking is ``[onset, onset + active_ms)``.

    Returns ``(braking, non_braking)``.
    """
    braking, quiet = [], []
    for ep in epochs:
        f = fs or ep.fs
        gap = int(round(quiet_gap_ms * f / 1000.0))
        act = int(round(active_ms * f / 1000.0))
        if ep.t0_index - gap < 2 or ep.t0_index + act > ep.n_samples:
            raise ValueError("epoch too short for CSP class windows")
        quiet.append(ep.eeg[:, :ep.t0_index - gap])
        braking.append(ep.eeg[:, ep.t0_index:ep.t0_index + act])
    return braking, quiet


def csp_feature_series(filters: CspFilters, data, fs: float, window_ms: float = 500.0,
                       step_ms: float = 50.0, band=DELTA_THETA) -> list[FeatureSeries]:
    x = np.asarray(data, dtype=float)
    if x.shape[0] != filters.filters.shape[1]:
        raise ValueError(f"data has {x.shape[0]} channels, filters expect "
                         f"{filters.filters.shape[1]}")
    return [sliding_band_power(row, fs, window_ms, step_ms, band)
            for row in filters.filters @ x]


# --------------------------------------------------------------------------
# DMD

@dataclass(frozen=True)
class DmdResult:
    modes: np.ndarray  # embedded_dim x rank, unit-norm columns
    eigenvalues: np.ndarray
    amplitudes: np.ndarray
    hankel_delays: int = 1


def hankel_embed(data, delays: int) -> np.ndarray:
    """Stack ``delays`` shifted copies: column ``t`` holds x(t), ..., x(t + d - 1)."""
    x = np.atleast_2d(np.asarray(data, dtype=float))
    n = x.shape[1]
    if not 1 <= delays < n:
        raise ValueError(f"delays must be in [1, {n}), got {delays}")
    return np.vstack([x[:, k:n - delays + 1 + k] for k in range(delays)])


def dmd_fit(embedded, rank: int, delays: int = 1, tol: float = 1e-10) -> DmdResult:
    """Exact DMD of the snapshot pairs (X[:, :-1], X[:, 1:]).

    Singular values below ``tol`` times the largest are dropped, so the
    returned rank can be smaller than requested.
    """
    X = np.asarray(embedded, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ValueError("DMD needs at least two snapshots")
    if not 1 <= rank <= min(X.shape[0], X.shape[1] - 1):
        raise ValueError(f"rank must be in [1, {min(X.shape[0], X.shape[1] - 1)}]")
    X1, X2 = X[:, :-1], X[:, 1:]
    U, s, Vh = np.linalg.svd(X1, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise ValueError("degenerate snapshot matrix (all zero)")
    r = min(rank, int(np.sum(s > tol * s[0])))
    U, s, V = U[:, :r], s[:r], Vh[:r].conj().T
    Atil = U.conj().T @ X2 @ V / s
    lam, Wv = np.linalg.eig(Atil)
    phi = X2 @ V / s @ Wv
    norms = np.linalg.norm(phi, axis=0)
    # modes with a vanishing eigenvalue lift to zero; fall back to projected modes
    small = norms < tol * max(norms.max(), 1e-300)
    if np.any(small):
        phi[:, small] = U @ Wv[:, small]
        norms[small] = np.linalg.norm(phi[:, small], axis=0)
    phi = phi / norms
    b = np.linalg.lstsq(phi, X[:, 0].astype(complex), rcond=None)[0]
    return DmdResult(phi, lam, b, delays)


def dmd_frequencies(result: DmdResult, fs: float) -> np.ndarray:
    return np.abs(np.angle(result.eigenvalues)) * fs / (2.0 * np.pi)


def dmd_band_energy(result: DmdResult, fs: float, band=DELTA_THETA) -> float:
    """Sum of squared mode amplitudes whose frequency lies in ``[low, high)``."""
    f = dmd_frequencies(result, fs)
    lo, hi = band
    m = (f >= lo) & (f < hi)
    return float(np.sum(np.abs(result.amplitudes[m]) ** 2))


def dmd_spectrum_series(data, fs: float, window_ms: float = 500.0, step_ms: float = 50.0,
                        delays: int = 10, rank: int = 8, band=DELTA_THETA) -> FeatureSeries:
    """Windowed DMD band energy, stamped at each window's right edge.

    ``data`` is channels x samples (or one channel).
    """
    x = np.atleast_2d(np.asarray(data, dtype=float))
    nwin = _samples(window_ms, fs, "window")
    step = _samples(step_ms, fs, "step")
    if nwin < 2 * delays:
        raise ValueError(f"window of {nwin} samples is shorter than 2 x {delays} delays")
    if x.shape[1] < nwin:
        raise ValueError("signal shorter than one window")
    frames = sliding_window_view(x, nwin, axis=1)[:, ::step, :]
    values = np.zeros(frames.shape[1])
    for j in range(frames.shape[1]):
        win = frames[:, j, :]
        if not np.any(win):
            continue
        H = hankel_embed(win, delays)
        r = min(rank, H.shape[0], H.shape[1] - 1)
        values[j] = dmd_band_energy(dmd_fit(H, r, delays), fs, band)
    ts = (np.arange(values.size) * step + nwin) * 1000.0 / fs
    return FeatureSeries(ts, values, window_ms, step_ms, tuple(band))
