"""Synthetic braking dataset with known sources, mixing and feature-to-brake lag.

The forward model is ``X = A S + noise``. One or more braking-locked sources
carry super-Gaussian delta-theta bursts; the brake trace is a saturating
function of the first locked source's sliding band power ``lag_ms`` earlier.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sp_signal

from .ica import IcaDecomposition, amari_index, sources as ica_sources
from .signal_model import BrakeTrace, EegRecording, montage_xy
from .spectral import DELTA_THETA, band_power_frames

# Ordered so that any prefix covers the scalp reasonably; Fp1/Fp2 come first
# and are the two frontal-most sites.
CHANNELS_32 = ("Fp1", "Fp2", "Cz", "Pz", "Fz", "C3", "C4", "O1", "O2", "F3", "F4", "P3",
               "P4", "T7", "T8", "Oz", "F7", "F8", "P7", "P8", "FC1", "FC2", "CP1", "CP2",
               "FC5", "FC6", "CP5", "CP6", "AF3", "AF4", "PO3", "PO4")

KINDS = ("locked", "ocular", "muscular", "line-noise", "background")


@dataclass(frozen=True)
class SourceSpec:
    kind: str
    band: tuple[float, float] = (0.5, 45.0)
    amplitude: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")


def default_sources(n: int) -> tuple[SourceSpec, ...]:
    if n < 3:
        raise ValueError("default source set needs at least 3 channels")
    return (SourceSpec("locked", (2.0, 7.0), 2.0),
            SourceSpec("ocular", (0.5, 3.0), 3.0),
            SourceSpec("muscular", (25.0, 45.0), 1.0),
            *[SourceSpec("background") for _ in range(n - 3)])


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings. ``sources=None`` uses :func:`default_sources`."""

    seed: int = 0
    n_channels: int = 32
    fs: float = 200.0
    n_trials: int = 30
    trial_ms: float = 6000.0
    lag_ms: int = 200
    cond_bound: float = 10.0
    noise_sigma: float = 0.05
    brake_noise: float = 0.05
    brake_gain: float = 1.0
    fluctuation: float = 1.2
    modulation_band: tuple[float, float] = (1.0, 3.0)
    informative: bool = True  # False: brake follows a hidden source absent from the EEG
    onset_threshold: float = 0.1
    sources: tuple[SourceSpec, ...] | None = None

    def __post_init__(self):
        if self.lag_ms not in (200, 300, 400):
            raise ValueError("lag_ms must be 200, 300 or 400")
        if self.n_channels > len(CHANNELS_32):
            raise ValueError(f"at most {len(CHANNELS_32)} channels are supported")
        if len(self.source_specs()) > self.n_channels:
            raise ValueError(f"{len(self.source_specs())} sources exceed "
                             f"{self.n_channels} channels")
        if self.cond_bound < 1:
            raise ValueError("cond_bound must be >= 1")

    def source_specs(self) -> tuple[SourceSpec, ...]:
        return self.sources if self.sources is not None else default_sources(self.n_channels)


@dataclass(frozen=True)
class SynthTruth:
    mixing: np.ndarray  # channels x sources
    sources: np.ndarray  # sources x samples
    onset_indices: np.ndarray
    onset_intensities: np.ndarray
    locked_indices: tuple[int, ...]
    brake: np.ndarray  # analytic (noise-free) brake, same scaling as the trace
    seed: int = 0
    kinds: tuple[str, ...] = field(default_factory=tuple)


# --------------------------------------------------------------------------
# source waveforms

def _unit(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x


def _bandlimited(rng, n: int, fs: float, band) -> np.ndarray:
    lo, hi = band
    hi = min(hi, 0.45 * fs)
    sos = sp_signal.butter(4, [lo, hi], btype="bandpass", fs=fs, output="sos")
    return _unit(sp_signal.sosfiltfilt(sos, rng.laplace(size=n)))


def _pink(rng, n: int) -> np.ndarray:
    spec = np.fft.rfft(rng.laplace(size=n))
    f = np.arange(spec.size, dtype=float)
    f[0] = 1.0
    return _unit(np.fft.irfft(spec / np.sqrt(f), n))


def _raised_cosine_bump(n: int, start: int, stop: int, edge: int) -> np.ndarray:
    env = np.zeros(n)
    env[start:stop] = 1.0
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
    env[start:start + edge] = ramp
    env[stop - edge:stop] = ramp[::-1]
    return env


def _locked_trial(rng, n: int, fs: float, spec: SourceSpec, fluctuation: float,
                  mod_band=(1.0, 3.0)):
    """One trial of a locked source; returns (waveform, burst_start_index)."""
    start = int(rng.uniform(0.35, 0.45) * n)
    length = int(rng.uniform(1.5, 2.5) * fs)
    env = _raised_cosine_bump(n, start, min(start + length, n), int(0.2 * fs))
    mod = _bandlimited(rng, n, fs, mod_band)
    env = env * np.clip(1.0 + fluctuation * mod, 0.1, None)
    carrier = _bandlimited(rng, n, fs, spec.band)
    return spec.amplitude * env * carrier + 0.3 * _pink(rng, n), start


def _ocular_trial(rng, n: int, fs: float, spec: SourceSpec) -> np.ndarray:
    t = np.arange(n)
    x = np.zeros(n)
    width = 0.08 * fs
    for c in rng.uniform(0, n, size=max(1, int(n / fs / 2.0))):
        x += abs(rng.laplace()) * np.exp(-0.5 * ((t - c) / width) ** 2)
    x += 0.1 * _bandlimited(rng, n, fs, spec.band)
    return spec.amplitude * _unit(x)


def _muscular_trial(rng, n: int, fs: float, spec: SourceSpec) -> np.ndarray:
    env = np.abs(_bandlimited(rng, n, fs, (0.5, 3.0))) + 0.2
    return spec.amplitude * _unit(env * _bandlimited(rng, n, fs, spec.band))


def _line_trial(rng, n: int, fs: float, spec: SourceSpec) -> np.ndarray:
    f = 50.0 if fs > 100 else 0.4 * fs
    t = np.arange(n) / fs
    return spec.amplitude * np.sqrt(2) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))


def _background_trial(rng, n: int, fs: float, spec: SourceSpec) -> np.ndarray:
    return spec.amplitude * _pink(rng, n)


# --------------------------------------------------------------------------
# mixing

def _mixing(rng, n_ch: int, specs, cond_bound: float, frontal: np.ndarray) -> np.ndarray:
    """Orthonormal columns scaled into [1, cond_bound]; ocular columns frontal."""
    k = len(specs)
    seeds = rng.normal(size=(n_ch, k))
    for j, s in enumerate(specs):
        if s.kind == "ocular":
            col = 0.02 * rng.normal(size=n_ch)
            col[frontal] = 1.0 + 0.1 * rng.normal(size=frontal.size)
            seeds[:, j] = col
    # ocular columns first so QR keeps their direction exactly
    order = sorted(range(k), key=lambda j: specs[j].kind != "ocular")
    q, r = np.linalg.qr(seeds[:, order])
    q = q * np.sign(np.diag(r))
    Q = np.empty_like(q)
    Q[:, order] = q
    scales = np.exp(rng.uniform(0.0, np.log(cond_bound), size=k))
    scales[np.argmin(scales)] = 1.0
    A = Q * scales
    if k == n_ch and np.linalg.cond(A) > cond_bound * (1 + 1e-9):
        raise RuntimeError("mixing condition bound violated")
    return A


# --------------------------------------------------------------------------

def _brake_from_power(power: np.ndarray, gain: float, ref: float) -> np.ndarray:
    return 1.0 - np.exp(-gain * power / ref)


def locked_power(source: np.ndarray, fs: float, band=DELTA_THETA) -> np.ndarray:
    """Sample-resolution sliding band power, aligned to window right edges.

    Entry ``i`` uses samples ``[i - n_window, i)``; the first ``n_window``
    entries repeat the first full window.
    """
    step_ms = 1000.0 / fs
    _, p = band_power_frames(source, fs, 500.0, step_ms, band)
    nwin = source.size - p.size + 1
    out = np.empty(source.size)
    out[nwin:] = p[:-1]
    out[:nwin] = p[0]
    return out


def generate(cfg: SynthConfig = SynthConfig()):
    """Draw a recording, its brake trace and the ground truth.

    Returns
    -------
    recording : EegRecording
    trace : BrakeTrace
    truth : SynthTruth
    """
    specs = cfg.source_specs()
    fs = cfg.fs
    n_trial = int(round(cfg.trial_ms * fs / 1000.0))
    ss = np.random.SeedSequence(cfg.seed)
    mix_seed, noise_seed, hidden_seed, *trial_seeds = ss.spawn(3 + cfg.n_trials)
    names = CHANNELS_32[:cfg.n_channels]
    xy = montage_xy(names)
    frontal = np.argsort(-xy[:, 1], kind="stable")[:2]
    A = _mixing(np.random.default_rng(mix_seed), cfg.n_channels, specs, cfg.cond_bound,
                frontal)

    locked = tuple(j for j, s in enumerate(specs) if s.kind == "locked")
    if not locked:
        raise ValueError("at least one braking-locked source is required")
    S = np.zeros((len(specs), n_trial * cfg.n_trials))
    drivers = np.zeros(n_trial * cfg.n_trials)
    hidden_rng = np.random.default_rng(hidden_seed)
    for tr, tseed in enumerate(trial_seeds):
        rng = np.random.default_rng(tseed)
        sl = slice(tr * n_trial, (tr + 1) * n_trial)
        for j, s in enumerate(specs):
            if s.kind == "locked":
                S[j, sl], _ = _locked_trial(rng, n_trial, fs, s, cfg.fluctuation,
                                            cfg.modulation_band)
            elif s.kind == "ocular":
                S[j, sl] = _ocular_trial(rng, n_trial, fs, s)
            elif s.kind == "muscular":
                S[j, sl] = _muscular_trial(rng, n_trial, fs, s)
            elif s.kind == "line-noise":
                S[j, sl] = _line_trial(rng, n_trial, fs, s)
            else:
                S[j, sl] = _background_trial(rng, n_trial, fs, s)
        if not cfg.informative:
            # same statistics, never mixed into the EEG
            drivers[sl], _ = _locked_trial(hidden_rng, n_trial, fs, specs[locked[0]],
                                           cfg.fluctuation, cfg.modulation_band)
    if cfg.informative:
        drivers = S[locked[0]]

    power = locked_power(drivers, fs)
    lag = int(round(cfg.lag_ms * fs / 1000.0))
    lagged = np.concatenate([np.full(lag, power[0]), power[:-lag]])
    clean = _brake_from_power(lagged, cfg.brake_gain, float(np.percentile(power, 95)))
    nrng = np.random.default_rng(noise_seed)
    smooth = sp_signal.butter(2, 5.0, fs=fs, output="sos")
    bnoise = sp_signal.sosfiltfilt(smooth, nrng.normal(size=clean.size))
    bnoise *= cfg.brake_noise / max(bnoise.std(), 1e-300)
    raw = np.clip(clean + bnoise, 0.0, None)
    scale = float(raw.max()) if raw.max() > 0 else 1.0
    brake = raw / scale

    onsets = []
    for tr in range(cfg.n_trials):
        seg = brake[tr * n_trial:(tr + 1) * n_trial]
        above = seg > cfg.onset_threshold
        lo = int(0.3 * n_trial)
        ups = np.flatnonzero(above[lo + 1:] & ~above[lo:-1]) + lo + 1
        if ups.size:
            onsets.append(tr * n_trial + int(ups[0]))
    onsets = np.asarray(onsets, dtype=np.int64)

    X = A @ S + cfg.noise_sigma * nrng.normal(size=(cfg.n_channels, S.shape[1]))
    rec = EegRecording(names, xy, fs, X)
    trace = BrakeTrace(fs, brake, onsets, scale)
    truth = SynthTruth(A, S, onsets, brake[onsets], locked, clean / scale, cfg.seed,
                       tuple(s.kind for s in specs))
    return rec, trace, truth


def evaluate_unmixing(truth: SynthTruth, decomp: IcaDecomposition, data=None):
    """Greedy max-|corr| matching of recovered to true sources.

    ``data`` defaults to the noise-free mixture ``A S``.

    Returns
    -------
    corr : ndarray
        Best absolute correlation for each true source.
    amari : float
        Amari index of ``unmixing @ mixing_true``.
    """
    A = truth.mixing
    if decomp.unmixing.shape != (A.shape[1], A.shape[0]):
        raise ValueError(f"unmixing {decomp.unmixing.shape} does not match true mixing "
                         f"{A.shape}")
    x = A @ truth.sources if data is None else data
    est = ica_sources(decomp, x)
    k = A.shape[1]
    c = np.abs(np.corrcoef(truth.sources, est)[:k, k:])
    best = np.zeros(k)
    free_t, free_e = set(range(k)), set(range(k))
    while free_t:
        sub = [(c[i, j], i, j) for i in free_t for j in free_e]
        v, i, j = max(sub)
        best[i] = v
        free_t.discard(i)
        free_e.discard(j)
    return best, amari_index(decomp.unmixing @ A)


# --------------------------------------------------------------------------
# truth sidecar: "NBST" | version u32 | seed u64 | channels, sources, samples,
# onsets, locked count (u32 each) | f64 mixing, sources, brake, intensities |
# u64 onsets | u32 locked | kinds as u32-length-prefixed UTF-8

_TRUTH_HEAD = struct.Struct("<4sIQIIIII")


def save_truth(truth: SynthTruth, path) -> None:
    m, k = truth.mixing.shape
    n = truth.sources.shape[1]
    parts = [_TRUTH_HEAD.pack(b"NBST", 1, truth.seed, m, k, n, truth.onset_indices.size,
                              len(truth.locked_indices))]
    for a in (truth.mixing, truth.sources, truth.brake, truth.onset_intensities):
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    parts.append(truth.onset_indices.astype("<u8").tobytes())
    parts.append(np.asarray(truth.locked_indices, dtype="<u4").tobytes())
    for kind in truth.kinds:
        raw = kind.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
    Path(path).write_bytes(b"".join(parts))


def load_truth(path) -> SynthTruth:
    buf = Path(path).read_bytes()
    magic, version, seed, m, k, n, n_on, n_lock = _TRUTH_HEAD.unpack_from(buf, 0)
    if magic != b"NBST" or version != 1:
        raise ValueError("not a synthetic-truth file")
    pos = _TRUTH_HEAD.size
    out = []
    for dtype, shape in (("<f8", (m, k)), ("<f8", (k, n)), ("<f8", (n,)), ("<f8", (n_on,)),
                         ("<u8", (n_on,)), ("<u4", (n_lock,))):
        count = int(np.prod(shape))
        out.append(np.frombuffer(buf, dtype, count, pos).reshape(shape).copy())
        pos += np.dtype(dtype).itemsize * count
    kinds = []
    for _ in range(k):
        (length,) = struct.unpack_from("<I", buf, pos)
        kinds.append(buf[pos + 4:pos + 4 + length].decode())
        pos += 4 + length
    A, S, brake, inten, onsets, locked = out
    return SynthTruth(A, S, onsets.astype(np.int64), inten, tuple(int(i) for i in locked),
                      brake, int(seed), tuple(kinds))
