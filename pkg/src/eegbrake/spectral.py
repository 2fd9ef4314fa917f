"""Welch PSD, band power, sliding-window band-power features and ERSP maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sp_signal

DELTA_THETA = (0.5, 8.0)


@dataclass(frozen=True)
class WelchConfig:
    segment_ms: float = 500.0
    overlap_fraction: float = 0.5
    window: str = "hamming"

    def __post_init__(self):
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class Psd:
    freqs: np.ndarray
    power: np.ndarray
    bin_width: float


@dataclass(frozen=True)
class FeatureSeries:
    """Band power per window, stamped at each window's right edge.

    A window stamped ``t`` covers samples with index in
    ``[t*fs/1000 - n_window, t*fs/1000)``, so nothing at or after ``t`` is used.
    """

    timestamps_ms: np.ndarray
    values: np.ndarray
    window_ms: float = 500.0
    step_ms: float = 50.0
    band: tuple[float, float] = DELTA_THETA

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class TimeFreqMap:
    times_ms: np.ndarray
    freqs_hz: np.ndarray
    values: np.ndarray  # freqs x times, dB relative to baseline


def _samples(ms: float, fs: float, what: str) -> int:
    n = ms * fs / 1000.0
    k = int(round(n))
    if k < 1 or abs(n - k) > 1e-6:
        raise ValueError(f"{what} of {ms} ms is not a whole number of samples at {fs} Hz")
    return k


def _taper(kind: str, n: int) -> np.ndarray:
    return sp_signal.get_window(kind, n, fftbins=True)


def _frame_spectra(frames: np.ndarray, fs: float, taper: np.ndarray) -> np.ndarray:
    """One-sided PSD of each row of ``frames`` (last axis is time)."""
    n = frames.shape[-1]
    spec = np.abs(np.fft.rfft(frames * taper, axis=-1)) ** 2
    spec /= fs * np.sum(taper ** 2)
    if n % 2 == 0:
        spec[..., 1:-1] *= 2.0
    else:
        spec[..., 1:] *= 2.0
    return spec


def welch_psd(signal, fs: float, cfg: WelchConfig = WelchConfig()) -> Psd:
    """Averaged modified periodogram, density scaling, no detrending.

    ``sum(power) * bin_width`` equals the mean square of the signal up to
    the taper's leakage bias; ``bin_width == fs / segment_samples``.
    """
    x = np.asarray(signal, dtype=float).ravel()
    nseg = _samples(cfg.segment_ms, fs, "segment")
    if x.size < nseg:
        raise ValueError(f"signal of {x.size} samples is shorter than one segment ({nseg})")
    step = nseg - int(np.floor(cfg.overlap_fraction * nseg))
    frames = sliding_window_view(x, nseg)[::step]
    power = _frame_spectra(frames, fs, _taper(cfg.window, nseg)).mean(axis=0)
    bin_width = fs / nseg
    return Psd(np.arange(power.size) * bin_width, power, bin_width)


def _band_mask(freqs: np.ndarray, band, nyquist: float) -> np.ndarray:
    low, high = band
    if not (0.0 <= low < high <= nyquist + 1e-9):
        raise ValueError(f"band {band} must satisfy 0 <= low < high <= {nyquist}")
    mask = (freqs >= low) & (freqs < high)
    if not mask.any():
        raise ValueError(f"band {band} contains no frequency bins")
    return mask


def band_power(psd: Psd, band=DELTA_THETA, fs: float | None = None) -> float:
    """Sum of PSD bins with centers in ``[low, high)`` times the bin width."""
    nyquist = fs / 2.0 if fs is not None else psd.freqs[-1] + psd.bin_width / 2.0
    mask = _band_mask(psd.freqs, band, nyquist)
    return float(psd.power[mask].sum() * psd.bin_width)


def band_power_frames(data, fs: float, window_ms: float = 500.0, step_ms: float = 50.0,
                      band=DELTA_THETA) -> tuple[np.ndarray, np.ndarray]:
    """Sliding band power for every row of ``data``.

    Returns ``(timestamps_ms, values)`` with ``values`` shaped
    ``data.shape[:-1] + (n_windows,)``.
    """
    x = np.asarray(data, dtype=float)
    nwin = _samples(window_ms, fs, "window")
    step = _samples(step_ms, fs, "step")
    if x.shape[-1] < nwin:
        raise ValueError(f"signal of {x.shape[-1]} samples is shorter than one window ({nwin})")
    frames = sliding_window_view(x, nwin, axis=-1)[..., ::step, :]
    spec = _frame_spectra(frames, fs, _taper("hamming", nwin))
    freqs = np.fft.rfftfreq(nwin, 1.0 / fs)
    mask = _band_mask(freqs, band, fs / 2.0)
    values = spec[..., mask].sum(axis=-1) * (fs / nwin)
    n_frames = values.shape[-1]
    timestamps = (np.arange(n_frames) * step + nwin) * 1000.0 / fs
    return timestamps, values


def sliding_band_power(signal, fs: float, window_ms: float = 500.0, step_ms: float = 50.0,
                       band=DELTA_THETA) -> FeatureSeries:
    x = np.asarray(signal, dtype=float).ravel()
    ts, values = band_power_frames(x, fs, window_ms, step_ms, band)
    return FeatureSeries(ts, values, window_ms, step_ms, tuple(band))


def ersp(epochs, channel: int, freqs: Sequence[float], baseline_ms=(-1250.0, -750.0),
         window_ms: float = 500.0, step_ms: float = 50.0,
         bandwidth_hz: float = 8.0) -> TimeFreqMap:
    """Trial-averaged short-time band power in dB relative to the baseline.

    Each cell is the power in ``[f - bandwidth/2, f + bandwidth/2]`` of a
    Hamming-tapered window; time is the window center relative to onset.
    Baseline power per frequency is the mean over windows whose centers fall
    inside ``baseline_ms``.
    """
    if not epochs:
        raise ValueError("ersp needs at least one epoch")
    fs = epochs[0].fs
    nwin = _samples(window_ms, fs, "window")
    step = _samples(step_ms, fs, "step")
    stack = np.stack([ep.eeg[channel] for ep in epochs])
    frames = sliding_window_view(stack, nwin, axis=-1)[:, ::step, :]
    spec = _frame_spectra(frames, fs, _taper("hamming", nwin)).mean(axis=0)
    bins = np.fft.rfftfreq(nwin, 1.0 / fs)
    freqs = np.asarray(freqs, dtype=float)
    weights = (np.abs(bins[None, :] - freqs[:, None]) <= bandwidth_hz / 2.0 + 1e-9)
    if not weights.any(axis=1).all():
        raise ValueError("a requested frequency has no bins within its bandwidth")
    power = weights.astype(float) @ spec.T * (fs / nwin)  # freqs x times
    centers = np.arange(spec.shape[0]) * step + nwin / 2.0
    times = (centers - epochs[0].t0_index) * 1000.0 / fs
    lo, hi = baseline_ms
    if hi > 0:
        raise ValueError("baseline interval must precede the onset")
    in_base = (times >= lo) & (times <= hi)
    if not in_base.any():
        raise ValueError(f"no window centers fall inside the baseline {baseline_ms} ms")
    base = power[:, in_base].mean(axis=1)
    if np.any(base <= 0):
        raise ValueError("baseline power is zero at some frequency")
    return TimeFreqMap(times, freqs, 10.0 * np.log10(power / base[:, None]))


# --------------------------------------------------------------------------
# CSV interchange

def write_features_csv(path, series: Sequence[FeatureSeries], names: Sequence[str] | None = None):
    """Write series sharing one time grid as ``time_ms,<name>...`` columns."""
    if not series:
        raise ValueError("nothing to write")
    ts = series[0].timestamps_ms
    for s in series[1:]:
        if not np.array_equal(s.timestamps_ms, ts):
            raise ValueError("feature series do not share a time grid")
    names = list(names) if names is not None else (
        ["value"] if len(series) == 1 else [f"f{i}" for i in range(len(series))])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_ms", *names])
        for i, t in enumerate(ts):
            w.writerow([repr(float(t))] + [repr(float(s.values[i])) for s in series])


def read_features_csv(path, window_ms: float = 500.0, step_ms: float = 50.0,
                      band=DELTA_THETA) -> tuple[list[str], list[FeatureSeries]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.asarray(rows[1:], dtype=float)
    if header[0] != "time_ms":
        raise ValueError("first column must be time_ms")
    ts = body[:, 0]
    series = [FeatureSeries(ts, body[:, j], window_ms, step_ms, tuple(band))
              for j in range(1, body.shape[1])]
    return header[1:], series


def write_tfmap_csv(path, tf: TimeFreqMap):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_ms"] + [f"{f:g}Hz" for f in tf.freqs_hz])
        for j, t in enumerate(tf.times_ms):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in tf.values[:, j]])
