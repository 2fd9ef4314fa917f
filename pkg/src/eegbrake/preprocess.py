"""Low-pass filtering, onset-locked epoching, baseline correction and CAR."""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sp_signal

from .signal_model import BrakeTrace, EegRecording, Epoch


class SkippedOnsetWarning(UserWarning):
    """Raised (as a warning) when onsets lack the margin for a full epoch."""

    def __init__(self, count: int):
        super().__init__(f"{count} onset(s) skipped for lack of epoch margin")
        self.count = count


@dataclass(frozen=True)
class PreprocessConfig:
    lowpass_cutoff: float = 45.0
    epoch_pre_ms: float = 1500.0
    epoch_post_ms: float = 1500.0
    baseline_window_ms: tuple[float, float] = (-1500.0, -1300.0)
    apply_car: bool = True

    def __post_init__(self):
        if self.epoch_pre_ms <= 0 or self.epoch_post_ms <= 0:
            raise ValueError("epoch margins must be positive")


def lowpass_taps(fs: float, cutoff: float, transition: float | None = None) -> np.ndarray:
    """Hamming-windowed sinc with order >= 4 * fs / transition (even order)."""
    if transition is None:
        transition = min(max(0.1 * cutoff, 2.0), fs / 2.0 - cutoff)
    order = int(math.ceil(4.0 * fs / transition))
    order += order % 2
    return sp_signal.firwin(order + 1, cutoff, window="hamming", fs=fs)


def lowpass_filter(recording: EegRecording, cutoff: float = 45.0) -> EegRecording:
    """Zero-phase FIR low-pass (filter applied forward and backward)."""
    fs = recording.fs
    if not 0 < cutoff < fs / 2:
        raise ValueError(f"cutoff {cutoff} Hz must lie in (0, {fs / 2}) Hz")
    taps = lowpass_taps(fs, cutoff)
    n = recording.n_samples
    padlen = min(3 * taps.size, n - 1)
    out = sp_signal.filtfilt(taps, [1.0], recording.data, axis=1, padlen=padlen)
    return recording.with_data(out)


def make_epochs(recording: EegRecording, trace: BrakeTrace,
                cfg: PreprocessConfig = PreprocessConfig()) -> list[Epoch]:
    """Cut one epoch per onset with full pre/post margin.

    Onsets too close to either end are dropped; a single
    :class:`SkippedOnsetWarning` reports how many.
    """
    fs = recording.fs
    pre = int(round(cfg.epoch_pre_ms * fs / 1000.0))
    post = int(round(cfg.epoch_post_ms * fs / 1000.0))
    n = recording.n_samples
    epochs, skipped = [], 0
    for onset in trace.onset_indices:
        start, stop = int(onset) - pre, int(onset) + post
        if start < 0 or stop > n:
            skipped += 1
            continue
        epochs.append(Epoch(recording.data[:, start:stop], trace.values[start:stop], pre, fs))
    if skipped:
        warnings.warn(SkippedOnsetWarning(skipped), stacklevel=2)
    if not epochs:
        raise ValueError("no onset has a full epoch margin inside the recording")
    return epochs


def _window_slice(epoch: Epoch, window_ms: tuple[float, float]) -> slice:
    lo, hi = window_ms
    a = epoch.t0_index + int(round(lo * epoch.fs / 1000.0))
    b = epoch.t0_index + int(round(hi * epoch.fs / 1000.0))
    if not (0 <= a < b <= epoch.t0_index) or lo >= hi:
        raise ValueError(f"baseline window {window_ms} ms lies outside the pre-onset epoch")
    return slice(a, b)


def baseline_correct(epoch: Epoch, window_ms=(-1500.0, -1300.0)) -> Epoch:
    sl = _window_slice(epoch, window_ms)
    means = epoch.eeg[:, sl].mean(axis=1, keepdims=True)
    return epoch.with_eeg(epoch.eeg - means)


def common_average_reference(epoch: Epoch) -> Epoch:
    if epoch.eeg.shape[0] < 2:
        raise ValueError("common average reference needs at least two channels")
    return epoch.with_eeg(epoch.eeg - epoch.eeg.mean(axis=0, keepdims=True))


def preprocess(recording: EegRecording, trace: BrakeTrace,
               cfg: PreprocessConfig = PreprocessConfig()) -> list[Epoch]:
    """Filter, epoch, baseline-correct and re-reference, in that order."""
    filtered = lowpass_filter(recording, cfg.lowpass_cutoff)
    out = []
    for ep in make_epochs(filtered, trace, cfg):
        ep = baseline_correct(ep, cfg.baseline_window_ms)
        if cfg.apply_car:
            ep = common_average_reference(ep)
        out.append(ep)
    return out


# --------------------------------------------------------------------------
# epoch container: "NBEP" | version u32 | fs f64 | n_epochs, n_channels,
# n_samples, t0_index (u32) | names (u32 length + UTF-8) | xy f64 |
# per epoch: eeg f64 channel-major, brake f64

_EPOCH_HEAD = struct.Struct("<4sIdIIII")


def save_epochs(path, epochs, channel_names, electrode_xy) -> None:
    if not epochs:
        raise ValueError("no epochs to save")
    first = epochs[0]
    n_ch, n_s = first.eeg.shape
    parts = [_EPOCH_HEAD.pack(b"NBEP", 1, first.fs, len(epochs), n_ch, n_s, first.t0_index)]
    for name in channel_names:
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(np.asarray(electrode_xy, dtype="<f8").tobytes())
    for ep in epochs:
        if ep.eeg.shape != (n_ch, n_s) or ep.t0_index != first.t0_index:
            raise ValueError("epochs differ in shape or onset index")
        parts.append(ep.eeg.astype("<f8").tobytes())
        parts.append(ep.brake.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_epochs(path):
    """Returns ``(epochs, channel_names, electrode_xy)``."""
    buf = Path(path).read_bytes()
    magic, version, fs, n_ep, n_ch, n_s, t0 = _EPOCH_HEAD.unpack_from(buf, 0)
    if magic != b"NBEP" or version != 1:
        raise ValueError(f"{path}: not an epoch file")
    pos = _EPOCH_HEAD.size
    names = []
    for _ in range(n_ch):
        (length,) = struct.unpack_from("<I", buf, pos)
        names.append(buf[pos + 4:pos + 4 + length].decode())
        pos += 4 + length
    xy = np.frombuffer(buf, "<f8", 2 * n_ch, pos).reshape(n_ch, 2).copy()
    pos += 16 * n_ch
    epochs = []
    for _ in range(n_ep):
        eeg = np.frombuffer(buf, "<f8", n_ch * n_s, pos).reshape(n_ch, n_s)
        pos += 8 * n_ch * n_s
        brake = np.frombuffer(buf, "<f8", n_s, pos)
        pos += 8 * n_s
        epochs.append(Epoch(eeg, brake, t0, fs))
    return epochs, names, xy
