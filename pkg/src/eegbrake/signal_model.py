"""Core recording types, trial-file persistence and resampling.

Trial files are little-endian binary::

    magic "NBRK" | version u32 | fs f64 | brake_scale f64
    | n_channels u32 | n_samples u32
    | channel names (u32 byte length + UTF-8 bytes, per channel)
    | electrode_xy (f64 x, f64 y, per channel)
    | EEG samples, f32, channel-major
    | brake count u32 | brake samples f32
    | onset count u32 | onset indices u64

``brake_scale`` is the constant the raw pedal signal was divided by to land
in [0, 1]; it is informational and does not affect any computation.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import signal as sp_signal

MAGIC = b"NBRK"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIddII")

# Older 10-20 names still found in many caps.
_LEGACY_LABELS = {"T3": "T7", "T4": "T8", "T5": "P7", "T6": "P8"}


class TrialFileError(ValueError):
    """A trial file could not be parsed or failed validation.

    Attributes
    ----------
    offset : int
        Byte offset at which the problem was detected.
    field : str
        Name of the offending field.
    """

    def __init__(self, message: str, *, offset: int, field: str):
        super().__init__(f"{field} at byte {offset}: {message}")
        self.offset = offset
        self.field = field


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EegRecording:
    """Multichannel EEG with its montage.

    ``data`` is channels x samples in microvolts; ``electrode_xy`` holds
    azimuthal unit-disk coordinates with +y toward the nose.
    """

    channel_names: tuple[str, ...]
    electrode_xy: np.ndarray
    fs: float
    data: np.ndarray

    def __post_init__(self):
        names = tuple(str(n) for n in self.channel_names)
        xy = np.array(self.electrode_xy, dtype=float).reshape(-1, 2)
        data = np.array(self.data, dtype=float)
        if data.ndim != 2:
            raise ValueError("data must be a channels x samples matrix")
        if data.shape[0] != len(names):
            raise ValueError(
                f"channel count mismatch: {len(names)} names, {data.shape[0]} rows")
        if xy.shape[0] != len(names):
            raise ValueError(
                f"channel count mismatch: {len(names)} names, {xy.shape[0]} coordinates")
        if not (self.fs > 0 and math.isfinite(self.fs)):
            raise ValueError(f"fs must be positive, got {self.fs}")
        if np.any((xy ** 2).sum(axis=1) > 1.0 + 1e-12):
            raise ValueError("electrode coordinates must lie inside the unit disk")
        if not np.all(np.isfinite(data)):
            raise ValueError("data contains non-finite samples")
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "electrode_xy", _readonly(xy))
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "fs", float(self.fs))

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray, fs: float | None = None) -> "EegRecording":
        return EegRecording(self.channel_names, self.electrode_xy,
                            self.fs if fs is None else fs, data)


@dataclass(frozen=True)
class BrakeTrace:
    """Braking intensity in [0, 1] sampled at ``fs`` with pedal onsets."""

    fs: float
    values: np.ndarray
    onset_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scale: float = 1.0

    def __post_init__(self):
        values = np.array(self.values, dtype=float).ravel()
        onsets = np.array(self.onset_indices, dtype=np.int64).ravel()
        if not self.fs > 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        if not np.all(np.isfinite(values)):
            raise ValueError("brake values contain non-finite samples")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("brake values must lie in [0, 1]")
        if onsets.size:
            if np.any(np.diff(onsets) <= 0):
                raise ValueError("onset indices must be strictly increasing")
            if onsets[0] < 0 or onsets[-1] >= values.size:
                raise ValueError("onset index out of range")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "onset_indices", _readonly(onsets))
        object.__setattr__(self, "fs", float(self.fs))

    def __len__(self) -> int:
        return self.values.size

    def time_ms(self) -> np.ndarray:
        return np.arange(self.values.size) * 1000.0 / self.fs


@dataclass(frozen=True)
class Epoch:
    """EEG and brake cut from the same sample range around one onset."""

    eeg: np.ndarray
    brake: np.ndarray
    t0_index: int
    fs: float

    def __post_init__(self):
        eeg = np.array(self.eeg, dtype=float)
        brake = np.array(self.brake, dtype=float).ravel()
        if eeg.ndim != 2:
            raise ValueError("eeg must be channels x samples")
        if eeg.shape[1] != brake.size:
            raise ValueError("eeg and brake sample counts differ")
        if not 0 <= self.t0_index < brake.size:
            raise ValueError("t0_index outside the epoch")
        object.__setattr__(self, "eeg", _readonly(eeg))
        object.__setattr__(self, "brake", _readonly(brake))
        object.__setattr__(self, "t0_index", int(self.t0_index))
        object.__setattr__(self, "fs", float(self.fs))

    @property
    def n_samples(self) -> int:
        return self.brake.size

    def times_ms(self) -> np.ndarray:
        """Sample times relative to the onset."""
        return (np.arange(self.n_samples) - self.t0_index) * 1000.0 / self.fs

    def with_eeg(self, eeg: np.ndarray) -> "Epoch":
        return Epoch(eeg, self.brake, self.t0_index, self.fs)


# --------------------------------------------------------------------------
# montage

@lru_cache(maxsize=1)
def _bundled_montage() -> dict[str, tuple[float, float]]:
    text = resources.files("eegbrake").joinpath("data/montage_1010.csv").read_text()
    rows = csv.DictReader(io.StringIO(text))
    return {r["label"].lower(): (float(r["x"]), float(r["y"])) for r in rows}


def montage_xy(channel_names: Sequence[str],
               extra: Mapping[str, tuple[float, float]] | None = None) -> np.ndarray:
    """Look up unit-disk coordinates for ``channel_names``.

    Labels outside the bundled 10-10 set must be supplied through ``extra``.
    """
    table = _bundled_montage()
    extra = {k.lower(): v for k, v in (extra or {}).items()}
    xy = []
    for name in channel_names:
        canonical = _LEGACY_LABELS.get(name, name).lower()
        if name.lower() in extra:
            xy.append(extra[name.lower()])
        elif canonical in table:
            xy.append(table[canonical])
        else:
            raise KeyError(f"no coordinates for channel {name!r}; pass them explicitly")
    return np.asarray(xy, dtype=float).reshape(-1, 2)


def standard_labels() -> list[str]:
    return list(_bundled_montage())


# --------------------------------------------------------------------------
# persistence

def _pack(recording: EegRecording, trace: BrakeTrace) -> bytes:
    if trace.values.size != recording.n_samples:
        raise ValueError("brake trace and EEG must have the same sample count")
    if not math.isclose(trace.fs, recording.fs):
        raise ValueError("brake trace and EEG must share a sampling rate")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, recording.fs, float(trace.scale),
                          recording.n_channels, recording.n_samples)]
    for name in recording.channel_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(recording.electrode_xy.astype("<f8").tobytes())
    parts.append(recording.data.astype("<f4").tobytes())
    parts.append(struct.pack("<I", trace.values.size))
    parts.append(trace.values.astype("<f4").tobytes())
    parts.append(struct.pack("<I", trace.onset_indices.size))
    parts.append(trace.onset_indices.astype("<u8").tobytes())
    return b"".join(parts)


def save_recording(recording: EegRecording, trace: BrakeTrace, path) -> None:
    """Write a trial file. Values are stored as float32."""
    if not np.all(np.isfinite(recording.data)) or not np.all(np.isfinite(trace.values)):
        raise ValueError("refusing to save non-finite samples")
    payload = _pack(recording, trace)
    Path(path).write_bytes(payload)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TrialFileError(
                f"needs {n} bytes, only {len(self.buf) - self.pos} remain",
                offset=self.pos, field=field)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, field))

    def array(self, dtype: str, count: int, field: str) -> tuple[np.ndarray, int]:
        dt = np.dtype(dtype)
        start = self.pos
        return np.frombuffer(self.take(dt.itemsize * count, field), dtype=dt), start


def parse_recording(buf: bytes) -> tuple[EegRecording, BrakeTrace]:
    r = _Reader(buf)
    (magic,) = r.unpack("<4s", "magic")
    if magic != MAGIC:
        raise TrialFileError(f"bad magic {magic!r}", offset=0, field="magic")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise TrialFileError(f"unsupported version {version}", offset=4, field="version")
    fs, scale = r.unpack("<dd", "fs")
    if not (fs > 0 and math.isfinite(fs)):
        raise TrialFileError(f"invalid sampling rate {fs}", offset=8, field="fs")
    n_ch, n_samp = r.unpack("<II", "channel count")
    names = []
    for i in range(n_ch):
        (length,) = r.unpack("<I", f"channel name {i} length")
        at = r.pos
        try:
            names.append(r.take(length, f"channel name {i}").decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise TrialFileError(str(exc), offset=at, field=f"channel name {i}") from exc
    xy, xy_at = r.array("<f8", 2 * n_ch, "electrode_xy")
    xy = xy.reshape(n_ch, 2)
    if np.any((xy ** 2).sum(axis=1) > 1.0 + 1e-12) or not np.all(np.isfinite(xy)):
        raise TrialFileError("coordinates outside the unit disk", offset=xy_at,
                             field="electrode_xy")
    eeg_at = r.pos
    if len(buf) - eeg_at < 4 * n_ch * n_samp + 8:
        # most often the header promises more rows than the body holds
        raise TrialFileError(
            f"body too short for {n_ch} channels x {n_samp} samples",
            offset=eeg_at, field="channel count")
    eeg, _ = r.array("<f4", n_ch * n_samp, "eeg samples")
    eeg = eeg.reshape(n_ch, n_samp).astype(float)
    bad = np.flatnonzero(~np.isfinite(eeg.ravel()))
    if bad.size:
        raise TrialFileError("non-finite EEG sample", offset=eeg_at + 4 * int(bad[0]),
                             field="eeg samples")
    count_at = r.pos
    (n_brake,) = r.unpack("<I", "brake sample count")
    if n_brake != n_samp:
        raise TrialFileError(f"brake count {n_brake} != sample count {n_samp}",
                             offset=count_at, field="brake sample count")
    brake, brake_at = r.array("<f4", n_brake, "brake samples")
    brake = brake.astype(float)
    bad = np.flatnonzero(~np.isfinite(brake))
    if bad.size:
        raise TrialFileError("non-finite brake sample", offset=brake_at + 4 * int(bad[0]),
                             field="brake samples")
    out = np.flatnonzero((brake < 0) | (brake > 1))
    if out.size:
        raise TrialFileError("brake intensity outside [0, 1]; unit mismatch",
                             offset=brake_at + 4 * int(out[0]), field="brake samples")
    (n_on,) = r.unpack("<I", "onset count")
    onsets, on_at = r.array("<u8", n_on, "onset indices")
    if r.pos != len(buf):
        raise TrialFileError(f"{len(buf) - r.pos} trailing bytes", offset=r.pos,
                             field="end of file")
    try:
        trace = BrakeTrace(fs, brake, onsets.astype(np.int64), scale)
    except ValueError as exc:
        raise TrialFileError(str(exc), offset=on_at, field="onset indices") from exc
    rec = EegRecording(tuple(names), xy, fs, eeg)
    return rec, trace


def load_recording(path) -> tuple[EegRecording, BrakeTrace]:
    """Read and validate a trial file (binary, or CSV by ``.csv`` suffix)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        raise ValueError("CSV trial files need a sampling rate; use load_csv")
    return parse_recording(path.read_bytes())


def load_csv(path, fs: float, electrode_xy=None, onset_threshold: float = 0.05,
             ) -> tuple[EegRecording, BrakeTrace]:
    """Read a CSV trial: a header row, one column per channel, brake last.

    The brake column is divided by its maximum when it exceeds 1. Onsets are
    the upward crossings of ``onset_threshold`` by the normalized brake.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    if len(header) < 2:
        raise ValueError("CSV needs at least one channel column and a brake column")
    table = np.asarray(rows, dtype=float)
    if table.ndim != 2 or table.shape[1] != len(header):
        raise ValueError("ragged CSV rows")
    names = [h.strip() for h in header[:-1]]
    eeg = table[:, :-1].T
    brake = table[:, -1]
    scale = 1.0
    if brake.size and brake.max() > 1.0:
        scale = float(brake.max())
        brake = brake / scale
    if np.any(brake < 0):
        raise ValueError("negative brake intensity; unit mismatch")
    xy = montage_xy(names) if electrode_xy is None else electrode_xy
    above = brake > onset_threshold
    onsets = np.flatnonzero(above[1:] & ~above[:-1]) + 1
    return EegRecording(tuple(names), xy, fs, eeg), BrakeTrace(fs, brake, onsets, scale)


# --------------------------------------------------------------------------
# resampling

def _ratio(fs: float, target_fs: float) -> tuple[int, int]:
    if not target_fs > 0:
        raise ValueError(f"target_fs must be positive, got {target_fs}")
    frac = Fraction(target_fs / fs).limit_denominator(10000)
    up, down = frac.numerator, frac.denominator
    if up > 10000 or up == 0 or abs(up / down * fs - target_fs) > 1e-9 * target_fs:
        raise ValueError(
            f"{target_fs} Hz is not a rational multiple p/q (p, q <= 10000) of {fs} Hz")
    return up, down


def _antialias_taps(up: int, down: int) -> np.ndarray:
    rate = max(up, down)
    half = 32 * rate
    # cutoff at 0.9 of the output Nyquist, relative to the upsampled Nyquist
    return sp_signal.firwin(2 * half + 1, 0.9 / rate, window=("kaiser", 9.0))


def resample(recording: EegRecording, target_fs: float) -> EegRecording:
    """Polyphase rational resampling with a linear-phase anti-alias filter."""
    up, down = _ratio(recording.fs, target_fs)
    if up == down:
        return recording
    taps = _antialias_taps(up, down)
    out = sp_signal.resample_poly(recording.data, up, down, axis=1, window=taps)
    return recording.with_data(out, fs=float(target_fs))


def resample_brake(trace: BrakeTrace, target_fs: float) -> BrakeTrace:
    """Linear interpolation of the brake trace; onsets mapped to nearest sample.

    Brake signals are slow and bounded, so interpolation (which never
    overshoots [0, 1]) is used instead of the polyphase path.
    """
    up, down = _ratio(trace.fs, target_fs)
    if up == down:
        return trace
    n_out = -(-trace.values.size * up // down)
    t_out = np.arange(n_out) / target_fs
    t_in = np.arange(trace.values.size) / trace.fs
    values = np.interp(t_out, t_in, trace.values)
    onsets = np.unique(np.clip(np.round(trace.onset_indices * target_fs / trace.fs),
                               0, n_out - 1).astype(np.int64))
    return BrakeTrace(target_fs, values, onsets, trace.scale)
