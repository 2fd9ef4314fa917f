"""Braking-related component selection.

Each component's sliding band power at time ``t`` is paired with braking
intensity at ``t + delta_t``; a trial counts as *strong* when the Pearson
correlation of the two sequences exceeds 0.6, and ``nu`` is the fraction of
strong trials. Artifact-labelled components are excluded before the
percentile cut.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from .ica import IcaDecomposition
from .signal_model import BrakeTrace
from .spectral import FeatureSeries, Psd, band_power

HORIZONS_MS = (200, 300, 400)
STRONG_R = 0.6

LABELS = ("brain", "ocular", "muscular", "cardiac", "line-noise", "channel-noise", "other")
ARTIFACT_LABELS = frozenset({"ocular", "muscular", "cardiac", "line-noise", "channel-noise"})


@dataclass(frozen=True)
class TrialCorrelation:
    ic_index: int
    trial_index: int
    delta_t_ms: int
    r: float | None  # None when either sequence is constant
    n_pairs: int


@dataclass(frozen=True)
class IcScore:
    ic_index: int
    n_strong: int
    n_total: int
    label: str = "brain"
    selected: bool = False

    @property
    def nu(self) -> Fraction:
        return Fraction(self.n_strong, self.n_total)


def pair_delayed(features: FeatureSeries, brake, delta_t_ms: int, fs: float | None = None):
    """Pair ``feature(t)`` with ``brake(t + delta_t)``.

    ``brake`` is a :class:`BrakeTrace` or an array sampled at ``fs`` whose
    first sample sits at time 0 on the feature clock.

    Returns
    -------
    f, y, t : ndarrays of equal length (features, delayed brake, feature times)
    """
    if delta_t_ms not in HORIZONS_MS:
        raise ValueError(f"delta_t must be one of {HORIZONS_MS} ms, got {delta_t_ms}")
    if isinstance(brake, BrakeTrace):
        values, fs = brake.values, brake.fs
    else:
        values = np.asarray(brake, dtype=float)
        if fs is None:
            raise ValueError("fs is required with a raw brake array")
    idx = np.round((features.timestamps_ms + delta_t_ms) * fs / 1000.0).astype(np.int64)
    ok = (idx >= 0) & (idx < values.size)
    if ok.sum() < 3:
        raise ValueError(f"only {int(ok.sum())} feature/brake pairs; need at least 3")
    return features.values[ok], values[idx[ok]], features.timestamps_ms[ok]


def pearson(x, y) -> float | None:
    """Product-moment correlation; ``None`` if either input is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-D sequences of equal length")
    if x.size < 3:
        raise ValueError("pearson needs at least 3 pairs")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    # a sequence whose spread is rounding noise around its mean is constant
    if sx <= 1e-12 * (np.abs(x).max() * math.sqrt(x.size)) or sx == 0.0:
        return None
    if sy <= 1e-12 * (np.abs(y).max() * math.sqrt(y.size)) or sy == 0.0:
        return None
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def nu_metric(correlations: Sequence[float | None], threshold: float = STRONG_R):
    """Return ``(n_strong, n_total, nu)`` with ``nu`` an exact fraction.

    Undefined correlations count toward the total, never as strong.
    """
    n_total = len(correlations)
    if n_total < 1:
        raise ValueError("nu needs at least one trial")
    n_strong = sum(1 for r in correlations if r is not None and r > threshold)
    return n_strong, n_total, Fraction(n_strong, n_total)


def trial_correlations(features_per_trial: Sequence[Sequence[FeatureSeries]],
                       brakes: Sequence, fs: float, delta_t_ms: int) -> np.ndarray:
    """Correlation matrix, components x trials (NaN marks undefined).

    ``features_per_trial[j][i]`` is component ``i`` in trial ``j``.
    """
    n_trials = len(features_per_trial)
    n_ic = len(features_per_trial[0])
    out = np.full((n_ic, n_trials), np.nan)
    for j, (feats, brake) in enumerate(zip(features_per_trial, brakes)):
        for i, f in enumerate(feats):
            x, y, _ = pair_delayed(f, brake, delta_t_ms, fs)
            r = pearson(x, y)
            if r is not None:
                out[i, j] = r
    return out


def score_components(r_matrix: np.ndarray, labels: Sequence[str] | None = None,
                     threshold: float = STRONG_R) -> list[IcScore]:
    labels = list(labels) if labels is not None else ["brain"] * r_matrix.shape[0]
    scores = []
    for i, row in enumerate(r_matrix):
        rs = [None if np.isnan(v) else float(v) for v in row]
        n_strong, n_total, _ = nu_metric(rs, threshold)
        scores.append(IcScore(i, n_strong, n_total, labels[i]))
    return scores


# --------------------------------------------------------------------------
# heuristic artifact labelling

@dataclass(frozen=True)
class IcContext:
    """What the heuristic classifier looks at for each component."""

    electrode_xy: np.ndarray
    psds: Sequence[Psd]
    sources: np.ndarray | None = None  # components x samples, continuous
    fs: float | None = None


def _one_over_f_fit(psd: Psd, lo: float = 1.0, hi: float = 40.0) -> tuple[float, float]:
    m = (psd.freqs >= lo) & (psd.freqs <= hi) & (psd.power > 0)
    if m.sum() < 3:
        return 0.0, 0.0
    lf, lp = np.log(psd.freqs[m]), np.log(psd.power[m])
    slope, icpt = np.polyfit(lf, lp, 1)
    resid = lp - (slope * lf + icpt)
    ss = np.sum((lp - lp.mean()) ** 2)
    return float(slope), float(1.0 - resid @ resid / ss) if ss > 0 else 0.0


def _cardiac_peak(src: np.ndarray, fs: float) -> float:
    x = src - src.mean()
    n = x.size
    spec = np.fft.rfft(x, 2 * n)
    ac = np.fft.irfft(np.abs(spec) ** 2)[:n]
    if ac[0] <= 0:
        return 0.0
    ac /= ac[0]
    lo, hi = int(0.6 * fs), min(int(1.5 * fs), n - 1)
    return float(ac[lo:hi].max()) if hi > lo else 0.0


def classify_artifact(decomp: IcaDecomposition, ic: int, ctx: IcContext) -> str:
    """Rule-based stand-in for a trained IC classifier.

    Rules, first match wins:

    1. channel-noise: one channel holds >= 90% of the scalp-column energy.
    2. line-noise: >= 50% of power within 48-52 Hz.
    3. ocular: the two frontal-most electrodes hold >= 70% of the energy and
       delta (0.5-4 Hz) carries the largest share of 0.5-45 Hz power among
       delta, theta, alpha and beta.
    4. muscular: >= 60% of 0.5-Nyquist power lies above 20 Hz.
    5. cardiac: source autocorrelation peaks >= 0.5 at a 0.6-1.5 s lag.
    6. brain when the 1-40 Hz spectrum fits a falling power law
       (slope <= -0.5, R^2 >= 0.5); otherwise other.
    """
    a = decomp.mixing[:, ic]
    energy = a ** 2 / np.sum(a ** 2)
    psd = ctx.psds[ic]
    nyq = psd.freqs[-1]
    total = float(psd.power.sum())
    if energy.max() >= 0.9:
        return "channel-noise"
    if total > 0 and nyq >= 52:
        line = psd.power[(psd.freqs >= 48) & (psd.freqs <= 52)].sum()
        if line / total >= 0.5:
            return "line-noise"
    frontal = np.argsort(-ctx.electrode_xy[:, 1], kind="stable")[:2]
    if energy[frontal].sum() >= 0.7:
        bands = [(0.5, 4), (4, 8), (8, 13), (13, min(30, nyq))]
        powers = [band_power(psd, b) for b in bands]
        if int(np.argmax(powers)) == 0:
            return "ocular"
    broad = psd.power[psd.freqs >= 0.5].sum()
    if broad > 0 and psd.power[psd.freqs > 20].sum() / broad >= 0.6:
        return "muscular"
    if ctx.sources is not None and ctx.fs is not None:
        if _cardiac_peak(ctx.sources[ic], ctx.fs) >= 0.5:
            return "cardiac"
    slope, r2 = _one_over_f_fit(psd)
    return "brain" if slope <= -0.5 and r2 >= 0.5 else "other"


def label_components(decomp: IcaDecomposition, ctx: IcContext,
                     override: Mapping[int, str] | None = None,
                     classifier: Callable[[IcaDecomposition, int, IcContext], str] = classify_artifact,
                     ) -> list[str]:
    """Label every component; ``override`` entries win over the classifier."""
    override = dict(override or {})
    for lab in override.values():
        if lab not in LABELS:
            raise ValueError(f"unknown label {lab!r}")
    return [override.get(i) or classifier(decomp, i, ctx) for i in range(decomp.n_components)]


# --------------------------------------------------------------------------
# selection

def nearest_rank_percentile(values: Sequence, q: float):
    """Nearest-rank percentile on the ascending sorted values (q in (0, 100])."""
    vals = sorted(values)
    if not vals:
        raise ValueError("percentile of an empty sequence")
    rank = max(1, math.ceil(q / 100.0 * len(vals)))
    return vals[rank - 1]


def select_braking_ics(scores: Sequence[IcScore], top_fraction: float = 0.05,
                       threshold=None) -> tuple[list[int], list[IcScore]]:
    """Pick non-artifact components whose nu strictly exceeds the percentile.

    The cut is the nearest-rank ``100 * (1 - top_fraction)`` percentile of
    the retained components' nu, unless ``threshold`` is given (pooled mode).

    Returns the selected IC indices and the scores with ``selected`` set.
    """
    if not scores:
        raise ValueError("no scores to select from")
    retained = [s for s in scores if s.label not in ARTIFACT_LABELS]
    if not retained:
        warnings.warn("every component carries an artifact label; nothing selected",
                      stacklevel=2)
        return [], [replace(s, selected=False) for s in scores]
    if threshold is None:
        threshold = nearest_rank_percentile([s.nu for s in retained],
                                            100.0 * (1.0 - top_fraction))
    chosen = {s.ic_index for s in retained if s.nu > threshold}
    updated = [replace(s, selected=s.ic_index in chosen) for s in scores]
    return sorted(chosen), updated


def pooled_threshold(score_sets: Sequence[Sequence[IcScore]], top_fraction: float = 0.05):
    """Percentile cut computed over retained components of all subjects."""
    pooled = [s.nu for scores in score_sets for s in scores if s.label not in ARTIFACT_LABELS]
    return nearest_rank_percentile(pooled, 100.0 * (1.0 - top_fraction))


def top_by_rank(nu_values: Sequence, top_fraction: float = 0.05) -> list[int]:
    """Indices of the ceil(top_fraction * n) largest values, ties by index."""
    n = len(nu_values)
    k = max(1, math.ceil(top_fraction * n))
    order = sorted(range(n), key=lambda i: (-nu_values[i], i))
    return sorted(order[:k])


def write_scores_csv(path, scores: Sequence[IcScore]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ic_index", "nu", "n_strong", "n_total", "label", "selected"])
        for s in scores:
            w.writerow([s.ic_index, repr(float(s.nu)), s.n_strong, s.n_total, s.label,
                        int(s.selected)])


def read_scores_csv(path) -> list[IcScore]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [IcScore(int(r["ic_index"]), int(r["n_strong"]), int(r["n_total"]), r["label"],
                    bool(int(r["selected"]))) for r in rows]
