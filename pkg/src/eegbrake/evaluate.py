"""Metrics, configuration, per-subject analysis and the feature-source ablation."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import baselines, ic_select
from .ica import InfomaxConfig, IcaDecomposition, data_rank, decompose, sources
from .preprocess import PreprocessConfig
from .predict import (TrainConfig, build_samples, concat, init_mlp, rolling_predict, train)
from .spectral import DELTA_THETA, FeatureSeries, WelchConfig, band_power_frames, welch_psd
from .synth import SynthConfig

log = logging.getLogger(__name__)

ARMS = ("brake-only", "eeg-electrodes", "ic", "csp", "dmd")
NO_BRAKE = "-nobrake"
PHASES = ("preparation", "rising", "sustaining", "attenuation")


def rmse(truth, pred) -> float:
    t = np.asarray(truth, dtype=float)
    p = np.asarray(pred, dtype=float)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise ValueError("rmse of empty sequences")
    return float(np.sqrt(np.mean((t - p) ** 2)))


def r_square(truth, pred) -> float:
    """Coefficient of determination, ``1 - SS_res / SS_tot`` with squared sums."""
    t = np.asarray(truth, dtype=float)
    p = np.asarray(pred, dtype=float)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined when the truth has zero variance")
    return 1.0 - float(np.sum((t - p) ** 2)) / ss_tot


def phase_labels(brake, t0_index: int, level: float = 0.8) -> np.ndarray:
    """Label every sample of an epoch with its braking phase.

    preparation precedes the onset; rising runs from onset to the first
    local maximum; sustaining lasts until the last sample at or above
    ``level`` times the post-onset maximum; attenuation follows.
    """
    b = np.asarray(brake, dtype=float)
    out = np.empty(b.size, dtype=object)
    out[:t0_index] = "preparation"
    post = b[t0_index:]
    if post.size == 0:
        return out
    peak_at = post.size - 1
    for i in range(1, post.size - 1):
        if post[i] >= post[i - 1] and post[i] > post[i + 1]:
            peak_at = i
            break
    above = np.flatnonzero(post >= level * post.max())
    last = int(above[-1]) if above.size else peak_at
    last = max(last, peak_at)
    out[t0_index:t0_index + peak_at + 1] = "rising"
    out[t0_index + peak_at + 1:t0_index + last + 1] = "sustaining"
    out[t0_index + last + 1:] = "attenuation"
    return out


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class SelectConfig:
    horizons: tuple[int, ...] = (200, 300, 400)
    selection_horizon: int = 200
    top_fraction: float = 0.05
    strong_r: float = 0.6
    window_ms: float = 500.0
    step_ms: float = 50.0
    band: tuple[float, float] = DELTA_THETA


@dataclass(frozen=True)
class BaselineConfig:
    csp_filters: int = 3
    hankel_delays: int = 10
    dmd_rank: int = 8


@dataclass(frozen=True)
class AblationConfig:
    horizon_ms: int = 200
    train_fraction: float = 0.8
    arms: tuple[str, ...] = ARMS + ("ic" + NO_BRAKE, "eeg-electrodes" + NO_BRAKE)


@dataclass(frozen=True)
class EvalConfig:
    synth: SynthConfig = SynthConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    ica: InfomaxConfig = InfomaxConfig()
    select: SelectConfig = SelectConfig()
    train: TrainConfig = TrainConfig()
    baselines: BaselineConfig = BaselineConfig()
    ablation: AblationConfig = AblationConfig()

    def fingerprint(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()


_SKIP = {("synth", "sources")}


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: EvalConfig) -> str:
    buf = io.StringIO()
    for sec in dataclasses.fields(cfg):
        sub = getattr(cfg, sec.name)
        buf.write(f"[{sec.name}]\n")
        for f in dataclasses.fields(sub):
            if (sec.name, f.name) in _SKIP:
                continue
            buf.write(f"{f.name} = {_fmt(getattr(sub, f.name))}\n")
        buf.write("\n")
    return buf.getvalue()


def _parse(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    if default is None:
        return None if text.lower() == "none" else float(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        proto = default[0] if default else ""
        return tuple(_parse(s, proto) for s in items)
    return text


def parse_config(text: str, base: EvalConfig = EvalConfig()) -> EvalConfig:
    """Overlay ``key = value`` sections onto ``base``; unknown keys are errors."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    updates = {}
    for sec in cp.sections():
        if not hasattr(base, sec):
            raise ValueError(f"unknown config section [{sec}]")
        sub = getattr(base, sec)
        names = {f.name for f in dataclasses.fields(sub)}
        kw = {}
        for key, val in cp.items(sec):
            if key not in names or (sec, key) in _SKIP:
                raise ValueError(f"unknown key {key!r} in [{sec}]")
            kw[key] = _parse(val, getattr(sub, key))
        updates[sec] = dataclasses.replace(sub, **kw)
    return dataclasses.replace(base, **updates)


def load_config(path) -> EvalConfig:
    with open(path) as fh:
        return parse_config(fh.read())


# --------------------------------------------------------------------------
# per-subject analysis

@dataclass
class SubjectAnalysis:
    decomposition: IcaDecomposition
    labels: list[str]
    timestamps_ms: np.ndarray
    ic_power: np.ndarray  # trials x ICs x windows
    channel_power: np.ndarray  # trials x channels x windows
    scores: dict = field(default_factory=dict)  # horizon -> list[IcScore]
    channel_scores: dict = field(default_factory=dict)
    selected: list[int] = field(default_factory=list)
    fallback: bool = False
    train_trials: list[int] = field(default_factory=list)


def fit_ica(epochs, cfg: InfomaxConfig = InfomaxConfig()) -> IcaDecomposition:
    """Decompose concatenated epochs, reducing to the data rank when deficient."""
    x = np.hstack([ep.eeg for ep in epochs])
    rank = data_rank(x)
    return decompose(x, cfg, rank if rank < x.shape[0] else None)


def _power(rows_per_epoch, fs, sel: SelectConfig):
    out = []
    ts = None
    for rows in rows_per_epoch:
        ts, v = band_power_frames(rows, fs, sel.window_ms, sel.step_ms, sel.band)
        out.append(v)
    return ts, np.stack(out)


def label_ics(decomp: IcaDecomposition, epochs, electrode_xy, override=None) -> list[str]:
    fs = epochs[0].fs
    src = sources(decomp, np.hstack([ep.eeg for ep in epochs]))
    psds = [welch_psd(s, fs, WelchConfig(segment_ms=1000.0)) for s in src]
    ctx = ic_select.IcContext(np.asarray(electrode_xy), psds, src, fs)
    return ic_select.label_components(decomp, ctx, override)


def _series(ts, values, sel: SelectConfig) -> FeatureSeries:
    return FeatureSeries(ts, values, sel.window_ms, sel.step_ms, tuple(sel.band))


def score_matrix(ts, power, epochs, horizon: int, sel: SelectConfig, trials, labels=None):
    """nu scores for every row of ``power`` over the given trials."""
    fs = epochs[0].fs
    n_rows = power.shape[1]
    r = np.full((n_rows, len(trials)), np.nan)
    for col, j in enumerate(trials):
        for i in range(n_rows):
            x, y, _ = ic_select.pair_delayed(_series(ts, power[j, i], sel), epochs[j].brake,
                                             horizon, fs)
            v = ic_select.pearson(x, y)
            if v is not None:
                r[i, col] = v
    return ic_select.score_components(r, labels, sel.strong_r)


def split_trials(n: int, train_fraction: float = 0.8) -> tuple[list[int], list[int]]:
    """Contiguous split: the first ``round(f n)`` trials train, the rest test."""
    k = int(round(train_fraction * n))
    if not 1 <= k < n:
        raise ValueError(f"cannot split {n} trials with train fraction {train_fraction}")
    return list(range(k)), list(range(k, n))


def analyze_subject(epochs, electrode_xy, cfg: EvalConfig = EvalConfig(),
                    decomposition: IcaDecomposition | None = None,
                    labels: Sequence[str] | None = None,
                    trials: Sequence[int] | None = None) -> SubjectAnalysis:
    """ICA, labelling, nu sweep and selection for one subject.

    nu is computed over ``trials`` (default: the training split) so that the
    selection never sees test trials.
    """
    sel = cfg.select
    if trials is None:
        trials, _ = split_trials(len(epochs), cfg.ablation.train_fraction)
    trials = list(trials)
    decomp = decomposition if decomposition is not None else fit_ica(epochs, cfg.ica)
    labels = list(labels) if labels is not None else label_ics(decomp, epochs, electrode_xy)
    fs = epochs[0].fs
    ts, ic_pow = _power([sources(decomp, ep.eeg) for ep in epochs], fs, sel)
    _, ch_pow = _power([ep.eeg for ep in epochs], fs, sel)
    out = SubjectAnalysis(decomp, labels, ts, ic_pow, ch_pow, train_trials=trials)
    for h in sel.horizons:
        out.scores[h] = score_matrix(ts, ic_pow, epochs, h, sel, trials, labels)
        out.channel_scores[h] = score_matrix(ts, ch_pow, epochs, h, sel, trials)
    chosen, updated = ic_select.select_braking_ics(out.scores[sel.selection_horizon],
                                                   sel.top_fraction)
    if not chosen:
        retained = [s for s in updated if s.label not in ic_select.ARTIFACT_LABELS]
        pool = retained or updated
        picks = ic_select.top_by_rank([s.nu for s in pool], sel.top_fraction)
        chosen = sorted(pool[i].ic_index for i in picks)
        updated = [dataclasses.replace(s, selected=s.ic_index in chosen) for s in updated]
        out.fallback = True
        log.info("strict percentile selection was empty; using rank-based pick %s", chosen)
    out.scores[sel.selection_horizon] = updated
    out.selected = chosen
    return out


def horizon_sweep(analysis: SubjectAnalysis, top_fraction: float | None = 0.05) -> dict[int, float]:
    """Mean nu of the top-ranked non-artifact ICs at each horizon.

    ``top_fraction=None`` averages over every non-artifact IC instead; that
    mean is dominated by chance correlations of unrelated components.
    """
    out = {}
    for h, scores in analysis.scores.items():
        keep = [float(s.nu) for s in scores if s.label not in ic_select.ARTIFACT_LABELS]
        if keep and top_fraction is not None:
            keep = [keep[i] for i in ic_select.top_by_rank(keep, top_fraction)]
        out[h] = float(np.mean(keep)) if keep else 0.0
    return out


# --------------------------------------------------------------------------
# ablation

@dataclass(frozen=True)
class EvalReport:
    subject: str
    feature_source: str
    horizon_ms: int
    rmse: float
    rmse_clamped: float
    r2: float
    n_train: int
    n_test: int
    fingerprint: str
    phase_rmse: tuple = ()  # (phase, rmse) pairs

    def row(self) -> list:
        return [self.subject, self.feature_source, self.horizon_ms, repr(self.rmse),
                repr(self.r2)]


def _arm_features(arm: str, epochs, analysis: SubjectAnalysis, cfg: EvalConfig, train_idx):
    """Per-trial feature series lists for a feature source."""
    sel = cfg.select
    ts = analysis.timestamps_ms
    n = len(epochs)
    if arm == "brake-only":
        return [[] for _ in range(n)]
    if arm == "ic":
        return [[_series(ts, analysis.ic_power[j, i], sel) for i in analysis.selected]
                for j in range(n)]
    if arm == "eeg-electrodes":
        nu = [s.nu for s in analysis.channel_scores[sel.selection_horizon]]
        chans = ic_select.top_by_rank(nu, sel.top_fraction)
        return [[_series(ts, analysis.channel_power[j, c], sel) for c in chans]
                for j in range(n)]
    if arm == "csp":
        braking, quiet = baselines.csp_class_segments([epochs[j] for j in train_idx])
        filt = baselines.csp_fit(braking, quiet, cfg.baselines.csp_filters, reduce_rank=True)
        return [baselines.csp_feature_series(filt, ep.eeg, ep.fs, sel.window_ms, sel.step_ms,
                                             sel.band) for ep in epochs]
    if arm == "dmd":
        b = cfg.baselines
        return [[baselines.dmd_spectrum_series(ep.eeg, ep.fs, sel.window_ms, sel.step_ms,
                                               b.hankel_delays, b.dmd_rank, sel.band)]
                for ep in epochs]
    raise ValueError(f"unknown feature source {arm!r}")


def run_arm(arm: str, epochs, analysis: SubjectAnalysis, cfg: EvalConfig,
            subject: str = "s00", features=None):
    """Train on the training trials and score open-loop predictions on the rest.

    Returns ``(report, model, scaling, predictions)`` where ``predictions``
    holds one :class:`~eegbrake.predict.PredictedTrace` per test trial.
    """
    base = arm[:-len(NO_BRAKE)] if arm.endswith(NO_BRAKE) else arm
    include_brake = not arm.endswith(NO_BRAKE)
    if base == "brake-only" and not include_brake:
        raise ValueError("brake-only without brake history has no inputs")
    h = cfg.ablation.horizon_ms
    train_idx, test_idx = split_trials(len(epochs), cfg.ablation.train_fraction)
    if features is None:
        features = _arm_features(base, epochs, analysis, cfg, train_idx)
    fs = epochs[0].fs
    train_sets = [build_samples(features[j], epochs[j].brake, h, include_brake, fs=fs)
                  for j in train_idx]
    train_set = concat(train_sets)
    model = init_mlp(train_set.n_inputs, seed=cfg.train.seed)
    model = train(model, train_set, dataclasses.replace(cfg.train, include_brake=include_brake))
    preds = [rolling_predict(model, features[j], epochs[j].brake, h, train_set.scaling,
                             include_brake, fs) for j in test_idx]
    truth = np.concatenate([p.measured for p in preds])
    guess = np.concatenate([p.predicted for p in preds])
    by_phase: dict[str, list] = {p: [[], []] for p in PHASES}
    for j, p in zip(test_idx, preds):
        labels = phase_labels(epochs[j].brake, epochs[j].t0_index)
        idx = np.round(p.timestamps_ms * fs / 1000.0).astype(int)
        for lab, t, g in zip(labels[idx], p.measured, p.predicted):
            by_phase[lab][0].append(t)
            by_phase[lab][1].append(g)
    phase_rmse = tuple((k, rmse(v[0], v[1])) for k, v in by_phase.items() if v[0])
    report = EvalReport(subject, arm, h, rmse(truth, guess),
                        rmse(truth, np.clip(guess, 0.0, 1.0)), r_square(truth, guess),
                        len(train_set), truth.size, cfg.fingerprint(), phase_rmse)
    return report, model, train_set.scaling, preds


def run_ablation(epochs, analysis: SubjectAnalysis, cfg: EvalConfig = EvalConfig(),
                 subject: str = "s00", arms: Sequence[str] | None = None) -> list[EvalReport]:
    """Every configured arm on the same split, seed and horizon."""
    if not analysis.scores:
        raise ValueError("ablation needs the IC selection stage output (no nu scores)")
    reports = []
    for arm in (arms or cfg.ablation.arms):
        reports.append(run_arm(arm, epochs, analysis, cfg, subject)[0])
        log.info("%s %s rmse %.4f", subject, arm, reports[-1].rmse)
    return reports


def aggregate(reports: Sequence[EvalReport]) -> list[EvalReport]:
    """Mean RMSE and R^2 over subjects for each (feature source, horizon)."""
    groups: dict = {}
    for r in reports:
        groups.setdefault((r.feature_source, r.horizon_ms), []).append(r)
    out = []
    for (src, h), rs in groups.items():
        out.append(EvalReport("all", src, h, float(np.mean([r.rmse for r in rs])),
                              float(np.mean([r.rmse_clamped for r in rs])),
                              float(np.mean([r.r2 for r in rs])),
                              sum(r.n_train for r in rs), sum(r.n_test for r in rs),
                              rs[0].fingerprint))
    return out


def paired_noise_band(diffs, z: float = 2.0) -> float:
    """``z`` standard errors of the mean of paired differences."""
    d = np.asarray(diffs, dtype=float)
    if d.size < 2:
        return math.inf
    return float(z * d.std(ddof=1) / math.sqrt(d.size))
