import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from eegbrake import evaluate
from eegbrake.evaluate import (EvalConfig, dump_config, paired_noise_band, parse_config,
                               phase_labels, r_square, rmse, split_trials)
from eegbrake.preprocess import preprocess

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_rmse_example():
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), rel=1e-15)


def test_rmse_matches_loop(rng):
    t = rng.normal(size=257)
    p = rng.normal(size=257)
    acc = 0.0
    for a, b in zip(t, p):
        acc += (a - b) ** 2
    assert abs(rmse(t, p) - math.sqrt(acc / t.size)) <= 1e-12


def test_rmse_rejects_mismatch():
    with pytest.raises(ValueError, match="length"):
        rmse([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        rmse([], [])


def test_r_square_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert r_square(y, y) == 1.0
    assert r_square(y, np.full(3, y.mean())) == 0.0
    assert r_square(y, y[::-1]) == pytest.approx(-3.0, abs=1e-15)
    with pytest.raises(ValueError, match="zero variance"):
        r_square([2.0, 2.0], [1.0, 3.0])


@given(arrays(float, 12, elements=finite), arrays(float, 12, elements=finite),
       st.floats(0.1, 50.0), st.floats(-100.0, 100.0))
def test_metrics_affine_behaviour(t, p, c, shift):
    assert rmse(t + shift, p + shift) == pytest.approx(rmse(t, p), rel=1e-9, abs=1e-9)
    assert rmse(c * t, c * p) == pytest.approx(c * rmse(t, p), rel=1e-9, abs=1e-9)
    if np.ptp(t) > 1e-3:
        assert r_square(c * t + shift, c * p + shift) == pytest.approx(
            r_square(t, p), rel=1e-6, abs=1e-6)


def test_phase_labels_sequence():
    b = np.r_[np.zeros(5), [0.2, 0.6, 1.0, 0.9, 0.85, 0.82, 0.5, 0.1, 0.0]]
    lab = phase_labels(b, 5)
    assert list(lab[:5]) == ["preparation"] * 5
    assert list(lab[5:8]) == ["rising"] * 3
    assert list(lab[8:11]) == ["sustaining"] * 3
    assert list(lab[11:]) == ["attenuation"] * 3


def test_phase_labels_monotone_rise():
    lab = phase_labels(np.linspace(0, 1, 10), 0)
    assert set(lab) == {"rising"}


def test_config_round_trip():
    cfg = EvalConfig()
    assert parse_config(dump_config(cfg)) == cfg
    alt = parse_config("[train]\nepochs = 7\n[select]\nhorizons = 100, 250\n")
    assert alt.train.epochs == 7
    assert alt.select.horizons == (100, 250)
    assert parse_config(dump_config(alt)) == alt


def test_config_unknown_key_and_section():
    with pytest.raises(ValueError, match="unknown key"):
        parse_config("[train]\nepoch = 7\n")
    with pytest.raises(ValueError, match="unknown config section"):
        parse_config("[trainer]\nepochs = 7\n")


def test_fingerprint_stable_and_sensitive():
    a = EvalConfig()
    assert a.fingerprint() == EvalConfig().fingerprint()
    assert len(a.fingerprint()) == 64
    b = dataclasses.replace(a, train=dataclasses.replace(a.train, epochs=a.train.epochs + 1))
    assert a.fingerprint() != b.fingerprint()


def test_load_config(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[synth]\nn_channels = 12\n")
    assert evaluate.load_config(p).synth.n_channels == 12


def test_split_trials():
    assert split_trials(10) == (list(range(8)), [8, 9])
    assert split_trials(5, 0.6) == ([0, 1, 2], [3, 4])
    with pytest.raises(ValueError):
        split_trials(1)


def test_paired_noise_band():
    d = np.array([1.0, 2.0, 3.0, 4.0])
    assert paired_noise_band(d) == pytest.approx(2 * np.std(d, ddof=1) / 2.0)
    assert paired_noise_band([0.5]) == math.inf


@pytest.fixture(scope="module")
def subject(small_synth):
    cfg, (rec, trace, truth) = small_synth
    epochs = preprocess(rec, trace)
    ecfg = EvalConfig(synth=cfg)
    return epochs, rec, ecfg, evaluate.analyze_subject(epochs, rec.electrode_xy, ecfg)


def test_analyze_subject_shapes(subject):
    epochs, rec, cfg, a = subject
    n_ic = a.decomposition.unmixing.shape[0]
    assert a.ic_power.shape[:2] == (len(epochs), n_ic)
    assert a.channel_power.shape[:2] == (len(epochs), rec.data.shape[0])
    assert set(a.scores) == set(cfg.select.horizons)
    assert a.selected
    assert a.train_trials == split_trials(len(epochs))[0]
    assert len(a.labels) == n_ic


def test_horizon_sweep_peaks_at_200(subject):
    sweep = evaluate.horizon_sweep(subject[3])
    assert max(sweep, key=sweep.get) == 200


def test_run_ablation_deterministic(subject):
    epochs, _, cfg, a = subject
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=30))
    r1 = evaluate.run_ablation(epochs, a, cfg, arms=("brake-only", "ic"))
    r2 = evaluate.run_ablation(epochs, a, cfg, arms=("brake-only", "ic"))
    assert r1 == r2
    assert [r.feature_source for r in r1] == ["brake-only", "ic"]
    assert all(r.n_test > 0 and np.isfinite(r.rmse) for r in r1)
    agg = evaluate.aggregate(r1 + r1)
    assert [r.rmse for r in agg] == pytest.approx([r.rmse for r in r1])


def test_run_ablation_needs_scores(subject):
    epochs, _, cfg, a = subject
    empty = dataclasses.replace(a, scores={})
    with pytest.raises(ValueError, match="nu scores"):
        evaluate.run_ablation(epochs, empty, cfg)


def test_brake_only_without_brake_rejected(subject):
    epochs, _, cfg, a = subject
    with pytest.raises(ValueError):
        evaluate.run_arm("brake-only-nobrake", epochs, a, cfg)
    with pytest.raises(ValueError, match="unknown feature source"):
        evaluate.run_arm("bogus", epochs, a, cfg)
