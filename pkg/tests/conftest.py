import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from eegbrake.signal_model import BrakeTrace, EegRecording, montage_xy

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

CHANNELS_4 = ("Fz", "Cz", "Pz", "Oz")


def make_recording(data, fs=200.0, names=None):
    data = np.asarray(data, dtype=float)
    if names is None:
        names = tuple(f"ch{i}" for i in range(data.shape[0]))
        ang = np.linspace(0, 2 * np.pi, data.shape[0], endpoint=False)
        xy = 0.5 * np.c_[np.cos(ang), np.sin(ang)]
    else:
        xy = montage_xy(names)
    return EegRecording(tuple(names), xy, fs, data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def recording_factory():
    return make_recording


@pytest.fixture(scope="session")
def small_synth():
    """A compact synthetic subject shared by several modules' tests."""
    from eegbrake.synth import SynthConfig, generate
    cfg = SynthConfig(seed=3, n_channels=12, n_trials=12, trial_ms=6000)
    return cfg, generate(cfg)


@pytest.fixture
def flat_trace():
    def _make(n, fs=200.0, onsets=()):
        return BrakeTrace(fs, np.zeros(n), np.asarray(onsets, dtype=np.int64))
    return _make


# one line per acceptance criterion, repeated in the terminal summary
VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def _record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        VERDICTS.append(line)
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
