import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eegbrake.ica import IcaDecomposition
from eegbrake.predict import (
    HIDDEN, ModelBundle, MlpModel, Scaling, TrainConfig, TrainingDivergedError,
    build_samples, bundle_from_bytes, bundle_to_bytes, concat, init_mlp, mlp_forward,
    mlp_gradient, mlp_loss, predict_samples, rolling_predict, train,
)
from eegbrake.signal_model import BrakeTrace
from eegbrake.spectral import FeatureSeries

FS = 200.0


def realizable_trials(seed, n_trials, n_steps=120):
    """Feature p on a 50 ms grid with brake(t + 200 ms) = 0.5 p(t) exactly."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_trials):
        ts = np.arange(n_steps) * 50.0
        p = rng.uniform(0, 1, n_steps)
        brake = np.zeros(int(ts[-1] * FS / 1000) + 11)
        idx = np.round((ts + 200) * FS / 1000).astype(int)
        keep = idx < brake.size
        brake[idx[keep]] = 0.5 * p[keep]
        out.append((FeatureSeries(ts, p), brake))
    return out


def sample_sets(trials, scaling=None):
    return [build_samples([f], b, 200, fs=FS, scaling=scaling) for f, b in trials]


def numeric_gradient(model, x, y, h=1e-5):
    grads = []
    for p in model.params():
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up = mlp_loss(model, x, y)
            p[i] = old - h
            down = mlp_loss(model, x, y)
            p[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def test_build_samples_counts():
    ts = np.arange(0, 1001, 50.0)
    f = FeatureSeries(ts, np.arange(ts.size, dtype=float))
    brake = BrakeTrace(FS, np.linspace(0, 1, 201))
    s = build_samples([f], brake, 200)
    np.testing.assert_array_equal(s.timestamps_ms, np.arange(200, 801, 50.0))
    assert len(s) == 13 and s.n_inputs == 10
    np.testing.assert_array_equal(s.inputs[0, :5], [0, 1, 2, 3, 4])
    np.testing.assert_allclose(s.inputs[0, 5:], brake.values[[0, 10, 20, 30, 40]])
    np.testing.assert_allclose(s.targets[0], brake.values[80])
    s3 = build_samples([f, f, f], brake, 200)
    assert s3.n_inputs == 20
    assert build_samples([f], brake, 200, include_brake=False).n_inputs == 5


def test_build_samples_errors():
    ts = np.arange(0, 301, 50.0)
    f = FeatureSeries(ts, np.zeros(ts.size))
    with pytest.raises(ValueError):
        build_samples([f], BrakeTrace(FS, np.zeros(61)), 400)
    with pytest.raises(ValueError):
        build_samples([f], BrakeTrace(FS, np.zeros(200)), 250)
    g = FeatureSeries(np.arange(0, 301, 25.0), np.zeros(13))
    with pytest.raises(ValueError):
        build_samples([g], BrakeTrace(FS, np.zeros(200)), 200)


def test_linear_probe_on_realizable_samples():
    s = concat(sample_sets(realizable_trials(0, 5)))
    x = np.c_[s.inputs, np.ones(len(s))]
    coef = np.linalg.lstsq(x, s.targets, rcond=None)[0]
    assert np.mean((x @ coef - s.targets) ** 2) <= 1e-12


def test_causality_of_samples(rng):
    ts = np.arange(0, 3001, 50.0)
    vals = rng.uniform(size=ts.size)
    brake = rng.uniform(size=700)
    base = build_samples([FeatureSeries(ts, vals)], brake, 200, fs=FS)
    k = 30
    t_cut = ts[k]
    v2 = vals.copy()
    v2[k + 1:] = rng.uniform(size=ts.size - k - 1)
    b2 = brake.copy()
    b2[int(t_cut * FS / 1000) + 1:] = 0.0
    other = build_samples([FeatureSeries(ts, v2)], b2, 200, fs=FS, scaling=base.scaling)
    rows = base.timestamps_ms <= t_cut
    np.testing.assert_array_equal(base.inputs[rows], other.inputs[rows])


def test_scaling_frozen_on_training_split():
    trials = realizable_trials(3, 4)
    train_set = concat(sample_sets(trials[:3]))
    test_set = sample_sets(trials[3:], scaling=train_set.scaling)[0]
    assert test_set.scaling is train_set.scaling
    assert not np.allclose(test_set.scaled().mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(train_set.scaled().mean(axis=0), 0.0, atol=1e-12)


def test_forward_examples(rng):
    m = init_mlp(4)
    for w in m.weights:
        w[:] = 0
    assert np.all(mlp_forward(m, rng.normal(size=(5, 4))) == 0)
    one = MlpModel([np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)],
                   np.array([0.25]))
    assert mlp_forward(one, np.array([-4.0])) == -1.0
    assert mlp_forward(one, np.array([3.0])) == 3.0
    with pytest.raises(ValueError):
        mlp_forward(m, np.zeros(3))


def test_forward_matches_independent_recompute(rng):
    m = init_mlp(7, seed=5)
    m.slopes[:] = rng.uniform(0.05, 0.5, m.slopes.size)
    for b in m.biases:
        b[:] = rng.normal(size=b.size)
    x = rng.normal(size=(9, 7))
    out = []
    for row in x:
        h = row
        for i, (W, b) in enumerate(zip(m.weights, m.biases)):
            z = np.array([sum(W[r, c] * h[c] for c in range(h.size)) + b[r]
                          for r in range(W.shape[0])])
            h = z if i == len(m.weights) - 1 else np.array(
                [v if v >= 0 else m.slopes[i] * v for v in z])
        out.append(h[0])
    np.testing.assert_allclose(mlp_forward(m, x), out, rtol=1e-12, atol=1e-12)
    assert m.sizes == [7, *HIDDEN, 1]


def random_small_model(rng, seed):
    n_in = int(rng.integers(2, 6))
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=int(rng.integers(1, 4))))
    m = init_mlp(n_in, hidden, seed=seed)
    m.slopes[:] = rng.uniform(0.05, 0.6, m.slopes.size)
    for b in m.biases:
        b[:] = 0.3 * rng.normal(size=b.size)
    return m, rng.normal(size=(8, n_in)), rng.normal(size=8)


def max_rel_error(model, x, y):
    _, analytic = mlp_gradient(model, x, y)
    numeric = numeric_gradient(model, x, y)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-7)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def test_gradient_check_random_models():
    rng = np.random.default_rng(11)
    errs = [max_rel_error(*random_small_model(rng, s)) for s in range(20)]
    assert max(errs) <= 1e-4


def test_zero_error_batch_zero_gradient(rng):
    m, x, _ = random_small_model(rng, 0)
    _, grads = mlp_gradient(m, x, mlp_forward(m, x))
    assert all(np.all(g == 0) for g in grads)


def test_slope_gradient_zero_when_all_positive(rng):
    m = init_mlp(3, (4, 3), seed=1)
    for W in m.weights:
        W[:] = np.abs(W)
    x = np.abs(rng.normal(size=(6, 3))) + 0.1
    _, grads = mlp_gradient(m, x, rng.normal(size=6))
    assert np.all(grads[-1] == 0)


def test_convex_surrogate_decreases():
    m = MlpModel([np.array([[0.3]])], [np.zeros(1)], np.zeros(0))
    from eegbrake.predict import Adam
    params = m.params()
    opt = Adam(params, 1e-3)
    x, y = np.array([[1.5]]), np.array([2.0])
    losses = []
    for _ in range(100):
        loss, g = mlp_gradient(m, x, y)
        losses.append(loss)
        opt.step(params, g)
    assert np.all(np.diff(losses) < 0)


def test_divergence_reports_epoch():
    trials = realizable_trials(0, 2)
    s = concat(sample_sets(trials))
    with pytest.raises(TrainingDivergedError) as err:
        train(init_mlp(10), s, TrainConfig(epochs=5, learning_rate=1e200))
    assert err.value.epoch >= 1


@pytest.fixture(scope="module")
def realizable_model():
    trials = realizable_trials(1, 100)
    sets = sample_sets(trials[:80])
    tr = concat(sets)
    model = train(init_mlp(10, seed=0), tr, TrainConfig(epochs=200))
    return trials, tr, model


@pytest.mark.slow
def test_realizable_training_rmse(realizable_model):
    _, tr, model = realizable_model
    assert len(model.loss_curve) == 200
    assert np.sqrt(model.loss_curve[-1]) <= 1e-3


@pytest.mark.slow
def test_rolling_prediction_on_realizable(realizable_model):
    trials, tr, model = realizable_model
    errs = []
    for f, brake in trials[80:]:
        pt = rolling_predict(model, [f], brake, 200, tr.scaling, fs=FS)
        np.testing.assert_array_equal(pt.timestamps_ms, f.timestamps_ms[4:pt.predicted.size + 4]
                                      + 200)
        errs.append(pt.predicted - pt.measured)
    assert np.sqrt(np.mean(np.concatenate(errs) ** 2)) <= 1e-3


def test_training_bit_identical():
    s = concat(sample_sets(realizable_trials(2, 3)))
    a = train(init_mlp(10, seed=4), s, TrainConfig(epochs=5, seed=9))
    b = train(init_mlp(10, seed=4), s, TrainConfig(epochs=5, seed=9))
    assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))
    c = train(init_mlp(10, seed=4), s, TrainConfig(epochs=5, seed=10))
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_zero_model_zero_trace():
    ts = np.arange(0, 2001, 50.0)
    f = FeatureSeries(ts, np.zeros(ts.size))
    brake = np.zeros(500)
    s = build_samples([f], brake, 300, fs=FS)
    model = train(init_mlp(10), s, TrainConfig(epochs=3))
    pt = rolling_predict(model, [f], brake, 300, s.scaling, fs=FS)
    assert np.all(pt.predicted == 0)
    np.testing.assert_array_equal(pt.timestamps_ms, s.timestamps_ms + 300)


def test_bundle_round_trip(rng):
    m = init_mlp(10, seed=2)
    m.loss_curve = [0.5]
    sc = Scaling(rng.normal(size=10), rng.uniform(1, 2, 10))
    W = rng.normal(size=(3, 4))
    dec = IcaDecomposition(W, np.linalg.pinv(W), np.zeros(4), True, 3, 0.1, np.ones(4),
                           np.zeros(3))
    meta = {"arm": "ic", "fingerprint": TrainConfig().fingerprint()}
    back = bundle_from_bytes(bundle_to_bytes(ModelBundle(m, sc, meta, dec)))
    assert all(np.array_equal(a, b) for a, b in zip(m.params(), back.model.params()))
    np.testing.assert_array_equal(back.scaling.mean, sc.mean)
    assert back.meta == meta
    np.testing.assert_array_equal(back.decomposition.unmixing, W)
    with pytest.raises(ValueError):
        bundle_from_bytes(b"nope" + bytes(8))


def test_fingerprint_tracks_config():
    assert TrainConfig().fingerprint() == TrainConfig().fingerprint()
    assert TrainConfig().fingerprint() != TrainConfig(epochs=499).fingerprint()
