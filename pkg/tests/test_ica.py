import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eegbrake.ica import (
    IcaDecomposition, InfomaxConfig, RankDeficiencyError, amari_index, data_rank, decompose,
    fit_infomax, ica_from_bytes, ica_to_bytes, scalp_column, sources, whiten,
)


def laplace_mixture(m=4, n=20000, seed=0, cond_max=10.0):
    rng = np.random.default_rng(seed)
    S = rng.laplace(size=(m, n)) / np.sqrt(2)
    while True:
        A = rng.normal(size=(m, m))
        if np.linalg.cond(A) <= cond_max:
            return A, S, A @ S


def match_abs_corr(S_true, S_est):
    k = S_true.shape[0]
    c = np.abs(np.corrcoef(S_true, S_est)[:k, k:])
    best, free = np.zeros(k), set(range(k))
    for i in np.argsort(-c.max(axis=1)):
        j = max(free, key=lambda j: c[i, j])
        best[i] = c[i, j]
        free.discard(j)
    return best


def check_identities(d: IcaDecomposition, X):
    k = d.n_components
    assert np.linalg.norm(d.unmixing @ d.mixing - np.eye(k)) <= 1e-6 * np.sqrt(k)
    xc = X - X.mean(axis=1, keepdims=True)
    rebuilt = d.mixing @ sources(d, X)
    assert np.linalg.norm(rebuilt - xc) <= 1e-6 * np.linalg.norm(xc)


@pytest.fixture(scope="module")
def four_sources():
    A, S, X = laplace_mixture(4, 20000, seed=1)
    return A, S, X, decompose(X, InfomaxConfig(seed=0))


def test_recovers_super_gaussian_sources(four_sources):
    A, S, X, d = four_sources
    S_in = S / S.std(axis=1, keepdims=True)
    d2 = decompose(S_in, InfomaxConfig(seed=0))
    assert match_abs_corr(S_in, sources(d2, S_in)).min() >= 0.99
    check_identities(d2, S_in)


def test_mixed_sources_and_identities(four_sources):
    A, S, X, d = four_sources
    assert d.converged
    assert match_abs_corr(S, sources(d, X)).min() >= 0.95
    assert amari_index(d.unmixing @ A) <= 0.1
    check_identities(d, X)


def test_canonical_form(four_sources):
    _, _, X, d = four_sources
    s = sources(d, X)
    np.testing.assert_allclose(s.std(axis=1), 1.0, atol=1e-9)
    for i in range(d.n_components):
        col = scalp_column(d, i)
        assert col[np.argmax(np.abs(col))] > 0
    norms = np.linalg.norm(d.mixing, axis=0)
    assert np.all(np.diff(norms) <= 1e-12)


def test_seed_determinism(four_sources):
    _, _, X, d = four_sources
    again = decompose(X, InfomaxConfig(seed=0))
    assert np.array_equal(again.unmixing, d.unmixing)


def test_entropy_non_decreasing(four_sources):
    _, _, _, d = four_sources
    ent = d.entropy_log
    drops = ent[:-1] - ent[1:]
    assert np.all(drops <= 0.01 * np.abs(ent[:-1]))
    assert ent[-1] > ent[0]


def test_whiten_identity_on_white_data(rng):
    x = rng.normal(size=(3, 50000))
    x = np.linalg.inv(np.linalg.cholesky(np.cov(x, bias=True))) @ (x - x.mean(axis=1, keepdims=True))
    z, sph = whiten(x)
    np.testing.assert_allclose(np.cov(z, bias=True), np.eye(3), atol=1e-6)
    np.testing.assert_allclose(sph.matrix, np.eye(3), atol=1e-6)


def test_whiten_diag_4_1(rng):
    x = rng.normal(size=(2, 20000)) * np.array([[2.0], [1.0]])
    z, _ = whiten(x)
    np.testing.assert_allclose(z.var(axis=1), [1.0, 1.0], atol=1e-6)


def test_car_rank_deficiency_named(rng):
    x = rng.normal(size=(59, 3000))
    x -= x.mean(axis=0, keepdims=True)
    assert data_rank(x) == 58
    with pytest.raises(RankDeficiencyError, match="58"):
        whiten(x)
    d = decompose(x, InfomaxConfig(seed=0, max_epochs=3), n_components=58)
    assert d.unmixing.shape == (58, 59)
    check_identities(d, x)


def test_gaussian_sources_decorrelated(rng):
    x = np.array([[2.0, 0.5], [0.3, 1.0]]) @ rng.normal(size=(2, 20000))
    d = decompose(x, InfomaxConfig(seed=0, max_epochs=50))
    np.testing.assert_allclose(np.cov(sources(d, x), bias=True), np.eye(2), atol=1e-3)
    check_identities(d, x)


def test_sources_identity_and_single_column():
    d = IcaDecomposition(np.eye(3), np.eye(3), np.zeros(3), True, 1, 0.0)
    x = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(sources(d, x), x)
    for i in range(3):
        np.testing.assert_array_equal(scalp_column(d, i), np.eye(3)[i])
    W = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, -1.0], [3.0, 0.0, 1.0]])
    d = IcaDecomposition(W, np.linalg.inv(W), np.zeros(3), True, 1, 0.0)
    np.testing.assert_allclose(sources(d, x[:, 1]), (W @ x[:, 1])[:, None])
    with pytest.raises(ValueError):
        sources(d, np.zeros((2, 4)))
    with pytest.raises(IndexError):
        scalp_column(d, 3)


def test_sources_recover_with_offset(four_sources):
    A, S, X, d = four_sources
    shifted = X + np.array([[5.0], [-2.0], [0.5], [1.0]])
    d2 = decompose(shifted, InfomaxConfig(seed=0))
    assert match_abs_corr(S, sources(d2, shifted)).min() >= 0.95


def test_dominant_source_scalp_column(rng):
    a = rng.normal(size=4)
    s = rng.laplace(size=20000)
    X = np.outer(a, s) + 0.01 * rng.normal(size=(4, 20000))
    d = decompose(X, InfomaxConfig(seed=0))
    best = max(abs(np.dot(a, scalp_column(d, i))) / (np.linalg.norm(a) * np.linalg.norm(
        scalp_column(d, i))) for i in range(4))
    assert best >= 0.99
    xc = X - X.mean(axis=1, keepdims=True)
    s_est = sources(d, X)
    total = sum(np.outer(scalp_column(d, i), s_est[i]) for i in range(4))
    assert np.linalg.norm(total - xc) <= 1e-6 * np.linalg.norm(xc)


def test_amari_index_properties(rng):
    A = rng.normal(size=(5, 5))
    W = np.linalg.inv(A)
    assert amari_index(W @ A) == pytest.approx(0.0, abs=1e-12)
    P = np.eye(5)[[2, 0, 4, 1, 3]] * np.array([1, -2, 3, -1, 0.5])[:, None]
    assert amari_index(P @ W @ A) == pytest.approx(0.0, abs=1e-12)
    assert 0.0 <= amari_index(rng.normal(size=(5, 5))) <= 1.0
    assert amari_index(np.ones((4, 4))) == pytest.approx(1.0)


@settings(max_examples=10)
@given(st.integers(2, 5), st.integers(0, 1000))
def test_identities_hold_property(m, seed):
    A, S, X = laplace_mixture(m, 3000, seed=seed)
    d = decompose(X, InfomaxConfig(seed=seed, max_epochs=40))
    check_identities(d, X)


def test_archive_round_trip(four_sources):
    d = four_sources[3]
    back = ica_from_bytes(ica_to_bytes(d))
    for f in ("unmixing", "mixing", "mean", "bias", "entropy_log"):
        np.testing.assert_array_equal(getattr(back, f), getattr(d, f))
    assert back.converged == d.converged and back.iterations == d.iterations
    with pytest.raises(ValueError):
        ica_from_bytes(b"XXXX" + ica_to_bytes(d)[4:])
