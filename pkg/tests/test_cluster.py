import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from eegbrake.cluster import (
    GRID, Dendrogram, Merge, align_polarity, cosine_distance, cosine_distance_matrix,
    cut_tree, electrode_cells, grid_coords, pca_reduce, read_merge_table, render_scalp_map,
    upgma, wss_elbow, write_merge_table, write_scalp_csv,
)
from eegbrake.signal_model import montage_xy
from eegbrake.synth import CHANNELS_32

XY = montage_xy(CHANNELS_32)


def brute_force_upgma(d):
    """Average linkage recomputed from leaf distances at every step."""
    n = d.shape[0]
    clusters = {i: [i] for i in range(n)}
    out, next_id = [], n
    while len(clusters) > 1:
        ids = sorted(clusters)
        best = None
        for x in range(len(ids)):
            for y in range(x + 1, len(ids)):
                a, b = ids[x], ids[y]
                dist = np.mean([d[i, j] for i in clusters[a] for j in clusters[b]])
                if best is None or dist < best[0]:
                    best = (dist, a, b)
        dist, a, b = best
        clusters[next_id] = clusters.pop(a) + clusters.pop(b)
        out.append((a, b, dist, len(clusters[next_id])))
        next_id += 1
    return out


def random_distance(rng, n):
    p = rng.normal(size=(n, 3))
    d = np.linalg.norm(p[:, None] - p[None], axis=-1) * rng.uniform(0.5, 1.5, (n, n))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    return d


def test_mask_cell_count():
    _, _, mask = grid_coords()
    assert mask.shape == (GRID, GRID) and mask.sum() == 3409


def test_constant_weights_constant_map():
    m = render_scalp_map(np.full(32, 2.5), XY)
    np.testing.assert_allclose(m.vector(), 2.5)
    assert np.all(np.isnan(m.grid[~m.mask]))


def test_single_electrode_peak():
    for i in (0, 7, 20):
        w = np.zeros(32)
        w[i] = 1.0
        v = render_scalp_map(w, XY).vector()
        assert v.max() == 1.0
        assert v[electrode_cells(XY)[i]] == 1.0


def test_linear_in_x_monotone_at_electrodes():
    m = render_scalp_map(XY[:, 0], XY)
    cells = electrode_cells(XY)
    v = m.vector()[cells]
    order = np.argsort(XY[:, 0], kind="stable")
    assert np.all(np.diff(v[order]) >= 0)


def test_render_validation():
    with pytest.raises(ValueError):
        render_scalp_map(np.ones(3), XY[:3])
    with pytest.raises(ValueError):
        render_scalp_map(np.ones(5), XY[:6])


def test_align_polarity_examples(rng):
    v = rng.normal(size=50)
    a, b = align_polarity([v, -v])
    np.testing.assert_array_equal(a, b)
    again = align_polarity([a, b])
    np.testing.assert_array_equal(again[0], a)
    np.testing.assert_array_equal(again[1], b)
    with pytest.raises(ValueError):
        align_polarity([v, np.zeros(50)])
    with pytest.raises(ValueError):
        align_polarity([])


def test_align_polarity_planted_signs(rng):
    template = rng.normal(size=3409)
    template /= template.std()
    signs = rng.choice([-1.0, 1.0], 40)
    maps = [s * (template + rng.normal(scale=1 / 5, size=3409)) for s in signs]
    out = align_polarity(maps)
    flips = np.array([np.sign(o @ m) for o, m in zip(out, maps)])
    # every recovered flip undoes its planted sign, up to one global sign
    assert len(set(flips * signs)) == 1


def test_pca_line():
    t = np.linspace(-1, 1, 30)[:, None]
    direction = np.random.default_rng(0).normal(size=3409)
    scores, basis, explained, mean = pca_reduce(t * direction)
    assert basis.shape[1] == 1 and explained == pytest.approx(1.0)


def test_pca_isotropic():
    x = np.random.default_rng(0).normal(size=(1000, 10))
    _, basis, explained, _ = pca_reduce(x)
    assert basis.shape[1] in (9, 10)
    np.testing.assert_allclose(basis.T @ basis, np.eye(basis.shape[1]), atol=1e-8)


def test_pca_duplication_invariant(rng):
    x = rng.normal(size=(20, 6)) * np.arange(1, 7)
    _, b1, e1, _ = pca_reduce(x)
    _, b2, e2, _ = pca_reduce(np.vstack([x, x]))
    assert b1.shape == b2.shape
    np.testing.assert_allclose(np.abs(b1.T @ b2), np.eye(b1.shape[1]), atol=1e-8)
    assert e1 == pytest.approx(e2)


@given(hnp.arrays(float, st.tuples(st.integers(3, 12), st.integers(2, 8)),
                  elements=st.floats(-10, 10)))
def test_pca_reconstruction_bound(x):
    xc = x - x.mean(axis=0)
    if (xc ** 2).sum() < 1e-6:
        return
    scores, basis, explained, mean = pca_reduce(x)
    resid = ((scores @ basis.T + mean - x) ** 2).sum() / (xc ** 2).sum()
    assert explained >= 0.95 - 1e-12
    assert resid <= 1 - explained + 1e-9
    with pytest.raises(ValueError):
        pca_reduce(np.ones((4, 3)))


def test_cosine_examples():
    assert cosine_distance([1, 2], [1, 2]) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance([1, 2], [-1, -2]) == pytest.approx(2.0)
    assert cosine_distance([1, 0], [1, 1]) == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-12)
    with pytest.raises(ValueError):
        cosine_distance([0, 0], [1, 1])


@given(hnp.arrays(float, 5, elements=st.floats(-10, 10)),
       hnp.arrays(float, 5, elements=st.floats(-10, 10)), st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(u, v, c):
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    assert cosine_distance(c * u, v) == pytest.approx(cosine_distance(u, v), abs=1e-9)
    m = cosine_distance_matrix(np.vstack([u, v]))
    assert m[0, 1] == pytest.approx(cosine_distance(u, v), abs=1e-9)


def test_upgma_three_point():
    d = np.array([[0, 1, 5], [1, 0, 5], [5, 5, 0]], dtype=float)
    dendro = upgma(d)
    assert [(m.a, m.b, m.distance, m.size) for m in dendro.merges] == [(0, 1, 1.0, 2),
                                                                       (2, 3, 5.0, 3)]


def test_upgma_four_point_ties():
    d = np.full((4, 4), 8.0)
    d[0, 1] = d[1, 0] = d[2, 3] = d[3, 2] = 2.0
    np.fill_diagonal(d, 0.0)
    m = upgma(d).merges
    assert [(x.a, x.b, x.distance) for x in m] == [(0, 1, 2.0), (2, 3, 2.0), (4, 5, 8.0)]


def test_upgma_matches_brute_force():
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(2, 9))
        d = random_distance(rng, n)
        got = upgma(d).merges
        want = brute_force_upgma(d)
        assert [(m.a, m.b, m.size) for m in got] == [(a, b, s) for a, b, _, s in want]
        np.testing.assert_allclose([m.distance for m in got], [w[2] for w in want],
                                   rtol=1e-12)


@given(st.integers(0, 10 ** 6), st.floats(0.01, 100))
def test_upgma_scale_invariant(seed, c):
    d = random_distance(np.random.default_rng(seed), 7)
    a, b = upgma(d).merges, upgma(c * d).merges
    assert [(m.a, m.b) for m in a] == [(m.a, m.b) for m in b]
    np.testing.assert_allclose([m.distance * c for m in a], [m.distance for m in b],
                               rtol=1e-12)


def test_upgma_rejects_bad_input():
    with pytest.raises(ValueError):
        upgma(np.array([[0, 1], [2, 0]], dtype=float))
    with pytest.raises(ValueError):
        upgma(np.array([[0, -1], [-1, 0]], dtype=float))


@given(st.integers(0, 10 ** 6))
def test_cuts_nested(seed):
    d = random_distance(np.random.default_rng(seed), 8)
    dendro = upgma(d)
    for k in range(1, 8):
        coarse, fine = cut_tree(dendro, k), cut_tree(dendro, k + 1)
        assert len(set(coarse)) == k and len(set(fine)) == k + 1
        for lab in set(fine):
            assert len(set(coarse[fine == lab])) == 1


def test_wss_examples(rng):
    x = rng.normal(size=(12, 3))
    dendro = upgma(np.linalg.norm(x[:, None] - x[None], axis=-1))
    w = wss_elbow(x, dendro, (1, 12))
    assert w[12] == 0.0
    assert all(w[k + 1] <= w[k] + 1e-12 for k in range(1, 12))
    same = np.zeros((6, 2))
    w0 = wss_elbow(same, upgma(np.zeros((6, 6))), (1, 6))
    assert all(v == 0.0 for v in w0.values())
    with pytest.raises(ValueError):
        wss_elbow(x, dendro, (1, 13))


def test_two_blob_elbow(rng):
    a = rng.normal(size=(15, 4))
    b = rng.normal(size=(15, 4)) + np.array([12.0, 0, 0, 0])
    x = np.vstack([a, b])
    dendro = upgma(np.linalg.norm(x[:, None] - x[None], axis=-1))
    w = wss_elbow(x, dendro, (1, 3))
    assert (w[1] - w[2]) > 10 * (w[2] - w[3])
    labels = cut_tree(dendro, 2)
    assert len(set(labels[:15])) == 1 and len(set(labels[15:])) == 1


def test_merge_table_round_trip(tmp_path, rng):
    dendro = upgma(random_distance(rng, 6))
    write_merge_table(tmp_path / "m.tsv", dendro)
    assert read_merge_table(tmp_path / "m.tsv") == dendro


def test_scalp_csv(tmp_path):
    m = render_scalp_map(np.arange(32.0), XY)
    write_scalp_csv(tmp_path / "s.csv", m)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == GRID * GRID + 1
    assert sum(1 for ln in lines[1:] if ln.endswith(",1")) == 3409
