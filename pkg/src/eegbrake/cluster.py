"""Scalp-map clustering: rendering, polarity alignment, PCA and UPGMA."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

GRID = 67


@dataclass(frozen=True)
class ScalpMap:
    grid: np.ndarray  # GRID x GRID, NaN outside the head disk
    mask: np.ndarray  # True on the head disk
    source_ic: tuple[int, int] = (0, 0)  # (subject, ic)

    def vector(self) -> np.ndarray:
        return self.grid[self.mask]


@dataclass(frozen=True)
class Merge:
    a: int
    b: int
    distance: float
    size: int


@dataclass(frozen=True)
class Dendrogram:
    """Merges in order; leaves are 0..n-1 and merge ``i`` creates id ``n + i``."""

    merges: tuple[Merge, ...]
    n_leaves: int


def grid_coords(n: int = GRID) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    g = np.linspace(-1.0, 1.0, n)
    X, Y = np.meshgrid(g, g)
    return X, Y, X ** 2 + Y ** 2 <= 1.0


def render_scalp_map(weights, electrode_xy, source_ic=(0, 0), k: int = 4,
                     power: float = 2.0) -> ScalpMap:
    """Inverse-distance-weighted interpolation onto the head disk.

    Uses the ``k`` nearest electrodes per cell; the cell nearest to each
    electrode takes that electrode's weight exactly.
    """
    w = np.asarray(weights, dtype=float).ravel()
    xy = np.asarray(electrode_xy, dtype=float).reshape(-1, 2)
    if w.size != xy.shape[0]:
        raise ValueError(f"{w.size} weights for {xy.shape[0]} electrodes")
    if w.size < 4:
        raise ValueError("need at least 4 electrodes")
    X, Y, mask = grid_coords()
    cells = np.column_stack([X[mask], Y[mask]])
    d = np.hypot(cells[:, None, 0] - xy[None, :, 0], cells[:, None, 1] - xy[None, :, 1])
    k = min(k, w.size)
    near = np.argsort(d, axis=1, kind="stable")[:, :k]
    dn = np.take_along_axis(d, near, axis=1)
    wt = 1.0 / np.maximum(dn, 1e-12) ** power
    values = (wt * w[near]).sum(axis=1) / wt.sum(axis=1)
    # pin the nearest cell of each electrode to its value
    nearest_cell = np.argmin(d, axis=0)
    values[nearest_cell] = w
    grid = np.full(X.shape, np.nan)
    grid[mask] = values
    return ScalpMap(grid, mask, tuple(source_ic))


def electrode_cells(electrode_xy) -> np.ndarray:
    """Flat index into the masked vector of each electrode's nearest cell."""
    X, Y, mask = grid_coords()
    cells = np.column_stack([X[mask], Y[mask]])
    xy = np.asarray(electrode_xy, dtype=float).reshape(-1, 2)
    d = np.hypot(cells[:, None, 0] - xy[None, :, 0], cells[:, None, 1] - xy[None, :, 1])
    return np.argmin(d, axis=0)


def align_polarity(maps: Sequence) -> list[np.ndarray]:
    """Flip signs so every map agrees with the running mean of those before it."""
    if len(maps) == 0:
        raise ValueError("no maps to align")
    out = []
    total = None
    for v in maps:
        v = np.asarray(v, dtype=float)
        if not np.any(v):
            raise ValueError("cannot align an all-zero map")
        if total is None:
            v = v if v[np.argmax(np.abs(v))] > 0 else -v
            total = v.copy()
        else:
            if v @ total < 0:
                v = -v
            total = total + v
        out.append(v)
    return out


def pca_reduce(vectors, variance_fraction: float = 0.95):
    """Project onto the fewest principal axes reaching ``variance_fraction``.

    Returns
    -------
    scores : n x k
    basis : d x k, orthonormal columns
    explained : float, cumulative variance fraction of the k axes
    mean : d
    """
    x = np.asarray(vectors, dtype=float)
    n = x.shape[0]
    if n < 2:
        raise ValueError("PCA needs at least two vectors")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s ** 2
    total = var.sum()
    if total <= 0:
        raise ValueError("vectors have zero total variance")
    cum = np.cumsum(var) / total
    k = int(np.searchsorted(cum, variance_fraction - 1e-12) + 1)
    k = min(k, vt.shape[0])
    basis = vt[:k].T
    return xc @ basis, basis, float(cum[k - 1]), mean


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    return float(np.clip(1.0 - (u @ v) / (nu * nv), 0.0, 2.0))


def cosine_distance_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError("cosine distance is undefined for a zero vector")
    u = x / norms[:, None]
    d = np.clip(1.0 - u @ u.T, 0.0, 2.0)
    d = (d + d.T) / 2.0
    np.fill_diagonal(d, 0.0)
    return d


def upgma(dist) -> Dendrogram:
    """Average-linkage agglomeration with size-weighted distance updates.

    Ties go to the lexicographically smallest pair of cluster ids.
    """
    d = np.array(dist, dtype=float)
    n = d.shape[0]
    if d.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if not np.allclose(d, d.T, rtol=0, atol=1e-12):
        raise ValueError("distance matrix must be symmetric")
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    if np.any(np.diag(d) != 0):
        raise ValueError("distance matrix must have a zero diagonal")
    active = list(range(n))
    size = {i: 1 for i in range(n)}
    dd = {(i, j): d[i, j] for i in range(n) for j in range(i + 1, n)}
    merges = []
    next_id = n
    while len(active) > 1:
        best = None
        for ai in range(len(active)):
            for bi in range(ai + 1, len(active)):
                key = (active[ai], active[bi])
                if best is None or dd[key] < dd[best]:
                    best = key
        a, b = best
        dab = dd[best]
        sa, sb = size[a], size[b]
        active.remove(a)
        active.remove(b)
        for c in active:
            dac = dd[(min(a, c), max(a, c))]
            dbc = dd[(min(b, c), max(b, c))]
            dd[(c, next_id)] = (sa * dac + sb * dbc) / (sa + sb)
        size[next_id] = sa + sb
        merges.append(Merge(a, b, float(dab), sa + sb))
        active.append(next_id)
        next_id += 1
    return Dendrogram(tuple(merges), n)


def cut_tree(dendro: Dendrogram, k: int) -> np.ndarray:
    """Labels 0..k-1 for the partition left after undoing the last k-1 merges."""
    n = dendro.n_leaves
    if not 1 <= k <= n:
        raise ValueError(f"K={k} outside [1, {n}]")
    parent = list(range(n + len(dendro.merges)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, m in enumerate(dendro.merges[: n - k]):
        parent[find(m.a)] = n + i
        parent[find(m.b)] = n + i
    roots = [find(i) for i in range(n)]
    relabel = {}
    return np.array([relabel.setdefault(r, len(relabel)) for r in roots])


def wss(scores, labels) -> float:
    x = np.asarray(scores, dtype=float)
    total = 0.0
    for lab in np.unique(labels):
        pts = x[labels == lab]
        total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total


def wss_elbow(scores, dendro: Dendrogram, k_range=(1, 15)) -> dict[int, float]:
    """Within-cluster sum of squares for each dendrogram cut in ``k_range``."""
    lo, hi = k_range
    n = np.asarray(scores).shape[0]
    if hi > n:
        raise ValueError(f"K={hi} exceeds the number of maps ({n})")
    return {k: wss(scores, cut_tree(dendro, k)) for k in range(lo, hi + 1)}


def write_merge_table(path, dendro: Dendrogram):
    with open(path, "w") as fh:
        fh.write(f"# leaves = {dendro.n_leaves}\n")
        fh.write("step\tcluster_a\tcluster_b\tdistance\tsize\n")
        for i, m in enumerate(dendro.merges):
            fh.write(f"{i}\t{m.a}\t{m.b}\t{m.distance!r}\t{m.size}\n")


def read_merge_table(path) -> Dendrogram:
    with open(path) as fh:
        n = int(fh.readline().split("=")[1])
        fh.readline()
        merges = []
        for line in fh:
            _, a, b, dist, size = line.split("\t")
            merges.append(Merge(int(a), int(b), float(dist), int(size)))
    return Dendrogram(tuple(merges), n)


def write_scalp_csv(path, smap: ScalpMap):
    """Rows of ``row,col,value,valid``; masked cells carry an empty value."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value", "valid"])
        for (i, j), v in np.ndenumerate(smap.grid):
            ok = bool(smap.mask[i, j])
            w.writerow([i, j, repr(float(v)) if ok else "", int(ok)])
