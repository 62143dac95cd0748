"""Locally weighted metric, sigmoid loss surrogate and neighbor retrieval.

Each cluster k carries a nonnegative weight column w (length d) defining
the metric d_w(x, y) = sqrt(sum_j w_j^2 (x_j - y_j)^2), i.e. plain
Euclidean distance after rescaling every axis by w. The training loss
couples the within-cluster scatter under these metrics with a smooth
surrogate of the leave-one-out 1NN error: a sigmoid of the ratio between
the distance to the nearest same-class sample and the distance to the
nearest different-class sample.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit

EPS = 1e-12

# query-chunk row count for pairwise scans; bounds temp memory, never results
_QCHUNK = 2048
# below this many multiply-adds use the exact cdist path, above it BLAS
_DIRECT_WORK = 1 << 26


def _features_of(data) -> np.ndarray:
    return data.features if hasattr(data, "features") else np.asarray(data, dtype=float)


def validate_weights(w: np.ndarray) -> np.ndarray:
    """Check a (d, K) weight matrix: nonnegative, no all-zero column."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 2:
        raise ValueError(f"weight matrix must be 2-D, got shape {w.shape}")
    if (w < 0).any():
        raise ValueError("weight matrix has negative entries")
    if (w.max(axis=0) == 0).any():
        bad = int(np.argmax(w.max(axis=0) == 0))
        raise ValueError(f"weight column {bad} is entirely zero")
    return w


def weighted_distance(x, y, w) -> float:
    """Distance sqrt(sum_j w_j^2 (x_j - y_j)^2) between two vectors."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if not (x.shape == y.shape == w.shape and x.ndim == 1):
        raise ValueError(
            f"shape mismatch: x {x.shape}, y {y.shape}, w {w.shape}"
        )
    diff = w * (x - y)
    return float(np.sqrt(np.dot(diff, diff)))


def sigmoid(z, beta: float):
    """1 / (1 + e^(beta (1 - z))): increasing in z, 0.5 at z = 1."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return expit(beta * (np.asarray(z, dtype=float) - 1.0))


def sigmoid_derivative(z, beta: float):
    """d/dz of ``sigmoid``; equals beta * s * (1 - s), never overflows."""
    s = sigmoid(z, beta)
    return beta * s * (1.0 - s)


def ratio_r(x, same, diff, w) -> float:
    """Distance ratio d_w(x, same) / (d_w(x, diff) + eps); < 1 means the
    nearest-neighbor vote is correct."""
    return weighted_distance(x, same, w) / (weighted_distance(x, diff, w) + EPS)


@dataclass(frozen=True)
class NeighborPair:
    """Nearest same-class and different-class neighbors of one sample."""

    same_idx: int
    diff_idx: int
    same_dist: float
    diff_dist: float


@dataclass(frozen=True)
class ObjectiveValue:
    """Scatter term plus 1NN-surrogate term of the training objective."""

    kmeans_term: float
    knn_term: float

    @property
    def total(self) -> float:
        return self.kmeans_term + self.knn_term


@dataclass(frozen=True)
class Pairs:
    """Bulk neighbor-pair table: same[i]/diff[i] index sample i's neighbors,
    -1 where none exists; valid[i] is True when both were found."""

    same: np.ndarray
    diff: np.ndarray
    valid: np.ndarray


def _sqdist(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, exact for small problems."""
    work = queries.shape[0] * candidates.shape[0] * queries.shape[1]
    if work <= _DIRECT_WORK:
        return cdist(queries, candidates, "sqeuclidean")
    qq = np.einsum("ij,ij->i", queries, queries)
    cc = np.einsum("ij,ij->i", candidates, candidates)
    d = qq[:, None] + cc[None, :] - 2.0 * (queries @ candidates.T)
    np.maximum(d, 0.0, out=d)
    return d


def _nearest(queries, query_ids, candidates, cand_ids, cand_mask=None):
    """Per query row: index (into cand_ids) of the nearest allowed candidate.

    Self-matches (cand_ids == query_ids[i]) are excluded. ``cand_mask``
    optionally restricts candidates per query (bool, nq x nc). Returns
    (ids, dists); id -1 and dist nan where no candidate is allowed.
    Candidates must be sorted by id ascending so ties go to the lowest id.
    """
    nq = queries.shape[0]
    out_ids = np.full(nq, -1, dtype=np.int64)
    out_d = np.full(nq, np.nan)
    for s in range(0, nq, _QCHUNK):
        e = min(s + _QCHUNK, nq)
        d = _sqdist(queries[s:e], candidates)
        d[cand_ids[None, :] == query_ids[s:e, None]] = np.inf
        if cand_mask is not None:
            d[~cand_mask[s:e]] = np.inf
        j = np.argmin(d, axis=1)
        best = d[np.arange(e - s), j]
        ok = np.isfinite(best)
        out_ids[s:e][ok] = cand_ids[j[ok]]
        out_d[s:e][ok] = np.sqrt(best[ok])
    return out_ids, out_d


def find_neighbor_pair(query_idx, cluster_members, data, labels, w):
    """Neighbor pair of one sample under one cluster's weight column.

    Searches same-class and different-class nearest neighbors among
    ``cluster_members`` (excluding the query); either search falls back to
    the whole dataset when its in-cluster candidate set is empty. Ties go
    to the lowest index. Returns None when no same-class or no
    different-class sample exists anywhere.
    """
    x = _features_of(data)
    labels = np.asarray(labels)
    w = np.asarray(w, dtype=float)
    members = np.asarray(sorted(int(m) for m in cluster_members), dtype=np.int64)
    q = int(query_idx)
    lab = labels[q]
    zq = (x[q] * w)[None, :]

    def search(pool):
        if pool.size == 0:
            return -1, np.nan
        ids, dists = _nearest(zq, np.asarray([q]), x[pool] * w, pool)
        return int(ids[0]), float(dists[0])

    all_idx = np.arange(x.shape[0], dtype=np.int64)
    same_id, same_d = search(members[(labels[members] == lab) & (members != q)])
    if same_id < 0:
        same_id, same_d = search(all_idx[(labels == lab) & (all_idx != q)])
    diff_id, diff_d = search(members[labels[members] != lab])
    if diff_id < 0:
        diff_id, diff_d = search(all_idx[labels != lab])
    if same_id < 0 or diff_id < 0:
        return None
    return NeighborPair(same_id, diff_id, same_d, diff_d)


def _stratified_pool(members, labels, cap, rng):
    """Subsample a cluster to ~cap candidates keeping every label present."""
    if cap is None or members.size <= cap:
        return members
    groups = {}
    for lab in np.unique(labels[members]):
        groups[lab] = members[labels[members] == lab]
    picked = []
    for lab in sorted(groups):
        g = groups[lab]
        take = min(g.size, max(2, int(round(cap * g.size / members.size))))
        picked.append(rng.choice(g, size=take, replace=False))
    return np.sort(np.concatenate(picked))


def _capped(pool, cap, rng):
    if cap is None or pool.size <= cap:
        return pool
    return np.sort(rng.choice(pool, size=cap, replace=False))


def _thread_map(fn, items, threads):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def compute_pairs(x, labels, assignments, weights, *, cap=None, rng=None,
                  threads=1) -> Pairs:
    """Neighbor pairs for every sample, clustered search with global fallback.

    For each sample the search runs inside its cluster under that cluster's
    weight column; a sample whose class has no other in-cluster member gets
    a dataset-wide same-class search, and a class-pure cluster triggers a
    dataset-wide different-class search. ``cap`` bounds every candidate
    pool (seeded subsample via ``rng``) so the scan stays near-linear on
    very large clusters; pools are chosen up front, making results
    independent of ``threads``.
    """
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    assignments = np.asarray(assignments)
    weights = np.asarray(weights, dtype=float)
    n = x.shape[0]
    n_clusters = weights.shape[1]
    if rng is None:
        rng = np.random.default_rng(0)

    same = np.full(n, -1, dtype=np.int64)
    diff = np.full(n, -1, dtype=np.int64)
    all_idx = np.arange(n, dtype=np.int64)

    # candidate pools, selected serially for thread-count independence
    member_pools = {}
    members_of = {}
    for k in range(n_clusters):
        members = all_idx[assignments == k]
        if members.size:
            members_of[k] = members
            member_pools[k] = _stratified_pool(members, labels, cap, rng)
    global_same = {}
    global_diff = {}
    for lab in sorted(np.unique(labels).tolist()):
        global_same[lab] = _capped(all_idx[labels == lab], cap, rng)
        global_diff[lab] = _capped(all_idx[labels != lab], cap, rng)

    def one_cluster(k):
        members = members_of[k]
        pool = member_pools[k]
        w = weights[:, k]
        zq = x[members] * w
        zc = x[pool] * w
        lab_q = labels[members]
        lab_c = labels[pool]
        s_ids, _ = _nearest(zq, members, zc, pool,
                            cand_mask=lab_c[None, :] == lab_q[:, None])
        d_ids, _ = _nearest(zq, members, zc, pool,
                            cand_mask=lab_c[None, :] != lab_q[:, None])
        # fallbacks, grouped by label so each group scans one pool
        for lab in np.unique(lab_q[(s_ids < 0) | (d_ids < 0)]):
            sel = lab_q == lab
            need_s = sel & (s_ids < 0)
            if need_s.any():
                pool_s = global_same[lab]
                ids, _ = _nearest(zq[need_s], members[need_s],
                                  x[pool_s] * w, pool_s)
                s_ids[need_s] = ids
            need_d = sel & (d_ids < 0)
            if need_d.any():
                pool_d = global_diff[lab]
                ids, _ = _nearest(zq[need_d], members[need_d],
                                  x[pool_d] * w, pool_d)
                d_ids[need_d] = ids
        return members, s_ids, d_ids

    for members, s_ids, d_ids in _thread_map(one_cluster, sorted(members_of), threads):
        same[members] = s_ids
        diff[members] = d_ids

    return Pairs(same=same, diff=diff, valid=(same >= 0) & (diff >= 0))


def pair_ratios(x, weights, assignments, pairs: Pairs):
    """R = d_w(x, same) / (d_w(x, diff) + eps) for every valid-pair sample.

    Returns (ratios, same_dist, diff_dist) as length-N arrays, nan where
    invalid; distances use each sample's own cluster weight column.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    r = np.full(n, np.nan)
    ds = np.full(n, np.nan)
    dd = np.full(n, np.nan)
    idx = np.flatnonzero(pairs.valid)
    if idx.size == 0:
        return r, ds, dd
    w_per = weights[:, assignments[idx]].T
    a = w_per * (x[idx] - x[pairs.same[idx]])
    b = w_per * (x[idx] - x[pairs.diff[idx]])
    ds[idx] = np.sqrt(np.einsum("ij,ij->i", a, a))
    dd[idx] = np.sqrt(np.einsum("ij,ij->i", b, b))
    r[idx] = ds[idx] / (dd[idx] + EPS)
    return r, ds, dd


def kmeans_term(x, assignments, centroids, weights) -> float:
    """Sum over clusters of squared weighted distances to the centroid."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for k in range(centroids.shape[0]):
        members = np.flatnonzero(assignments == k)
        if members.size == 0:
            continue
        w2 = weights[:, k] ** 2
        for s in range(0, members.size, 65536):
            block = x[members[s:s + 65536]] - centroids[k]
            total += float((block * block) @ w2 @ np.ones(1)) if False else float(
                np.dot((block * block).sum(axis=0), w2))
    return total


def knn_term(x, assignments, weights, beta, pairs: Pairs) -> float:
    """Mean sigmoid of the neighbor-distance ratio over valid-pair samples,
    i.e. (1/N) sum_i S_beta(R_i)."""
    x = np.asarray(x, dtype=float)
    r, _, _ = pair_ratios(x, weights, assignments, pairs)
    idx = np.flatnonzero(pairs.valid)
    if idx.size == 0:
        return 0.0
    return float(np.sum(sigmoid(r[idx], beta)) / x.shape[0])


def objective(data, assignments, centroids, weights, beta,
              pairs: Pairs | None = None) -> ObjectiveValue:
    """Evaluate both objective terms for a model state.

    Labels for the neighbor term come from the dataset when present,
    otherwise each sample's cluster id stands in as its class. A
    precomputed ``pairs`` table fixes the neighbor identities (the
    distances inside R are always recomputed from ``weights``).
    """
    x = _features_of(data)
    assignments = np.asarray(assignments)
    if pairs is None:
        labels = getattr(data, "labels", None)
        labels = assignments if labels is None else labels
        pairs = compute_pairs(x, labels, assignments, weights)
    return ObjectiveValue(
        kmeans_term=kmeans_term(x, assignments, centroids, weights),
        knn_term=knn_term(x, assignments, weights, beta, pairs),
    )
