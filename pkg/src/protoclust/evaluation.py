"""Clustering quality metrics with an exact assignment solver.

Cluster indices are arbitrary, so accuracy is computed under the best
one-to-one matching between clusters and classes. The matcher runs on
Python integers only, which keeps it exact for any count magnitudes,
and ties between equally good matchings resolve to the lexicographically
smallest permutation so results are reproducible.
"""

import numpy as np

from .numkit import as_prob_vector


def confusion_matrix(pred, true, k):
    """counts[i, j] = number of samples with cluster i and class j."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError("pred and true must be 1-d and equal length")
    for name, arr in (("pred", pred), ("true", true)):
        if np.any(arr < 0) or np.any(arr >= k):
            raise ValueError(f"{name} labels must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (pred, true), 1)
    return counts


def min_cost_assignment(cost):
    """Exact square assignment on integer costs, O(k^3).

    cost is a list of k rows of k Python ints. Returns perm with perm[i]
    the column assigned to row i, minimizing the total cost.
    """
    n = len(cost)
    if any(len(row) != n for row in cost):
        raise ValueError("cost matrix must be square")
    big = 1 + sum(abs(c) for row in cost for c in row)
    u = [0] * (n + 1)
    v = [0] * (n + 1)
    p = [0] * (n + 1)      # p[j] = row matched to column j
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [big] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = big
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = [0] * n
    for j in range(1, n + 1):
        if p[j]:
            perm[p[j] - 1] = j - 1
    return perm


def match_clusters(counts):
    """Best cluster -> class mapping for a k x k count matrix.

    Maximizes the matched total; among maximizers picks the mapping whose
    tuple (perm[0], ..., perm[k-1]) is lexicographically smallest. The
    tie-break rides on the cost integers: matched counts are scaled so
    far above the positional penalties that they always dominate.
    """
    counts = np.asarray(counts)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise ValueError(f"counts must be square, got {counts.shape}")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    k = counts.shape[0]
    base = k + 1
    scale = base ** k
    cost = [
        [-(int(counts[i, j]) * scale) + j * base ** (k - 1 - i) for j in range(k)]
        for i in range(k)
    ]
    return np.array(min_cost_assignment(cost), dtype=np.int64)


def clustering_accuracy(pred, true, k):
    """Fraction correct under the best cluster-to-class matching."""
    counts = confusion_matrix(pred, true, k)
    perm = match_clusters(counts)
    matched = int(counts[np.arange(k), perm].sum())
    return matched / counts.sum(), perm


def proportion_l1(p, q):
    """Total variation style L1 distance between two mixing vectors."""
    p = as_prob_vector(p, "p")
    q = as_prob_vector(q, "q")
    if p.shape != q.shape:
        raise ValueError("vectors differ in length")
    return float(np.abs(p - q).sum())


def cluster_usage(pred, k):
    """Occupancy histogram over clusters and its smallest entry."""
    pred = np.asarray(pred)
    if pred.ndim != 1 or pred.shape[0] == 0:
        raise ValueError("pred must be 1-d and nonempty")
    if np.any(pred < 0) or np.any(pred >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    hist = np.bincount(pred, minlength=k) / pred.shape[0]
    return hist, float(hist.min())
