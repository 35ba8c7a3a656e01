"""Independent reference implementations used to check the library.

Everything here is deliberately naive: exact LP solves, permutation
enumeration, finite differences, double loops. Slow and obviously
correct beats fast and shared-bug-prone.
"""

import itertools

import numpy as np
from scipy.optimize import linprog


def lp_transport_value(cost, a, b):
    """Exact optimal transport value via the HiGHS LP solver."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    rows, cols, vals, rhs = [], [], [], []
    eq = 0
    for i in range(n):
        for j in range(m):
            rows.append(eq)
            cols.append(i * m + j)
            vals.append(1.0)
        rhs.append(a[i])
        eq += 1
    for j in range(m):
        for i in range(n):
            rows.append(eq)
            cols.append(i * m + j)
            vals.append(1.0)
        rhs.append(b[j])
        eq += 1
    dense = np.zeros((eq, n * m))
    dense[rows, cols] = vals
    res = linprog(
        cost.ravel(), A_eq=dense, b_eq=np.asarray(rhs),
        bounds=(0, None), method="highs",
    )
    if res.status != 0:
        raise RuntimeError(f"LP solve failed: {res.message}")
    return float(res.fun)


def lp_transport_value_enumerated(cost, a, b):
    """Same optimum from brute-force vertex enumeration.

    Vertices of the transportation polytope use at most n+m-1 active
    cells; enumerate all supports of that size and keep the feasible
    ones. Exponential, so callers keep n*m tiny.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    cells = [(i, j) for i in range(n) for j in range(m)]
    best = np.inf
    rhs = np.concatenate([a, b])
    for support in itertools.combinations(cells, n + m - 1):
        eq = np.zeros((n + m, len(support)))
        for col, (i, j) in enumerate(support):
            eq[i, col] = 1.0
            eq[n + j, col] = 1.0
        sol, residual, rank, _ = np.linalg.lstsq(eq, rhs, rcond=None)
        if np.abs(eq @ sol - rhs).max() > 1e-9 or sol.min() < -1e-9:
            continue
        value = sum(cost[i, j] * t for (i, j), t in zip(support, sol))
        best = min(best, value)
    if not np.isfinite(best):
        raise RuntimeError("no feasible vertex found")
    return float(best)


def best_permutation_accuracy(confusion):
    """Max accuracy over every cluster-to-class permutation."""
    confusion = np.asarray(confusion)
    k = confusion.shape[0]
    total = confusion.sum()
    best = -1
    for perm in itertools.permutations(range(k)):
        hits = sum(confusion[i, perm[i]] for i in range(k))
        best = max(best, hits)
    return best / total


def best_assignment_cost(cost):
    """Min assignment cost by enumerating all permutations."""
    cost = [list(row) for row in cost]
    k = len(cost)
    best = None
    for perm in itertools.permutations(range(k)):
        value = sum(cost[i][perm[i]] for i in range(k))
        if best is None or value < best:
            best = value
    return best


def central_difference(fn, x, h=1e-5):
    """Gradient of scalar fn at x by central differences, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for idx in range(flat_x.size):
        orig = flat_x[idx]
        flat_x[idx] = orig + h
        hi = fn(x)
        flat_x[idx] = orig - h
        lo = fn(x)
        flat_x[idx] = orig
        flat_g[idx] = (hi - lo) / (2 * h)
    return grad


def relative_error(approx, exact, floor=1e-8):
    """Worst elementwise |approx - exact| / max(|exact|, floor)."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = np.maximum(np.abs(exact), floor)
    return float((np.abs(approx - exact) / denom).max())


def naive_entropy(p):
    total = 0.0
    for v in np.asarray(p).ravel():
        if v > 0:
            total -= v * np.log(v)
    return total


def naive_kl(p, q):
    total = 0.0
    for pv, qv in zip(np.asarray(p).ravel(), np.asarray(q).ravel()):
        if pv > 0:
            total += pv * np.log(pv / max(qv, 1e-300))
    return total
