"""Shared numeric helpers: seeded generators, simplex ops, checked linalg.

Everything here works on float64 numpy arrays and raises ValueError on
contract violations rather than propagating NaNs downstream.
"""

import hashlib

import numpy as np

# Floor applied to the q argument of kl_div so log stays finite.
KL_CLAMP = 1e-12


def derive_rng(seed, *tags):
    """Return an independent Generator keyed by (seed, *tags).

    Streams with different tag tuples are statistically independent, so
    subsystems can draw without coordinating a shared generator. The same
    (seed, tags) always yields the same stream.
    """
    material = repr((int(seed),) + tuple(tags)).encode("utf-8")
    digest = hashlib.sha256(material).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def as_matrix(x, name="array"):
    """Coerce to a 2-d float64 array, rejecting non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_prob_vector(x, name="distribution", tol=1e-8):
    """Validate a 1-d probability vector: nonnegative, sums to 1."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if np.any(arr < 0):
        raise ValueError(f"{name} has negative entries")
    total = arr.sum()
    if abs(total - 1.0) > tol:
        raise ValueError(f"{name} sums to {total!r}, expected 1")
    return arr


def logsumexp(a, axis=None):
    """Stable log(sum(exp(a))) along axis; handles all -inf slices."""
    a = np.asarray(a, dtype=np.float64)
    amax = np.max(a, axis=axis, keepdims=True)
    # an all -inf slice would give -inf max and nan in the subtraction
    amax = np.where(np.isfinite(amax), amax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    if axis is None:
        return float(out)
    return np.squeeze(out, axis=axis)


def softmax(logits, axis=-1, temperature=1.0):
    """Temperature softmax along axis. Rows sum to exactly 1."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains non-finite values")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def entropy(p, axis=-1):
    """Shannon entropy in nats with the 0*log(0) = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -np.sum(terms, axis=axis)


def kl_div(p, q, axis=-1):
    """KL(p || q) with q floored at KL_CLAMP so the log stays finite."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), KL_CLAMP)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return np.sum(terms, axis=axis)


def sample_beta(alpha, rng):
    """Draw one Beta(alpha, alpha) variate."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return float(rng.beta(alpha, alpha))


def one_hot(labels, k):
    """(n,) int labels -> (n, k) rows of a k-class identity."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    out = np.zeros((labels.shape[0], k), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def matmul(a, b):
    a = as_matrix(a, "matmul lhs")
    b = as_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dims differ: {a.shape} @ {b.shape}")
    return a @ b


def transpose(a):
    return as_matrix(a).T


def row_normalize(a, tol=1e-12):
    """Scale each row to sum to 1; rows summing to ~0 are an error."""
    a = as_matrix(a, "row_normalize input")
    if np.any(a < 0):
        raise ValueError("row_normalize input has negative entries")
    sums = a.sum(axis=1, keepdims=True)
    if np.any(sums <= tol):
        raise ValueError("row_normalize input has a zero row")
    return a / sums
