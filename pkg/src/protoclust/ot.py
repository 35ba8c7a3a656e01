"""Entropic optimal transport between feature batches and prototypes.

The solver runs entirely in the log domain so small regularization
(epsilon down to 1e-3) stays stable, and checks marginal feasibility
every ten iterations.
"""

from dataclasses import dataclass, field

import numpy as np

from .numkit import as_matrix, as_prob_vector

# Check interval for the stopping rule; matches the residual history grid.
CHECK_EVERY = 10


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.01
    max_iters: int = 5000
    marginal_tol: float = 1e-6
    min_marginal_clamp: float = 1e-6

    def validate(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.marginal_tol <= 0:
            raise ValueError("marginal_tol must be positive")
        if self.min_marginal_clamp <= 0:
            raise ValueError("min_marginal_clamp must be positive")


@dataclass
class TransportPlan:
    plan: np.ndarray          # (n, k), strictly positive
    f: np.ndarray             # row potential, shape (n,)
    g: np.ndarray             # column potential, shape (k,)
    n_iters: int
    converged: bool
    residual: float
    residual_history: list = field(default_factory=list)


def _marginal_residual(plan, a, b):
    """Worst absolute deviation of either plan marginal from its target."""
    return max(
        float(np.abs(plan.sum(axis=1) - a).max()),
        float(np.abs(plan.sum(axis=0) - b).max()),
    )


def build_cost(features, prototypes, norm_floor=1e-12):
    """Cosine dissimilarity matrix, entries in [0, 2].

    C[j, k] = 1 - <features[j], prototypes[k]> / (|features[j]| |prototypes[k]|)
    """
    feats = as_matrix(features, "features")
    protos = as_matrix(prototypes, "prototypes")
    if feats.shape[1] != protos.shape[1]:
        raise ValueError(
            f"dimension mismatch: features {feats.shape} vs prototypes {protos.shape}"
        )
    fn = np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), norm_floor)
    pn = np.maximum(np.linalg.norm(protos, axis=1, keepdims=True), norm_floor)
    cos = (feats / fn) @ (protos / pn).T
    return np.clip(1.0 - cos, 0.0, 2.0)


def sinkhorn(cost, row_weights, col_weights, config=None, init=None):
    """Solve min <T, C> + eps * sum(T log T) s.t. T1 = a, T'1 = b.

    Column weights (the estimated cluster proportions) are floored at
    config.min_marginal_clamp and renormalized, so a collapsed proportion
    cannot produce an infinite log-domain potential. Row weights must be
    strictly positive as given. The returned plan is strictly positive.

    init, when given, is an (f, g) pair of dual potentials used as the
    starting point; potentials are epsilon-free, so a solution at one
    epsilon warm-starts a solve at another.
    """
    if config is None:
        config = SinkhornConfig()
    config.validate()
    cost = as_matrix(cost, "cost")
    n, k = cost.shape
    a = as_prob_vector(row_weights, "row_weights")
    if np.any(a <= 0):
        raise ValueError("row_weights must be strictly positive")
    b = np.maximum(
        as_prob_vector(col_weights, "col_weights"), config.min_marginal_clamp
    )
    b = b / b.sum()
    if a.shape[0] != n or b.shape[0] != k:
        raise ValueError(
            f"weights ({a.shape[0]}, {b.shape[0]}) do not match cost {cost.shape}"
        )

    eps = config.epsilon
    mr = -cost / eps
    log_a = np.log(a)
    log_b = np.log(b)
    if init is None:
        u = np.zeros(n)
        v = np.zeros(k)
    else:
        u = np.asarray(init[0], dtype=np.float64) / eps
        v = np.asarray(init[1], dtype=np.float64) / eps
        if u.shape != (n,) or v.shape != (k,):
            raise ValueError("init potentials do not match the cost shape")

    history = []
    residual = np.inf
    converged = False
    it = 0
    # Inputs here are always finite, so the plain max-shifted form is
    # safe and much cheaper than the general logsumexp.
    for it in range(1, config.max_iters + 1):
        t = mr + u[:, None]
        mx = t.max(axis=0)
        v = log_b - mx - np.log(np.exp(t - mx).sum(axis=0))
        t = mr + v[None, :]
        mx = t.max(axis=1)
        u = log_a - mx - np.log(np.exp(t - mx[:, None]).sum(axis=1))
        if it % CHECK_EVERY == 0 or it == config.max_iters:
            plan = np.exp(mr + u[:, None] + v[None, :])
            residual = _marginal_residual(plan, a, b)
            history.append(residual)
            if residual <= config.marginal_tol:
                converged = True
                break

    plan = np.exp(mr + u[:, None] + v[None, :])
    # keep strict positivity even where exp underflows
    plan = np.maximum(plan, np.finfo(np.float64).tiny)
    residual = _marginal_residual(plan, a, b)
    return TransportPlan(
        plan=plan,
        f=eps * u,
        g=eps * v,
        n_iters=it,
        converged=converged,
        residual=residual,
        residual_history=history,
    )


def sinkhorn_annealed(cost, row_weights, col_weights, config=None,
                      start_epsilon=0.1, decay=0.316):
    """Sinkhorn with epsilon scaling: same solver, warm-started.

    Runs the solver over a geometric epsilon schedule from start_epsilon
    down to config.epsilon, carrying the dual potentials between phases.
    Near-degenerate instances that stall for tens of thousands of
    iterations at small epsilon typically finish in a few hundred this
    way. The returned plan comes from the final phase at config.epsilon
    and meets the same contract as a direct solve.
    """
    if config is None:
        config = SinkhornConfig()
    config.validate()
    if not 0 < decay < 1:
        raise ValueError("decay must be in (0, 1)")
    schedule = []
    eps = max(float(start_epsilon), config.epsilon)
    while eps > config.epsilon:
        schedule.append(eps)
        eps = max(config.epsilon, eps * decay)
    schedule.append(config.epsilon)

    init = None
    for phase_eps in schedule:
        final = phase_eps == config.epsilon
        phase_cfg = SinkhornConfig(
            epsilon=phase_eps,
            max_iters=config.max_iters if final else min(config.max_iters, 500),
            marginal_tol=config.marginal_tol if final else max(
                config.marginal_tol, 1e-4
            ),
            min_marginal_clamp=config.min_marginal_clamp,
        )
        out = sinkhorn(cost, row_weights, col_weights, phase_cfg, init=init)
        init = (out.f, out.g)
    return out


def transport_cost(plan, cost):
    """<T, C>: the linear part of the objective."""
    t = as_matrix(plan, "plan")
    c = as_matrix(cost, "cost")
    if t.shape != c.shape:
        raise ValueError(f"shape mismatch: plan {t.shape} vs cost {c.shape}")
    return float(np.sum(t * c))


def entropic_objective(plan, cost, epsilon):
    """<T, C> + eps * sum(T log T), the quantity sinkhorn minimizes."""
    t = as_matrix(plan, "plan")
    with np.errstate(divide="ignore", invalid="ignore"):
        neg_ent = np.where(t > 0, t * np.log(t), 0.0).sum()
    return transport_cost(t, cost) + float(epsilon) * float(neg_ent)
