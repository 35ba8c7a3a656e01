"""Running estimates of cluster proportions per domain.

Each domain keeps a probability vector over the K prototypes, refined
batch by batch: form the prior-weighted posterior from the head logits,
average it over the batch, then fold that into the running vector with
an exponential moving average. The EMA coefficient follows a half-cosine
from beta0 down to beta_min over the planned steps, so early estimates
move quickly and late ones settle.
"""

from dataclasses import dataclass, field

import numpy as np

from .numkit import as_matrix, as_prob_vector, logsumexp


def beta_at(beta0, beta_min, p):
    """Half-cosine interpolation from beta0 (p=0) to beta_min (p=1).

    Progress outside [0,1] is clamped.
    """
    if not 0 < beta_min <= beta0 < 1:
        raise ValueError(f"need 0 < beta_min <= beta0 < 1, got {beta_min}, {beta0}")
    p = min(max(float(p), 0.0), 1.0)
    return beta_min + (beta0 - beta_min) * (1.0 + np.cos(np.pi * p)) / 2.0


def posterior(logits, proportions):
    """Prior-weighted responsibilities, one row per sample.

    row j, entry k = exp(logits[j,k]) * proportions[k], normalized over k.
    Computed in log space; a zero proportion puts exactly zero posterior
    mass on that cluster.
    """
    z = as_matrix(logits, "logits")
    props = as_prob_vector(proportions, "proportions")
    if props.shape[0] != z.shape[1]:
        raise ValueError(
            f"proportions length {props.shape[0]} != logit width {z.shape[1]}"
        )
    if np.all(props == 0):
        raise ValueError("proportions are all zero")
    with np.errstate(divide="ignore"):
        scores = z + np.log(props)[None, :]
    return np.exp(scores - logsumexp(scores, axis=1)[:, None])


def batch_estimate(posteriors):
    """Column mean of a posterior matrix: the batch's implied mixing vector."""
    post = as_matrix(posteriors, "posteriors")
    if post.shape[0] == 0:
        raise ValueError("empty batch")
    return post.mean(axis=0)


def ema_update(current, estimate, beta):
    """beta * current + (1 - beta) * estimate, renormalized against drift."""
    if not 0 <= beta <= 1:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    cur = as_prob_vector(current, "current proportions")
    est = as_prob_vector(estimate, "batch estimate")
    if cur.shape != est.shape:
        raise ValueError("proportion vectors differ in length")
    mixed = beta * cur + (1.0 - beta) * est
    return mixed / mixed.sum()


@dataclass
class ProportionState:
    """Per-domain proportion vectors plus the shared EMA schedule."""

    k: int
    beta0: float
    beta_min: float
    total_steps: int
    step: int = 0
    estimates: dict = field(default_factory=dict)

    def register(self, domain, initial=None):
        if domain in self.estimates:
            raise ValueError(f"domain {domain!r} already registered")
        if initial is None:
            initial = np.full(self.k, 1.0 / self.k)
        self.estimates[domain] = as_prob_vector(initial, "initial proportions").copy()

    def get(self, domain):
        if domain not in self.estimates:
            raise ValueError(f"unknown domain {domain!r}")
        return self.estimates[domain]

    def current_beta(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        return beta_at(self.beta0, self.beta_min, self.step / self.total_steps)

    def update(self, domain, logits):
        """Fold one batch of head logits into the domain's estimate."""
        est = batch_estimate(posterior(logits, self.get(domain)))
        self.estimates[domain] = ema_update(
            self.estimates[domain], est, self.current_beta()
        )
        return self.estimates[domain]

    def advance(self):
        """Move the schedule forward one batch. Call once per step."""
        self.step += 1
