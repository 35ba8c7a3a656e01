"""Training objectives and their hand-derived gradients.

Conventions shared by every term:

* Terms that act on probabilities (mi, kd, cross-entropy) assume the
  probabilities came from a softmax and return their gradient with
  respect to that softmax's input. The caller chains it back to
  features and prototypes (see model.head_backward).
* transport plans are treated as constants inside transport_loss; only
  the cost matrix carries gradient.
* compose is linear: scaling a coefficient scales that term's share of
  both the value and the gradient.
"""

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .numkit import as_matrix, entropy, kl_div, sample_beta

# Loss terms active in each training stage, in logging order.
STAGE_TERMS = {
    "source": ("transport", "mi", "cutmix"),
    "target_cluster": ("transport", "mi", "cutmix", "kd"),
    "target_refine": ("transport", "mi"),
}

# Which toggle switches off which term.
TERM_TOGGLES = {
    "transport": "no_prototype_clustering",
    "mi": "no_mi",
    "cutmix": "no_cutmix",
    "kd": "no_model_privacy",
}


def active_terms(stage, toggles):
    """Stage terms that survive the ablation switches; empty is an error."""
    if stage not in STAGE_TERMS:
        raise ValueError(f"unknown stage {stage!r}")
    kept = tuple(
        term
        for term in STAGE_TERMS[stage]
        if not getattr(toggles, TERM_TOGGLES[term])
    )
    if not kept:
        raise ValueError(f"every loss term of stage {stage!r} is disabled")
    return kept


def transport_loss(features_by_domain, prototypes, plans_by_domain, norm_floor=1e-12):
    """Average over non-empty domains of <plan, cosine cost>, plans fixed.

    Returns (value, d_features dict keyed like the input, d_prototypes).
    """
    live = {d: f for d, f in features_by_domain.items() if np.shape(f)[0] > 0}
    if not live:
        raise ValueError("no non-empty domains given")
    if not set(live) <= set(plans_by_domain):
        raise ValueError("missing plan for some domain")
    protos = as_matrix(prototypes, "prototypes")
    pn = np.maximum(np.linalg.norm(protos, axis=1, keepdims=True), norm_floor)
    protos_hat = protos / pn

    n_domains = len(live)
    value = 0.0
    d_features = {}
    d_protos = np.zeros_like(protos)
    for domain, raw in live.items():
        feats = as_matrix(raw, f"features[{domain!r}]")
        plan = as_matrix(plans_by_domain[domain], f"plan[{domain!r}]")
        if plan.shape != (feats.shape[0], protos.shape[0]):
            raise ValueError(f"plan shape {plan.shape} wrong for domain {domain!r}")
        fn = np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), norm_floor)
        feats_hat = feats / fn
        cos = feats_hat @ protos_hat.T
        value += float(np.sum(plan * np.clip(1.0 - cos, 0.0, 2.0)))
        tc = plan * cos
        d_features[domain] = (
            tc.sum(axis=1, keepdims=True) * feats_hat - plan @ protos_hat
        ) / fn / n_domains
        d_protos += (
            tc.sum(axis=0)[:, None] * protos_hat - plan.T @ feats_hat
        ) / pn / n_domains
    return value / n_domains, d_features, d_protos


def mi_loss(probs):
    """Negative mutual information between samples and cluster assignment.

    value = -h(mean_i p_i) + mean_i h(p_i); lies in [-log K, 0]. Driving
    it down spreads mass across clusters while sharpening each row.
    Returns (value, gradient w.r.t. the logits behind probs).
    """
    p = as_matrix(probs, "probs")
    if p.shape[0] == 0:
        raise ValueError("empty batch")
    n = p.shape[0]
    p_bar = p.mean(axis=0)
    value = float(-entropy(p_bar) + entropy(p, axis=1).mean())
    # dL/dp_i = (log p_bar - log p_i) / n, pulled back through softmax
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(p > 0, (np.log(p_bar)[None, :] - np.log(p)) / n, 0.0)
    d_logits = p * (g - np.sum(g * p, axis=1, keepdims=True))
    return value, d_logits


def kd_loss(refined, probs):
    """mean_i KL(refined_i || probs_i), refined rows held constant.

    Returns (value, gradient w.r.t. the logits behind probs), which is
    (probs - refined) / n.
    """
    t = as_matrix(refined, "refined")
    p = as_matrix(probs, "probs")
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch: refined {t.shape} vs probs {p.shape}")
    value = float(kl_div(t, p, axis=1).mean())
    return value, (p - t) / p.shape[0]


def soft_cross_entropy(probs, targets):
    """mean_i of -sum_k targets_ik log probs_ik, targets held constant."""
    p = as_matrix(probs, "probs")
    t = as_matrix(targets, "targets")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: probs {p.shape} vs targets {t.shape}")
    logp = np.log(np.maximum(p, 1e-300))
    value = float(-np.sum(t * logp) / p.shape[0])
    return value, (p - t) / p.shape[0]


# ---------------------------------------------------------------------------
# cutmix on feature vectors


@dataclass
class CutMixBatch:
    inputs: np.ndarray       # mixed rows
    labels: np.ndarray       # mixed pseudo-labels, constants for the loss
    perm: np.ndarray         # partner index per row
    lam: float               # exact fraction of each row kept from itself
    start: int
    length: int


def cutmix_make(batch, pseudo_labels, alpha, rng):
    """Splice one contiguous coordinate block from a permuted partner.

    A single Beta(alpha, alpha) draw and a single block position apply
    to the whole batch; lam is recomputed as the exact kept fraction so
    the label mix matches the coordinate mix:
    labels = lam * own + (1 - lam) * partner.
    """
    x = as_matrix(batch, "batch")
    y = as_matrix(pseudo_labels, "pseudo_labels")
    n, d = x.shape
    if n < 2:
        raise ValueError("cutmix needs at least 2 samples")
    if y.shape[0] != n:
        raise ValueError("pseudo_labels rows do not match batch")
    lam_raw = sample_beta(alpha, rng)
    length = min(max(int(round((1.0 - lam_raw) * d)), 0), d)
    start = int(rng.integers(0, d - length + 1)) if length < d else 0
    perm = rng.permutation(n)
    mixed = x.copy()
    if length > 0:
        mixed[:, start:start + length] = x[perm, start:start + length]
    lam = 1.0 - length / d
    labels = lam * y + (1.0 - lam) * y[perm]
    return CutMixBatch(
        inputs=mixed, labels=labels, perm=perm, lam=lam, start=start, length=length
    )


def cutmix_loss(model, mixed_inputs, mixed_labels):
    """Cross-entropy on the mixed batch, backpropagated to parameters.

    Returns (value, Gradients).
    """
    feats, cache = model_mod.encode(model, mixed_inputs)
    probs = model_mod.predict_from_features(model, feats)
    value, d_logits = soft_cross_entropy(probs, mixed_labels)
    return value, model_mod.head_backward(model, cache, d_logits)


# ---------------------------------------------------------------------------
# oracle label shaping


def smooth_labels(hard, gamma):
    """(1 - gamma) * hard + gamma / k on one-hot rows."""
    if not 0 <= gamma < 1:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    rows = as_matrix(hard, "hard labels")
    if not np.all((rows == 0) | (rows == 1)) or not np.all(rows.sum(axis=1) == 1):
        raise ValueError("hard labels must be one-hot rows")
    k = rows.shape[1]
    return (1.0 - gamma) * rows + gamma / k


class TemporalEnsemble:
    """Per-sample soft targets blended across training iterations.

    Rows are keyed by stable sample ids; updating an id that was never
    initialized is an error rather than a silent insert.
    """

    def __init__(self, ids, initial):
        initial = as_matrix(initial, "initial labels")
        ids = np.asarray(ids)
        if ids.shape[0] != initial.shape[0]:
            raise ValueError("ids and rows differ in count")
        if len(set(ids.tolist())) != ids.shape[0]:
            raise ValueError("duplicate sample ids")
        self.rows = {int(i): initial[j].copy() for j, i in enumerate(ids)}

    def targets(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if i not in self.rows:
                raise ValueError(f"unknown sample id {i}")
            out.append(self.rows[i])
        return np.stack(out)


def temporal_update(ensemble, ids, current_probs, tau):
    """rows[id] <- tau * rows[id] + (1 - tau) * current, returns new rows."""
    if not 0 <= tau < 1:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    probs = as_matrix(current_probs, "current_probs")
    if probs.shape[0] != len(ids):
        raise ValueError("ids and probability rows differ in count")
    for j, i in enumerate(ids):
        i = int(i)
        if i not in ensemble.rows:
            raise ValueError(f"unknown sample id {i}")
        ensemble.rows[i] = tau * ensemble.rows[i] + (1.0 - tau) * probs[j]
    return ensemble.targets(ids)


def compose(entries):
    """Weighted sum of (coefficient, value, Gradients) triples.

    Returns (total_value, total_gradients). An empty entry list means
    every stage term was switched off, which is a configuration error.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("no active loss terms")
    total = 0.0
    acc = None
    for coeff, value, grads in entries:
        total += coeff * value
        if acc is None:
            acc = model_mod.Gradients(
                weights=[coeff * w for w in grads.weights],
                biases=[coeff * b for b in grads.biases],
                prototypes=coeff * grads.prototypes,
            )
        else:
            acc.add(grads, coeff=coeff)
    return total, acc
