"""Three-stage training: source clustering, target distillation, refinement.

Stage 1 trains a source model on all source domains jointly. Stage 2
asks an oracle for one hard label per target sample, shapes those labels
(smoothing, temporal ensembling) and trains a fresh target model with
distillation plus the clustering objective. Stage 3 drops the oracle and
sharpens the target model with transport and mutual information alone.

Everything is driven by one root seed: batch order, parameter init,
CutMix draws and the synthetic data all derive their own streams from
it, so a run is reproducible bit for bit.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .data import FeatureDataset, exact_counts
from .evaluation import cluster_usage, clustering_accuracy
from .losses import (
    TemporalEnsemble,
    active_terms,
    compose,
    cutmix_loss,
    cutmix_make,
    kd_loss,
    mi_loss,
    smooth_labels,
    temporal_update,
    transport_loss,
)
from .model import (
    ClusterModel,
    EncoderSpec,
    backward,
    encode,
    head_backward,
    head_logits,
    init_model,
    predict_from_features,
)
from .numkit import derive_rng, one_hot
from .ot import SinkhornConfig, build_cost, sinkhorn
from .proportions import ProportionState


@dataclass(frozen=True)
class Toggles:
    """Ablation switches plus the two reduced run modes."""

    no_prototype_clustering: bool = False
    no_mi: bool = False
    no_cutmix: bool = False
    no_temporal_ensemble: bool = False
    no_model_privacy: bool = False
    pooled_source: bool = False
    target_only: bool = False
    adaptation_only: bool = False

    def validate(self):
        if self.target_only and self.adaptation_only:
            raise ValueError("target_only and adaptation_only are exclusive")


@dataclass(frozen=True)
class TrainConfig:
    k: int = 5
    encoder: str = "mlp"              # "mlp" or "identity"
    hidden_dims: tuple = (64,)
    feature_dim: int = 16
    activation: str = "relu"
    temperature: float = 1.0
    batch_size: int = 64
    epochs_source: int = 50
    epochs_target: int = 50
    epochs_refine: int = 50
    eta0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    lambda_transport: float = 1.0
    lambda_mi: float = 1.0
    lambda_mix: float = 1.0
    lambda_kd: float = 1.0
    epsilon: float = 0.01
    sinkhorn_max_iters: int = 5000
    marginal_tol: float = 1e-6
    min_marginal_clamp: float = 1e-6
    beta0_source: float = 0.9999
    beta0_target: float = 0.99
    beta_min_ratio: float = 0.9       # beta_min = ratio * beta0
    gamma: float = 0.1                # label smoothing weight
    tau: float = 0.6                  # temporal ensemble coefficient
    alpha: float = 0.3                # CutMix concentration
    full_dataset_ot: bool = False
    seed: int = 0
    toggles: Toggles = field(default_factory=Toggles)

    def validate(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (CutMix needs pairs)")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        for name in ("lambda_transport", "lambda_mi", "lambda_mix", "lambda_kd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if min(self.epochs_source, self.epochs_target, self.epochs_refine) < 1:
            raise ValueError("epoch counts must be >= 1")
        if not 0 < self.beta_min_ratio <= 1:
            raise ValueError("beta_min_ratio must be in (0, 1]")
        if self.encoder not in ("mlp", "identity"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        self.toggles.validate()
        self.sinkhorn_config().validate()

    def sinkhorn_config(self):
        return SinkhornConfig(
            epsilon=self.epsilon,
            max_iters=self.sinkhorn_max_iters,
            marginal_tol=self.marginal_tol,
            min_marginal_clamp=self.min_marginal_clamp,
        )


def lr_at(eta0, p):
    """eta0 * (1 + 10 p)^-0.75 on clamped progress p."""
    p = min(max(float(p), 0.0), 1.0)
    return eta0 * (1.0 + 10.0 * p) ** -0.75


@dataclass
class OptimizerState:
    velocities: list
    momentum: float
    weight_decay: float
    total_steps: int
    step: int = 0


def init_optimizer(model, cfg, total_steps):
    return OptimizerState(
        velocities=[np.zeros_like(p) for p in model.parameter_list()],
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        total_steps=max(int(total_steps), 1),
    )


def sgd_step(model, grads, opt, lr):
    """Momentum SGD with decoupled-from-nothing weight decay in the velocity."""
    flat = grads.flat()
    params = model.parameter_list()
    if len(flat) != len(params) or len(flat) != len(opt.velocities):
        raise ValueError("gradient structure does not match parameters")
    for g in flat:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient; aborting training")
    for param, g, vel in zip(params, flat, opt.velocities):
        if param.shape != g.shape:
            raise ValueError("gradient shape does not match parameter")
        vel *= opt.momentum
        vel += g + opt.weight_decay * param
        param -= lr * vel
    opt.step += 1
    model.bump_version()


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    stage: str
    epoch: int
    losses: dict
    acc: float          # None when no labels are available
    min_usage: float
    usage: np.ndarray
    proportions: dict
    wall_time: float


def _fmt(v):
    return f"{float(v):.12g}"


class MetricsLog:
    """Per-epoch records; the text form is byte-stable across reruns.

    Wall times are kept out of the metrics lines (they differ run to
    run) and serialized separately via timing_lines.
    """

    def __init__(self):
        self.records = []

    def append(self, record):
        self.records.append(record)

    def lines(self):
        out = []
        for r in self.records:
            parts = [f"stage={r.stage}", f"epoch={r.epoch}"]
            parts += [f"loss_{name}={_fmt(v)}" for name, v in r.losses.items()]
            parts.append(f"acc={_fmt(r.acc) if r.acc is not None else 'na'}")
            parts.append(f"min_usage={_fmt(r.min_usage)}")
            parts.append("usage=" + ",".join(_fmt(v) for v in r.usage))
            for domain in r.proportions:
                parts.append(
                    f"proportions_{domain}="
                    + ",".join(_fmt(v) for v in r.proportions[domain])
                )
            out.append(" ".join(parts))
        return out

    def timing_lines(self):
        return [
            f"stage={r.stage} epoch={r.epoch} wall_time={r.wall_time:.6f}"
            for r in self.records
        ]

    def write(self, path):
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    def write_timing(self, path):
        with open(path, "w") as fh:
            for line in self.timing_lines():
                fh.write(line + "\n")


# ---------------------------------------------------------------------------
# batching


def _index_stream(n, needed, rng):
    """Deterministic sample order: chained fresh shuffles, `needed` long."""
    reps = []
    total = 0
    while total < needed:
        reps.append(rng.permutation(n))
        total += n
    return np.concatenate(reps)[:needed]


def _batch_plan(sizes, batch_size):
    """Per-domain rows contributed to each joint batch, and batch count."""
    total = int(sum(sizes))
    if total == 0:
        raise ValueError("no samples to batch")
    eff = min(batch_size, total)
    shares = np.asarray(sizes, dtype=np.float64) / total
    counts = exact_counts(shares, eff)
    n_batches = int(np.ceil(total / eff))
    return counts, n_batches


# ---------------------------------------------------------------------------
# the shared epoch loop


def _evaluate(model, dataset, k):
    probs = predict_from_features(model, encode(model, dataset.features)[0])
    pred = np.argmax(probs, axis=1)
    usage, min_usage = cluster_usage(pred, k)
    acc = None
    if dataset.labels is not None:
        acc, _ = clustering_accuracy(pred, dataset.labels, k)
    return acc, usage, min_usage


def _full_dataset_plans(model, datasets, prop_state, skcfg):
    plans = {}
    for ds in datasets:
        feats, _ = encode(model, ds.features)
        cost = build_cost(feats, model.prototypes)
        u = np.full(ds.n, 1.0 / ds.n)
        plans[ds.domain] = sinkhorn(cost, u, prop_state.get(ds.domain), skcfg).plan
    return plans


def _run_stage(stage, model, datasets, cfg, prop_state, opt, metrics,
               epochs, ensemble=None, eval_dataset=None, rng_tag=None):
    """Drive `epochs` of one stage; appends one MetricsRecord per epoch."""
    terms = active_terms(stage, cfg.toggles)
    skcfg = cfg.sinkhorn_config()
    tag = rng_tag or stage
    batch_rng = derive_rng(cfg.seed, tag, "batches")
    cutmix_rng = derive_rng(cfg.seed, tag, "cutmix")
    counts, n_batches = _batch_plan([ds.n for ds in datasets], cfg.batch_size)
    coeffs = {
        "transport": cfg.lambda_transport,
        "mi": cfg.lambda_mi,
        "cutmix": cfg.lambda_mix,
        "kd": cfg.lambda_kd,
    }

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        streams = [
            _index_stream(ds.n, int(c) * n_batches, batch_rng)
            for ds, c in zip(datasets, counts)
            if c > 0
        ]
        live = [ds for ds, c in zip(datasets, counts) if c > 0]
        live_counts = [int(c) for c in counts if c > 0]
        term_sums = {name: 0.0 for name in terms}

        epoch_plans = None
        if "transport" in terms and cfg.full_dataset_ot:
            epoch_plans = _full_dataset_plans(model, live, prop_state, skcfg)

        for b in range(n_batches):
            picks = [
                stream[b * c:(b + 1) * c]
                for stream, c in zip(streams, live_counts)
            ]
            x = np.concatenate([ds.features[idx] for ds, idx in zip(live, picks)])
            slices = {}
            lo = 0
            for ds, c in zip(live, live_counts):
                slices[ds.domain] = slice(lo, lo + c)
                lo += c

            feats, cache = encode(model, x)
            logits = head_logits(model, feats)
            for ds in live:
                prop_state.update(ds.domain, logits[slices[ds.domain]])
            prop_state.advance()

            probs = predict_from_features(model, feats)
            entries = []
            if "transport" in terms:
                feats_by_domain = {d: feats[sl] for d, sl in slices.items()}
                plans = {}
                for ds, idx in zip(live, picks):
                    d = ds.domain
                    m = idx.shape[0]
                    if epoch_plans is not None:
                        plans[d] = epoch_plans[d][idx] * (ds.n / m)
                    else:
                        cost = build_cost(feats_by_domain[d], model.prototypes)
                        u = np.full(m, 1.0 / m)
                        plans[d] = sinkhorn(cost, u, prop_state.get(d), skcfg).plan
                value, d_by_domain, d_protos = transport_loss(
                    feats_by_domain, model.prototypes, plans
                )
                d_feats = np.zeros_like(feats)
                for d, sl in slices.items():
                    d_feats[sl] = d_by_domain[d]
                entries.append(
                    (coeffs["transport"], value, backward(model, cache, d_feats, d_protos))
                )
                term_sums["transport"] += value
            if "mi" in terms:
                value, d_logits = mi_loss(probs)
                entries.append(
                    (coeffs["mi"], value, head_backward(model, cache, d_logits))
                )
                term_sums["mi"] += value
            if "cutmix" in terms:
                mixed = cutmix_make(x, probs, cfg.alpha, cutmix_rng)
                value, grads = cutmix_loss(model, mixed.inputs, mixed.labels)
                entries.append((coeffs["cutmix"], value, grads))
                term_sums["cutmix"] += value
            if "kd" in terms:
                ids = np.concatenate([ds.ids[idx] for ds, idx in zip(live, picks)])
                if cfg.toggles.no_temporal_ensemble:
                    targets = ensemble.targets(ids)
                else:
                    targets = temporal_update(ensemble, ids, probs, cfg.tau)
                value, d_logits = kd_loss(targets, probs)
                entries.append(
                    (coeffs["kd"], value, head_backward(model, cache, d_logits))
                )
                term_sums["kd"] += value

            total, grads = compose(entries)
            if not np.isfinite(total):
                raise ValueError(
                    f"non-finite loss at stage {stage} epoch {epoch} batch {b}"
                )
            sgd_step(model, grads, opt, lr_at(cfg.eta0, opt.step / opt.total_steps))

        target_ds = eval_dataset if eval_dataset is not None else _merge(datasets)
        acc, usage, min_usage = _evaluate(model, target_ds, cfg.k)
        metrics.append(
            MetricsRecord(
                stage=stage,
                epoch=epoch,
                losses={name: term_sums[name] / n_batches for name in terms},
                acc=acc,
                min_usage=min_usage,
                usage=usage,
                proportions={
                    ds.domain: prop_state.get(ds.domain).copy() for ds in datasets
                },
                wall_time=time.perf_counter() - t0,
            )
        )
    return model


def _merge(datasets):
    if len(datasets) == 1:
        return datasets[0]
    labels = None
    if all(ds.labels is not None for ds in datasets):
        labels = np.concatenate([ds.labels for ds in datasets])
    return FeatureDataset(
        "merged", np.concatenate([ds.features for ds in datasets]), labels
    )


def _build_model(cfg, input_dim, rng_tag):
    if cfg.encoder == "identity":
        spec = EncoderSpec(input_dim, (), input_dim, cfg.activation)
    else:
        spec = EncoderSpec(
            input_dim, tuple(cfg.hidden_dims), cfg.feature_dim, cfg.activation
        )
    return init_model(
        spec,
        cfg.k,
        cfg.seed,
        encoder_kind=cfg.encoder,
        temperature=cfg.temperature,
        rng_tag=rng_tag,
    )


def _copy_model(model):
    return ClusterModel(
        spec=model.spec,
        encoder_kind=model.encoder_kind,
        weights=[w.copy() for w in model.weights],
        biases=[b.copy() for b in model.biases],
        prototypes=model.prototypes.copy(),
        temperature=model.temperature,
    )


def _proportion_state(cfg, beta0, domains, total_steps, initial=None):
    state = ProportionState(
        k=cfg.k,
        beta0=beta0,
        beta_min=cfg.beta_min_ratio * beta0,
        total_steps=max(int(total_steps), 1),
    )
    for domain in domains:
        state.register(domain, initial.get(domain) if initial else None)
    return state


# ---------------------------------------------------------------------------
# stages


def train_source(cfg, sources, metrics=None):
    """Stage 1: joint unsupervised clustering over all source domains."""
    cfg.validate()
    if not sources:
        raise ValueError("need at least one source dataset")
    dims = {ds.dim for ds in sources}
    if len(dims) != 1:
        raise ValueError(f"source domains disagree on width: {sorted(dims)}")
    total = sum(ds.n for ds in sources)
    if cfg.k > total:
        raise ValueError(f"k={cfg.k} exceeds the {total} available samples")
    if cfg.toggles.pooled_source:
        sources = [
            replace_domain(_merge(sources), "pooled")
        ]
    metrics = metrics if metrics is not None else MetricsLog()
    model = _build_model(cfg, dims.pop(), "source-init")
    _, n_batches = _batch_plan([ds.n for ds in sources], cfg.batch_size)
    total_steps = n_batches * cfg.epochs_source
    prop = _proportion_state(
        cfg, cfg.beta0_source, [ds.domain for ds in sources], total_steps
    )
    opt = init_optimizer(model, cfg, total_steps)
    _run_stage(
        "source", model, sources, cfg, prop, opt, metrics, cfg.epochs_source
    )
    return model, metrics, prop


def replace_domain(dataset, domain):
    return FeatureDataset(domain, dataset.features, dataset.labels, dataset.ids)


def train_target_cluster(cfg, target, oracle=None, source_model=None, metrics=None):
    """Stage 2: distill oracle labels into a fresh target model while clustering.

    By default the source model stays private: the target model starts
    from scratch and sees only hard labels, fetched exactly once per
    sample. With no_model_privacy the target model instead starts as a
    copy of the source model and the distillation term disappears
    (zero oracle queries).
    """
    cfg.validate()
    metrics = metrics if metrics is not None else MetricsLog()
    ensemble = None
    if cfg.toggles.no_model_privacy:
        if source_model is None:
            raise ValueError("no_model_privacy requires the source model")
        model = _copy_model(source_model)
    else:
        if oracle is None:
            raise ValueError("an oracle is required for target clustering")
        model = _build_model(cfg, target.dim, "target-init")
        labels = np.asarray(oracle.query(target.features))
        if labels.shape != (target.n,):
            raise ValueError("oracle returned a wrong number of labels")
        if np.any(labels < 0) or np.any(labels >= cfg.k):
            raise ValueError(f"oracle labels outside [0, {cfg.k})")
        smoothed = smooth_labels(one_hot(labels, cfg.k), cfg.gamma)
        ensemble = TemporalEnsemble(target.ids, smoothed)

    _, n_batches = _batch_plan([target.n], cfg.batch_size)
    total_steps = n_batches * cfg.epochs_target
    prop = _proportion_state(cfg, cfg.beta0_target, [target.domain], total_steps)
    opt = init_optimizer(model, cfg, total_steps)
    _run_stage(
        "target_cluster", model, [target], cfg, prop, opt, metrics,
        cfg.epochs_target, ensemble=ensemble,
    )
    return model, metrics, prop, ensemble


def refine_target(cfg, target, model, prop_state=None, metrics=None):
    """Stage 3: transport + MI only; the oracle is never consulted here.

    The proportion estimate carries over from stage 2 when given, so the
    refinement starts from the best available picture of the target mix.
    """
    cfg.validate()
    metrics = metrics if metrics is not None else MetricsLog()
    _, n_batches = _batch_plan([target.n], cfg.batch_size)
    total_steps = n_batches * cfg.epochs_refine
    initial = None
    if prop_state is not None:
        initial = {target.domain: prop_state.get(target.domain).copy()}
    prop = _proportion_state(
        cfg, cfg.beta0_target, [target.domain], total_steps, initial=initial
    )
    opt = init_optimizer(model, cfg, total_steps)
    _run_stage(
        "target_refine", model, [target], cfg, prop, opt, metrics,
        cfg.epochs_refine,
    )
    return model, metrics, prop


def train_target_only(cfg, target, metrics=None):
    """The TO baseline: refinement loss on target data alone, from scratch.

    Gets the stage 2 + stage 3 epoch budget so the comparison against
    the full pipeline holds compute fixed.
    """
    cfg.validate()
    metrics = metrics if metrics is not None else MetricsLog()
    model = _build_model(cfg, target.dim, "target-init")
    epochs = cfg.epochs_target + cfg.epochs_refine
    _, n_batches = _batch_plan([target.n], cfg.batch_size)
    total_steps = n_batches * epochs
    prop = _proportion_state(cfg, cfg.beta0_target, [target.domain], total_steps)
    opt = init_optimizer(model, cfg, total_steps)
    _run_stage(
        "target_refine", model, [target], cfg, prop, opt, metrics, epochs
    )
    return model, metrics, prop


@dataclass
class PipelineResult:
    source_model: ClusterModel
    target_model: ClusterModel
    source_metrics: MetricsLog
    target_metrics: MetricsLog
    target_proportions: np.ndarray
    oracle_queries: int


def run_pipeline(cfg, sources, target, oracle=None):
    """Run the configured variant end to end and collect the pieces.

    With no oracle given, stage 2 builds an in-process one from the
    stage 1 model, which is the single-machine workflow. The query
    counter in the result reflects that oracle only.
    """
    from .oracle import LocalOracle

    cfg.validate()
    if cfg.toggles.target_only:
        model, metrics, prop = train_target_only(cfg, target)
        return PipelineResult(
            source_model=None,
            target_model=model,
            source_metrics=MetricsLog(),
            target_metrics=metrics,
            target_proportions=prop.get(target.domain).copy(),
            oracle_queries=0,
        )

    source_model, source_metrics, _ = train_source(cfg, sources)
    queries = 0
    if oracle is None and not cfg.toggles.no_model_privacy:
        oracle = LocalOracle(source_model)
    target_metrics = MetricsLog()
    model, target_metrics, prop, _ = train_target_cluster(
        cfg, target, oracle=oracle, source_model=source_model,
        metrics=target_metrics,
    )
    if not cfg.toggles.adaptation_only:
        model, target_metrics, prop = refine_target(
            cfg, target, model, prop_state=prop, metrics=target_metrics
        )
    if oracle is not None and hasattr(oracle, "query_count"):
        queries = oracle.query_count
    return PipelineResult(
        source_model=source_model,
        target_model=model,
        source_metrics=source_metrics,
        target_metrics=target_metrics,
        target_proportions=prop.get(target.domain).copy(),
        oracle_queries=queries,
    )
