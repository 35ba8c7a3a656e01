"""Command line workflow: data generation, training, serving, analysis.

Every subcommand writes its outputs under a run directory together with
a `config.resolved` file recording the exact settings used, so a run
can be reproduced from the directory alone. Training configuration
comes from built-in defaults, overridden by a flat `key = value` config
file, overridden by command line flags, in that order.
"""

import argparse
import dataclasses
import glob
import os
import signal
import sys
import threading

from .data import (
    SyntheticSpec,
    generate,
    load_csv,
    load_dataset,
    save_csv,
    save_dataset,
    subsample_imbalanced,
)
from .evaluation import cluster_usage, clustering_accuracy
from .model import encode, load_model, predict_from_features, save_model
from .numkit import derive_rng
from .oracle import OracleError, connect_oracle, start_server
from .pipeline import (
    MetricsLog,
    Toggles,
    TrainConfig,
    refine_target,
    run_pipeline,
    train_source,
    train_target_cluster,
    train_target_only,
)
from .report import write_report

import numpy as np


class ConfigError(Exception):
    """Bad config file or flag value; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config plumbing


def _parse_bool(raw):
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_dims(raw):
    raw = raw.strip()
    if not raw:
        return ()
    try:
        return tuple(int(v) for v in raw.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated ints, got {raw!r}") from None


_CONFIG_PARSERS = {
    "k": int,
    "encoder": str,
    "hidden_dims": _parse_dims,
    "feature_dim": int,
    "activation": str,
    "temperature": float,
    "batch_size": int,
    "epochs_source": int,
    "epochs_target": int,
    "epochs_refine": int,
    "eta0": float,
    "momentum": float,
    "weight_decay": float,
    "lambda_transport": float,
    "lambda_mi": float,
    "lambda_mix": float,
    "lambda_kd": float,
    "epsilon": float,
    "sinkhorn_max_iters": int,
    "marginal_tol": float,
    "min_marginal_clamp": float,
    "beta0_source": float,
    "beta0_target": float,
    "beta_min_ratio": float,
    "gamma": float,
    "tau": float,
    "alpha": float,
    "full_dataset_ot": _parse_bool,
    "seed": int,
}

TOGGLE_NAMES = (
    "no-prototype-clustering",
    "no-mi",
    "no-cutmix",
    "no-temporal-ensemble",
    "no-model-privacy",
    "pooled-source",
    "target-only",
    "adaptation-only",
)

# The ablation suite: one switch flipped at a time against the full method.
ABLATION_TOGGLES = (
    "no-prototype-clustering",
    "no-mi",
    "no-cutmix",
    "no-temporal-ensemble",
    "no-model-privacy",
    "pooled-source",
)


def _toggles_from_names(names):
    fields = {}
    for name in names:
        key = name.replace("-", "_")
        if key not in Toggles.__dataclass_fields__:
            raise ConfigError(f"unknown toggle {name!r}")
        fields[key] = True
    return Toggles(**fields)


def _read_config_file(path):
    values = {}
    try:
        fh = open(path)
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, raw = stripped.partition("=")
            values[key.strip().replace("-", "_")] = raw.strip()
    return values


def _parse_config_value(key, raw):
    try:
        return _CONFIG_PARSERS[key](raw)
    except ConfigError:
        raise
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def resolve_config(config_path=None, flag_values=None, toggle_names=None):
    """Defaults < config file < flags; returns a validated TrainConfig."""
    merged = {}
    toggles = None
    if config_path:
        for key, raw in _read_config_file(config_path).items():
            if key == "toggles":
                names = [n.strip() for n in raw.split(",") if n.strip()]
                toggles = _toggles_from_names(names)
            elif key in _CONFIG_PARSERS:
                merged[key] = _parse_config_value(key, raw)
            else:
                raise ConfigError(f"unknown config key {key!r}")
    for key, raw in (flag_values or {}).items():
        if raw is not None:
            merged[key] = _parse_config_value(key, raw)
    if toggle_names:
        toggles = _toggles_from_names(toggle_names)
    if toggles is not None:
        merged["toggles"] = toggles
    try:
        cfg = TrainConfig(**merged)
        cfg.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return cfg


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_resolved(path, cfg=None, extras=None):
    lines = []
    if cfg is not None:
        for f in dataclasses.fields(type(cfg)):
            value = getattr(cfg, f.name)
            if f.name == "toggles":
                names = [
                    t.replace("_", "-")
                    for t in value.__dataclass_fields__
                    if getattr(value, t)
                ]
                lines.append(f"toggles = {','.join(names) if names else 'none'}")
            else:
                lines.append(f"{f.name} = {_format_value(value)}")
    for key in sorted(extras or {}):
        lines.append(f"{key} = {_format_value(extras[key])}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _add_config_flags(parser):
    group = parser.add_argument_group(
        "training configuration",
        "key defaults: epsilon 0.01, tau 0.6, alpha 0.3, gamma 0.1, "
        "beta0 0.9999 (source) / 0.99 (target), batch 64, eta0 0.01, "
        "momentum 0.9, weight decay 0.001",
    )
    group.add_argument("--config", help="flat key = value config file")
    for key in _CONFIG_PARSERS:
        group.add_argument(
            f"--{key.replace('_', '-')}",
            dest=f"cfg_{key}",
            metavar="V",
            help=f"override {key}",
        )
    group.add_argument(
        "--toggle",
        action="append",
        choices=TOGGLE_NAMES,
        default=None,
        help="flip an ablation switch (repeatable); overrides config-file toggles",
    )


def _config_from_args(args, toggle_names=None):
    flags = {
        key: getattr(args, f"cfg_{key}")
        for key in _CONFIG_PARSERS
        if hasattr(args, f"cfg_{key}")
    }
    if toggle_names is None:
        toggle_names = args.toggle
    return resolve_config(args.config, flags, toggle_names)


# ---------------------------------------------------------------------------
# dataset I/O helpers


def read_dataset(path, domain):
    if path.endswith(".csv"):
        return load_csv(path, domain)
    return load_dataset(path, domain)


def _discover_sources(data_dir):
    for ext in ("pcdd", "csv"):
        files = sorted(glob.glob(os.path.join(data_dir, f"source*.{ext}")))
        if files:
            return [
                read_dataset(f, os.path.splitext(os.path.basename(f))[0])
                for f in files
            ]
    raise ConfigError(f"no source*.pcdd or source*.csv files under {data_dir}")


def _discover_target(data):
    if os.path.isdir(data):
        for ext in ("pcdd", "csv"):
            candidate = os.path.join(data, f"target.{ext}")
            if os.path.exists(candidate):
                return read_dataset(candidate, "target")
        raise ConfigError(f"no target.pcdd or target.csv under {data}")
    return read_dataset(data, "target")


def _fmt(v):
    return f"{float(v):.12g}"


def _evaluate_model(model, dataset, k):
    probs = predict_from_features(model, encode(model, dataset.features)[0])
    pred = np.argmax(probs, axis=1)
    usage, min_usage = cluster_usage(pred, k)
    acc = None
    if dataset.labels is not None:
        acc, _ = clustering_accuracy(pred, dataset.labels, k)
    return acc, usage, min_usage


# ---------------------------------------------------------------------------
# subcommands


_PRESETS = {
    "default": dict(
        k=5, dim=20, n_sources=3, samples_per_domain=500, centroid_spread=3.0,
        rotation_scale=0.05, translation_scale=0.3, noise_sigma=0.9,
    ),
    "imbalanced": dict(
        k=5, dim=20, n_sources=3, samples_per_domain=500, centroid_spread=3.0,
        rotation_scale=0.05, translation_scale=0.3, noise_sigma=0.9,
    ),
    "tiny": dict(
        k=3, dim=8, n_sources=2, samples_per_domain=120, centroid_spread=3.0,
        rotation_scale=0.1, translation_scale=0.5, noise_sigma=0.5,
    ),
}


def cmd_gen_data(args):
    fields = dict(_PRESETS[args.preset])
    for key in ("k", "dim", "n_sources", "samples_per_domain", "centroid_spread",
                "rotation_scale", "translation_scale", "noise_sigma"):
        override = getattr(args, key)
        if override is not None:
            fields[key] = override
    spec = SyntheticSpec(seed=args.seed, **fields)
    try:
        spec.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from None
    sources, target = generate(spec)
    subsample = args.subsample_target or args.preset == "imbalanced"
    if subsample:
        target = subsample_imbalanced(
            target, spec.seed, drop_fraction=args.drop_fraction, k=spec.k
        )

    os.makedirs(args.out, exist_ok=True)
    for ds in sources + [target]:
        save_dataset(ds, os.path.join(args.out, f"{ds.domain}.pcdd"))
        if args.csv:
            save_csv(ds, os.path.join(args.out, f"{ds.domain}.csv"))
    extras = {key: fields[key] for key in fields}
    extras.update(
        preset=args.preset, seed=args.seed,
        subsample_target=subsample, drop_fraction=args.drop_fraction,
    )
    write_resolved(os.path.join(args.out, "config.resolved"), extras=extras)
    print(f"wrote {len(sources)} source domains + target under {args.out}")
    return 0


def cmd_train_source(args):
    cfg = _config_from_args(args)
    sources = _discover_sources(args.data)
    os.makedirs(args.out, exist_ok=True)
    model, metrics, _ = train_source(cfg, sources)
    save_model(model, os.path.join(args.out, "source.ckpt"))
    metrics.write(os.path.join(args.out, "metrics.log"))
    metrics.write_timing(os.path.join(args.out, "timing.log"))
    write_resolved(
        os.path.join(args.out, "config.resolved"), cfg, {"data": args.data}
    )
    last = metrics.records[-1]
    acc = _fmt(last.acc) if last.acc is not None else "na"
    print(f"source model trained: acc={acc} min_usage={_fmt(last.min_usage)}")
    return 0


def cmd_serve(args):
    model = load_model(args.model)
    host, _, port = args.addr.rpartition(":")
    if not host:
        raise ConfigError(f"bad --addr {args.addr!r}, want host:port")
    try:
        port = int(port)
    except ValueError:
        raise ConfigError(f"bad port in --addr {args.addr!r}") from None
    server, thread = start_server(model, host, port)
    stop = threading.Event()

    def _handle(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, _handle)
    signal.signal(signal.SIGTERM, _handle)
    print(f"listening on tcp://{host}:{server.port}", flush=True)
    stop.wait()
    server.shutdown()
    server.server_close()
    thread.join()
    print("shut down")
    return 0


def _train_target_impl(cfg, target, oracle_addr, source_model_path):
    metrics = MetricsLog()
    if cfg.toggles.target_only:
        model, metrics, _ = train_target_only(cfg, target, metrics=metrics)
        return model, metrics
    source_model = None
    oracle = None
    if cfg.toggles.no_model_privacy:
        if not source_model_path:
            raise ConfigError("--source-model is required with no-model-privacy")
        source_model = load_model(source_model_path)
    else:
        if not oracle_addr:
            raise ConfigError("--oracle is required unless target-only is set")
        oracle = connect_oracle(oracle_addr)
    model, metrics, prop, _ = train_target_cluster(
        cfg, target, oracle=oracle, source_model=source_model, metrics=metrics
    )
    if not cfg.toggles.adaptation_only:
        model, metrics, prop = refine_target(
            cfg, target, model, prop_state=prop, metrics=metrics
        )
    if oracle is not None and hasattr(oracle, "close"):
        oracle.close()
    return model, metrics


def cmd_train_target(args):
    cfg = _config_from_args(args)
    target = _discover_target(args.data)
    os.makedirs(args.out, exist_ok=True)
    model, metrics = _train_target_impl(cfg, target, args.oracle, args.source_model)
    save_model(model, os.path.join(args.out, "target.ckpt"))
    metrics.write(os.path.join(args.out, "metrics.log"))
    metrics.write_timing(os.path.join(args.out, "timing.log"))
    extras = {"data": args.data}
    if args.oracle:
        extras["oracle"] = args.oracle
    if args.source_model:
        extras["source_model"] = args.source_model
    write_resolved(os.path.join(args.out, "config.resolved"), cfg, extras)
    last = metrics.records[-1]
    acc = _fmt(last.acc) if last.acc is not None else "na"
    print(f"target model trained: acc={acc} min_usage={_fmt(last.min_usage)}")
    return 0


def cmd_eval(args):
    model = load_model(args.model)
    target = _discover_target(args.data)
    acc, usage, min_usage = _evaluate_model(model, target, model.k)
    acc_txt = _fmt(acc) if acc is not None else "na"
    usage_txt = ",".join(_fmt(v) for v in usage)
    print(
        f"n={target.n} k={model.k} acc={acc_txt} "
        f"min_usage={_fmt(min_usage)} usage={usage_txt}"
    )
    return 0


def _run_variant(cfg, sources, target, out_dir):
    result = run_pipeline(cfg, sources, target)
    os.makedirs(out_dir, exist_ok=True)
    combined = MetricsLog()
    combined.records = result.source_metrics.records + result.target_metrics.records
    combined.write(os.path.join(out_dir, "metrics.log"))
    combined.write_timing(os.path.join(out_dir, "timing.log"))
    save_model(result.target_model, os.path.join(out_dir, "target.ckpt"))
    if result.source_model is not None:
        save_model(result.source_model, os.path.join(out_dir, "source.ckpt"))
    write_resolved(os.path.join(out_dir, "config.resolved"), cfg)
    acc, _, _ = _evaluate_model(result.target_model, target, cfg.k)
    return acc


def cmd_ablate(args):
    # here --toggle picks which ablations to run; the base config stays full
    cfg = _config_from_args(args, toggle_names=())
    sources = _discover_sources(args.data)
    target = _discover_target(args.data)
    variants = [("full", cfg)]
    chosen = args.toggle or list(ABLATION_TOGGLES)
    for name in chosen:
        variants.append(
            (name, dataclasses.replace(cfg, toggles=_toggles_from_names([name])))
        )
    for name, variant_cfg in variants:
        acc = _run_variant(
            variant_cfg, sources, target, os.path.join(args.out, name)
        )
        print(f"toggle={name} acc={_fmt(acc) if acc is not None else 'na'}", flush=True)
    return 0


def cmd_sensitivity(args):
    cfg = _config_from_args(args)
    sources = _discover_sources(args.data)
    target = _discover_target(args.data)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad --values {args.values!r}") from None
    if not values:
        raise ConfigError("--values is empty")
    field = f"lambda_{args.vary}"
    for value in values:
        variant = dataclasses.replace(cfg, **{field: value})
        out_dir = os.path.join(args.out, f"{field}_{value:g}")
        acc = _run_variant(variant, sources, target, out_dir)
        print(
            f"coefficient={field} value={value:g} "
            f"acc={_fmt(acc) if acc is not None else 'na'}",
            flush=True,
        )
    return 0


def cmd_report(args):
    written = write_report(args.metrics, args.out, figures=not args.no_figures)
    for path in written:
        print(path)
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="protoclust",
        description="Multi-domain prototype clustering with transport alignment "
        "and hard-label distillation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-domain dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", choices=sorted(_PRESETS), default="default",
                   help="dataset preset; imbalanced also thins the target")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("--dim", type=int, help="feature width")
    p.add_argument("--n-sources", dest="n_sources", type=int)
    p.add_argument("--samples", dest="samples_per_domain", type=int)
    p.add_argument("--centroid-spread", dest="centroid_spread", type=float)
    p.add_argument("--rotation-scale", dest="rotation_scale", type=float)
    p.add_argument("--translation-scale", dest="translation_scale", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--subsample-target", action="store_true",
                   help="thin the first floor(k/2) classes of the target")
    p.add_argument("--drop-fraction", type=float, default=0.7,
                   help="fraction dropped from thinned classes (default 0.7)")
    p.add_argument("--csv", action="store_true", help="also write csv copies")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="stage 1: train the source model")
    p.add_argument("--data", required=True, help="directory with source*.pcdd")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("serve", help="serve a model as a hard-label oracle")
    p.add_argument("--model", required=True, help="checkpoint to serve")
    p.add_argument("--addr", default="127.0.0.1:7777", help="host:port to bind")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser(
        "train-target",
        help="stages 2+3: distill from an oracle, then refine on target data",
    )
    p.add_argument("--data", required=True, help="target.pcdd file or directory")
    p.add_argument("--oracle", help="local:<ckpt> or tcp://host:port")
    p.add_argument("--source-model",
                   help="source checkpoint (only for no-model-privacy)")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_target)

    p = sub.add_parser("eval", help="clustering metrics for a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the toggle ablation suite")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sensitivity", help="sweep one loss coefficient")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vary", choices=("transport", "mi", "mix"), required=True)
    p.add_argument("--values", default="0.6,1,2,5",
                   help="comma-separated coefficients (default 0.6,1,2,5)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("report", help="emit csv tables and figures for a run")
    p.add_argument("--metrics", required=True, help="metrics.log path")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def run(argv=None):
    """Parse argv and execute; returns the process exit code."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OracleError as err:
        print(f"oracle error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main():
    return run()
