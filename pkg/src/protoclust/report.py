"""Turn a metrics log into analysis-ready CSV tables and figures.

The metrics log is the single source of truth for a run; this module
only reshapes it. Three tables come out: per-epoch loss curves (long
format), per-epoch clustering quality, and the final estimated cluster
proportions per domain, plus a rendered PNG for the curves and the
proportion bars.
"""

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def parse_metrics(path):
    """Read metrics lines back into dict records."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = {"losses": {}, "proportions": {}}
            for token in line.split(" "):
                if "=" not in token:
                    raise ValueError(f"{path}:{lineno}: bad token {token!r}")
                key, value = token.split("=", 1)
                if key == "stage":
                    rec["stage"] = value
                elif key == "epoch":
                    rec["epoch"] = int(value)
                elif key.startswith("loss_"):
                    rec["losses"][key[len("loss_"):]] = float(value)
                elif key == "acc":
                    rec["acc"] = None if value == "na" else float(value)
                elif key == "min_usage":
                    rec["min_usage"] = float(value)
                elif key == "usage":
                    rec["usage"] = [float(v) for v in value.split(",")]
                elif key.startswith("proportions_"):
                    rec["proportions"][key[len("proportions_"):]] = [
                        float(v) for v in value.split(",")
                    ]
                else:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            for need in ("stage", "epoch"):
                if need not in rec:
                    raise ValueError(f"{path}:{lineno}: missing {need}")
            records.append(rec)
    if not records:
        raise ValueError(f"{path}: no records")
    return records


def write_loss_curves(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "epoch", "term", "value"])
        for rec in records:
            for term, value in rec["losses"].items():
                writer.writerow([rec["stage"], rec["epoch"], term, repr(value)])


def write_quality(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "epoch", "acc", "min_usage"])
        for rec in records:
            acc = "" if rec.get("acc") is None else repr(rec["acc"])
            writer.writerow([rec["stage"], rec["epoch"], acc, repr(rec["min_usage"])])


def write_proportions(records, path):
    """Final estimated mixing vector per (stage, domain), one row per cluster."""
    finals = {}
    for rec in records:
        for domain, props in rec["proportions"].items():
            finals[(rec["stage"], domain)] = props
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "domain", "cluster", "proportion"])
        for (stage, domain), props in finals.items():
            for cluster, value in enumerate(props):
                writer.writerow([stage, domain, cluster, repr(value)])
    return finals


def render_loss_curves(records, path):
    stages = []
    for rec in records:
        if rec["stage"] not in stages:
            stages.append(rec["stage"])
    fig, axes = plt.subplots(1, len(stages), figsize=(5 * len(stages), 4), squeeze=False)
    for ax, stage in zip(axes[0], stages):
        stage_recs = [r for r in records if r["stage"] == stage]
        terms = []
        for r in stage_recs:
            for t in r["losses"]:
                if t not in terms:
                    terms.append(t)
        for term in terms:
            xs = [r["epoch"] for r in stage_recs if term in r["losses"]]
            ys = [r["losses"][term] for r in stage_recs if term in r["losses"]]
            ax.plot(xs, ys, label=term)
        ax.set_title(stage)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_proportions(finals, path):
    items = sorted(finals.items())
    fig, axes = plt.subplots(1, len(items), figsize=(4 * len(items), 3.5), squeeze=False)
    for ax, ((stage, domain), props) in zip(axes[0], items):
        ax.bar(range(len(props)), props)
        ax.set_title(f"{domain} ({stage})")
        ax.set_xlabel("cluster")
        ax.set_ylabel("estimated proportion")
        ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(metrics_path, out_dir, figures=True):
    """Emit all tables (and optionally figures) for one metrics log.

    Returns the list of files written.
    """
    records = parse_metrics(metrics_path)
    os.makedirs(out_dir, exist_ok=True)
    written = []

    path = os.path.join(out_dir, "loss_curves.csv")
    write_loss_curves(records, path)
    written.append(path)

    path = os.path.join(out_dir, "quality.csv")
    write_quality(records, path)
    written.append(path)

    path = os.path.join(out_dir, "proportions.csv")
    finals = write_proportions(records, path)
    written.append(path)

    if figures:
        path = os.path.join(out_dir, "loss_curves.png")
        render_loss_curves(records, path)
        written.append(path)
        if finals:
            path = os.path.join(out_dir, "proportions.png")
            render_proportions(finals, path)
            written.append(path)
    return written
