import os

import numpy as np
import pytest

from protoclust.cli import ConfigError, resolve_config, run
from protoclust.data import load_dataset
from protoclust.pipeline import Toggles

FAST = ["--k", "3", "--feature-dim", "8", "--hidden-dims", "16",
        "--batch-size", "32", "--epochs-source", "2",
        "--epochs-target", "2", "--epochs-refine", "1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    data = root / "data"
    assert run(["gen-data", "--out", str(data), "--preset", "tiny",
                "--csv"]) == 0
    src = root / "src_run"
    assert run(["train-source", "--data", str(data), "--out", str(src)]
               + FAST) == 0
    tgt = root / "tgt_run"
    assert run(["train-target", "--data", str(data), "--out", str(tgt),
                "--oracle", f"local:{src / 'source.ckpt'}"] + FAST) == 0
    return root, data, src, tgt


# --- gen-data ---


def test_gen_data_writes_all_domains(workspace):
    _, data, _, _ = workspace
    names = sorted(os.listdir(data))
    assert names == ["config.resolved", "source0.csv", "source0.pcdd",
                     "source1.csv", "source1.pcdd", "target.csv",
                     "target.pcdd"]
    ds = load_dataset(str(data / "target.pcdd"), "target")
    assert ds.n == 120 and ds.dim == 8


def test_gen_data_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["gen-data", "--out", str(out), "--preset", "tiny"]) == 0
    assert (a / "target.pcdd").read_bytes() == (b / "target.pcdd").read_bytes()
    assert (a / "config.resolved").read_bytes() == \
        (b / "config.resolved").read_bytes()


def test_gen_data_imbalanced_preset_thins_target(tmp_path):
    out = tmp_path / "imb"
    assert run(["gen-data", "--out", str(out), "--preset", "imbalanced",
                "--samples", "200", "--seed", "3"]) == 0
    target = load_dataset(str(out / "target.pcdd"), "target")
    assert target.n < 200
    counts = np.bincount(target.labels, minlength=5)
    assert counts[:2].sum() < counts[2:].min() * 2


def test_gen_data_rejects_bad_shape(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path / "x"), "--k", "1"]) == 2


# --- config resolution ---


def test_config_file_then_flags_precedence(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("# comment\nepsilon = 0.05\ntau = 0.5\n")
    cfg = resolve_config(str(path), {"epsilon": "0.02"}, None)
    assert cfg.epsilon == 0.02   # flag wins
    assert cfg.tau == 0.5        # file beats default
    assert cfg.alpha == 0.3      # untouched default


def test_config_file_toggles_and_override(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("toggles = no-mi, no-cutmix\n")
    cfg = resolve_config(str(path))
    assert cfg.toggles == Toggles(no_mi=True, no_cutmix=True)
    cfg = resolve_config(str(path), None, ["pooled-source"])
    assert cfg.toggles == Toggles(pooled_source=True)


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("learning_rate = 0.1\n")
    with pytest.raises(ConfigError):
        resolve_config(str(path))


def test_config_rejects_bad_value(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("epsilon = fast\n")
    with pytest.raises(ConfigError):
        resolve_config(str(path))


def test_cli_maps_config_errors_to_exit_2(tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("warp_speed = 9\n")
    code = run(["train-source", "--data", str(tmp_path), "--out",
                str(tmp_path / "o"), "--config", str(cfg)])
    assert code == 2


def test_missing_data_dir_exits_2(tmp_path):
    assert run(["train-source", "--data", str(tmp_path),
                "--out", str(tmp_path / "o")]) == 2
    assert run(["eval", "--model", "nope.ckpt", "--data", str(tmp_path)]) != 0


def test_argparse_usage_error_raises_system_exit():
    with pytest.raises(SystemExit):
        run([])
    with pytest.raises(SystemExit):
        run(["train-source"])  # missing required flags


# --- training commands ---


def test_train_source_outputs(workspace):
    _, _, src, _ = workspace
    names = sorted(os.listdir(src))
    assert names == ["config.resolved", "metrics.log", "source.ckpt",
                     "timing.log"]
    lines = (src / "metrics.log").read_text().splitlines()
    assert len(lines) == 2
    assert all(line.startswith("stage=source") for line in lines)
    resolved = (src / "config.resolved").read_text()
    assert "k = 3\n" in resolved
    assert "toggles = none\n" in resolved


def test_train_target_requires_an_oracle(workspace, tmp_path):
    _, data, _, _ = workspace
    code = run(["train-target", "--data", str(data),
                "--out", str(tmp_path / "o")] + FAST)
    assert code == 2


def test_train_target_stages_logged(workspace):
    _, _, _, tgt = workspace
    lines = (tgt / "metrics.log").read_text().splitlines()
    stages = [line.split(" ", 1)[0] for line in lines]
    assert stages == ["stage=target_cluster"] * 2 + ["stage=target_refine"]


def test_train_target_target_only_needs_no_oracle(workspace, tmp_path):
    _, data, _, _ = workspace
    out = tmp_path / "to"
    assert run(["train-target", "--data", str(data), "--out", str(out),
                "--toggle", "target-only"] + FAST) == 0
    lines = (out / "metrics.log").read_text().splitlines()
    assert all(line.startswith("stage=target_refine") for line in lines)


def test_eval_line_format(workspace, capsys):
    _, data, _, tgt = workspace
    assert run(["eval", "--model", str(tgt / "target.ckpt"),
                "--data", str(data)]) == 0
    out = capsys.readouterr().out.strip()
    fields = dict(part.split("=", 1) for part in out.split())
    assert fields["n"] == "120"
    assert fields["k"] == "3"
    assert 0.0 <= float(fields["acc"]) <= 1.0
    assert len(fields["usage"].split(",")) == 3


def test_rerun_reproduces_artifacts_byte_for_byte(workspace, tmp_path):
    _, data, src, _ = workspace
    again = tmp_path / "again"
    assert run(["train-source", "--data", str(data), "--out", str(again)]
               + FAST) == 0
    assert (again / "source.ckpt").read_bytes() == \
        (src / "source.ckpt").read_bytes()
    assert (again / "metrics.log").read_bytes() == \
        (src / "metrics.log").read_bytes()


# --- suites ---


def test_ablate_single_toggle(workspace, tmp_path, capsys):
    _, data, _, _ = workspace
    out = tmp_path / "ablate"
    assert run(["ablate", "--data", str(data), "--out", str(out),
                "--toggle", "no-mi"] + FAST) == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed[0].startswith("toggle=full acc=")
    assert printed[1].startswith("toggle=no-mi acc=")
    full_log = (out / "full" / "metrics.log").read_text()
    nomi_log = (out / "no-mi" / "metrics.log").read_text()
    assert "loss_mi=" in full_log
    assert "loss_mi=" not in nomi_log


def test_sensitivity_sweep_dirs_and_lines(workspace, tmp_path, capsys):
    _, data, _, _ = workspace
    out = tmp_path / "sweep"
    assert run(["sensitivity", "--data", str(data), "--out", str(out),
                "--vary", "mi", "--values", "0.5,2"] + FAST) == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed[0].startswith("coefficient=lambda_mi value=0.5 acc=")
    assert printed[1].startswith("coefficient=lambda_mi value=2 acc=")
    assert sorted(os.listdir(out)) == ["lambda_mi_0.5", "lambda_mi_2"]


def test_sensitivity_rejects_bad_values(workspace, tmp_path):
    _, data, _, _ = workspace
    assert run(["sensitivity", "--data", str(data),
                "--out", str(tmp_path / "s"), "--vary", "mi",
                "--values", "fast,slow"]) == 2


def test_report_from_real_metrics(workspace, tmp_path, capsys):
    _, _, src, _ = workspace
    out = tmp_path / "report"
    assert run(["report", "--metrics", str(src / "metrics.log"),
                "--out", str(out)]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert len(printed) == 5
    assert all(os.path.exists(p) for p in printed)
    assert run(["report", "--metrics", str(src / "metrics.log"),
                "--out", str(tmp_path / "r2"), "--no-figures"]) == 0
