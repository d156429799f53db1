"""Command-line runner: config parsing, report layout, exit codes, determinism."""

import json
from pathlib import Path

import numpy as np
import pytest

from spikecl.cli import (EXIT_CONFIG, EXIT_OK, EXIT_TRAINING, evaluate, main,
                         parse_arch, run, _parse_shape)
from spikecl.errors import ConfigError, TrainingError
from spikecl.network import ConvSpec, DenseSpec

CONFIG = """\
[run]
seed = 0
out = {out}

[stream]
kind = synthetic
tasks = {tasks}
classes_per_task = 2
n_train = 60
n_test = 30

[network]
arch = dense12,dense8
input_shape = 1x3x3

[lif]
window = 2

[train]
epochs = 4
batch_size = 16
lr = 0.01

[similarity]
probe_size = 48

[replay]
capacity = 100
calib_epochs = 5
"""

CSV_NAMES = ("accuracy_matrix.csv", "similarity.csv", "pruning_rates.csv",
             "energy.csv")


def _write_config(tmp_path, tasks=2, name="run.ini", out="out"):
    path = tmp_path / name
    path.write_text(CONFIG.format(out=tmp_path / out, tasks=tasks))
    return path


class TestParseArch:
    def test_tokens(self):
        arch = parse_arch("conv8k3s2p1,conv16,dense64")
        assert arch == [ConvSpec(8, 3, 2, 1), ConvSpec(16, 3, 1, 1),
                        DenseSpec(64)]

    def test_defaults(self):
        assert parse_arch("conv4") == [ConvSpec(4, 3, 1, 1)]

    def test_bad_token(self):
        with pytest.raises(ConfigError, match="token"):
            parse_arch("dense64,pool2")

    def test_shape_parsing(self):
        assert _parse_shape("1x9x9") == (1, 9, 9)
        with pytest.raises(ConfigError, match="CxHxW"):
            _parse_shape("9x9")


class TestRun:
    def test_minimal_two_task_report(self, tmp_path):
        report = run(_write_config(tmp_path))
        assert len(report["per_task"]) == 2
        matrix = report["accuracy_matrix"]
        assert len(matrix) == 2 and [len(r) for r in matrix] == [1, 2]
        assert report["cil"]["accuracy"] is not None
        out = tmp_path / "out"
        for name in CSV_NAMES + ("checkpoint.npz", "report.json"):
            assert (out / name).exists()

    def test_same_seed_byte_identical_csvs(self, tmp_path):
        cfg = _write_config(tmp_path)
        run(cfg, out=tmp_path / "a")
        run(cfg, out=tmp_path / "b")
        for name in CSV_NAMES:
            assert (tmp_path / "a" / name).read_bytes() == \
                   (tmp_path / "b" / name).read_bytes()

    def test_missing_dataset_exits_config_error(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text(
            "[stream]\nkind = permuted\ntrain_images = /nonexistent\n"
            "train_labels = /nonexistent\ntest_images = /nonexistent\n"
            "test_labels = /nonexistent\n")
        assert main(["run", str(path)]) == EXIT_CONFIG
        assert "error" in capsys.readouterr().err

    def test_missing_config_exits_config_error(self, tmp_path):
        assert main(["run", str(tmp_path / "nope.ini")]) == EXIT_CONFIG

    def test_training_error_exits_three(self, tmp_path, monkeypatch):
        import spikecl.cli as cli

        def boom(*args, **kwargs):
            raise TrainingError("loss diverged (synthetic)")

        monkeypatch.setattr(cli, "learn_task", boom)
        assert main(["run", str(_write_config(tmp_path))]) == EXIT_TRAINING

    def test_main_exit_ok(self, tmp_path):
        assert main(["run", str(_write_config(tmp_path))]) == EXIT_OK

    def test_report_echo_reproducibility_fields(self, tmp_path):
        report = run(_write_config(tmp_path))
        assert report["config"]["run"]["seed"] == "0"
        assert set(report["artifacts"]) == set(CSV_NAMES) | {"checkpoint.npz"}
        assert all(len(v) == 64 for v in report["artifacts"].values())


class TestEvaluate:
    def test_matches_run_metrics(self, tmp_path):
        cfg = _write_config(tmp_path)
        report = run(cfg)
        ckpt = tmp_path / "out" / "checkpoint.npz"
        eval_report = evaluate(ckpt, cfg, out=tmp_path / "eval")
        assert eval_report["til"] == report["til"]
        assert eval_report["cil"] == report["cil"]

    def test_task_count_mismatch_rejected(self, tmp_path):
        cfg2 = _write_config(tmp_path, tasks=2)
        run(cfg2)
        ckpt = tmp_path / "out" / "checkpoint.npz"
        cfg3 = _write_config(tmp_path, tasks=3, name="three.ini", out="out3")
        assert main(["evaluate", str(ckpt), str(cfg3)]) == EXIT_CONFIG

    def test_corrupted_checkpoint_rejected(self, tmp_path):
        cfg = _write_config(tmp_path)
        bad = tmp_path / "corrupt.npz"
        bad.write_bytes(b"\x00" * 32)
        assert main(["evaluate", str(bad), str(cfg)]) == EXIT_CONFIG

    def test_seed_override_changes_stream(self, tmp_path):
        cfg = _write_config(tmp_path)
        run(cfg)
        ckpt = tmp_path / "out" / "checkpoint.npz"
        # a different seed builds a different stream: class lists still match
        # (synthetic ids are positional) but accuracies will differ
        r0 = evaluate(ckpt, cfg, out=tmp_path / "e0")
        r1 = evaluate(ckpt, cfg, seed=1, out=tmp_path / "e1")
        assert r0["til"] != r1["til"]
