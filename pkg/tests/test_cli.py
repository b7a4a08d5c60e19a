import json
import os

import numpy as np
import pytest

from selfmask.cli import main


def test_no_command_prints_usage(capsys):
    assert main([]) == 1
    assert "selfmask" in capsys.readouterr().out


def test_unknown_command_exits_1():
    assert main(["frobnicate"]) == 1


def test_gen_data(tmp_path, capsys):
    code = main(["gen-data", "--kind", "blobs",
                 "--params", '{"classes": 3, "per_class": 10}',
                 "--seed", "1", "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "data.npz").exists()
    out = capsys.readouterr().out
    assert "3 classes" in out


def test_gen_data_pair(tmp_path):
    code = main(["gen-data", "--kind", "shifted-blobs",
                 "--params", '{"classes": 2, "per_class": 10}',
                 "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "source.npz").exists()
    assert (tmp_path / "target.npz").exists()


def test_gen_data_bad_kind_exit_1(capsys):
    assert main(["gen-data", "--kind", "nope"]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_config_file_exit_1(tmp_path, capsys):
    missing = str(tmp_path / "absent.json")
    code = main(["smn", "--config", missing, "--out", str(tmp_path / "o")])
    assert code == 1
    assert missing in capsys.readouterr().err


def experiment_args(tmp_path, *extra):
    return ["--set", 'dataset_params={"classes": 3, "per_class": 20, "dim": 8}',
            "--set", "backbone_dims=[8, 12, 6]",
            "--set", "pretrain.epochs=5",
            "--set", "train.epochs=2",
            "--set", "train.prototype_count=6",
            "--out", str(tmp_path), *extra]


def test_smn_end_to_end(tmp_path, capsys):
    code = main(["smn", *experiment_args(tmp_path)])
    assert code == 0
    summary = json.loads(open(tmp_path / "summary.json").read())
    assert summary["method"] == "smn"
    assert (tmp_path / "adapted.mask").exists()


def test_compress_subcommand(tmp_path, capsys):
    assert main(["smn", *experiment_args(tmp_path)]) == 0
    capsys.readouterr()
    code = main(["compress", "--masks", str(tmp_path / "adapted.mask"),
                 "--codec", "deflate"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert "deflate" in doc["reductions"]


def test_report_sparsity_subcommand(tmp_path, capsys):
    assert main(["smn", *experiment_args(tmp_path)]) == 0
    capsys.readouterr()
    code = main(["report-sparsity", "--masks", str(tmp_path / "adapted.mask")])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "layer,id,n_params,n_active,fraction"
    assert lines[-1].startswith("overall")


def test_verify_theorems_exact(tmp_path, capsys):
    code = main(["verify-theorems", "--transform", "composed", "--mode", "exact",
                 "--steps", "100", "--out", str(tmp_path)])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["identical"] is True


def test_smn_out_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SMN_OUT_DIR", str(tmp_path / "envout"))
    code = main(["gen-data", "--kind", "blobs",
                 "--params", '{"classes": 2, "per_class": 5}'])
    assert code == 0
    assert (tmp_path / "envout" / "data.npz").exists()
