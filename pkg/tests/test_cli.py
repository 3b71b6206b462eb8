import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from hardmetric import gsam as gsam_module
from hardmetric.cli import file_digest, main
from hardmetric.data import load
from hardmetric.evaluation import EvalTable
from hardmetric.trainer import RunLog, load_checkpoint

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def workspace(tmp_path):
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump({"n_ids": 6, "views": [0, 90], "seqs_per_cell": 2, "n_frames": 6, "d_in": 5,
                                    "confusion_pairs": 2, "seed": 1}))
    config = tmp_path / "train.yaml"
    config.write_text(yaml.safe_dump({"model": {"d_in": 5, "d_hid": 7, "n_dim": 4}, "P": 3, "K": 2,
                                      "total_iters": 6, "seed": 3}))
    data = tmp_path / "data.hmds"
    assert main(["gen-data", str(spec), str(data)]) == 0
    return tmp_path, spec, config, data


def manifest(path):
    return json.loads(Path(path).read_text())


def test_gen_data_digest_and_manifest(workspace, capsys):
    tmp, spec, _, data = workspace
    capsys.readouterr()
    other = tmp / "again.hmds"
    assert main(["gen-data", str(spec), str(other)]) == 0
    printed = capsys.readouterr().out.strip()
    assert printed == file_digest(other) == file_digest(data)
    m = manifest(str(other) + ".manifest.json")
    assert m["dataset_sha256"] == printed and m["artifacts"] == [str(other)]
    assert {"command", "config", "wall_clock_seconds", "git_describe"} <= set(m)
    assert load(other).n_ids == 6


def test_gen_data_defaults_and_overrides(tmp_path):
    out = tmp_path / "d.hmds"
    assert main(["gen-data", str(CONFIGS / "dataset_default.yaml"), str(out), "--set", "n_ids=4",
                 "--set", "confusion_pairs=1"]) == 0
    assert load(out).n_ids == 4


def test_gen_data_errors(tmp_path, capsys):
    assert main(["gen-data", str(tmp_path / "nope.yaml"), str(tmp_path / "d.hmds")]) == 2
    assert "not found" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("n_ids: 1\n")
    assert main(["gen-data", str(bad), str(tmp_path / "d.hmds")]) == 2
    assert "n_ids" in capsys.readouterr().err


def test_train_smoke_and_reproducibility(workspace):
    tmp, _, config, data = workspace
    for run_dir in ("a", "b"):
        assert main(["train", str(config), str(data), str(tmp / run_dir), "--iters", "1"]) == 0
    assert (tmp / "a" / "runlog.csv").read_bytes() == (tmp / "b" / "runlog.csv").read_bytes()
    assert len(RunLog.from_csv(tmp / "a" / "runlog.csv").records) == 1
    m = manifest(tmp / "a" / "manifest.json")
    assert m["dataset_sha256"] == file_digest(data) and m["config"]["total_iters"] == 1
    for artifact in m["artifacts"]:
        assert Path(artifact).is_file()


def test_flags_override_file_values(workspace):
    tmp, _, config, data = workspace
    assert main(["train", str(config), str(data), str(tmp / "r"), "--iters", "2", "--seed", "9",
                 "--set", "gsam.tau=0.5"]) == 0
    _, cfg = load_checkpoint(tmp / "r" / "checkpoint.hmck")
    assert (cfg.total_iters, cfg.seed, cfg.gsam.tau) == (2, 9, 0.5)


def test_train_resume_matches_uninterrupted(workspace):
    tmp, _, config, data = workspace
    assert main(["train", str(config), str(data), str(tmp / "full"), "--set", "checkpoint_every=3"]) == 0
    mid = tmp / "full" / "checkpoint_0000003.hmck"
    assert main(["train", str(config), str(data), str(tmp / "resumed"), "--set", "checkpoint_every=3",
                 "--resume", str(mid)]) == 0
    full = RunLog.from_csv(tmp / "full" / "runlog.csv")
    assert RunLog.from_csv(tmp / "resumed" / "runlog.csv") == full.tail(3)
    assert main(["train", str(config), str(data), str(tmp / "x"), "--seed", "5", "--resume", str(mid)]) == 2


def test_train_numeric_failure_exits_3(workspace, monkeypatch, capsys):
    tmp, _, config, data = workspace
    real = gsam_module.gsam_loss_and_grad
    monkeypatch.setattr(gsam_module, "gsam_loss_and_grad",
                        lambda *a: (float("inf"),) + tuple(real(*a)[1:]))
    assert main(["train", str(config), str(data), str(tmp / "r")]) == 3
    assert "iteration 1" in capsys.readouterr().err


def test_train_missing_inputs(workspace):
    tmp, _, config, data = workspace
    assert main(["train", str(tmp / "none.yaml"), str(data), str(tmp / "r")]) == 2
    assert main(["train", str(config), str(tmp / "none.hmds"), str(tmp / "r")]) == 2
    assert main(["train", str(config), str(data), str(tmp / "r"), "--set", "nonsense"]) == 2


def test_eval_outputs(workspace, capsys):
    tmp, _, config, data = workspace
    assert main(["train", str(config), str(data), str(tmp / "r")]) == 0
    ckpt = tmp / "r" / "checkpoint.hmck"
    capsys.readouterr()
    assert main(["eval", str(ckpt), str(data), str(tmp / "self.csv"), "--self-retrieval"]) == 0
    assert "grand mean rank-1: 100.0" in capsys.readouterr().out
    assert main(["eval", str(ckpt), str(data), str(tmp / "t.csv")]) == 0
    text = capsys.readouterr().out
    table = EvalTable.from_csv(tmp / "t.csv")
    assert table.to_csv() in text
    assert EvalTable.parse_csv(table.to_csv()) == table
    assert manifest(tmp / "t.csv.manifest.json")["artifacts"] == [str(tmp / "t.csv")]


def test_eval_missing_or_corrupt_checkpoint(workspace):
    tmp, _, _, data = workspace
    assert main(["eval", str(tmp / "none.hmck"), str(data), str(tmp / "t.csv")]) == 2
    bad = tmp / "bad.hmck"
    bad.write_bytes(b"HMCK1 but not really")
    assert main(["eval", str(bad), str(data), str(tmp / "t.csv")]) == 4


def test_ablate_and_report(workspace):
    tmp, _, config, data = workspace
    for run_dir in ("a", "b"):
        assert main(["ablate", str(config), str(data), str(tmp / run_dir), "--iters", "3"]) == 0
    comparison = (tmp / "a" / "comparison.csv").read_text().splitlines()
    assert comparison[0] == "condition,baseline,+D,+G,++"
    assert (tmp / "a" / "ablation.svg").read_bytes() == (tmp / "b" / "ablation.svg").read_bytes()
    m = manifest(tmp / "a" / "manifest.json")
    listed = {Path(a).name for a in m["artifacts"]}
    assert listed == {p.name for p in (tmp / "a").iterdir()} - {"manifest.json"}
    assert main(["report", str(tmp / "a")]) == 0
    assert "Ablation" in (tmp / "a" / "report.md").read_text()


def test_report_on_training_run(workspace):
    tmp, _, config, data = workspace
    assert main(["train", str(config), str(data), str(tmp / "r")]) == 0
    assert main(["report", str(tmp / "r")]) == 0
    assert (tmp / "r" / "loss_curves.svg").is_file() and (tmp / "r" / "report.manifest.json").is_file()
    assert main(["report", str(tmp / "nowhere")]) == 2
    (tmp / "empty").mkdir()
    assert main(["report", str(tmp / "empty")]) == 2


def test_console_script_with_thread_cap(workspace):
    tmp, spec, _, data = workspace
    out = subprocess.run([sys.executable, "-m", "hardmetric.cli", "gen-data", str(spec), str(tmp / "x.hmds")],
                         capture_output=True, text=True, env={"HM_THREADS": "2", "PATH": ""})
    assert out.returncode == 0, out.stderr
    assert out.stdout.strip() == file_digest(data)
