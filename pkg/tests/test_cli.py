import hashlib
import json
from pathlib import Path

import pytest

from conftest import small_spec
from tif.cli import main

TRAIN_CFG = {
    "seed": 0,
    "total_epochs": 2,
    "train_months": 3,
    "model": {"layer_widths": [32, 16], "head_hidden": 16, "n_proxies": 2},
}


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj))
    return path


def last_error(capsys) -> dict:
    lines = [l for l in capsys.readouterr().err.splitlines() if l.startswith("{")]
    return json.loads(lines[-1])


def tree_hash(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(path.rglob("*")):
        if f.is_file():
            h.update(f.name.encode() + f.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = small_spec(n_months=12, samples_per_month=120, seed=4)
    spec.n_train_months, spec.n_test_months = 3, 9
    write_json(root / "gen.json", spec.to_dict())
    write_json(root / "train.json", TRAIN_CFG)
    assert main(["generate", "--config", str(root / "gen.json"), "--out", str(root / "data"), "--quiet"]) == 0
    assert main(["train", "--data", str(root / "data"), "--config", str(root / "train.json"),
                 "--out", str(root / "model"), "--quiet"]) == 0
    return root


def test_generate_outputs(workspace):
    files = {p.name for p in (workspace / "data").iterdir()}
    assert files == {"meta.json", "samples.jsonl", "manifest.json"}
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["command"] == "generate" and manifest["seed"] == 4
    assert len(manifest["dataset_hash"]) == 64


def test_train_outputs(workspace):
    files = {p.name for p in (workspace / "model").iterdir()}
    assert {"checkpoint.npz", "report.json", "environments.json", "manifest.json"} <= files
    manifest = json.loads((workspace / "model" / "manifest.json").read_text())
    assert manifest["precedence"]["seed"] == "file"
    assert manifest["precedence"]["method"] == "default"


def test_evaluate_one_row_per_month(workspace):
    out = workspace / "eval"
    assert main(["evaluate", "--data", str(workspace / "data"), "--checkpoint",
                 str(workspace / "model" / "checkpoint.npz"), "--out", str(out), "--quiet"]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "window,macro_f1,precision_mal,recall_mal,fcs_total,cosine_mean_mal"
    assert len(lines) - 1 == 9
    summary = json.loads((out / "aut.json").read_text())
    assert summary["n_windows"] == 9 and 0 <= summary["aut_macro_f1"] <= 1


def test_evaluate_is_byte_identical_and_leaves_inputs_alone(workspace):
    before = tree_hash(workspace / "data"), tree_hash(workspace / "model")
    outs = []
    for name in ("rep_a", "rep_b"):
        assert main(["evaluate", "--data", str(workspace / "data"), "--checkpoint",
                     str(workspace / "model" / "checkpoint.npz"), "--out", str(workspace / name),
                     "--quiet"]) == 0
        outs.append((workspace / name / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]
    assert (tree_hash(workspace / "data"), tree_hash(workspace / "model")) == before


def test_analyze_and_report(workspace):
    out = workspace / "analysis"
    assert main(["analyze", "--data", str(workspace / "data"), "--checkpoint",
                 str(workspace / "model" / "checkpoint.npz"), "--out", str(out), "--quiet",
                 "--config", str(write_json(workspace / "an.json", {"n0": 50, "n_subsets": 20}))]) == 0
    rows = (out / "features.csv").read_text().splitlines()
    assert rows[0] == "index,role,gap,stable,discriminative,fcs"
    assert len(rows) == 1 + 60
    assert rows[1].startswith("0,stable,")
    assert main(["report", "--out", str(workspace / "summary"), "--quiet",
                 str(workspace / "eval"), str(out)]) == 0
    summary = json.loads((workspace / "summary" / "summary.json").read_text())
    assert set(summary) == {str(workspace / "eval"), str(out)}


def test_continual_command(workspace):
    cfg = write_json(workspace / "cont.json", {"seed": 0, "f1_threshold": 1.0, "budget_per_update": 10,
                                                "max_updates": 2})
    out = workspace / "cont"
    assert main(["continual", "--data", str(workspace / "data"), "--checkpoint",
                 str(workspace / "model" / "checkpoint.npz"), "--config", str(cfg), "--out", str(out),
                 "--quiet"]) == 0
    report = json.loads((out / "continual_report.json").read_text())
    assert report["n_updates"] == 2 and report["total_cost"] == 20
    assert len(report["months"]) == 9


def test_stage_split_error(workspace, capsys):
    code = main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "train.json"),
                 "--stage1-epochs", "5", "--out", str(workspace / "bad"), "--quiet"])
    err = last_error(capsys)
    assert code == 2 and err["exit_code"] == 2
    assert "stage1_epochs" in err["message"] and "total_epochs" in err["message"]


def test_missing_seed(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "d"), "--quiet"]) == 2
    assert "seed" in last_error(capsys)["message"]


def test_flag_beats_file(workspace, tmp_path):
    out = tmp_path / "m"
    assert main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "train.json"),
                 "--epochs", "1", "--stage1-epochs", "0", "--seed", "9", "--out", str(out), "--quiet"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 9 and manifest["config"]["total_epochs"] == 1
    assert manifest["precedence"]["total_epochs"] == "flag"
    assert manifest["precedence"]["model"] == "file"


def test_dimension_mismatch(workspace, tmp_path, capsys):
    other = small_spec(seed=1, dim=70, noise_features=[(j, 0.05) for j in range(7, 70)])
    cfg = write_json(tmp_path / "gen.json", other.to_dict())
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d"), "--quiet"]) == 0
    code = main(["evaluate", "--data", str(tmp_path / "d"), "--checkpoint",
                 str(workspace / "model" / "checkpoint.npz"), "--out", str(tmp_path / "e"), "--quiet"])
    assert code == 3 and "features" in last_error(capsys)["message"]


def test_malformed_dataset(tmp_path, capsys):
    d = tmp_path / "d"
    d.mkdir()
    (d / "meta.json").write_text('{"dim": 4, "t_min": "2014-01-01", "t_max": "2014-01-02"}')
    (d / "samples.jsonl").write_text('{"id": "a"\n')
    write_json(tmp_path / "t.json", TRAIN_CFG)
    code = main(["train", "--data", str(d), "--config", str(tmp_path / "t.json"), "--out", str(tmp_path / "o"),
                 "--quiet"])
    err = last_error(capsys)
    assert code == 3 and err["line"] == 1


def test_nan_loss_exit_code(workspace, tmp_path, capsys):
    cfg = dict(TRAIN_CFG, learning_rate=1e30, optimizer="sgd", ablation="none")
    write_json(tmp_path / "t.json", cfg)
    code = main(["train", "--data", str(workspace / "data"), "--config", str(tmp_path / "t.json"),
                 "--out", str(tmp_path / "o"), "--quiet"])
    err = last_error(capsys)
    assert code == 4 and err["error"] == "numerical" and "epoch" in err


def test_invalid_json(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{nope")
    assert main(["generate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == 2
    assert last_error(capsys)["error"] == "config"
