import csv
import json
from pathlib import Path

import pytest

from tumorbench.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, cli
from tumorbench.data_ingest import load_dataset, load_split
from tumorbench.synthetic import write_phantom_dataset

FIXTURES = Path(__file__).parent / "fixtures"


def run(capsys, *argv):
    code = cli([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_no_arguments_is_usage_error(capsys):
    code, _, err = run(capsys)
    assert code == EXIT_USAGE
    assert "usage" in err


def test_train_without_config_is_usage_error(capsys):
    code, _, err = run(capsys, "train")
    assert code == EXIT_USAGE
    assert "--config" in err


def test_help_exits_zero(capsys):
    assert run(capsys, "--help")[0] == EXIT_OK


@pytest.mark.parametrize("payload", ['{"data_dir": "x", "colour": 1}', "not json", '{"backbone": "resnet50v2"}',
                                     '{"data_dir": "x", "backbone": "vgg99"}',
                                     '{"data_dir": "x", "split": {"train_frac": 0.9}}'])
def test_bad_config_exit_3(capsys, tmp_path, payload):
    cfg = tmp_path / "c.json"
    cfg.write_text(payload)
    code, out, err = run(capsys, "train", "--config", cfg)
    assert code == EXIT_CONFIG
    assert out == ""
    assert json.loads(err)["error"] == "ConfigError"


def test_missing_data_dir_is_config_error(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data_dir": str(tmp_path / "nope"), "weights": None}))
    assert run(capsys, "train", "--config", cfg, "--run-dir", tmp_path / "r")[0] == EXIT_CONFIG


def test_ingest_and_split(capsys, phantom_dir, tmp_path):
    code, out, _ = run(capsys, "ingest", "--data-dir", phantom_dir)
    assert code == EXIT_OK
    assert json.loads(out) == {"total": 5, "class_counts": {"meningioma": 2, "glioma": 2, "pituitary": 1}}
    code, out, _ = run(capsys, "split", "--data-dir", phantom_dir, "--out", tmp_path / "s.json",
                       "--exact-counts", 3, 1, 1, "--seed", 4)
    assert code == EXIT_OK
    assert json.loads(out)["sizes"] == {"train": 3, "val": 1, "test": 1}
    split, spec = load_split(tmp_path / "s.json")
    assert split.sizes == (3, 1, 1) and spec.seed == 4


def test_ingest_missing_dir_is_runtime_error(capsys, tmp_path):
    code, _, err = run(capsys, "ingest", "--data-dir", tmp_path / "empty")
    assert code == EXIT_RUNTIME
    assert "error" in json.loads(err)


def test_preprocess_command(capsys, phantom_dir, tmp_path):
    code, out, _ = run(capsys, "preprocess", "--data-dir", phantom_dir, "--out", tmp_path / "c.h5", "--side", 32)
    assert code == EXIT_OK
    assert json.loads(out)["records"] == 5 and (tmp_path / "c.h5").exists()


def test_compare_markdown_and_csv(capsys, tmp_path):
    runs = [FIXTURES / "runs" / "xception", FIXTURES / "runs" / "resnet50v2"]
    code, out, _ = run(capsys, "compare", *runs)
    assert code == EXIT_OK
    assert out == (FIXTURES / "expected_table.md").read_text()
    code, _, _ = run(capsys, "compare", *runs, "--format", "csv", "--out", tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == (FIXTURES / "expected_table.csv").read_text()


def test_compare_missing_metrics(capsys, tmp_path):
    code, _, err = run(capsys, "compare", tmp_path)
    assert code == EXIT_RUNTIME
    assert json.loads(err)["error"] == "MissingMetrics"


def test_metrics_command(capsys, tmp_path):
    pred = tmp_path / "p.csv"
    with open(pred, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "true", "pred"])
        rows = [(0, 0)] * 65 + [(1, 0)] + [(1, 1)] * 151 + [(2, 2)] * 95
        for i, (t, p) in enumerate(rows):
            w.writerow([i, t, p])
    code, out, _ = run(capsys, "metrics", "--predictions", pred)
    assert code == EXIT_OK
    d = json.loads(out)
    assert d["n"] == 312
    assert round(100 * d["accuracy"], 2) == 99.68
    assert d["class_order"] == ["meningioma", "glioma", "pituitary"]


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    data = base / "data"
    write_phantom_dataset(data, 4, seed=3, size=64)
    cfg = {"data_dir": str(data), "run_dir": str(base / "run"), "backbone": "resnet50v2", "weights": None,
           "seed": 1, "preprocess": {"side": 32}, "train": {"epochs": 1, "batch_size": 4},
           "split": {"exact_counts": [6, 3, 3]}}
    (base / "cfg.json").write_text(json.dumps(cfg))
    assert cli(["train", "--config", str(base / "cfg.json")]) == EXIT_OK
    assert cli(["evaluate", "--run-dir", str(base / "run")]) == EXIT_OK
    return base


def test_run_directory_contents(trained_run):
    names = {p.name for p in (trained_run / "run").iterdir()}
    assert {"config.json", "config.sha256", "splits.json", "history.csv", "best.ckpt",
            "predictions.csv", "metrics.json", "timing.json"} <= names
    # nothing leaks outside the run directory
    assert {p.name for p in trained_run.iterdir()} == {"data", "run", "cfg.json"}


def test_predict_matches_predictions_csv(capsys, trained_run):
    run_dir = trained_run / "run"
    manifest = load_dataset(trained_run / "data")
    with open(run_dir / "predictions.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        rec = manifest.records[int(row["index"])]
        code, out, _ = run(capsys, "predict", "--model", run_dir / "best.ckpt",
                           "--image", trained_run / "data" / Path(rec.source).name)
        assert code == EXIT_OK
        got = json.loads(out)
        assert got["class_index"] == int(row["pred"])
        assert got["true_label"] == rec.label.value
        probs = list(got["probabilities"].values())
        assert probs == pytest.approx([float(row[f"p{k}"]) for k in range(3)], abs=1e-5)


def test_benchmark_and_report(capsys, trained_run):
    run_dir = trained_run / "run"
    code, out, _ = run(capsys, "benchmark", "--run-dir", run_dir, "--repeats", 2)
    assert code == EXIT_OK
    stats = json.loads(out)
    assert stats["n_images"] == 3 and stats["outputs_identical"]
    code, out, _ = run(capsys, "report", "--run-dir", run_dir)
    assert code == EXIT_OK
    assert (run_dir / "confusion.png").exists() and (run_dir / "table.md").exists()


def test_seed_override_changes_split(capsys, trained_run, tmp_path):
    outs = []
    for seed in (1, 1, 2):
        target = tmp_path / f"s{len(outs)}.json"
        code, _, _ = run(capsys, "split", "--config", trained_run / "cfg.json", "--seed", seed, "--out", target)
        assert code == EXIT_OK
        outs.append(load_split(target)[0])
    assert outs[0] == outs[1]
    assert outs[0] != outs[2]
