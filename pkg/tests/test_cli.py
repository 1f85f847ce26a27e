"""
Command-line tests
"""
import json

import pandas as pd
import pytest

from fedsilo.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_RUNTIME, main
from fedsilo.runs import MANIFEST_NAME, RunDirectory

pytestmark = pytest.mark.integration

PLAYERS = ["gender_age", "income", "insured"]


def _train(config_path, out, mode="federated"):
    return main(["train", "--mode", mode, "--config", str(config_path), "--out", str(out)])


def test_generate_data_is_deterministic(small_experiment, tmp_path):
    config = small_experiment()

    assert main(["generate-data", "--config", str(config), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["generate-data", "--config", str(config), "--out", str(tmp_path / "b")]) == EXIT_OK

    first = (tmp_path / "a" / "survey.csv").read_bytes()
    assert first == (tmp_path / "b" / "survey.csv").read_bytes()
    assert (tmp_path / "a" / "schema.json").is_file()
    manifest = RunDirectory.open(tmp_path / "a").manifest
    assert {"survey.csv", "schema.json", "config.json"} <= set(manifest.files)


def test_generate_data_seed_override(small_experiment, tmp_path):
    config = small_experiment()
    main(["generate-data", "--config", str(config), "--out", str(tmp_path / "a")])
    main(["generate-data", "--config", str(config), "--out", str(tmp_path / "b"), "--seed", "12"])

    assert (tmp_path / "a" / "survey.csv").read_bytes() != (tmp_path / "b" / "survey.csv").read_bytes()


def test_invalid_config_exit_code(small_experiment, tmp_path):
    """A non-positive rows_per_silo is rejected before any work"""
    config = small_experiment(data={"synthetic": {"n_silos": 3, "rows_per_silo": 0}})

    assert main(["generate-data", "--config", str(config), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert not (tmp_path / "x").exists()


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG


def test_bad_csv_exit_code(tiny_schema, write_csv, small_experiment, tmp_path):
    schema_path = tmp_path / "schema.json"
    schema_path.write_text(tiny_schema.model_dump_json(), encoding="utf-8")
    csv_path = write_csv("survey.csv", ["income", "education", "CONTACTED", "STATEQ"],
                         [[1, 2, 1, 1], ["abc", 2, 2, 2]])
    config = small_experiment(data={"csv_path": str(csv_path), "schema_path": str(schema_path)})

    assert _train(config, tmp_path / "run") == EXIT_DATA


@pytest.mark.parametrize("content", [
    b"income,education,CONTACTED,STATEQ\n1,2,1,1\n1,2,1,1,7,7\n",
    b"income,education,CONTACTED,STATEQ\n1,2,1,\xff\n",
])
def test_unreadable_csv_exit_code(content, tiny_schema, small_experiment, tmp_path):
    """Ragged rows and non-UTF-8 bytes are data errors"""
    schema_path = tmp_path / "schema.json"
    schema_path.write_text(tiny_schema.model_dump_json(), encoding="utf-8")
    csv_path = tmp_path / "survey.csv"
    csv_path.write_bytes(content)
    config = small_experiment(data={"csv_path": str(csv_path), "schema_path": str(schema_path)})

    assert _train(config, tmp_path / "run") == EXIT_DATA


def test_train_federated_outputs(small_experiment, tmp_path):
    out = tmp_path / "run"

    assert _train(small_experiment(), out) == EXIT_OK

    rounds = pd.read_csv(out / "rounds.csv")
    assert list(rounds.columns) == [
        "round", "silo", "precision", "recall", "f1", "auc", "bytes_up", "bytes_down"]
    assert len(rounds) == 2 * (1 + 3)
    silos = pd.read_csv(out / "silo_metrics.csv")
    assert silos["silo"].astype(str).tolist() == ["GLOBAL", "1", "2", "3"]
    ledger = json.loads((out / "ledger.json").read_text())
    assert ledger["rounds"] == 2
    assert ledger["total_bytes"] == int(rounds.groupby("round").first()[["bytes_up", "bytes_down"]].sum().sum())
    assert (out / "model.bin").is_file()
    assert (out / "telemetry.prom").is_file()
    assert (out / MANIFEST_NAME).is_file()


def test_train_centralized_outputs(small_experiment, tmp_path):
    out = tmp_path / "run"

    assert _train(small_experiment(), out, "centralized") == EXIT_OK

    epochs = pd.read_csv(out / "epochs.csv")
    assert epochs["epoch"].tolist() == [0, 1, 2]
    assert (out / "model.bin").is_file()


def test_train_local_baselines_outputs(small_experiment, tmp_path):
    out = tmp_path / "run"

    assert _train(small_experiment(), out, "local-baselines") == EXIT_OK

    baselines = pd.read_csv(out / "local_baselines.csv")
    assert baselines["silo"].tolist() == [1, 2, 3]
    summary = json.loads((out / "local_baselines.json").read_text())
    assert set(summary["macro"]) == {"precision", "recall", "f1", "auc"}


def test_training_is_deterministic(small_experiment, tmp_path):
    config = small_experiment()
    _train(config, tmp_path / "a")
    _train(config, tmp_path / "b")

    for name in ("rounds.csv", "silo_metrics.csv", "model.bin", "ledger.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_explain_exact(small_experiment, tmp_path):
    out = tmp_path / "run"
    config = small_experiment()
    _train(config, out)

    assert main(["explain", "--config", str(config), "--out", str(out)]) == EXIT_OK

    attributions = pd.read_csv(out / "attributions.csv")
    assert len(attributions) == 3 * len(PLAYERS)
    assert set(attributions["player"]) == set(PLAYERS)
    assert attributions["efficiency_residual"].abs().max() <= 1e-6
    summary = pd.read_csv(out / "attribution_summary.csv")
    assert summary["player"].tolist() == PLAYERS
    bins = pd.read_csv(out / "bin_distributions.csv")
    assert list(bins.columns) == ["bin_name", "instance_id", "value", "label", "no_positives"]


def test_owen_single_block_matches_shapley(small_experiment, tmp_path):
    """One block holding every player reproduces the Shapley summary"""
    out = tmp_path / "run"
    _train(small_experiment(), out)
    main(["explain", "--config", str(small_experiment()), "--out", str(out)])
    shapley = pd.read_csv(out / "attribution_summary.csv")

    owen_config = small_experiment(attribution={
        "method": "owen-exact", "blocks": [PLAYERS],
        "instance_sample_size": 3, "background_size": 5})
    assert main(["explain", "--config", str(owen_config), "--out", str(out)]) == EXIT_OK
    owen = pd.read_csv(out / "attribution_summary.csv")

    assert owen["player"].tolist() == shapley["player"].tolist()
    assert (owen["mean_abs"] - shapley["mean_abs"]).abs().max() <= 1e-9


def test_explain_without_model(small_experiment, tmp_path):
    assert main(["explain", "--config", str(small_experiment()), "--out", str(tmp_path / "run")]) == EXIT_RUNTIME


def test_report_marks_undefined_metrics(small_experiment, tmp_path):
    out = tmp_path / "run"
    config = small_experiment(data={"synthetic": {
        "n_silos": 3,
        "rows_per_silo": 40,
        "features": [{"name": "gender_age", "n_categories": 12}, {"name": "income", "n_categories": 4}],
        "target_rate": 0.3,
        "zero_positive_silos": [2],
    }})
    _train(config, out)

    assert main(["report", "--out", str(out), "--charts"]) == EXIT_OK

    text = (out / "report.txt").read_text()
    assert "n/a" in text
    assert "Communication cost" in text
    silos = pd.read_csv(out / "silo_metrics.csv")
    per_silo = silos[silos["silo"].astype(str) != "GLOBAL"]
    plotted = per_silo[per_silo["precision"].notna() & per_silo["recall"].notna()]
    svg = (out / "silo_precision_recall.svg").read_text()
    assert svg.count("<circle") == len(plotted)
    assert (out / "silo_f1_auc.svg").is_file()


def test_report_lists_top_features(small_experiment, tmp_path):
    out = tmp_path / "run"
    config = small_experiment()
    _train(config, out)
    main(["explain", "--config", str(config), "--out", str(out)])

    assert main(["report", "--config", str(config), "--out", str(out), "--charts"]) == EXIT_OK

    assert "Top features by mean |value|" in (out / "report.txt").read_text()
    assert (out / "feature_importance.svg").is_file()


def test_report_requires_run_directory(tmp_path):
    (tmp_path / "empty").mkdir()

    assert main(["report", "--out", str(tmp_path / "empty")]) == EXIT_RUNTIME


def test_explain_rejects_empty_sample(small_experiment, tmp_path):
    config = small_experiment(attribution={"instance_sample_size": 0})

    assert main(["explain", "--config", str(config), "--out", str(tmp_path / "run")]) == EXIT_CONFIG
