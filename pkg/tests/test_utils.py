"""
Utility tests
"""
from unittest.mock import patch

from fedsilo import instrumentation
from fedsilo.schemas import MetricSet
from fedsilo.utils import build_metric_row, derive_rng, derive_seed, format_metric, sha256_file, sha256_text


def test_derive_seed_stable_and_distinct():
    assert derive_seed(7, "client", 3, 12) == derive_seed(7, "client", 3, 12)
    assert derive_seed(7, "client", 3, 12) != derive_seed(7, "client", 12, 3)
    assert derive_seed(7, "client", 3) != derive_seed(8, "client", 3)
    assert 0 <= derive_seed(0, "x") < 2 ** 63


def test_derive_rng_reproducible():
    assert derive_rng(1, "split", 4).integers(0, 1000, size=5).tolist() == \
        derive_rng(1, "split", 4).integers(0, 1000, size=5).tolist()


def test_format_metric():
    assert format_metric(None) == "n/a"
    assert format_metric(0.0) == "0.0000"
    assert format_metric(0.71428, digits=2) == "0.71"


def test_build_metric_row_order():
    metrics = MetricSet(precision=0.5, recall=None, f1=None, auc=0.7, support_pos=0, support_neg=4)

    row = build_metric_row(3, metrics, round=2)

    assert list(row) == ["round", "silo", "precision", "recall", "f1", "auc"]
    assert row["recall"] is None


def test_sha256_file_matches_text(tmp_path):
    path = tmp_path / "a.txt"
    path.write_bytes(b"fedsilo")

    assert sha256_file(path) == sha256_text("fedsilo")


def test_write_telemetry(tmp_path):
    """Telemetry file holds the run counters"""
    instrumentation.rounds_completed_counter.labels(strategy="selected-only").inc()
    path = tmp_path / "telemetry.prom"

    instrumentation.write_telemetry(path)

    assert "fedsilo_rounds_completed_total" in path.read_text()


def test_set_metric_gauge_null():
    with patch.object(instrumentation.global_f1_gauge, "set") as mock_set:
        instrumentation.set_metric_gauge(instrumentation.global_f1_gauge, None)

    value = mock_set.call_args[0][0]
    assert value != value
