"""
Federation tests
"""
import numpy as np
import pytest

from fedsilo.dataset import encode, generate_synthetic, split_and_partition, synthetic_schema
from fedsilo.errors import AggregationError, ConfigError
from fedsilo.federation import (
    BYTES_PER_GB,
    ClientUpdate,
    CommLedger,
    compare_strategies,
    fedavg_aggregate,
    round_bytes,
    round_history_rows,
    run_centralized,
    run_federated,
    run_local_baselines,
    sample_clients,
    silo_metric_rows,
    _initial_params,
    total_cost,
)
from fedsilo.nn import init_model, train_local
from fedsilo.schemas import CostStrategy, FedConfig, HighwayNetConfig, SynthesisConfig
from fedsilo.utils import derive_seed

MODEL_BYTES = 1078 * 1024


def _params(width=4, input_dim=5, seed=0):
    return init_model(HighwayNetConfig(input_dim=input_dim, hidden_width=width, n_blocks=2, init_seed=seed))


def _random_updates(rng, n_clients=4):
    base = _params()
    return [
        ClientUpdate(
            silo_id=i + 1,
            params=base.with_values(rng.normal(size=base.values.shape[0])),
            example_count=int(rng.integers(1, 500)))
        for i in range(n_clients)
    ]


# --- Communication cost ---

def test_round_bytes_strategies():
    assert round_bytes(CostStrategy.SELECTED_ONLY, 10, 12, 51) == (120, 120)
    assert round_bytes(CostStrategy.BROADCAST_ALL, 10, 12, 51) == (120, 510)


def test_selected_only_total_cost():
    """200 rounds of 12 clients with a 1078 KB model"""
    ledger = CommLedger(CostStrategy.SELECTED_ONLY, MODEL_BYTES, 12, 51)
    for r in range(1, 201):
        ledger.record_round(r)

    total_bytes, total_gb = total_cost(ledger)

    assert total_bytes == 200 * 24 * MODEL_BYTES
    assert total_gb == pytest.approx(4.9347, abs=1e-4)
    assert ledger.summary()["per_round_kb"] == 25872


def test_broadcast_all_total_and_reduction():
    comparison = compare_strategies(MODEL_BYTES, 200, 12, 51)

    assert comparison["broadcast-all"]["gb"] == pytest.approx(12.9535, abs=1e-4)
    assert comparison["selected-only"]["gb"] == pytest.approx(4.9347, abs=1e-4)
    assert comparison["reduction"] >= 0.6


def test_ledger_zero_rounds():
    ledger = CommLedger(CostStrategy.SELECTED_ONLY, MODEL_BYTES, 12, 51)

    assert total_cost(ledger) == (0, 0.0)
    assert ledger.summary()["comparison"]["reduction"] == 0.0


def test_ledger_summary_consistent():
    ledger = CommLedger(CostStrategy.BROADCAST_ALL, 1000, 2, 5)
    for r in range(1, 4):
        ledger.record_round(r)

    summary = ledger.summary()

    assert summary["rounds"] == 3
    assert summary["bytes_up"] == 3 * 2 * 1000
    assert summary["bytes_down"] == 3 * 5 * 1000
    assert summary["total_bytes"] == summary["bytes_up"] + summary["bytes_down"]
    assert summary["total_gb"] == summary["total_bytes"] / BYTES_PER_GB


# --- Client sampling ---

def test_sample_clients_shape():
    chosen = sample_clients(51, 12, seed=0, round_index=1)

    assert len(chosen) == 12
    assert len(set(chosen)) == 12
    assert list(chosen) == sorted(chosen)
    assert all(1 <= c <= 51 for c in chosen)


def test_sample_clients_deterministic():
    assert sample_clients(51, 12, 3, 7) == sample_clients(51, 12, 3, 7)
    assert sample_clients(51, 12, 3, 7) != sample_clients(51, 12, 3, 8)


def test_sample_clients_all():
    assert sample_clients(4, 4, 0, 1) == (1, 2, 3, 4)


def test_sample_clients_invalid():
    with pytest.raises(ConfigError):
        sample_clients(4, 5, 0, 1)
    with pytest.raises(ConfigError):
        sample_clients(4, 0, 0, 1)


def test_sample_clients_uniform_frequency():
    """Each client is picked with probability k/N across rounds"""
    counts = np.zeros(51)
    n_rounds = 2000
    for r in range(n_rounds):
        for c in sample_clients(51, 12, seed=1, round_index=r):
            counts[c - 1] += 1

    frequency = counts / n_rounds

    assert np.all(np.abs(frequency - 12 / 51) < 0.05)


# --- FedAvg ---

def test_fedavg_matches_weighted_mean():
    rng = np.random.default_rng(0)
    updates = _random_updates(rng)
    counts = np.array([u.example_count for u in updates], dtype=np.float64)
    stacked = np.stack([u.params.values for u in updates])
    expected = (counts[:, None] * stacked).sum(axis=0) / counts.sum()

    aggregated = fedavg_aggregate(updates)

    assert np.max(np.abs(aggregated.values - expected)) <= 1e-12


def test_fedavg_two_updates_weighted():
    base = _params()
    a = base.with_values(np.full(base.values.shape[0], 1.0))
    b = base.with_values(np.full(base.values.shape[0], 5.0))

    aggregated = fedavg_aggregate([ClientUpdate(1, a, 100), ClientUpdate(2, b, 300)])

    assert np.max(np.abs(aggregated.values - (0.25 * a.values + 0.75 * b.values))) <= 1e-15


def test_fedavg_order_invariant():
    rng = np.random.default_rng(1)
    updates = _random_updates(rng, 5)

    forward = fedavg_aggregate(updates)
    backward = fedavg_aggregate(updates[::-1])

    assert np.array_equal(forward.values, backward.values)


def test_fedavg_count_rescaling_invariant():
    rng = np.random.default_rng(2)
    updates = _random_updates(rng)
    scaled = [ClientUpdate(u.silo_id, u.params, 3 * u.example_count) for u in updates]

    assert np.allclose(fedavg_aggregate(updates).values, fedavg_aggregate(scaled).values, rtol=0, atol=1e-14)


def test_fedavg_identical_updates():
    """Identical client models aggregate to the same vector exactly"""
    params = _params(seed=4)
    updates = [ClientUpdate(s, params, n) for s, n in [(1, 7), (2, 300), (3, 41)]]

    assert np.array_equal(fedavg_aggregate(updates).values, params.values)


def test_fedavg_single_update():
    params = _params(seed=2)

    assert np.array_equal(fedavg_aggregate([ClientUpdate(3, params, 10)]).values, params.values)


def test_fedavg_layout_mismatch():
    updates = [ClientUpdate(1, _params(width=4), 5), ClientUpdate(2, _params(width=5), 5)]

    with pytest.raises(AggregationError):
        fedavg_aggregate(updates)


def test_fedavg_duplicate_silo():
    params = _params()

    with pytest.raises(AggregationError):
        fedavg_aggregate([ClientUpdate(1, params, 5), ClientUpdate(1, params, 6)])


def test_fedavg_empty():
    with pytest.raises(AggregationError):
        fedavg_aggregate([])


def test_client_update_requires_examples():
    with pytest.raises(AggregationError):
        ClientUpdate(1, _params(), 0)


# --- Runs ---

def test_run_federated_structure(small_split, small_fed_config):
    run = run_federated(small_split, small_fed_config)

    assert len(run.history) == 3
    assert [r.round_index for r in run.history] == [1, 2, 3]
    for record in run.history:
        assert len(record.participants) == 2
        assert set(record.silo_metrics) == {1, 2, 3, 4}
        assert record.bytes_up == record.bytes_down == 2 * run.ledger.model_bytes
    assert run.ledger.n_rounds == 3
    assert run.params.layout.input_dim == small_split.train.input_dim


def test_run_federated_deterministic(small_split, small_fed_config):
    first = run_federated(small_split, small_fed_config)
    second = run_federated(small_split, small_fed_config)

    assert np.array_equal(first.params.values, second.params.values)
    assert [r.participants for r in first.history] == [r.participants for r in second.history]


def test_run_federated_thread_pool_matches_serial(small_split, small_fed_config):
    serial = run_federated(small_split, small_fed_config)
    pooled = run_federated(small_split, small_fed_config.model_copy(update={"max_workers": 2}))

    assert np.array_equal(serial.params.values, pooled.params.values)


def test_run_federated_broadcast_ledger(small_split, small_fed_config):
    config = small_fed_config.model_copy(update={"cost_strategy": CostStrategy.BROADCAST_ALL})

    run = run_federated(small_split, config)

    assert run.history[0].bytes_down == 4 * run.ledger.model_bytes
    assert run.history[0].bytes_up == 2 * run.ledger.model_bytes


def test_run_federated_missing_silo(small_split, small_fed_config):
    """A configured client with no training rows is a configuration error"""
    config = small_fed_config.model_copy(update={"total_clients": 5})

    with pytest.raises(ConfigError):
        run_federated(small_split, config)


def test_round_history_rows(small_split, small_fed_config):
    run = run_federated(small_split, small_fed_config)

    rows = round_history_rows(run.history)

    assert len(rows) == 3 * 5
    assert rows[0]["silo"] == "GLOBAL"
    assert rows[0]["round"] == 1
    assert list(rows[0])[:2] == ["round", "silo"]
    assert [r["silo"] for r in rows[1:5]] == [1, 2, 3, 4]


def test_silo_metric_rows_supports(small_split, small_fed_config):
    run = run_federated(small_split, small_fed_config)
    last = run.history[-1]

    rows = silo_metric_rows(last.global_metrics, last.silo_metrics)

    assert rows[0]["silo"] == "GLOBAL"
    assert sum(r["support_pos"] + r["support_neg"] for r in rows[1:]) == small_split.test.n_rows


def test_run_centralized_history(small_split, small_fed_config):
    """Initial evaluation plus one entry per epoch"""
    run = run_centralized(small_split, small_fed_config, epochs=3)

    assert len(run.history) == run.stats.epochs_run + 1 == 4
    assert run.final_metrics.support_pos + run.final_metrics.support_neg == small_split.test.n_rows


def test_run_centralized_zero_epochs(small_split, small_fed_config):
    run = run_centralized(small_split, small_fed_config, epochs=0)

    assert len(run.history) == 1
    assert run.final_metrics == run.history[0]


def test_run_local_baselines(small_split, small_fed_config):
    baselines = run_local_baselines(small_split, small_fed_config)

    assert set(baselines.silos) == {1, 2, 3, 4}
    assert set(baselines.macro) == {"precision", "recall", "f1", "auc"}
    summary = baselines.summary()
    assert list(summary["silos"]) == ["1", "2", "3", "4"]


def test_zero_positive_silo_is_excluded(small_synthesis, small_fed_config):
    """A silo without positives gets null F1 and drops out of the macro average"""
    synthesis = small_synthesis.model_copy(update={"zero_positive_silos": [2]})
    ds = encode(generate_synthetic(synthesis, seed=3), synthetic_schema(synthesis))
    split = split_and_partition(ds, 0.8, seed=3)

    baselines = run_local_baselines(split, small_fed_config)
    federated = run_federated(split, small_fed_config)

    assert baselines.silos[2].metrics.f1 is None
    assert 2 in baselines.excluded["f1"]
    assert 2 in baselines.no_test_positives
    assert 2 in baselines.degenerate_weights
    assert baselines.silos[2].pos_weight == 1.0
    assert federated.history[-1].silo_metrics[2].f1 is None


def test_single_client_round_equals_local_training(small_synthesis, small_model_config):
    """One round with one client reproduces that client's local training"""
    synthesis = small_synthesis.model_copy(update={"n_silos": 1})
    ds = encode(generate_synthetic(synthesis, seed=3), synthetic_schema(synthesis))
    split = split_and_partition(ds, 0.8, seed=3)
    config = FedConfig(n_rounds=1, clients_per_round=1, total_clients=1,
                       model=small_model_config, max_workers=1, seed=5)
    model_config = small_model_config.resolve(split.train.input_dim)
    pos_weight = (split.train.n_neg / split.train.n_pos) * config.gamma

    run = run_federated(split, config)
    expected, _ = train_local(
        _initial_params(model_config, 5), split.train, None, model_config,
        1, config.batch_size, pos_weight, derive_seed(5, "client", 1, 1))

    assert np.array_equal(run.params.values, expected.values)


# --- Acceptance at the default scale ---

@pytest.fixture(scope="module")
def default_split():
    """51 silos of 500 rows, seeded as configs/default.json"""
    synthesis = SynthesisConfig()
    ds = encode(generate_synthetic(synthesis, seed=7), synthetic_schema(synthesis))
    return split_and_partition(ds, 0.8, seed=7)


@pytest.fixture(scope="module")
def default_config():
    """Default federation settings cut to 50 rounds"""
    return FedConfig(n_rounds=50, seed=7)


@pytest.fixture(scope="module")
def federated_default(default_split, default_config):
    return run_federated(default_split, default_config)


@pytest.mark.slow
def test_class_weighting_raises_federated_recall(default_split, default_config, federated_default):
    unweighted = run_federated(default_split, default_config.model_copy(update={"class_weighting": False}))

    weighted_recall = federated_default.history[-1].global_metrics.recall
    assert weighted_recall >= 0.5
    assert weighted_recall >= unweighted.history[-1].global_metrics.recall + 0.15


@pytest.mark.slow
def test_federated_close_to_centralized(default_split, default_config, federated_default):
    centralized = run_centralized(default_split, default_config)

    federated_f1 = federated_default.history[-1].global_metrics.f1
    assert federated_f1 is not None
    assert abs(federated_f1 - centralized.final_metrics.f1) <= 0.05


@pytest.mark.slow
def test_federated_beats_local_macro(default_split, default_config, federated_default):
    baselines = run_local_baselines(default_split, default_config)

    assert federated_default.history[-1].global_metrics.f1 > baselines.macro["f1"]


@pytest.mark.slow
def test_federated_auc_after_50_rounds(federated_default):
    assert federated_default.history[-1].round_index == 50
    assert federated_default.history[-1].global_metrics.auc > 0.80
