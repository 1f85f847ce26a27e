"""Federated rounds, baselines and communication accounting."""
import time
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from fedsilo.dataset import EncodedDataset, SplitPartition, compute_class_weight
from fedsilo.errors import AggregationError, ConfigError, DegenerateClassError
from fedsilo.instrumentation import (
    bytes_transferred_counter,
    client_updates_counter,
    epochs_counter,
    global_auc_gauge,
    global_f1_gauge,
    local_training_histogram,
    round_duration_histogram,
    rounds_completed_counter,
    set_metric_gauge,
)
from fedsilo.metrics import evaluate_partition, evaluate_partitions, macro_average
from fedsilo.nn import ModelParams, TrainStats, init_model, param_byte_size, train_local
from fedsilo.schemas import CostStrategy, FedConfig, HighwayNetConfig, MetricSet
from fedsilo.utils import GLOBAL_SCOPE, build_metric_row, derive_rng, derive_seed, format_metric

logger = logging.getLogger(__name__)

BYTES_PER_GB = 1024 ** 3
METRIC_NAMES = ("precision", "recall", "f1", "auc")

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class ClientUpdate:
    """Parameters returned by one client after local training."""
    silo_id: int
    params: ModelParams
    example_count: int
    stats: Optional[TrainStats] = None

    def __post_init__(self):
        if self.example_count <= 0:
            raise AggregationError(
                f"client {self.silo_id} reported example_count={self.example_count}")


@dataclass(frozen=True)
class RoundRecord:
    """Outcome of one federated round."""
    round_index: int
    participants: Tuple[int, ...]
    global_metrics: MetricSet
    silo_metrics: Dict[int, MetricSet]
    bytes_up: int
    bytes_down: int


@dataclass(frozen=True)
class LedgerEntry:
    round_index: int
    bytes_up: int
    bytes_down: int


def round_bytes(
        strategy: CostStrategy,
        model_bytes: int,
        clients_per_round: int,
        total_clients: int) -> Tuple[int, int]:
    """
    Bytes uploaded and downloaded in one round.

    selected-only: each selected client downloads and uploads one model.
    broadcast-all: every client downloads, the selected clients upload.
    """
    strategy = CostStrategy(strategy)
    up = clients_per_round * model_bytes
    if strategy is CostStrategy.BROADCAST_ALL:
        return up, total_clients * model_bytes
    return up, up


def compare_strategies(
        model_bytes: int,
        n_rounds: int,
        clients_per_round: int,
        total_clients: int) -> Dict[str, Union[float, Dict[str, float]]]:
    """Totals under both strategies and the reduction of selected-only."""
    totals = {}
    for strategy in CostStrategy:
        up, down = round_bytes(strategy, model_bytes, clients_per_round, total_clients)
        total = n_rounds * (up + down)
        totals[strategy.value] = {"bytes": total, "gb": total / BYTES_PER_GB}
    selected = totals[CostStrategy.SELECTED_ONLY.value]["bytes"]
    broadcast = totals[CostStrategy.BROADCAST_ALL.value]["bytes"]
    totals["reduction"] = 1.0 - selected / broadcast if broadcast else 0.0
    return totals


class CommLedger:
    """Per-round upload/download accounting under one strategy."""

    def __init__(self, strategy: CostStrategy, model_bytes: int,
                 clients_per_round: int, total_clients: int):
        self.strategy = CostStrategy(strategy)
        self.model_bytes = model_bytes
        self.clients_per_round = clients_per_round
        self.total_clients = total_clients
        self.entries: List[LedgerEntry] = []

    def record_round(self, round_index: int) -> LedgerEntry:
        up, down = round_bytes(
            self.strategy, self.model_bytes, self.clients_per_round, self.total_clients)
        entry = LedgerEntry(round_index, up, down)
        self.entries.append(entry)
        return entry

    @property
    def n_rounds(self) -> int:
        return len(self.entries)

    @property
    def total_up(self) -> int:
        return sum(e.bytes_up for e in self.entries)

    @property
    def total_down(self) -> int:
        return sum(e.bytes_down for e in self.entries)

    def summary(self) -> Dict:
        """JSON-ready summary including the strategy comparison"""
        total_bytes, total_gb = total_cost(self)
        up, down = round_bytes(
            self.strategy, self.model_bytes, self.clients_per_round, self.total_clients)
        return {
            "strategy": self.strategy.value,
            "model_bytes": self.model_bytes,
            "model_kb": self.model_bytes / 1024,
            "rounds": self.n_rounds,
            "clients_per_round": self.clients_per_round,
            "total_clients": self.total_clients,
            "per_round_kb": (up + down) / 1024,
            "bytes_up": self.total_up,
            "bytes_down": self.total_down,
            "total_bytes": total_bytes,
            "total_gb": total_gb,
            "comparison": compare_strategies(
                self.model_bytes, self.n_rounds, self.clients_per_round, self.total_clients),
        }


def total_cost(ledger: CommLedger) -> Tuple[int, float]:
    """Total bytes moved and the same in GB (1024**3 bytes)."""
    total = ledger.total_up + ledger.total_down
    return total, total / BYTES_PER_GB


def sample_clients(total_clients: int, clients_per_round: int, seed: int, round_index: int) -> Tuple[int, ...]:
    """Silo ids (1-based, sorted) drawn without replacement for one round."""
    if not 1 <= clients_per_round <= total_clients:
        raise ConfigError(
            f"cannot sample {clients_per_round} of {total_clients} clients")
    rng = derive_rng(seed, "sample_clients", round_index)
    chosen = rng.choice(total_clients, size=clients_per_round, replace=False) + 1
    return tuple(sorted(int(c) for c in chosen))


def fedavg_aggregate(updates: Sequence[ClientUpdate]) -> ModelParams:
    """
    Example-count weighted mean of client parameters.

    Updates are combined in silo-id order as ref + sum(w_i * (theta_i - ref)),
    so identical updates reproduce their vector exactly.
    """
    if not updates:
        raise AggregationError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.silo_id)
    silo_ids = [u.silo_id for u in ordered]
    if len(set(silo_ids)) != len(silo_ids):
        raise AggregationError(f"duplicate client updates for silos {silo_ids}")
    layout = ordered[0].params.layout
    for update in ordered[1:]:
        if update.params.layout != layout:
            raise AggregationError(
                f"client {update.silo_id} returned a different parameter layout")

    total = sum(u.example_count for u in ordered)
    reference = ordered[0].params.values
    delta = np.zeros_like(reference)
    for update in ordered:
        delta += (update.example_count / total) * (update.params.values - reference)
    return ModelParams(reference + delta, layout)


def _map_clients(fn: Callable[[T], R], items: Sequence[T], max_workers: int) -> List[R]:
    if max_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))


def _initial_params(model_config: HighwayNetConfig, seed: int) -> ModelParams:
    init_seed = derive_seed(seed, "init", model_config.init_seed)
    return init_model(model_config.model_copy(update={"init_seed": init_seed}))


def _pos_weight(train: EncodedDataset, gamma: float, enabled: bool) -> float:
    if not enabled:
        return 1.0
    return compute_class_weight(train.n_pos, train.n_neg, gamma)


def _holdout(ds: EncodedDataset, fraction: float, seed: int, *index) -> Tuple[EncodedDataset, Optional[EncodedDataset]]:
    """Split off a validation slice for early stopping; at least one row stays for fitting"""
    n_val = min(int(np.floor(fraction * ds.n_rows)), ds.n_rows - 1)
    if n_val <= 0:
        return ds, None
    order = derive_rng(seed, "validation", *index).permutation(ds.n_rows)
    return ds.subset(np.sort(order[n_val:])), ds.subset(np.sort(order[:n_val]))


def _check_silos(data: SplitPartition, total_clients: int) -> None:
    expected = set(range(1, total_clients + 1))
    present = {s for s, rows in data.per_silo_train.items() if len(rows) > 0}
    missing = sorted(expected - present)
    if missing:
        raise ConfigError(f"silo {missing[0]} has no training rows (missing: {missing})")
    extra = sorted(set(data.per_silo_train) - expected)
    if extra:
        raise ConfigError(f"data holds silos {extra} outside 1..{total_clients}")


class FederatedRun(NamedTuple):
    params: ModelParams
    history: List[RoundRecord]
    ledger: CommLedger


def run_federated(data: SplitPartition, config: FedConfig, threshold: float = 0.5) -> FederatedRun:
    """
    FedAvg with partial participation.

    Every round samples clients, trains each from the current global
    model, aggregates, evaluates the pooled test set and every silo's test
    slice, and records the round's bytes in the ledger.
    """
    _check_silos(data, config.total_clients)
    model_config = config.model.resolve(data.train.input_dim)
    params = _initial_params(model_config, config.seed)
    pos_weight = _pos_weight(data.train, config.gamma, config.class_weighting)
    ledger = CommLedger(
        config.cost_strategy, param_byte_size(params),
        config.clients_per_round, config.total_clients)
    partitions = {GLOBAL_SCOPE: np.arange(data.test.n_rows), **data.per_silo_test}

    logger.info(
        "Federated run: %s rounds, %s/%s clients per round, pos_weight %.4f, model %s bytes",
        config.n_rounds, config.clients_per_round, config.total_clients,
        pos_weight, ledger.model_bytes)

    history: List[RoundRecord] = []
    for round_index in range(1, config.n_rounds + 1):
        start_time = time.time()
        participants = sample_clients(
            config.total_clients, config.clients_per_round, config.seed, round_index)
        global_params = params

        def train_client(silo: int) -> ClientUpdate:
            subset = data.train.subset(data.per_silo_train[silo])
            client_start = time.time()
            local, stats = train_local(
                global_params, subset, None, model_config,
                config.local_epochs, config.batch_size, pos_weight,
                derive_seed(config.seed, "client", round_index, silo), threshold=threshold)
            local_training_histogram.labels(mode="federated").observe(time.time() - client_start)
            epochs_counter.labels(mode="federated").inc(stats.epochs_run)
            logger.debug(
                "Round %s client %s: %s rows, final loss %.4f",
                round_index, silo, subset.n_rows, stats.losses[-1] if stats.losses else float("nan"))
            return ClientUpdate(silo, local, subset.n_rows, stats)

        updates = _map_clients(train_client, participants, config.max_workers)
        params = fedavg_aggregate(updates)

        evaluated = evaluate_partitions(params, data.test, partitions, threshold)
        global_metrics = evaluated.pop(GLOBAL_SCOPE)
        entry = ledger.record_round(round_index)
        history.append(RoundRecord(
            round_index, participants, global_metrics, evaluated,
            entry.bytes_up, entry.bytes_down))

        duration = time.time() - start_time
        rounds_completed_counter.labels(strategy=ledger.strategy.value).inc()
        client_updates_counter.inc(len(updates))
        bytes_transferred_counter.labels(direction="up").inc(entry.bytes_up)
        bytes_transferred_counter.labels(direction="down").inc(entry.bytes_down)
        round_duration_histogram.observe(duration)
        set_metric_gauge(global_f1_gauge, global_metrics.f1)
        set_metric_gauge(global_auc_gauge, global_metrics.auc)
        logger.info(
            "Round %s/%s done in %.2fs: f1=%s auc=%s",
            round_index, config.n_rounds, duration,
            format_metric(global_metrics.f1), format_metric(global_metrics.auc))

    total_bytes, total_gb = total_cost(ledger)
    logger.info("Federated run finished: %s bytes moved (%.4f GB)", total_bytes, total_gb)
    return FederatedRun(params, history, ledger)


class CentralizedRun(NamedTuple):
    params: ModelParams
    history: List[MetricSet]
    stats: TrainStats
    final_metrics: MetricSet


def run_centralized(
        data: SplitPartition,
        config: FedConfig,
        epochs: Optional[int] = None,
        threshold: float = 0.5) -> CentralizedRun:
    """
    Same architecture trained on the pooled training rows.

    Uses gamma_centralized and n_rounds epochs unless `epochs` is given.
    history[0] is the initial model; one entry follows per epoch.
    """
    epochs = config.n_rounds if epochs is None else epochs
    model_config = config.model.resolve(data.train.input_dim)
    params = _initial_params(model_config, config.seed)
    fit, validation = _holdout(data.train, config.validation_fraction, config.seed, "centralized")
    pos_weight = _pos_weight(fit, config.gamma_centralized, config.class_weighting)
    test_rows = np.arange(data.test.n_rows)

    history = [evaluate_partition(params, data.test, test_rows, threshold)]

    def record_epoch(epoch: int, current: ModelParams) -> None:
        metrics = evaluate_partition(current, data.test, test_rows, threshold)
        history.append(metrics)
        logger.info(
            "Centralized epoch %s/%s: f1=%s auc=%s",
            epoch, epochs, format_metric(metrics.f1), format_metric(metrics.auc))

    logger.info(
        "Centralized run: %s epochs on %s rows, pos_weight %.4f",
        epochs, fit.n_rows, pos_weight)
    start_time = time.time()
    params, stats = train_local(
        params, fit, validation, model_config, epochs, config.batch_size, pos_weight,
        derive_seed(config.seed, "centralized"), on_epoch_end=record_epoch, threshold=threshold)
    local_training_histogram.labels(mode="centralized").observe(time.time() - start_time)
    epochs_counter.labels(mode="centralized").inc(stats.epochs_run)
    for warning in stats.warnings:
        logger.warning("Centralized training: %s", warning)

    final_metrics = evaluate_partition(params, data.test, test_rows, threshold)
    set_metric_gauge(global_f1_gauge, final_metrics.f1)
    set_metric_gauge(global_auc_gauge, final_metrics.auc)
    return CentralizedRun(params, history, stats, final_metrics)


@dataclass(frozen=True)
class SiloBaseline:
    """One silo's independently trained model, evaluated on its own test rows."""
    silo_id: int
    metrics: MetricSet
    pos_weight: float
    weight_degenerate: bool
    stats: TrainStats


@dataclass
class LocalBaselines:
    """Per-silo baselines with macro averages and exclusions."""
    silos: Dict[int, SiloBaseline]
    macro: Dict[str, Optional[float]] = field(default_factory=dict)
    excluded: Dict[str, List[int]] = field(default_factory=dict)
    no_test_positives: List[int] = field(default_factory=list)
    degenerate_weights: List[int] = field(default_factory=list)

    def summary(self) -> Dict:
        return {
            "macro": self.macro,
            "excluded": self.excluded,
            "no_test_positives": self.no_test_positives,
            "degenerate_class_weight": self.degenerate_weights,
            "silos": {
                str(s): {**b.metrics.model_dump(), "pos_weight": b.pos_weight,
                         "weight_degenerate": b.weight_degenerate}
                for s, b in sorted(self.silos.items())
            },
        }


def run_local_baselines(
        data: SplitPartition,
        config: FedConfig,
        epochs: Optional[int] = None,
        threshold: float = 0.5) -> LocalBaselines:
    """
    Train one model per silo on its own rows only.

    Silos without training positives train unweighted and are flagged;
    silos without test positives get null recall/F1 and drop out of the
    macro averages.
    """
    epochs = config.local_baseline_epochs if epochs is None else epochs
    model_config = config.model.resolve(data.train.input_dim)
    initial = _initial_params(model_config, config.seed)

    def train_silo(silo: int) -> SiloBaseline:
        subset = data.train.subset(data.per_silo_train[silo])
        fit, validation = _holdout(subset, config.validation_fraction, config.seed, "local", silo)
        degenerate = False
        try:
            pos_weight = _pos_weight(fit, config.gamma, config.class_weighting)
        except DegenerateClassError as e:
            logger.warning("Silo %s: %s; training unweighted", silo, e)
            pos_weight, degenerate = 1.0, True
        start_time = time.time()
        params, stats = train_local(
            initial, fit, validation, model_config, epochs, config.batch_size, pos_weight,
            derive_seed(config.seed, "local", silo), threshold=threshold)
        local_training_histogram.labels(mode="local").observe(time.time() - start_time)
        epochs_counter.labels(mode="local").inc(stats.epochs_run)
        metrics = evaluate_partition(params, data.test, data.per_silo_test[silo], threshold)
        logger.info(
            "Local baseline silo %s: f1=%s auc=%s",
            silo, format_metric(metrics.f1), format_metric(metrics.auc))
        return SiloBaseline(silo, metrics, pos_weight, degenerate, stats)

    results = _map_clients(train_silo, data.silos, config.max_workers)
    baselines = LocalBaselines(silos={b.silo_id: b for b in results})
    for name in METRIC_NAMES:
        value, excluded = macro_average(
            {b.silo_id: getattr(b.metrics, name) for b in results})
        baselines.macro[name] = value
        baselines.excluded[name] = excluded
    baselines.no_test_positives = [b.silo_id for b in results if b.metrics.support_pos == 0]
    baselines.degenerate_weights = [b.silo_id for b in results if b.weight_degenerate]

    if baselines.no_test_positives:
        logger.warning("Silos without test positives: %s", baselines.no_test_positives)
    logger.info(
        "Local baselines macro f1=%s (excluded %s)",
        format_metric(baselines.macro["f1"]), baselines.excluded["f1"])
    return baselines


# --- Result rows ---

def round_history_rows(history: Sequence[RoundRecord]) -> List[Dict]:
    """round, silo-or-GLOBAL, precision, recall, f1, auc, bytes_up, bytes_down"""
    rows = []
    for record in history:
        scopes = [(GLOBAL_SCOPE, record.global_metrics)] + sorted(record.silo_metrics.items())
        for scope, metrics in scopes:
            row = build_metric_row(scope, metrics, round=record.round_index)
            row.update({"bytes_up": record.bytes_up, "bytes_down": record.bytes_down})
            rows.append(row)
    return rows


def silo_metric_rows(global_metrics: MetricSet, silo_metrics: Dict[int, MetricSet]) -> List[Dict]:
    """Final per-silo metrics with supports, GLOBAL first"""
    rows = []
    for scope, metrics in [(GLOBAL_SCOPE, global_metrics)] + sorted(silo_metrics.items()):
        row = build_metric_row(scope, metrics)
        row.update({"support_pos": metrics.support_pos, "support_neg": metrics.support_neg})
        rows.append(row)
    return rows
