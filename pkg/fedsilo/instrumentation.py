'''
Prometheus metrics for training and attribution runs
'''
from pathlib import Path

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

# Runs are batch processes; a private registry is written to a textfile at the end
REGISTRY = CollectorRegistry()

# Counters - always increase
rounds_completed_counter = Counter(
    'fedsilo_rounds_completed_total',
    'Total number of federated rounds completed',
    ['strategy'],
    registry=REGISTRY
)

client_updates_counter = Counter(
    'fedsilo_client_updates_total',
    'Total number of client updates aggregated',
    registry=REGISTRY
)

bytes_transferred_counter = Counter(
    'fedsilo_bytes_transferred_total',
    'Model bytes moved between server and clients',
    ['direction'],  # up or down
    registry=REGISTRY
)

epochs_counter = Counter(
    'fedsilo_local_epochs_total',
    'Total number of local training epochs run',
    ['mode'],
    registry=REGISTRY
)

attributions_counter = Counter(
    'fedsilo_attributions_total',
    'Total number of explained instances',
    ['method'],
    registry=REGISTRY
)

# Histograms - measure distributions
local_training_histogram = Histogram(
    'fedsilo_local_training_seconds',
    'Time spent in one train_local call',
    ['mode'],
    buckets=(0.01, 0.05, 0.1, 0.5, 1.0, 2.5, 5.0, 10.0, 30.0, float('inf')),
    registry=REGISTRY
)

round_duration_histogram = Histogram(
    'fedsilo_round_seconds',
    'Wall-clock time of one federated round including evaluation',
    buckets=(0.1, 0.5, 1.0, 2.5, 5.0, 10.0, 30.0, 60.0, float('inf')),
    registry=REGISTRY
)

attribution_duration_histogram = Histogram(
    'fedsilo_attribution_seconds',
    'Time spent explaining one instance',
    ['method'],
    registry=REGISTRY
)

# Gauges - can go up or down
global_f1_gauge = Gauge(
    'fedsilo_global_f1',
    'Pooled-test F1 of the latest global model (NaN when undefined)',
    registry=REGISTRY
)

global_auc_gauge = Gauge(
    'fedsilo_global_auc',
    'Pooled-test AUC of the latest global model (NaN when undefined)',
    registry=REGISTRY
)


def set_metric_gauge(gauge: Gauge, value) -> None:
    """Set a gauge from an optional metric"""
    gauge.set(float('nan') if value is None else value)


def write_telemetry(path: Path) -> Path:
    """Write the registry in the Prometheus text format"""
    write_to_textfile(str(path), REGISTRY)
    return path
