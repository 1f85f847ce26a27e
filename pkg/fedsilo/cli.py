"""
Command-line experiment runner

    python -m fedsilo generate-data --config configs/default.json
    python -m fedsilo train --mode federated --config configs/default.json
    python -m fedsilo explain --config configs/default.json
    python -m fedsilo report --out runs/default --charts
"""
import sys
import time
import logging
import argparse
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from fedsilo import settings
from fedsilo.dataset import (
    EncodedDataset,
    SplitPartition,
    load_dataset,
    load_schema,
    save_schema,
    save_table_csv,
    split_and_partition,
    synthesize_table,
    synthetic_schema,
)
from fedsilo.errors import AttributionError, ConfigError, DataError, FedSiloError
from fedsilo.explain import (
    GroupStructure,
    all_bins,
    attribution_rows,
    bin_distributions,
    bin_rows,
    draw_background,
    explain_instances,
    select_instances,
    summarize_attributions,
    summary_rows,
)
from fedsilo.federation import (
    round_history_rows,
    run_centralized,
    run_federated,
    run_local_baselines,
    silo_metric_rows,
)
from fedsilo.instrumentation import write_telemetry
from fedsilo.metrics import evaluate_partitions
from fedsilo.nn import load_params, save_params
from fedsilo.report import build_report, write_charts
from fedsilo.runs import RunDirectory
from fedsilo.schemas import ExperimentConfig, TrainMode
from fedsilo.utils import GLOBAL_SCOPE, build_metric_row, derive_seed

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3
EXACT_RESIDUAL_TOLERANCE = 1e-6
TELEMETRY_NAME = "telemetry.prom"


def load_config(path: Optional[str] = None, seed: Optional[int] = None,
                out: Optional[str] = None) -> ExperimentConfig:
    """Validate a JSON experiment config and apply command-line overrides"""
    try:
        if path is None:
            config = ExperimentConfig()
        else:
            config = ExperimentConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["output_dir"] = out
    return config.model_copy(update=updates)


def prepare_data(config: ExperimentConfig) -> Tuple[EncodedDataset, SplitPartition]:
    """Load or synthesize, filter, encode and split the configured data"""
    source = config.data
    schema = None if source.synthetic is not None else load_schema(source.schema_path)
    ds, _ = load_dataset(source.csv_path, schema, source.synthetic, config.seed, source.delimiter)
    logger.info(
        "Encoded %s rows into %s columns (%s positive, %s negative)",
        ds.n_rows, ds.input_dim, ds.n_pos, ds.n_neg)
    return ds, split_and_partition(ds, config.split_ratio, config.seed)


def cmd_generate_data(config: ExperimentConfig) -> RunDirectory:
    """Write the synthetic survey CSV and its schema"""
    if config.data.synthetic is None:
        raise ConfigError("generate-data needs a synthetic data source")
    start_time = time.time()
    run = RunDirectory.create(config.output_dir, config)
    spec = config.data.synthetic
    table = synthesize_table(spec, config.seed)
    save_table_csv(table, run.path_of("survey.csv"), config.data.delimiter)
    run.adopt("survey.csv")
    save_schema(synthetic_schema(spec), run.path_of("schema.json"))
    run.adopt("schema.json")
    run.record_timing("generate-data", time.time() - start_time)
    run.save()
    logger.info(
        "Generated %s rows across %s silos into %s",
        table.row_count, len(np.unique(table.column(spec.silo_column))), run.path)
    return run


def _write_model(run: RunDirectory, params) -> None:
    save_params(params, run.path_of("model.bin"))
    run.record_file("model.bin")


def cmd_train(config: ExperimentConfig, mode: TrainMode) -> RunDirectory:
    """Train in one mode and write its metrics, model and ledger."""
    mode = TrainMode(mode)
    start_time = time.time()
    run = RunDirectory.create(config.output_dir, config)
    _, data = prepare_data(config)
    fed = config.fed_config()
    run.record_timing("prepare-data", time.time() - start_time)

    phase_start = time.time()
    if mode is TrainMode.FEDERATED:
        params, history, ledger = run_federated(data, fed, config.threshold)
        run.write_csv("rounds.csv", round_history_rows(history))
        last = history[-1]
        run.write_csv("silo_metrics.csv", silo_metric_rows(last.global_metrics, last.silo_metrics))
        _write_model(run, params)
        run.write_json("ledger.json", ledger.summary())
    elif mode is TrainMode.CENTRALIZED:
        result = run_centralized(data, fed, threshold=config.threshold)
        run.write_csv("epochs.csv", [
            build_metric_row(GLOBAL_SCOPE, metrics, epoch=epoch)
            for epoch, metrics in enumerate(result.history)
        ])
        evaluated = evaluate_partitions(result.params, data.test, data.per_silo_test, config.threshold)
        run.write_csv("silo_metrics.csv", silo_metric_rows(result.final_metrics, evaluated))
        _write_model(run, result.params)
    else:
        baselines = run_local_baselines(data, fed, threshold=config.threshold)
        rows = []
        for silo, baseline in sorted(baselines.silos.items()):
            row = build_metric_row(silo, baseline.metrics)
            row.update({
                "support_pos": baseline.metrics.support_pos,
                "support_neg": baseline.metrics.support_neg,
                "pos_weight": baseline.pos_weight,
                "weight_degenerate": baseline.weight_degenerate,
            })
            rows.append(row)
        run.write_csv("local_baselines.csv", rows)
        run.write_json("local_baselines.json", baselines.summary())
    run.record_timing(f"train-{mode.value}", time.time() - phase_start)

    write_telemetry(run.path_of(TELEMETRY_NAME))
    run.adopt(TELEMETRY_NAME)
    run.save()
    return run


def cmd_explain(config: ExperimentConfig, model_path: Optional[str] = None) -> RunDirectory:
    """Attribute a seeded sample of test rows and export values, summary and bins."""
    start_time = time.time()
    run = RunDirectory.create(config.output_dir, config)
    _, data = prepare_data(config)
    attribution = config.attribution
    model_config = config.federation.model.resolve(data.test.input_dim)
    params = load_params(model_path or run.path_of("model.bin"), expected=model_config)

    structure = GroupStructure.from_dataset(data.test, attribution.players, attribution.blocks)
    background = draw_background(
        data.train, attribution.background_size, derive_seed(config.seed, "background"))
    if attribution.silo is not None and attribution.silo not in data.per_silo_test:
        raise ConfigError(f"silo {attribution.silo} has no test rows")
    indices = select_instances(data.test, attribution.instance_sample_size, config.seed, attribution.silo)
    logger.info(
        "Explaining %s instances with %s over %s players in %s blocks",
        len(indices), attribution.method.value, structure.n_players, len(structure.blocks))

    attributions = explain_instances(
        params, data.test, indices, structure, background, attribution.method,
        attribution.n_permutations, config.seed)
    if attribution.method.is_exact:
        worst = max(attributions, key=lambda a: abs(a.efficiency_residual))
        if abs(worst.efficiency_residual) > EXACT_RESIDUAL_TOLERANCE:
            raise AttributionError(
                f"instance {worst.instance_index} has efficiency residual "
                f"{worst.efficiency_residual:.3e}")

    bins = attribution.bins or all_bins(structure)
    distributions = bin_distributions(attributions, data.test, bins)
    empty_positive = [f"{d.player}:{d.bin_name}" for d in distributions if d.no_positives]
    if empty_positive:
        logger.warning("Bins without positive instances: %s", empty_positive)

    run.write_csv("attributions.csv", attribution_rows(attributions))
    run.write_csv("attribution_summary.csv", summary_rows(summarize_attributions(attributions)))
    run.write_csv("bin_distributions.csv", bin_rows(distributions),
                  columns=["bin_name", "instance_id", "value", "label", "no_positives"])
    run.record_timing(f"explain-{attribution.method.value}", time.time() - start_time)

    write_telemetry(run.path_of(TELEMETRY_NAME))
    run.adopt(TELEMETRY_NAME)
    run.save()
    return run


def cmd_report(run_dir: str, charts: bool = False) -> RunDirectory:
    """Summarize a run directory, optionally with SVG charts"""
    start_time = time.time()
    run = RunDirectory.open(run_dir)
    text = build_report(run)
    run.write_text("report.txt", text)
    if charts:
        write_charts(run)
    run.record_timing("report", time.time() - start_time)
    run.save()
    sys.stdout.write(text)
    return run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsilo",
        description="Cross-silo federated learning simulator with Shapley/Owen attribution")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults apply when omitted)")
    common.add_argument("--out", help="run directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="experiment seed override")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", parents=[common], help="write a synthetic survey CSV")
    train = sub.add_parser("train", parents=[common], help="train and evaluate")
    train.add_argument("--mode", choices=[m.value for m in TrainMode],
                       default=TrainMode.FEDERATED.value)
    explain = sub.add_parser("explain", parents=[common], help="attribute predictions")
    explain.add_argument("--model", help="serialized model (default: <run dir>/model.bin)")
    report = sub.add_parser("report", parents=[common], help="summarize a run directory")
    report.add_argument("--charts", action="store_true", help="also write SVG charts")
    return parser


def exit_code_for(error: Exception) -> int:
    if isinstance(error, (ConfigError, ValidationError)):
        return EXIT_CONFIG
    if isinstance(error, DataError):
        return EXIT_DATA
    return EXIT_RUNTIME


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else settings.LOG_LEVEL,
        format=settings.LOG_FORMAT
    )

    try:
        if args.command == "report" and args.config is None:
            cmd_report(args.out or settings.OUTPUT_DIR, args.charts)
            return EXIT_OK
        config = load_config(args.config, args.seed, args.out)
        if args.command == "generate-data":
            cmd_generate_data(config)
        elif args.command == "train":
            cmd_train(config, TrainMode(args.mode))
        elif args.command == "explain":
            cmd_explain(config, args.model)
        else:
            cmd_report(config.output_dir, args.charts)
    except (FedSiloError, ValidationError) as e:
        logger.error("%s failed: %s", args.command, e)
        return exit_code_for(e)
    return EXIT_OK
