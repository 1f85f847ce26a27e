"""
Test configuration and fixtures
"""
import json
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np
import pytest

from fedsilo.dataset import encode, generate_synthetic, split_and_partition, synthetic_schema
from fedsilo.schemas import (
    FedConfig,
    FeatureColumn,
    HighwayNetConfig,
    SurveySchema,
    SynthesisConfig,
    SyntheticFeature,
    TargetColumn,
)


@pytest.fixture
def tiny_schema() -> SurveySchema:
    """
    Two features (3 and 4 categories), a Yes/No target with 98/99
    nonresponse codes and four silos
    """
    return SurveySchema(
        feature_columns=[
            FeatureColumn(name="income", codes=[1, 2, 3]),
            FeatureColumn(name="education", codes=[1, 2, 3, 4]),
        ],
        target=TargetColumn(name="CONTACTED", positive=1, negative=2),
        silo_column="STATEQ",
        silo_count=4,
        excluded_codes={"CONTACTED": [98, 99]},
    )


@pytest.fixture
def write_csv(tmp_path) -> Callable[[str, List[str], List[List], str], Path]:
    """Write rows under a header into tmp_path"""
    def _write(name: str, header: List[str], rows: List[List], delimiter: str = ",") -> Path:
        path = tmp_path / name
        lines = [delimiter.join(header)] + [delimiter.join(str(c) for c in row) for row in rows]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path
    return _write


@pytest.fixture
def small_synthesis() -> SynthesisConfig:
    """Four silos of 60 rows over three features"""
    return SynthesisConfig(
        n_silos=4,
        rows_per_silo=60,
        features=[
            SyntheticFeature(name="income", n_categories=4),
            SyntheticFeature(name="employment", n_categories=3),
            SyntheticFeature(name="insured", n_categories=2),
        ],
        composite_feature=None,
        target_rate=0.3,
    )


@pytest.fixture
def small_dataset(small_synthesis):
    table = generate_synthetic(small_synthesis, seed=3)
    return encode(table, synthetic_schema(small_synthesis))


@pytest.fixture
def small_split(small_dataset):
    return split_and_partition(small_dataset, 0.8, seed=3)


@pytest.fixture
def small_model_config() -> HighwayNetConfig:
    return HighwayNetConfig(hidden_width=6, n_blocks=2, init_seed=1)


@pytest.fixture
def small_fed_config(small_model_config) -> FedConfig:
    """Three rounds, two of four clients per round"""
    return FedConfig(
        n_rounds=3,
        clients_per_round=2,
        total_clients=4,
        model=small_model_config,
        local_baseline_epochs=2,
        max_workers=1,
        seed=5,
    )


@pytest.fixture
def small_experiment(tmp_path) -> Callable[..., Path]:
    """Write a small experiment config JSON and return its path"""
    def _write(**overrides) -> Path:
        config: Dict = {
            "data": {"synthetic": {
                "n_silos": 3,
                "rows_per_silo": 40,
                "features": [
                    {"name": "gender_age", "n_categories": 12},
                    {"name": "income", "n_categories": 4},
                    {"name": "insured", "n_categories": 2},
                ],
                "target_rate": 0.3,
            }},
            "federation": {
                "n_rounds": 2,
                "clients_per_round": 2,
                "total_clients": 3,
                "model": {"hidden_width": 4, "n_blocks": 2},
                "local_baseline_epochs": 2,
            },
            "attribution": {"instance_sample_size": 3, "background_size": 5},
            "output_dir": str(tmp_path / "run"),
            "seed": 11,
        }
        for key, value in overrides.items():
            config[key] = value
        path = tmp_path / "experiment.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        return path
    return _write


@pytest.fixture
def linear_model() -> Callable[[np.ndarray], Callable[[np.ndarray], np.ndarray]]:
    """Build f(X) = X @ w + bias as an attribution target"""
    def _build(weights, bias: float = 0.0):
        w = np.asarray(weights, dtype=np.float64)
        return lambda rows: rows @ w + bias
    return _build
