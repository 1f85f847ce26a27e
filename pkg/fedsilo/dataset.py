"""
Survey data: load, filter, encode, split and partition by silo.

Rows flow through one path regardless of origin: a CSV read by
load_and_filter and a synthetic table from generate_synthetic both pass
filter_table, then encode, then split_and_partition.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy.optimize import brentq
from scipy.special import expit

from fedsilo.errors import (
    ConfigError,
    DataError,
    DataParseError,
    DegenerateClassError,
    PartitionError,
    SchemaError,
)
from fedsilo.schemas import (
    DerivedView,
    FeatureColumn,
    SurveySchema,
    SynthesisConfig,
    TargetColumn,
)
from fedsilo.utils import derive_rng

logger = logging.getLogger(__name__)

NONRESPONSE_CODES = (98, 99)
TARGET_YES = 1
TARGET_NO = 2
AGE_LABELS = {1: "18-24", 2: "25-34", 3: "35-44", 4: "45-54", 5: "55-64", 6: "65+"}


def _readonly(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class RawSurveyTable:
    """Integer code table aligned to a list of columns."""
    columns: Tuple[str, ...]
    rows: np.ndarray
    excluded_count: int = 0
    invalid_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        _readonly(self.rows)

    @property
    def row_count(self) -> int:
        return int(self.rows.shape[0])

    @property
    def dropped_count(self) -> int:
        return self.excluded_count + self.invalid_count

    def column(self, name: str) -> np.ndarray:
        """Codes of one column"""
        try:
            return self.rows[:, self.columns.index(name)]
        except ValueError:
            raise SchemaError(f"table has no column '{name}'") from None


@dataclass(frozen=True)
class FeatureSpan:
    """Contiguous one-hot block of one feature or derived view."""
    name: str
    start: int
    stop: int
    codes: Tuple[int, ...]
    labels: Mapping[int, str] = field(default_factory=dict)
    derived: bool = False
    source: Optional[str] = None

    @property
    def width(self) -> int:
        return self.stop - self.start

    def column_of(self, code: int) -> int:
        """Design-matrix column holding the given category"""
        if code not in self.codes:
            raise KeyError(f"feature '{self.name}' has no category {code}")
        return self.start + self.codes.index(code)

    def label(self, code: int) -> str:
        return self.labels.get(code, f"{self.name}={code}")


@dataclass(frozen=True)
class EncodedDataset:
    """One-hot design matrix with labels, silo ids and feature spans."""
    design_matrix: np.ndarray
    labels: np.ndarray
    silo_ids: np.ndarray
    feature_spans: Tuple[FeatureSpan, ...]

    def __post_init__(self):
        object.__setattr__(self, "feature_spans", tuple(self.feature_spans))
        n = self.design_matrix.shape[0]
        if self.labels.shape != (n,) or self.silo_ids.shape != (n,):
            raise DataError("labels and silo ids must have one entry per row")
        for array in (self.design_matrix, self.labels, self.silo_ids):
            _readonly(array)

    @property
    def n_rows(self) -> int:
        return int(self.design_matrix.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.design_matrix.shape[1])

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return self.n_rows - self.n_pos

    @property
    def original_spans(self) -> Tuple[FeatureSpan, ...]:
        return tuple(s for s in self.feature_spans if not s.derived)

    def span(self, name: str) -> FeatureSpan:
        for span in self.feature_spans:
            if span.name == name:
                return span
        raise SchemaError(f"dataset has no feature span named '{name}'")

    def silos(self) -> List[int]:
        return [int(s) for s in np.unique(self.silo_ids)]

    def subset(self, indices: Sequence[int]) -> "EncodedDataset":
        """Rows at the given positions, in that order"""
        idx = np.asarray(indices, dtype=np.int64)
        return EncodedDataset(
            design_matrix=self.design_matrix[idx],
            labels=self.labels[idx],
            silo_ids=self.silo_ids[idx],
            feature_spans=self.feature_spans,
        )

    def decode(self) -> np.ndarray:
        """Category codes per original feature (argmax of each span)."""
        out = np.empty((self.n_rows, len(self.original_spans)), dtype=np.int64)
        for j, span in enumerate(self.original_spans):
            block = self.design_matrix[:, span.start:span.stop]
            out[:, j] = np.asarray(span.codes)[np.argmax(block, axis=1)]
        return out


@dataclass(frozen=True)
class SplitPartition:
    """Train/test split with per-silo row indices into each side."""
    train: EncodedDataset
    test: EncodedDataset
    per_silo_train: Dict[int, np.ndarray]
    per_silo_test: Dict[int, np.ndarray]
    seed: int
    ratio: float
    train_rows: np.ndarray
    test_rows: np.ndarray

    @property
    def silos(self) -> List[int]:
        return sorted(self.per_silo_train)


# --- Loading and filtering ---

def filter_table(codes: np.ndarray, columns: Sequence[str], schema: SurveySchema) -> RawSurveyTable:
    """
    Drop rows holding an excluded code or a code outside its allowed set.

    Args:
        codes: integer matrix, one column per entry of `columns`
        columns: column names of `codes`; may include columns the schema ignores
        schema: survey schema

    Returns:
        RawSurveyTable: rows reordered to schema.columns with drop counts
    """
    columns = list(columns)
    missing = [c for c in schema.columns if c not in columns]
    if missing:
        raise SchemaError(f"missing column '{missing[0]}'")
    codes = np.asarray(codes, dtype=np.int64).reshape(-1, len(columns))
    ordered = codes[:, [columns.index(c) for c in schema.columns]]

    excluded = np.zeros(ordered.shape[0], dtype=bool)
    for column, bad_codes in schema.excluded_codes.items():
        j = schema.columns.index(column)
        excluded |= np.isin(ordered[:, j], bad_codes)

    invalid = np.zeros(ordered.shape[0], dtype=bool)
    for j, column in enumerate(schema.columns):
        allowed = np.fromiter(schema.allowed_codes(column), dtype=np.int64)
        invalid |= ~np.isin(ordered[:, j], allowed)
    invalid &= ~excluded

    keep = ~(excluded | invalid)
    return RawSurveyTable(
        columns=tuple(schema.columns),
        rows=np.ascontiguousarray(ordered[keep]),
        excluded_count=int(excluded.sum()),
        invalid_count=int(invalid.sum()),
    )


def load_and_filter(path: Union[str, Path], schema: SurveySchema, delimiter: str = ",") -> RawSurveyTable:
    """
    Read a survey CSV and filter it against the schema.

    Raises:
        SchemaError: when a schema column is missing from the header
        DataParseError: when the file is not UTF-8 CSV or a cell is not an integer code
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"survey file not found: {path}")

    try:
        frame = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.ParserError as e:
        raise DataParseError(f"malformed CSV {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise DataParseError(f"{path} is not UTF-8 text: byte {e.start}: {e.reason}") from e
    except pd.errors.EmptyDataError:
        raise DataParseError(f"survey file is empty: {path}") from None
    frame.columns = [str(c).strip() for c in frame.columns]
    for column in schema.columns:
        if column not in frame.columns:
            raise SchemaError(f"missing column '{column}' in {path}")

    frame = frame[schema.columns]
    parsed = frame.apply(lambda s: pd.to_numeric(s.str.strip(), errors="coerce"))
    bad = parsed.isna() | (parsed % 1 != 0)
    if bad.to_numpy().any():
        row, col = np.argwhere(bad.to_numpy())[0]
        column = schema.columns[col]
        raise DataParseError(
            f"row {row + 1} (line {row + 2}), column '{column}': "
            f"cannot parse {frame.iat[row, col]!r} as an integer code")

    table = filter_table(parsed.to_numpy(dtype=np.int64), schema.columns, schema)
    logger.info(
        "Loaded %s rows from %s; kept %s, excluded %s, invalid %s",
        len(frame), path, table.row_count, table.excluded_count, table.invalid_count)
    return table


def load_schema(path: Union[str, Path]) -> SurveySchema:
    """Parse a SurveySchema JSON document"""
    try:
        return SurveySchema.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"schema file not found: {path}") from None
    except ValidationError as e:
        raise ConfigError(f"invalid survey schema {path}: {e}") from e


def save_schema(schema: SurveySchema, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(schema.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def save_table_csv(table: RawSurveyTable, path: Union[str, Path], delimiter: str = ",") -> Path:
    """Write a table in the CSV dialect load_and_filter reads"""
    path = Path(path)
    pd.DataFrame(table.rows, columns=list(table.columns)).to_csv(
        path, sep=delimiter, index=False, lineterminator="\n")
    return path


# --- Encoding ---

def encode(table: RawSurveyTable, schema: SurveySchema) -> EncodedDataset:
    """
    One-hot encode every feature column, then append derived-view spans.

    Category order inside a span is ascending code order.
    """
    blocks: List[np.ndarray] = []
    spans: List[FeatureSpan] = []
    start = 0

    def add_block(name, values, codes, labels, derived, source=None):
        nonlocal start
        codes = sorted(codes)
        onehot = np.zeros((values.shape[0], len(codes)), dtype=np.float64)
        onehot[np.arange(values.shape[0]), np.searchsorted(codes, values)] = 1.0
        blocks.append(onehot)
        spans.append(FeatureSpan(name, start, start + len(codes), tuple(codes), dict(labels), derived, source))
        start += len(codes)

    for feature in schema.feature_columns:
        add_block(feature.name, table.column(feature.name), feature.codes, feature.labels, False)

    for view in schema.derived_views:
        source = schema.feature(view.source)
        src_codes = np.asarray(sorted(source.codes), dtype=np.int64)
        lookup = np.asarray([view.mapping[int(c)] for c in src_codes], dtype=np.int64)
        values = lookup[np.searchsorted(src_codes, table.column(view.source))]
        add_block(view.name, values, view.codes, view.labels, True, view.source)

    design = np.hstack(blocks) if blocks else np.zeros((table.row_count, 0))
    labels = (table.column(schema.target.name) == schema.target.positive).astype(np.int64)
    silo_ids = table.column(schema.silo_column).astype(np.int64)
    return EncodedDataset(
        design_matrix=np.ascontiguousarray(design),
        labels=np.ascontiguousarray(labels),
        silo_ids=np.ascontiguousarray(silo_ids),
        feature_spans=tuple(spans),
    )


# --- Splitting ---

def split_and_partition(ds: EncodedDataset, ratio: float, seed: int) -> SplitPartition:
    """
    Split each silo independently into train and test rows.

    A silo of n rows contributes round(ratio * n) training rows, clamped
    so both sides keep at least one row.

    Raises:
        ConfigError: ratio outside (0, 1)
        PartitionError: a silo with fewer than two rows
    """
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")

    train_parts, test_parts = [], []
    per_silo_train: Dict[int, np.ndarray] = {}
    per_silo_test: Dict[int, np.ndarray] = {}
    n_train_total = n_test_total = 0

    for silo in ds.silos():
        rows = np.flatnonzero(ds.silo_ids == silo)
        n = rows.shape[0]
        if n < 2:
            raise PartitionError(f"silo {silo} has {n} row(s); at least 2 are needed to split")
        n_train = min(max(int(np.floor(ratio * n + 0.5)), 1), n - 1)
        shuffled = derive_rng(seed, "split", silo).permutation(rows)
        train_rows = np.sort(shuffled[:n_train])
        test_rows = np.sort(shuffled[n_train:])

        train_parts.append(train_rows)
        test_parts.append(test_rows)
        per_silo_train[silo] = _readonly(np.arange(n_train_total, n_train_total + n_train))
        per_silo_test[silo] = _readonly(np.arange(n_test_total, n_test_total + n - n_train))
        n_train_total += n_train
        n_test_total += n - n_train

    train_rows = np.concatenate(train_parts) if train_parts else np.zeros(0, dtype=np.int64)
    test_rows = np.concatenate(test_parts) if test_parts else np.zeros(0, dtype=np.int64)
    logger.info(
        "Split %s rows over %s silos into %s train / %s test (ratio %.2f)",
        ds.n_rows, len(per_silo_train), n_train_total, n_test_total, ratio)
    return SplitPartition(
        train=ds.subset(train_rows),
        test=ds.subset(test_rows),
        per_silo_train=per_silo_train,
        per_silo_test=per_silo_test,
        seed=seed,
        ratio=ratio,
        train_rows=_readonly(train_rows),
        test_rows=_readonly(test_rows),
    )


def compute_class_weight(n_pos: int, n_neg: int, gamma: float) -> float:
    """Positive-class loss weight (n_neg / n_pos) * gamma."""
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    if n_pos <= 0 or n_neg <= 0:
        raise DegenerateClassError(
            f"class weight undefined for n_pos={n_pos}, n_neg={n_neg}")
    return (n_neg / n_pos) * gamma


# --- Synthetic data ---

def synthetic_schema(spec: SynthesisConfig) -> SurveySchema:
    """Schema describing tables produced from `spec`"""
    features = [
        FeatureColumn(name=f.name, codes=list(range(1, f.n_categories + 1)), labels=f.labels)
        for f in spec.features
    ]
    views = []
    if spec.composite_feature is not None:
        name = spec.composite_feature
        views = [
            DerivedView(
                name=f"{name}_gender", source=name,
                mapping={c: 1 if c <= 6 else 2 for c in range(1, 13)},
                labels={1: "Male", 2: "Female"}),
            DerivedView(
                name=f"{name}_age", source=name,
                mapping={c: (c - 1) % 6 + 1 for c in range(1, 13)},
                labels=AGE_LABELS),
        ]
    return SurveySchema(
        feature_columns=features,
        target=TargetColumn(name=spec.target_column, positive=TARGET_YES, negative=TARGET_NO),
        silo_column=spec.silo_column,
        silo_count=spec.n_silos,
        excluded_codes={spec.target_column: list(NONRESPONSE_CODES)},
        derived_views=views,
    )


def _calibrate_intercept(logits: np.ndarray, target_rate: float) -> float:
    if logits.size == 0:
        return 0.0
    lo, hi = -60.0 - logits.max(), 60.0 - logits.min()
    return brentq(lambda b: expit(logits + b).mean() - target_rate, lo, hi, xtol=1e-12)


def synthesize_table(spec: SynthesisConfig, seed: int) -> RawSurveyTable:
    """
    Unfiltered synthetic survey rows, nonresponse codes included.

    Each feature draws categories from a Dirichlet profile shared by all
    silos; a latent logistic model with per-silo perturbed coefficients
    and a calibrated intercept decides the target.
    """
    if spec.rows_per_silo <= 0:
        raise ConfigError(f"rows_per_silo must be positive, got {spec.rows_per_silo}")
    if not 0 < spec.target_rate < 1:
        raise ConfigError(f"target_rate must lie strictly between 0 and 1, got {spec.target_rate}")

    model_rng = derive_rng(seed, "synthetic", "model")
    profiles, coefficients = [], []
    for feature in spec.features:
        k = feature.n_categories
        profiles.append(model_rng.dirichlet(np.full(k, spec.category_concentration)))
        if feature.coefficients is not None:
            coefficients.append(np.asarray(feature.coefficients, dtype=np.float64))
        else:
            coefficients.append(model_rng.normal(0.0, spec.coefficient_scale, size=k))

    forced = set(spec.zero_positive_silos)
    silo_codes, silo_logits = [], []
    for silo in range(1, spec.n_silos + 1):
        rng = derive_rng(seed, "synthetic", "silo", silo)
        codes = np.empty((spec.rows_per_silo, len(spec.features)), dtype=np.int64)
        logits = np.zeros(spec.rows_per_silo)
        for j, feature in enumerate(spec.features):
            k = feature.n_categories
            codes[:, j] = rng.choice(k, size=spec.rows_per_silo, p=profiles[j]) + 1
            coef = coefficients[j] + rng.normal(0.0, spec.perturbation_scale, size=k)
            logits += coef[codes[:, j] - 1]
        silo_codes.append(codes)
        silo_logits.append(logits)

    free = [z for silo, z in zip(range(1, spec.n_silos + 1), silo_logits) if silo not in forced]
    intercept = _calibrate_intercept(np.concatenate(free), spec.target_rate)
    logger.debug("Synthetic intercept %.6f for target rate %.4f", intercept, spec.target_rate)

    blocks = []
    for silo, codes, logits in zip(range(1, spec.n_silos + 1), silo_codes, silo_logits):
        rng = derive_rng(seed, "synthetic", "labels", silo)
        positive = rng.random(spec.rows_per_silo) < expit(logits + intercept)
        if silo in forced:
            positive[:] = False
        target = np.where(positive, TARGET_YES, TARGET_NO)
        if spec.nonresponse_rate > 0:
            missing = rng.random(spec.rows_per_silo) < spec.nonresponse_rate
            target[missing] = rng.choice(NONRESPONSE_CODES, size=int(missing.sum()))
        silo_col = np.full(spec.rows_per_silo, silo, dtype=np.int64)
        blocks.append(np.column_stack([codes, target, silo_col]))

    columns = [f.name for f in spec.features] + [spec.target_column, spec.silo_column]
    return RawSurveyTable(columns=tuple(columns), rows=np.vstack(blocks))


def generate_synthetic(spec: SynthesisConfig, seed: int) -> RawSurveyTable:
    """Synthetic survey table after the same filtering a CSV load applies."""
    raw = synthesize_table(spec, seed)
    table = filter_table(raw.rows, raw.columns, synthetic_schema(spec))
    logger.info(
        "Generated %s synthetic rows over %s silos (%s nonresponse rows dropped)",
        table.row_count, spec.n_silos, table.excluded_count)
    return table


def load_dataset(
        csv_path: Optional[Union[str, Path]] = None,
        schema: Optional[SurveySchema] = None,
        synthetic: Optional[SynthesisConfig] = None,
        seed: int = 0,
        delimiter: str = ",") -> Tuple[EncodedDataset, SurveySchema]:
    """Filtered and encoded dataset from a CSV file or a synthetic spec"""
    if synthetic is not None:
        schema = synthetic_schema(synthetic)
        table = generate_synthetic(synthetic, seed)
    else:
        if csv_path is None or schema is None:
            raise ConfigError("a CSV data source needs both a file and a schema")
        table = load_and_filter(csv_path, schema, delimiter)
    return encode(table, schema), schema
