"""
Pydantic Models
"""
from typing import Dict, List, Optional, Set
from enum import Enum
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from fedsilo import settings
from fedsilo.errors import ConfigError


class StrictModel(BaseModel):
    """Base model that rejects unknown keys"""
    model_config = ConfigDict(extra="forbid")


class CostStrategy(str, Enum):
    """Communication Cost Strategy"""
    SELECTED_ONLY = "selected-only"
    BROADCAST_ALL = "broadcast-all"


class TrainMode(str, Enum):
    """Training Mode"""
    FEDERATED = "federated"
    CENTRALIZED = "centralized"
    LOCAL_BASELINES = "local-baselines"


class AttributionMethod(str, Enum):
    """Attribution Method"""
    SHAPLEY_EXACT = "shapley-exact"
    SHAPLEY_SAMPLED = "shapley-sampled"
    OWEN_EXACT = "owen-exact"
    OWEN_SAMPLED = "owen-sampled"

    @property
    def is_exact(self) -> bool:
        """True for the enumeration methods"""
        return self in (AttributionMethod.SHAPLEY_EXACT, AttributionMethod.OWEN_EXACT)


# --- Survey schema ---

class FeatureColumn(StrictModel):
    """Categorical Feature Column"""
    name: str
    codes: List[int]
    labels: Dict[int, str] = Field(default_factory=dict)

    @field_validator("codes")
    @classmethod
    def codes_non_empty_and_unique(cls, codes: List[int]) -> List[int]:
        """Allowed code sets are non-empty and duplicate-free"""
        if not codes:
            raise ValueError("allowed code set is empty")
        if len(set(codes)) != len(codes):
            raise ValueError(f"allowed codes contain duplicates: {codes}")
        return codes


class TargetColumn(StrictModel):
    """Binary Target Column"""
    name: str
    positive: int
    negative: int

    @model_validator(mode="after")
    def distinct_codes(self) -> "TargetColumn":
        """Positive and negative codes differ"""
        if self.positive == self.negative:
            raise ValueError("target positive and negative codes must differ")
        return self


class DerivedView(StrictModel):
    """Derived view of a feature, mapping source codes to coarser codes"""
    name: str
    source: str
    mapping: Dict[int, int]
    labels: Dict[int, str] = Field(default_factory=dict)

    @property
    def codes(self) -> List[int]:
        """Derived codes in ascending order"""
        return sorted(set(self.mapping.values()))


class SurveySchema(StrictModel):
    """Survey Schema"""
    feature_columns: List[FeatureColumn]
    target: TargetColumn
    silo_column: str
    silo_count: int = Field(51, ge=1)
    excluded_codes: Dict[str, List[int]] = Field(default_factory=dict)
    derived_views: List[DerivedView] = Field(default_factory=list)

    @model_validator(mode="after")
    def consistent_columns(self) -> "SurveySchema":
        """Column names are unique and every reference resolves"""
        if not self.feature_columns:
            raise ValueError("schema declares no feature columns")
        names = [f.name for f in self.feature_columns]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate feature column names: {names}")
        if self.target.name in names or self.silo_column in names:
            raise ValueError("target and silo columns must not be feature columns")
        if self.target.name == self.silo_column:
            raise ValueError("target and silo columns must differ")

        for column in self.excluded_codes:
            if column not in self.columns:
                raise ValueError(f"excluded_codes names unknown column '{column}'")

        view_names = set(names)
        for view in self.derived_views:
            if view.name in view_names:
                raise ValueError(f"derived view name '{view.name}' is already in use")
            view_names.add(view.name)
            source = self.feature(view.source)
            if source is None:
                raise ValueError(
                    f"derived view '{view.name}' references unknown feature '{view.source}'")
            unmapped = [c for c in source.codes if c not in view.mapping]
            if unmapped:
                raise ValueError(
                    f"derived view '{view.name}' does not map codes {unmapped} "
                    f"of '{view.source}'")
        return self

    @property
    def columns(self) -> List[str]:
        """All CSV columns the schema reads, in table order"""
        return [f.name for f in self.feature_columns] + [self.target.name, self.silo_column]

    def feature(self, name: str) -> Optional[FeatureColumn]:
        """Feature column by name"""
        for column in self.feature_columns:
            if column.name == name:
                return column
        return None

    def allowed_codes(self, column: str) -> Set[int]:
        """Codes a column may hold after filtering"""
        if column == self.target.name:
            return {self.target.positive, self.target.negative}
        if column == self.silo_column:
            return set(range(1, self.silo_count + 1))
        feature = self.feature(column)
        if feature is None:
            raise KeyError(column)
        return set(feature.codes)


# --- Synthetic data ---

class SyntheticFeature(StrictModel):
    """Synthetic Categorical Feature"""
    name: str
    n_categories: int = Field(ge=2)
    coefficients: Optional[List[float]] = None
    labels: Dict[int, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def coefficient_per_category(self) -> "SyntheticFeature":
        """One latent logistic coefficient per category when given"""
        if self.coefficients is not None and len(self.coefficients) != self.n_categories:
            raise ValueError(
                f"feature '{self.name}' has {self.n_categories} categories but "
                f"{len(self.coefficients)} coefficients")
        return self


_AGE_BINS = ["18-24", "25-34", "35-44", "45-54", "55-64", "65+"]

GENDER_AGE_LABELS = {
    i + 1: f"{gender} {age}"
    for i, (gender, age) in enumerate(
        (g, a) for g in ("Male", "Female") for a in _AGE_BINS)
}

EMPLOYMENT_LABELS = {
    1: "Self-employed", 2: "Full-time", 3: "Part-time", 4: "Homemaker",
    5: "Full-time student", 6: "Disabled", 7: "Unemployed", 8: "Retired",
    9: "Prefer not to say",
}

LIVING_ARRANGEMENT_LABELS = {
    1: "Only adult", 2: "With spouse/partner", 3: "With partner",
    4: "With parents", 5: "With other family/friends", 6: "Prefer not to say",
}


def default_synthetic_features() -> List[SyntheticFeature]:
    """Eleven survey-like features; 67 one-hot columns before derived views"""
    return [
        SyntheticFeature(name="gender_age", n_categories=12, labels=GENDER_AGE_LABELS),
        SyntheticFeature(name="annual_income", n_categories=8),
        SyntheticFeature(name="employment_status", n_categories=9, labels=EMPLOYMENT_LABELS),
        SyntheticFeature(name="marital_status", n_categories=5),
        SyntheticFeature(name="education", n_categories=7),
        SyntheticFeature(name="living_arrangement", n_categories=6,
                         labels=LIVING_ARRANGEMENT_LABELS),
        SyntheticFeature(name="financial_dependents", n_categories=5),
        SyntheticFeature(name="health_insurance", n_categories=3),
        SyntheticFeature(name="stock_investments", n_categories=3),
        SyntheticFeature(name="financial_education", n_categories=4),
        SyntheticFeature(name="financial_help_source", n_categories=5),
    ]


class SynthesisConfig(StrictModel):
    """Synthetic Survey Generation Config"""
    n_silos: int = Field(51, ge=1)
    rows_per_silo: int = Field(500, gt=0)
    features: List[SyntheticFeature] = Field(default_factory=default_synthetic_features)
    coefficient_scale: float = Field(1.0, ge=0)
    category_concentration: float = Field(5.0, gt=0)
    perturbation_scale: float = Field(0.3, ge=0)
    target_rate: float = Field(0.186, gt=0, lt=1)
    nonresponse_rate: float = Field(0.0, ge=0, lt=1)
    zero_positive_silos: List[int] = Field(default_factory=list)
    composite_feature: Optional[str] = "gender_age"
    target_column: str = "DCA_CONTACT"
    silo_column: str = "STATEQ"

    @model_validator(mode="after")
    def consistent_layout(self) -> "SynthesisConfig":
        """Composite feature and forced-negative silos must exist"""
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate synthetic feature names: {names}")
        if self.composite_feature is not None:
            matches = [f for f in self.features if f.name == self.composite_feature]
            if not matches or matches[0].n_categories != 12:
                raise ValueError(
                    f"composite feature '{self.composite_feature}' must be a 12-category feature")
        bad = [s for s in self.zero_positive_silos if not 1 <= s <= self.n_silos]
        if bad:
            raise ValueError(f"zero_positive_silos outside 1..{self.n_silos}: {bad}")
        if len(set(self.zero_positive_silos)) >= self.n_silos:
            raise ValueError("at least one silo must keep positive respondents")
        return self


# --- Model and federation ---

class HighwayNetConfig(StrictModel):
    """Highway Network Config"""
    input_dim: Optional[int] = Field(None, ge=1)
    hidden_width: int = Field(64, ge=1)
    n_blocks: int = Field(8, ge=1)
    gate_bias_init: float = -1.0
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    early_stop_patience: int = Field(10, ge=1)
    init_seed: int = 0
    gated: bool = True

    def resolve(self, input_dim: int) -> "HighwayNetConfig":
        """Fill input_dim from the encoded data width"""
        if self.input_dim is not None and self.input_dim != input_dim:
            raise ConfigError(
                f"model input_dim={self.input_dim} but the encoded data has "
                f"{input_dim} columns")
        return self.model_copy(update={"input_dim": input_dim})


class FedConfig(StrictModel):
    """Federated Training Config"""
    n_rounds: int = Field(200, ge=1)
    clients_per_round: int = Field(12, ge=1)
    total_clients: int = Field(51, ge=1)
    cost_strategy: CostStrategy = CostStrategy.SELECTED_ONLY
    gamma: float = Field(1.1835, gt=0)
    gamma_centralized: float = Field(1.182, gt=0)
    class_weighting: bool = True
    seed: int = 0
    model: HighwayNetConfig = Field(
        default_factory=lambda: HighwayNetConfig(hidden_width=90))
    local_epochs: int = Field(1, ge=1)
    batch_size: int = Field(32, ge=1)
    local_baseline_epochs: int = Field(20, ge=0)
    validation_fraction: float = Field(0.1, ge=0, lt=1)
    max_workers: int = Field(default_factory=lambda: settings.MAX_WORKERS, ge=1)

    @model_validator(mode="after")
    def participation_fits(self) -> "FedConfig":
        """1 <= clients_per_round <= total_clients"""
        if self.clients_per_round > self.total_clients:
            raise ValueError(
                f"clients_per_round={self.clients_per_round} exceeds "
                f"total_clients={self.total_clients}")
        return self


# --- Metrics ---

class MetricSet(BaseModel):
    """Metric Set; None marks an undefined metric"""
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    auc: Optional[float]
    support_pos: int
    support_neg: int
    degenerate: bool = False


# --- Attribution ---

class BinSelector(StrictModel):
    """One category of one attribution player"""
    player: str
    code: int


class AttributionConfig(StrictModel):
    """Attribution Config"""
    method: AttributionMethod = AttributionMethod.SHAPLEY_EXACT
    players: Optional[List[str]] = None
    blocks: Optional[List[List[str]]] = None
    instance_sample_size: int = Field(20, ge=1)
    background_size: int = Field(100, ge=1)
    n_permutations: int = Field(2000, ge=1)
    silo: Optional[int] = None
    bins: List[BinSelector] = Field(default_factory=list)


# --- Experiment ---

class DataSource(StrictModel):
    """Data Source: a survey CSV with its schema, or a synthetic spec"""
    csv_path: Optional[str] = None
    schema_path: Optional[str] = None
    delimiter: str = ","
    synthetic: Optional[SynthesisConfig] = None

    @model_validator(mode="after")
    def exactly_one_source(self) -> "DataSource":
        """Either csv_path + schema_path or synthetic, never both"""
        has_file = self.csv_path is not None or self.schema_path is not None
        if has_file and self.synthetic is not None:
            raise ValueError("data source must be a CSV file or a synthetic spec, not both")
        if not has_file and self.synthetic is None:
            raise ValueError("data source needs csv_path + schema_path or synthetic")
        if has_file and (self.csv_path is None or self.schema_path is None):
            raise ValueError("csv_path and schema_path must be given together")
        return self


class ExperimentConfig(StrictModel):
    """Experiment Config"""
    data: DataSource = Field(
        default_factory=lambda: DataSource(synthetic=SynthesisConfig()))
    federation: FedConfig = Field(default_factory=FedConfig)
    split_ratio: float = Field(0.8, gt=0, lt=1)
    threshold: float = Field(0.5, gt=0, lt=1)
    attribution: AttributionConfig = Field(default_factory=AttributionConfig)
    output_dir: str = Field(default_factory=lambda: settings.OUTPUT_DIR)
    seed: int = 0

    def fed_config(self) -> FedConfig:
        """Federation settings with the experiment seed applied"""
        return self.federation.model_copy(update={"seed": self.seed})


class ManifestFile(BaseModel):
    """Emitted artifact"""
    bytes: int
    sha256: str


class RunManifest(BaseModel):
    """Run Manifest"""
    config_hash: str
    seed: int
    versions: Dict[str, str]
    timings: Dict[str, float] = Field(default_factory=dict)
    files: Dict[str, ManifestFile] = Field(default_factory=dict)
    created_at: str
    updated_at: str
