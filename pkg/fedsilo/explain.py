"""
Shapley and Owen attribution over groups of one-hot columns.

A player is one categorical feature: all of its columns are taken from
the explained row or from a background row together. The payoff of a
coalition is the mean model output over background rows with the
coalition's columns spliced in from the explained row. Columns of a
derived view follow the players of its feature family. Columns no player
claims always come from the background row.
"""
import time
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import comb

from fedsilo.dataset import EncodedDataset, FeatureSpan
from fedsilo.errors import (
    AttributionError,
    BinReferenceError,
    CapacityError,
    ConfigError,
    SchemaError,
)
from fedsilo.instrumentation import attribution_duration_histogram, attributions_counter
from fedsilo.nn import ModelParams, predict_proba
from fedsilo.schemas import AttributionMethod, BinSelector
from fedsilo.utils import derive_rng, derive_seed

logger = logging.getLogger(__name__)

Predictor = Union[ModelParams, Callable[[np.ndarray], np.ndarray]]

MAX_EXACT_PLAYERS = 20
MAX_SAMPLED_PLAYERS = 62
MAX_OWEN_BLOCKS = 12
MAX_OWEN_BLOCK_SIZE = 12
CHUNK_ROWS = 65536


def _as_function(model: Predictor) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, ModelParams):
        return lambda rows: predict_proba(model, rows)
    if callable(model):
        return lambda rows: np.asarray(model(rows), dtype=np.float64).ravel()
    raise ConfigError(f"cannot explain a {type(model).__name__}; pass ModelParams or a callable")


@dataclass(frozen=True)
class Player:
    """Columns masked as one unit."""
    name: str
    columns: Tuple[int, ...]
    codes: Tuple[int, ...] = ()
    labels: Mapping[int, str] = field(default_factory=dict)


@dataclass(frozen=True)
class SharedColumns:
    """Columns taken from the explained row only when every owner is present."""
    columns: Tuple[int, ...]
    owners: Tuple[int, ...]


@dataclass(frozen=True)
class GroupStructure:
    """Players and their partition into coalition blocks (player indices)."""
    players: Tuple[Player, ...]
    blocks: Tuple[Tuple[int, ...], ...]
    shared: Tuple[SharedColumns, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "players", tuple(self.players))
        object.__setattr__(self, "blocks", tuple(tuple(b) for b in self.blocks))
        object.__setattr__(self, "shared", tuple(self.shared))
        names = [p.name for p in self.players]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate player names: {names}")
        seen = set()
        for player in self.players:
            overlap = seen.intersection(player.columns)
            if overlap:
                raise ConfigError(f"player '{player.name}' shares columns {sorted(overlap)}")
            seen.update(player.columns)
        for group in self.shared:
            if not group.owners or any(not 0 <= i < len(self.players) for i in group.owners):
                raise ConfigError(f"shared columns {list(group.columns)} have invalid owners {list(group.owners)}")
            overlap = seen.intersection(group.columns)
            if overlap:
                raise ConfigError(f"shared columns overlap player columns {sorted(overlap)}")
            seen.update(group.columns)
        flat = sorted(i for block in self.blocks for i in block)
        if flat != list(range(len(self.players))) or any(not b for b in self.blocks):
            raise ConfigError("coalition blocks must partition the players exactly")

    @property
    def n_players(self) -> int:
        return len(self.players)

    @property
    def player_names(self) -> Tuple[str, ...]:
        return tuple(p.name for p in self.players)

    def index(self, name: str) -> int:
        try:
            return self.player_names.index(name)
        except ValueError:
            raise ConfigError(f"unknown player '{name}'") from None

    @classmethod
    def from_players(cls, players: Sequence[Player],
                     blocks: Optional[Sequence[Sequence[int]]] = None,
                     shared: Sequence[SharedColumns] = ()) -> "GroupStructure":
        if blocks is None:
            blocks = [(i,) for i in range(len(players))]
        return cls(tuple(players), tuple(tuple(b) for b in blocks), tuple(shared))

    @classmethod
    def from_dataset(cls, ds: EncodedDataset,
                     players: Optional[Sequence[str]] = None,
                     blocks: Optional[Sequence[Sequence[str]]] = None) -> "GroupStructure":
        """
        Players from feature spans, blocks from lists of player names.

        Defaults: every original (non-derived) feature is a player and
        every player is its own block. Unplayed spans of a feature family
        (a source feature and its derived views) become shared columns of
        the family's players: the source player when it plays, otherwise
        every derived view that plays.
        """
        if players is None:
            spans = ds.original_spans
        else:
            try:
                spans = [ds.span(name) for name in players]
            except SchemaError as e:
                raise ConfigError(str(e)) from e
        built = [
            Player(s.name, tuple(range(s.start, s.stop)), s.codes, dict(s.labels))
            for s in spans
        ]
        shared = _family_columns(ds.feature_spans, [p.name for p in built])
        if blocks is None:
            return cls.from_players(built, shared=shared)
        names = [p.name for p in built]
        index_blocks = []
        for block in blocks:
            missing = [name for name in block if name not in names]
            if missing:
                raise ConfigError(f"block names unknown players {missing}")
            index_blocks.append(tuple(names.index(name) for name in block))
        return cls.from_players(built, index_blocks, shared)


def _family_columns(spans: Sequence[FeatureSpan], player_names: Sequence[str]) -> List[SharedColumns]:
    families: Dict[str, List[FeatureSpan]] = {}
    for span in spans:
        families.setdefault(span.source or span.name, []).append(span)
    shared = []
    for root, members in families.items():
        if root in player_names:
            owners = (player_names.index(root),)
        else:
            owners = tuple(player_names.index(s.name) for s in members if s.name in player_names)
        columns = tuple(c for s in members if s.name not in player_names for c in range(s.start, s.stop))
        if owners and columns:
            shared.append(SharedColumns(columns, owners))
    return shared


@dataclass(frozen=True)
class BackgroundSet:
    """Reference rows that stand in for absent players."""
    rows: np.ndarray
    seed: int
    indices: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise ConfigError("background set needs at least one row")
        self.rows.flags.writeable = False

    @property
    def size(self) -> int:
        return int(self.rows.shape[0])


def draw_background(train: EncodedDataset, size: int, seed: int) -> BackgroundSet:
    """Sample `size` training rows without replacement (all rows if fewer)."""
    if size < 1:
        raise ConfigError(f"background size must be at least 1, got {size}")
    if train.n_rows == 0:
        raise ConfigError("cannot draw a background set from zero rows")
    size = min(size, train.n_rows)
    rng = derive_rng(seed, "background")
    chosen = np.sort(rng.choice(train.n_rows, size=size, replace=False))
    return BackgroundSet(np.array(train.design_matrix[chosen]), seed, tuple(int(i) for i in chosen))


@dataclass(frozen=True)
class Attribution:
    """Per-player values for one explained row."""
    instance_index: int
    players: Tuple[str, ...]
    values: np.ndarray
    base_value: float
    prediction: float
    efficiency_residual: float
    method: AttributionMethod
    n_permutations: Optional[int] = None
    standard_errors: Optional[np.ndarray] = None

    def value_of(self, player: str) -> float:
        return float(self.values[self.players.index(player)])


@dataclass(frozen=True)
class AttributionSummary:
    """Mean |value| and population std per player."""
    players: Tuple[str, ...]
    mean_abs: np.ndarray
    std: np.ndarray
    n_instances: int

    def ranked(self) -> List[Tuple[str, float]]:
        order = sorted(range(len(self.players)), key=lambda i: (-self.mean_abs[i], self.players[i]))
        return [(self.players[i], float(self.mean_abs[i])) for i in order]


class _CoalitionGame:
    """Cached coalition payoffs v(S) for one explained row."""

    def __init__(self, model: Predictor, x, background: BackgroundSet, structure: GroupStructure):
        self.predict = _as_function(model)
        self.x = np.asarray(x, dtype=np.float64).ravel()
        self.background = background.rows
        if self.background.shape[1] != self.x.shape[0]:
            raise ConfigError(
                f"background width {self.background.shape[1]} differs from row width {self.x.shape[0]}")
        self.n = structure.n_players
        self.full_mask = (1 << self.n) - 1

        membership = np.zeros((self.n, self.x.shape[0]), dtype=bool)
        for i, player in enumerate(structure.players):
            membership[i, list(player.columns)] = True
        self.membership = membership
        self.shared = [(list(g.columns), list(g.owners)) for g in structure.shared]
        covered = membership.any(axis=0)
        for columns, _ in self.shared:
            covered[columns] = True
        self.covers_row = bool(covered.all())
        self.cache: Dict[int, float] = {}

    def _evaluate(self, masks: np.ndarray) -> np.ndarray:
        bits = ((masks[:, None] >> np.arange(self.n, dtype=np.int64)) & 1).astype(bool)
        take_x = (bits.astype(np.int64) @ self.membership.astype(np.int64)) > 0
        for columns, owners in self.shared:
            take_x[:, columns] = bits[:, owners].all(axis=1)[:, None]
        hybrid = np.where(take_x[:, None, :], self.x[None, None, :], self.background[None, :, :])
        b = self.background.shape[0]
        preds = self.predict(hybrid.reshape(-1, self.x.shape[0]))
        return preds.reshape(masks.shape[0], b).mean(axis=1)

    def values(self, masks) -> np.ndarray:
        masks = np.asarray(masks, dtype=np.int64)
        flat = masks.ravel()
        missing = np.array(sorted({int(m) for m in np.unique(flat)} - self.cache.keys()), dtype=np.int64)
        if self.covers_row and self.full_mask in missing:
            self.cache[self.full_mask] = float(self.predict(self.x[None, :])[0])
            missing = missing[missing != self.full_mask]
        per_chunk = max(1, CHUNK_ROWS // self.background.shape[0])
        for start in range(0, missing.shape[0], per_chunk):
            chunk = missing[start:start + per_chunk]
            for mask, value in zip(chunk, self._evaluate(chunk)):
                self.cache[int(mask)] = float(value)
        return np.array([self.cache[int(m)] for m in flat]).reshape(masks.shape)

    def value(self, mask: int) -> float:
        return float(self.values([mask])[0])


def _coalition_mask(structure: GroupStructure, in_coalition: Iterable[Union[int, str]]) -> int:
    mask = 0
    for member in in_coalition:
        i = structure.index(member) if isinstance(member, str) else int(member)
        if not 0 <= i < structure.n_players:
            raise ConfigError(f"player index {i} out of range")
        mask |= 1 << i
    return mask


def value_function(model: Predictor, x, in_coalition: Iterable[Union[int, str]],
                   background: BackgroundSet, structure: GroupStructure) -> float:
    """v(S): mean output over background rows with S's columns taken from x."""
    game = _CoalitionGame(model, x, background, structure)
    return game.value(_coalition_mask(structure, in_coalition))


def _popcount(masks: np.ndarray) -> np.ndarray:
    counts = np.zeros(masks.shape, dtype=np.int64)
    work = masks.copy()
    while np.any(work):
        counts += work & 1
        work >>= 1
    return counts


def _shapley_weights(n: int) -> np.ndarray:
    """|S|!(n-|S|-1)!/n! for |S| = 0..n-1"""
    sizes = np.arange(n)
    return 1.0 / (n * comb(n - 1, sizes))


def _finish(game: _CoalitionGame, structure: GroupStructure, values: np.ndarray, index: int,
            method: AttributionMethod, n_permutations=None, standard_errors=None) -> Attribution:
    base = game.value(0)
    prediction = game.value(game.full_mask)
    return Attribution(
        instance_index=index,
        players=structure.player_names,
        values=values,
        base_value=base,
        prediction=prediction,
        efficiency_residual=float(prediction - base - values.sum()),
        method=method,
        n_permutations=n_permutations,
        standard_errors=standard_errors,
    )


def shapley_exact(model: Predictor, x, structure: GroupStructure, background: BackgroundSet,
                  instance_index: int = 0) -> Attribution:
    """Shapley values by enumerating all 2**n coalitions."""
    n = structure.n_players
    if n > MAX_EXACT_PLAYERS:
        raise CapacityError(
            f"{n} players exceed the exact limit of {MAX_EXACT_PLAYERS}; use shapley-sampled")
    game = _CoalitionGame(model, x, background, structure)
    masks = np.arange(1 << n, dtype=np.int64)
    payoff = game.values(masks)
    sizes = _popcount(masks)
    weights = _shapley_weights(n)

    phi = np.zeros(n)
    for i in range(n):
        without = masks[(masks >> i) & 1 == 0]
        phi[i] = np.sum(weights[sizes[without]] * (payoff[without | (1 << i)] - payoff[without]))
    return _finish(game, structure, phi, instance_index, AttributionMethod.SHAPLEY_EXACT)


def _subset_unions(groups: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Bitwise unions and member counts over every subset of `groups` (bit masks)."""
    k = len(groups)
    unions = np.zeros(1 << k, dtype=np.int64)
    counts = np.zeros(1 << k, dtype=np.int64)
    for j, group in enumerate(groups):
        step = 1 << j
        unions[step:2 * step] = unions[:step] | group
        counts[step:2 * step] = counts[:step] + 1
    return unions, counts


def owen_exact(model: Predictor, x, structure: GroupStructure, background: BackgroundSet,
               instance_index: int = 0) -> Attribution:
    """Owen values by two-level enumeration over blocks and within-block subsets."""
    m = len(structure.blocks)
    if m > MAX_OWEN_BLOCKS or any(len(b) > MAX_OWEN_BLOCK_SIZE for b in structure.blocks):
        raise CapacityError(
            f"exact Owen supports at most {MAX_OWEN_BLOCKS} blocks of "
            f"{MAX_OWEN_BLOCK_SIZE} players; use owen-sampled")
    game = _CoalitionGame(model, x, background, structure)
    block_masks = [sum(1 << i for i in block) for block in structure.blocks]
    outer_weights = _shapley_weights(m)

    phi = np.zeros(structure.n_players)
    for k, block in enumerate(structure.blocks):
        others = [mask for j, mask in enumerate(block_masks) if j != k]
        outer, outer_sizes = _subset_unions(others)
        inner_weights = _shapley_weights(len(block))
        for i in block:
            mates = [1 << p for p in block if p != i]
            inner, inner_sizes = _subset_unions(mates)
            coalitions = outer[:, None] | inner[None, :]
            weight = np.outer(outer_weights[outer_sizes], inner_weights[inner_sizes])
            gain = game.values(coalitions | (1 << i)) - game.values(coalitions)
            phi[i] = np.sum(weight * gain)
    return _finish(game, structure, phi, instance_index, AttributionMethod.OWEN_EXACT)


def _permutation_estimate(game: _CoalitionGame, orders: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean marginal contribution per player over player orders, with standard errors."""
    n_perm, n = orders.shape
    prefix = np.zeros((n_perm, n + 1), dtype=np.int64)
    for k in range(n):
        prefix[:, k + 1] = prefix[:, k] | (np.int64(1) << orders[:, k].astype(np.int64))
    payoff = game.values(prefix)
    contributions = np.zeros((n_perm, n))
    rows = np.arange(n_perm)
    for k in range(n):
        contributions[rows, orders[:, k]] = payoff[:, k + 1] - payoff[:, k]
    phi = contributions.mean(axis=0)
    if n_perm > 1:
        se = contributions.std(axis=0, ddof=1) / np.sqrt(n_perm)
    else:
        se = np.full(n, np.nan)
    return phi, se


def shapley_sampled(model: Predictor, x, structure: GroupStructure, background: BackgroundSet,
                    n_permutations: int, seed: int, instance_index: int = 0) -> Attribution:
    """Shapley values estimated from uniformly random player orders."""
    n = structure.n_players
    if n_permutations < 1:
        raise ConfigError(f"n_permutations must be at least 1, got {n_permutations}")
    if n > MAX_SAMPLED_PLAYERS:
        raise CapacityError(f"{n} players exceed the sampled limit of {MAX_SAMPLED_PLAYERS}")
    rng = np.random.default_rng(seed)
    orders = np.array([rng.permutation(n) for _ in range(n_permutations)], dtype=np.int64)
    game = _CoalitionGame(model, x, background, structure)
    phi, se = _permutation_estimate(game, orders)
    return _finish(game, structure, phi, instance_index, AttributionMethod.SHAPLEY_SAMPLED,
                   n_permutations, se)


def owen_sampled(model: Predictor, x, structure: GroupStructure, background: BackgroundSet,
                 n_permutations: int, seed: int, instance_index: int = 0) -> Attribution:
    """Owen values estimated from random block orders with random orders inside each block."""
    n = structure.n_players
    if n_permutations < 1:
        raise ConfigError(f"n_permutations must be at least 1, got {n_permutations}")
    if n > MAX_SAMPLED_PLAYERS:
        raise CapacityError(f"{n} players exceed the sampled limit of {MAX_SAMPLED_PLAYERS}")
    rng = np.random.default_rng(seed)
    blocks = [np.asarray(b, dtype=np.int64) for b in structure.blocks]
    orders = np.empty((n_permutations, n), dtype=np.int64)
    for p in range(n_permutations):
        orders[p] = np.concatenate([rng.permutation(blocks[k]) for k in rng.permutation(len(blocks))])
    game = _CoalitionGame(model, x, background, structure)
    phi, se = _permutation_estimate(game, orders)
    return _finish(game, structure, phi, instance_index, AttributionMethod.OWEN_SAMPLED,
                   n_permutations, se)


def explain_row(model: Predictor, x, structure: GroupStructure, background: BackgroundSet,
                method: AttributionMethod, n_permutations: int = 2000, seed: int = 0,
                instance_index: int = 0) -> Attribution:
    method = AttributionMethod(method)
    if method is AttributionMethod.SHAPLEY_EXACT:
        return shapley_exact(model, x, structure, background, instance_index)
    if method is AttributionMethod.OWEN_EXACT:
        return owen_exact(model, x, structure, background, instance_index)
    if method is AttributionMethod.SHAPLEY_SAMPLED:
        return shapley_sampled(model, x, structure, background, n_permutations, seed, instance_index)
    return owen_sampled(model, x, structure, background, n_permutations, seed, instance_index)


def select_instances(ds: EncodedDataset, size: int, seed: int, silo: Optional[int] = None) -> np.ndarray:
    """Seeded sample of row indices, optionally restricted to one silo."""
    if size < 1:
        raise ConfigError(f"instance sample size must be at least 1, got {size}")
    candidates = np.arange(ds.n_rows) if silo is None else np.flatnonzero(ds.silo_ids == silo)
    if candidates.size == 0:
        raise ConfigError(f"no rows to explain{'' if silo is None else f' in silo {silo}'}")
    if size >= candidates.size:
        return candidates
    rng = derive_rng(seed, "instances", -1 if silo is None else silo)
    return np.sort(rng.choice(candidates, size=size, replace=False))


def explain_instances(model: Predictor, ds: EncodedDataset, indices: Sequence[int],
                      structure: GroupStructure, background: BackgroundSet,
                      method: AttributionMethod, n_permutations: int = 2000,
                      seed: int = 0) -> List[Attribution]:
    """Explain the given rows of `ds`; sampled methods seed each row independently."""
    method = AttributionMethod(method)
    results = []
    for idx in indices:
        start_time = time.time()
        attribution = explain_row(
            model, ds.design_matrix[int(idx)], structure, background, method,
            n_permutations, derive_seed(seed, "attribution", int(idx)), int(idx))
        attribution_duration_histogram.labels(method=method.value).observe(time.time() - start_time)
        attributions_counter.labels(method=method.value).inc()
        results.append(attribution)
    logger.info("Explained %s instances with %s", len(results), method.value)
    return results


def summarize_attributions(attributions: Sequence[Attribution]) -> AttributionSummary:
    """Per-player mean |value| and population standard deviation."""
    if not attributions:
        raise AttributionError("no attributions to summarize")
    players = attributions[0].players
    if any(a.players != players for a in attributions):
        raise AttributionError("attributions cover different players")
    values = np.vstack([a.values for a in attributions])
    return AttributionSummary(players, np.abs(values).mean(axis=0), values.std(axis=0), len(attributions))


@dataclass(frozen=True)
class BinDistribution:
    """Values of one category's instances, tagged with the true label."""
    player: str
    code: int
    bin_name: str
    points: Tuple[Tuple[int, float, int], ...]
    no_positives: bool


def bin_distributions(attributions: Sequence[Attribution], ds: EncodedDataset,
                      bins: Sequence[Union[BinSelector, Tuple[str, int]]]) -> List[BinDistribution]:
    """
    For each (player, code) bin, the explained instances whose active
    category is `code`, as (instance_index, value, label) points.
    """
    results = []
    for selector in bins:
        player, code = (selector.player, selector.code) if isinstance(selector, BinSelector) else selector
        if attributions and player not in attributions[0].players:
            raise BinReferenceError(f"bin references player '{player}' that was not attributed")
        try:
            span = ds.span(player)
            column = span.column_of(code)
        except (KeyError, SchemaError) as e:
            raise BinReferenceError(f"unknown bin ({player}, {code}): {e}") from e
        points = tuple(
            (a.instance_index, a.value_of(player), int(ds.labels[a.instance_index]))
            for a in attributions
            if ds.design_matrix[a.instance_index, column] == 1.0
        )
        results.append(BinDistribution(
            player, code, span.label(code), points,
            no_positives=not any(label == 1 for _, _, label in points)))
    return results


def all_bins(structure: GroupStructure) -> List[Tuple[str, int]]:
    """Every (player, code) pair of the structure"""
    return [(p.name, c) for p in structure.players for c in p.codes]


# --- Result rows ---

def attribution_rows(attributions: Sequence[Attribution]) -> List[Dict]:
    rows = []
    for a in attributions:
        for j, player in enumerate(a.players):
            rows.append({
                "instance_id": a.instance_index,
                "player": player,
                "value": float(a.values[j]),
                "base_value": a.base_value,
                "method": a.method.value,
                "n_permutations": a.n_permutations,
                "standard_error": None if a.standard_errors is None else float(a.standard_errors[j]),
                "prediction": a.prediction,
                "efficiency_residual": a.efficiency_residual,
            })
    return rows


def summary_rows(summary: AttributionSummary) -> List[Dict]:
    return [
        {"player": p, "mean_abs": float(summary.mean_abs[j]), "std": float(summary.std[j]),
         "n_instances": summary.n_instances}
        for j, p in enumerate(summary.players)
    ]


def bin_rows(distributions: Sequence[BinDistribution]) -> List[Dict]:
    """One row per point; an empty bin keeps a single row with empty cells."""
    rows = []
    for dist in distributions:
        name = f"{dist.player}:{dist.bin_name}"
        if not dist.points:
            rows.append({"bin_name": name, "instance_id": None, "value": None,
                         "label": None, "no_positives": dist.no_positives})
        for instance_id, value, label in dist.points:
            rows.append({"bin_name": name, "instance_id": instance_id, "value": value,
                         "label": label, "no_positives": dist.no_positives})
    return rows
