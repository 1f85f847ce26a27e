"""
Utility functions for seeding and formatting result rows
"""
import hashlib
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from fedsilo.schemas import MetricSet

GLOBAL_SCOPE = "GLOBAL"


def derive_seed(seed: int, purpose: str, *index: Any) -> int:
    """
    Derive an independent 63-bit seed for one random stream.

    The stream is identified by the experiment seed, a purpose label and
    any number of indices (round, silo id, instance id...), hashed as
    "seed|purpose|i0|i1...". Streams never depend on call order.
    """
    key = "|".join([str(seed), purpose, *(str(i) for i in index)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def derive_rng(seed: int, purpose: str, *index: Any) -> np.random.Generator:
    """Seeded generator for the stream named by (seed, purpose, index...)."""
    return np.random.default_rng(derive_seed(seed, purpose, *index))


def format_metric(value: Optional[float], digits: int = 4) -> str:
    """Render a metric for humans; undefined values read "n/a", never 0."""
    if value is None:
        return "n/a"
    return f"{value:.{digits}f}"


def build_metric_row(
        scope: Union[int, str],
        metrics: MetricSet,
        **extra: Any) -> Dict[str, Any]:
    """
    Convert a MetricSet into one CSV row.

    Args:
        scope: silo id, or GLOBAL for the pooled test set
        metrics: evaluated metrics; None stays None (an empty CSV cell)
        extra: additional leading columns such as the round index

    Returns:
        dict: column name to value, in output order
    """
    row: Dict[str, Any] = dict(extra)
    row.update({
        "silo": scope,
        "precision": metrics.precision,
        "recall": metrics.recall,
        "f1": metrics.f1,
        "auc": metrics.auc,
    })
    return row


def sha256_file(path: Path) -> str:
    """Hex SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    """Hex SHA-256 of a UTF-8 string."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
