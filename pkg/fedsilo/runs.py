"""
Run directories: artifact writers and the manifest that inventories them
"""
import json
import logging
import platform
import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import pydantic
import scipy

import fedsilo
from fedsilo.errors import NotARunDirectoryError
from fedsilo.schemas import ExperimentConfig, ManifestFile, RunManifest
from fedsilo.utils import sha256_file, sha256_text

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def library_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "fedsilo": fedsilo.__version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
    }


def config_hash(config: ExperimentConfig) -> str:
    return sha256_text(config.model_dump_json())


def _cell(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    return value


class RunDirectory:
    """One output directory and its manifest.json."""

    def __init__(self, path: Union[str, Path], manifest: RunManifest):
        self.path = Path(path)
        self.manifest = manifest

    @classmethod
    def open(cls, path: Union[str, Path]) -> "RunDirectory":
        path = Path(path)
        manifest_path = path / MANIFEST_NAME
        if not manifest_path.is_file():
            raise NotARunDirectoryError(f"{path} holds no {MANIFEST_NAME}")
        manifest = RunManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
        return cls(path, manifest)

    @classmethod
    def create(cls, path: Union[str, Path], config: ExperimentConfig) -> "RunDirectory":
        """Open or start the run directory for `config`"""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        if (path / MANIFEST_NAME).is_file():
            run = cls.open(path)
            run.manifest.config_hash = config_hash(config)
            run.manifest.seed = config.seed
            run.manifest.versions = library_versions()
        else:
            now = _now()
            run = cls(path, RunManifest(
                config_hash=config_hash(config), seed=config.seed,
                versions=library_versions(), created_at=now, updated_at=now))
        run.write_text("config.json", config.model_dump_json(indent=2) + "\n")
        return run

    def path_of(self, name: str) -> Path:
        return self.path / name

    def has(self, name: str) -> bool:
        return name in self.manifest.files and self.path_of(name).is_file()

    def record_file(self, name: str) -> Path:
        path = self.path_of(name)
        self.manifest.files[name] = ManifestFile(bytes=path.stat().st_size, sha256=sha256_file(path))
        logger.info("Wrote %s (%s bytes)", path, self.manifest.files[name].bytes)
        return path

    def record_timing(self, phase: str, seconds: float) -> None:
        self.manifest.timings[phase] = round(seconds, 6)

    def write_text(self, name: str, text: str) -> Path:
        self.path_of(name).write_bytes(text.encode("utf-8"))
        return self.record_file(name)

    def write_bytes(self, name: str, data: bytes) -> Path:
        self.path_of(name).write_bytes(data)
        return self.record_file(name)

    def write_json(self, name: str, payload: Any) -> Path:
        return self.write_text(name, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def write_csv(self, name: str, rows: Sequence[Dict[str, Any]],
                  columns: Optional[List[str]] = None) -> Path:
        """CSV with None written as an empty cell"""
        frame = pd.DataFrame([{k: _cell(v) for k, v in row.items()} for row in rows], columns=columns)
        frame.to_csv(self.path_of(name), index=False, lineterminator="\n", na_rep="")
        return self.record_file(name)

    def adopt(self, name: str) -> Path:
        """Record a file some other writer produced in the directory"""
        return self.record_file(name)

    def read_csv(self, name: str) -> pd.DataFrame:
        return pd.read_csv(self.path_of(name))

    def read_json(self, name: str) -> Any:
        return json.loads(self.path_of(name).read_text(encoding="utf-8"))

    def save(self) -> Path:
        self.manifest.updated_at = _now()
        path = self.path_of(MANIFEST_NAME)
        path.write_text(self.manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path
