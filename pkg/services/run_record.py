"""
Run records: what was run, how long each stage took, what was written.
"""
from __future__ import annotations

import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from config.logging import logger
from config.settings import VERSION

RECORD_FILE = "run_record.json"


def _plain(value):
    """TOML/numpy values as JSON-friendly builtins."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and (value != value or value in (float("inf"), float("-inf"))):
        return str(value)
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)


@dataclass
class RunRecord:
    command: str
    config: dict = field(default_factory=dict)
    config_path: str | None = None
    version: str = VERSION
    timings: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    status: str = "running"
    exit_code: int | None = None
    error: str | None = None

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        logger.info("stage %s started", name)
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.timings[name] = round(elapsed, 6)
            logger.info("stage %s finished in %.3fs", name, elapsed)

    def add_output(self, path: str) -> str:
        self.outputs.append(os.path.basename(path))
        return path

    def warn(self, message: str) -> None:
        self.warnings.append(message)
        logger.warning(message)

    def finish(self, exit_code: int, error: str | None = None) -> None:
        self.exit_code = exit_code
        self.status = "ok" if exit_code == 0 else "failed"
        self.error = error

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "version": self.version,
            "status": self.status,
            "exit_code": self.exit_code,
            "error": self.error,
            "config_path": self.config_path,
            "config": _plain(self.config),
            "timings": self.timings,
            "outputs": self.outputs,
            "warnings": self.warnings,
        }

    def save(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, RECORD_FILE)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)
        return path


def load_record(out_dir: str) -> dict:
    with open(os.path.join(out_dir, RECORD_FILE), "r", encoding="utf-8") as f:
        return json.load(f)
