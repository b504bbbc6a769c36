"""Utility helpers for run artifacts, runtime flags and name suggestions."""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import pandas as pd
from Levenshtein import distance as levenshtein_distance

__all__ = [
    "RuntimeFlags",
    "configure_logging",
    "load_runtime_flags",
    "read_report",
    "read_solution_csv",
    "suggest_name",
    "write_field_csv",
    "write_paths_meta",
    "write_report",
]

FLOAT_FORMAT = "%.17g"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

PROGRESS_KEY = "Show progress bars"
LOG_LEVEL_KEY = "Log level"
THREADS_KEY = "Default worker threads"


@dataclass(frozen=True)
class RuntimeFlags:
    progress: bool = False
    log_level: str = "WARNING"
    threads: int = 1


def load_runtime_flags(config_path: str | Path = "config.json") -> RuntimeFlags:
    """Read behaviour toggles from ``config_path``.

    Inputs:
        config_path: JSON file with the runtime flags; usually ``config.json`` in the working directory.
    Returns:
        RuntimeFlags; defaults are used when the file is missing or unreadable.
    """
    config_path = Path(config_path)
    flags = RuntimeFlags()
    if config_path.exists():
        try:
            with config_path.open("r", encoding="utf-8") as config_file:
                config_data = json.load(config_file)
                flags = RuntimeFlags(
                    progress=bool(config_data.get(PROGRESS_KEY, False)),
                    log_level=str(config_data.get(LOG_LEVEL_KEY, "WARNING")).upper(),
                    threads=max(1, int(config_data.get(THREADS_KEY, 1))),
                )
        except (json.JSONDecodeError, OSError, TypeError, ValueError):
            flags = RuntimeFlags()
    return flags


def configure_logging(level: str | int = "WARNING") -> None:
    """Send log records to standard error with a single handler."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level if isinstance(level, int) else getattr(logging, str(level).upper(), logging.WARNING))


def suggest_name(name: str, options: Iterable[str], max_distance: int = 3) -> Optional[str]:
    """Closest known name to ``name`` by edit distance, or None when nothing is close.

    Inputs:
        name: Name as written in a configuration file.
        options: Known catalog names.
        max_distance: Largest edit distance still worth suggesting.
    Returns:
        The suggestion, or None.
    """
    cleaned = name.strip().lower()
    best = None
    best_distance = max_distance + 1
    for option in sorted(options):
        allowed = max(1, min(max_distance, len(option) // 2))
        distance = levenshtein_distance(cleaned, option.lower())
        if distance <= allowed and distance < best_distance:
            best, best_distance = option, distance
    return best


def write_field_csv(path: str | Path, nodes: np.ndarray, values: np.ndarray, standard_errors: np.ndarray) -> Path:
    """Write one row per node: x1..xd, u1..un, se1..sen at full round-trip precision."""
    path = Path(path)
    d = nodes.shape[1]
    n = values.shape[1]
    columns = {f"x{i + 1}": nodes[:, i] for i in range(d)}
    columns.update({f"u{k + 1}": values[:, k] for k in range(n)})
    columns.update({f"se{k + 1}": standard_errors[:, k] for k in range(n)})
    pd.DataFrame(columns).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def read_solution_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a field written by ``write_field_csv``.

    Returns:
        Tuple of (nodes (m, d), values (m, n), standard errors (m, n)).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Expected a solution file at {path} but it was not found")
    frame = pd.read_csv(path, float_precision="round_trip")
    x_cols = [c for c in frame.columns if c.startswith("x")]
    u_cols = [c for c in frame.columns if c.startswith("u")]
    se_cols = [c for c in frame.columns if c.startswith("se")]
    if not x_cols or not u_cols:
        raise ValueError(f"{path} has no x*/u* columns")
    nodes = frame[x_cols].to_numpy(dtype=float)
    values = frame[u_cols].to_numpy(dtype=float)
    errors = frame[se_cols].to_numpy(dtype=float) if se_cols else np.zeros_like(values)
    return nodes, values, errors


def write_report(path: str | Path, lines: Iterable[str]) -> Path:
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_report(path: str | Path) -> dict[str, str]:
    """``key: value`` lines of a report file as a dict."""
    entries = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if ":" in line:
            key, value = line.split(":", 1)
            entries[key.strip()] = value.strip()
    return entries


def write_paths_meta(path: str | Path, seed: int, step: float, truncated_fraction: float, **extra) -> Path:
    lines = [f"seed: {seed}", f"step: {step:.17g}", f"truncated_fraction: {truncated_fraction:.6g}"]
    lines += [f"{key}: {value}" for key, value in extra.items()]
    return write_report(path, lines)
