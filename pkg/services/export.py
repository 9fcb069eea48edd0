"""
Result writers: CSV tables, key = value summaries and optional SVG figures.
"""
from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from config.logging import logger  # noqa: E402
from config.settings import FLOAT_DIGITS  # noqa: E402

FLOAT_FORMAT = f"%.{FLOAT_DIGITS}g"


# ------------------------------------------------------------
# CSV
# ------------------------------------------------------------
# Purpose: one header row, comma separated, LF endings, UTF-8, fixed
# float formatting so reruns are byte-identical.
def write_csv(path: str, header, rows) -> str:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size and rows.shape[1] != len(header):
        raise ValueError(f"{path}: {rows.shape[1]} columns but {len(header)} header names")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        np.savetxt(f, rows if rows.size else np.empty((0, len(header))), fmt=FLOAT_FORMAT,
                   delimiter=",", newline="\n", header=",".join(header), comments="")
    logger.debug("wrote %s (%d rows)", path, rows.shape[0] if rows.size else 0)
    return path


def write_table(path: str, table) -> str:
    """Write a (header, rows) pair as returned by the result types' table()."""
    header, rows = table
    return write_csv(path, header, rows)


def read_csv(path: str):
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, rows


# ------------------------------------------------------------
# Text reports
# ------------------------------------------------------------
def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return format(value, f".{FLOAT_DIGITS}g")
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_format_value(v) for v in np.asarray(value).tolist()) + "]"
    return '"' + str(value).replace('"', '\\"') + '"'


def write_summary(path: str, values: dict) -> str:
    """`key = value` lines (TOML compatible)."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key, value in values.items():
            f.write(f"{key} = {_format_value(value)}\n")
    return path


# ------------------------------------------------------------
# Figures
# ------------------------------------------------------------
def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)
    logger.debug("wrote figure %s", path)
    return path


def plot_columns(path: str, table, title: str = "", ylabel: str = "") -> str:
    """Every column of a (header, rows) table against the first one."""
    header, rows = table
    fig, ax = plt.subplots(figsize=(6, 4))
    for i in range(1, len(header)):
        ax.plot(rows[:, 0], rows[:, i], label=header[i], linewidth=1.2)
    ax.set_xlabel(header[0])
    if ylabel:
        ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(header) > 2:
        ax.legend(frameon=False)
    return _save(fig, path)


def plot_escape(path: str, points: np.ndarray, escape_path: np.ndarray, mean: np.ndarray | None = None,
                q_hat: np.ndarray | None = None) -> str:
    """Disk boundary, mean path and optimal escape path in the state plane."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(points[:, 0], points[:, 1], ".", markersize=2, color="0.5", label="boundary")
    if mean is not None:
        ax.plot(mean[:, 0], mean[:, 1], color="tab:blue", linewidth=1.0, label="mean")
    ax.plot(escape_path[:, 0], escape_path[:, 1], color="tab:red", linewidth=1.5, label="optimal path")
    if q_hat is not None:
        ax.plot([q_hat[0]], [q_hat[1]], "o", color="tab:red")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(frameon=False)
    return _save(fig, path)
