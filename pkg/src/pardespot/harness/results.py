"""CSV and JSON emission of experiment results."""
from __future__ import annotations

import csv
import json
import os
import platform
import subprocess
from pathlib import Path

import numpy as np

from pardespot.harness.experiment import ExperimentReport

EPISODE_COLUMNS = (
    "domain", "variant", "episode", "seed", "steps", "discounted_return", "undiscounted_return",
    "success", "terminal", "aborted", "mean_nodes", "mean_nodes_raw", "mean_trials", "mean_depth", "error",
)
TIMING_COLUMNS = ("variant", "episode", "t", "elapsed", "nodes", "nodes_normalized")

OUTPUT_ENV = "PARDESPOT_OUTPUT_DIR"


def output_dir(path: str | os.PathLike | None = None) -> Path:
    """Explicit path, else ``$PARDESPOT_OUTPUT_DIR``, else ``./results``."""
    return Path(path or os.environ.get(OUTPUT_ENV) or "results")


def git_describe() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def hardware_note() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "system": platform.system(),
    }


def episode_row(rec) -> dict:
    return {
        "domain": rec.domain,
        "variant": rec.variant,
        "episode": rec.episode,
        "seed": rec.seed,
        "steps": rec.step_count,
        "discounted_return": repr(rec.discounted_return),
        "undiscounted_return": repr(rec.undiscounted_return),
        "success": "" if rec.success is None else int(rec.success),
        "terminal": int(rec.terminal),
        "aborted": int(rec.aborted),
        "mean_nodes": repr(rec.mean_of("nodes_normalized")),
        "mean_nodes_raw": repr(rec.mean_of("nodes")),
        "mean_trials": repr(rec.mean_of("trials")),
        "mean_depth": repr(rec.mean_of("max_depth")),
        "error": rec.error,
    }


def emit_results(report: ExperimentReport, path) -> dict:
    """Write ``episodes.csv``, ``timings.csv`` and ``summary.json`` under ``path``.

    Wall-clock values only go to ``timings.csv`` so the episode table of a
    trial-bounded serial run is reproducible byte for byte.
    """
    out = output_dir(path)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "episodes.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EPISODE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rec in report.records:
            w.writerow(episode_row(rec))
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_COLUMNS)
        for rec in report.records:
            for s in rec.steps:
                w.writerow([rec.variant, rec.episode, s.t, repr(s.elapsed), s.nodes, repr(s.nodes_normalized)])
    summary = dict(report.summary)
    summary.setdefault("git", git_describe())
    summary.setdefault("hardware", hardware_note())
    report.summary = summary
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return {"episodes": str(out / "episodes.csv"), "timings": str(out / "timings.csv"),
            "summary": str(out / "summary.json")}


def write_json(obj, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
    return str(path)
