import json
import logging
import math
import os
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app import __version__
from app.models import CoefficientTable, GroundTruthSet, SweepResult, TaskDataset, TrialBatch

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

SIMULATE_COLUMNS = ["strategy", "metric", "empirical_mean", "std_error", "theory_value", "trials"]
SWEEP_COLUMNS = ["axis_value", "strategy", "metric", "empirical_mean", "std_error", "theory_value", "trials"]
THEORY_COLUMNS = ["strategy", "metric", "theory_value"]


def _clean(value):
    """JSON-safe copy: NaN/inf become None, numpy scalars and arrays become Python values."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def write_json(payload, path: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_clean(payload), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote {path}")
    return path


def write_frame(frame: pd.DataFrame, path: str) -> str:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote {path}")
    return path


def write_manifest(out_dir: str, command: str, seed: int, files: Iterable[str], extra: Optional[dict] = None) -> str:
    manifest = {
        "tool": "rehearsal-lab",
        "version": __version__,
        "command": command,
        "master_seed": seed,
        "files": sorted(os.path.basename(f) for f in files),
    }
    if extra:
        manifest.update(extra)
    return write_json(manifest, os.path.join(out_dir, "manifest.json"))


# ── Frames ────────────────────────────────────────────────────────────────────

def _theory_or_nan(value: Optional[float]) -> float:
    return float("nan") if value is None else float(value)


def simulate_frame(
    batches: Mapping[str, TrialBatch],
    theory: Mapping[str, Tuple[Optional[float], Optional[float]]],
) -> pd.DataFrame:
    rows = []
    for label, batch in batches.items():
        F_th, G_th = theory.get(label, (None, None))
        for metric, est, th in (("F", batch.F, F_th), ("G", batch.G, G_th)):
            rows.append({
                "strategy": label, "metric": metric, "empirical_mean": est.mean,
                "std_error": est.std_error, "theory_value": _theory_or_nan(th), "trials": est.trials,
            })
    return pd.DataFrame(rows, columns=SIMULATE_COLUMNS)


def error_table_frame(batches: Mapping[str, TrialBatch]) -> pd.DataFrame:
    rows = []
    for label, batch in batches.items():
        for i, row in enumerate(batch.error_table, start=1):
            for t, est in enumerate(row, start=1):
                rows.append({"strategy": label, "i": i, "t": t, "empirical_mean": est.mean,
                             "std_error": est.std_error, "trials": est.trials})
    return pd.DataFrame(rows, columns=["strategy", "i", "t", "empirical_mean", "std_error", "trials"])


def sweep_frame(result: SweepResult) -> pd.DataFrame:
    rows = []
    for k, x in enumerate(result.grid):
        for label in result.strategies:
            for metric in ("F", "G"):
                est = result.empirical[(label, metric)][k]
                if est is None:
                    continue
                rows.append({
                    "axis_value": x, "strategy": label, "metric": metric,
                    "empirical_mean": est.mean, "std_error": est.std_error,
                    "theory_value": _theory_or_nan(result.theory[(label, metric)][k]),
                    "trials": est.trials,
                })
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def theory_frame(predictions: Mapping[str, Tuple[float, float]]) -> pd.DataFrame:
    rows = [
        {"strategy": label, "metric": metric, "theory_value": value}
        for label, (F, G) in predictions.items()
        for metric, value in (("F", F), ("G", G))
    ]
    return pd.DataFrame(rows, columns=THEORY_COLUMNS)


def sweep_payload(result: SweepResult) -> dict:
    return {
        "axis": result.axis,
        "grid": result.grid,
        "strategies": result.strategies,
        "crossovers": result.crossovers,
        "skipped": [{"value": v, "reason": r} for v, r in result.skipped],
        "config": result.config_snapshot,
    }


def coefficient_payload(tables: Iterable[CoefficientTable]) -> Dict[str, object]:
    payload: Dict[str, object] = {}
    for table in tables:
        payload.update(table.to_json()["coefficients"])
        payload[f"{table.strategy}/helpers"] = table.helpers
    return payload


# ── Raw data dumps ────────────────────────────────────────────────────────────

def write_ground_truth(gt: GroundTruthSet, path: str, seed: int) -> str:
    """T rows of p floats after the generation seed; readable by ``load_vectors``."""
    frame = pd.DataFrame(gt.vectors, columns=[f"x{j + 1}" for j in range(gt.p)])
    frame.insert(0, "seed", seed)
    return write_frame(frame, path)


def write_dataset(datasets: Sequence[TaskDataset], path: str, seed: int, trial: int = 0) -> str:
    """One row per sample: source task, master seed and trial, response y, then the p features."""
    frames = []
    for data in datasets:
        frame = pd.DataFrame(data.X.T, columns=[f"x{j + 1}" for j in range(data.X.shape[0])])
        frame.insert(0, "y", data.Y)
        frame.insert(0, "trial", trial)
        frame.insert(0, "seed", seed)
        frame.insert(0, "source", data.source_task)
        frames.append(frame)
    return write_frame(pd.concat(frames, ignore_index=True), path)


def write_table(frame: pd.DataFrame, path: str, fmt: str) -> str:
    """CSV through ``write_frame``; JSON as a list of row records."""
    if fmt == "json":
        return write_json(frame.to_dict(orient="records"), path)
    return write_frame(frame, path)
