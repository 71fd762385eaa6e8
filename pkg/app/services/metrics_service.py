import math

import numpy as np

from app.exceptions import DimensionMismatch, TooFewTasks
from app.models import MetricReport, TrainTrace


def model_error(w: np.ndarray, w_star: np.ndarray) -> float:
    """‖w − w*‖²."""
    w = np.asarray(w, dtype=float)
    w_star = np.asarray(w_star, dtype=float)
    if w.shape != w_star.shape:
        raise DimensionMismatch(f"parameter shapes differ: {w.shape} vs {w_star.shape}")
    diff = w - w_star
    return float(diff @ diff)


# ── Metrics over an error table E[i-1, t-1] = L_i(w_t) ────────────────────────

def forgetting_terms(errors: np.ndarray) -> np.ndarray:
    T = errors.shape[1]
    return np.array([errors[i, T - 1] - errors[i, i] for i in range(T - 1)])


def forgetting_from_errors(errors: np.ndarray) -> float:
    T = errors.shape[1]
    if T < 2:
        raise TooFewTasks(f"forgetting needs at least two tasks, got {T}")
    return math.fsum(forgetting_terms(errors)) / (T - 1)


def generalization_from_errors(errors: np.ndarray) -> float:
    T = errors.shape[1]
    return math.fsum(errors[:T, T - 1]) / T


# ── Metrics over a training trace ─────────────────────────────────────────────

def forgetting(trace: TrainTrace) -> float:
    return forgetting_from_errors(trace.per_step_errors)


def generalization(trace: TrainTrace) -> float:
    return generalization_from_errors(trace.per_step_errors)


def metric_report(trace: TrainTrace) -> MetricReport:
    T = trace.T
    E = trace.per_step_errors
    return MetricReport(
        F_T=forgetting(trace) if T >= 2 else float("nan"),
        G_T=generalization(trace),
        per_task_forgetting=forgetting_terms(E) if T >= 2 else np.zeros(0),
        per_task_generalization=np.array(E[:T, T - 1], copy=True),
    )
