import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


# ── Problem data ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class GroundTruthSet:
    """Rows of ``vectors`` are w*_1..w*_T (1-based task ids map to row t-1)."""

    vectors: np.ndarray
    gap_matrix: np.ndarray
    kind: str = "explicit"
    seed: Optional[int] = None

    @property
    def T(self) -> int:
        return self.vectors.shape[0]

    @property
    def p(self) -> int:
        return self.vectors.shape[1]

    def vector(self, task: int) -> np.ndarray:
        return self.vectors[task - 1]

    def gap(self, j: int, k: int) -> float:
        return float(self.gap_matrix[j - 1, k - 1])

    @property
    def norms_sq(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.vectors, self.vectors)


@dataclass(frozen=True)
class TaskDataset:
    X: np.ndarray
    Y: np.ndarray
    source_task: int

    @property
    def m(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class MemoryAllocation:
    counts: Tuple[int, ...]
    uneven: bool

    def count(self, task: int) -> int:
        return self.counts[task - 1]


@dataclass(frozen=True)
class MemoryBuffer:
    per_task: Tuple[TaskDataset, ...]
    counts: Tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def chunk(self, task: int) -> TaskDataset:
        return self.per_task[task - 1]


@dataclass(frozen=True)
class FitResult:
    w: np.ndarray
    residual_norm: float
    conditioning: float
    method: str


# ── Training output ───────────────────────────────────────────────────────────

Partition = Tuple[Tuple[int, ...], Tuple[int, ...]]


@dataclass(frozen=True)
class TrainTrace:
    params: np.ndarray                      # (T, p); row t-1 is w_t
    per_step_errors: np.ndarray             # (T, T); [i-1, t-1] is L_i(w_t)
    strategy: str
    partitions: Dict[int, Partition] = field(default_factory=dict)
    config_snapshot: Dict[str, object] = field(default_factory=dict)
    datasets: Tuple[TaskDataset, ...] = ()  # current-task data, task order

    @property
    def T(self) -> int:
        return self.params.shape[0]

    def error(self, i: int, t: int) -> float:
        return float(self.per_step_errors[i - 1, t - 1])

    def to_dict(self, save_params: bool = False) -> dict:
        out = {
            "strategy": self.strategy,
            "config": self.config_snapshot,
            "per_step_errors": self.per_step_errors.tolist(),
            "partitions": {
                str(t): {"sim": list(sim), "dis": list(dis)}
                for t, (sim, dis) in sorted(self.partitions.items())
            },
        }
        if save_params:
            out["params"] = self.params.tolist()
        return out


@dataclass(frozen=True)
class MetricReport:
    F_T: float
    G_T: float
    per_task_forgetting: np.ndarray
    per_task_generalization: np.ndarray


# ── Estimation ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class EstimateWithError:
    mean: float
    std_error: float
    trials: int

    @classmethod
    def from_samples(cls, samples: Sequence[float]) -> "EstimateWithError":
        """Mean and standard error with compensated sums in the given order."""
        k = len(samples)
        if k < 2:
            raise ValueError("at least two samples are needed for a standard error")
        mean = math.fsum(samples) / k
        var = math.fsum((s - mean) ** 2 for s in samples) / (k - 1)
        return cls(mean=mean, std_error=math.sqrt(var / k), trials=k)

    def z_score(self, target: float) -> float:
        if self.std_error == 0.0:
            return 0.0 if self.mean == target else math.inf
        return (self.mean - target) / self.std_error

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "trials": self.trials}


@dataclass(frozen=True)
class TrialBatch:
    """Per-strategy Monte Carlo output of run_trials."""

    F: EstimateWithError
    G: EstimateWithError
    error_table: List[List[EstimateWithError]]
    failed_trials: int
    partitions: List[Dict[int, Partition]] = field(default_factory=list)


@dataclass
class SweepResult:
    axis: str
    grid: List[float]
    strategies: List[str]
    empirical: Dict[Tuple[str, str], List[Optional[EstimateWithError]]]
    theory: Dict[Tuple[str, str], List[Optional[float]]]
    skipped: List[Tuple[float, str]] = field(default_factory=list)
    crossovers: Dict[str, Optional[float]] = field(default_factory=dict)
    config_snapshot: Dict[str, object] = field(default_factory=dict)
    datasets: Tuple[TaskDataset, ...] = ()  # current-task data, task order


# ── Theory ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TheoryPrediction:
    strategy: str
    F: float
    G: float
    error_table: np.ndarray                 # (T, T); [i-1, t-1] is E[L_i(w_t)]


@dataclass
class CoefficientTable:
    """Expected-error coefficients for one strategy.

    E[L_i(w_t)] = d0[t]·‖w*_i‖² + Σ_{j<k} d(i,j,k,t)·‖w*_j − w*_k‖² + σ²·noise_unit[t]
    """

    strategy: str
    T: int
    d0: np.ndarray                          # (T,), entry t-1
    d: Dict[Tuple[int, int, int, int], float]
    noise_unit: np.ndarray                  # (T,), σ = 1; NaN where undefined
    helpers: Dict[str, object] = field(default_factory=dict)

    def d0t(self, t: int) -> float:
        return float(self.d0[t - 1])

    def dijkt(self, i: int, j: int, k: int, t: int) -> float:
        if j == k:
            return 0.0
        if j > k:
            j, k = k, j
        return self.d.get((i, j, k, t), 0.0)

    def c_i(self, i: int) -> float:
        return self.d0t(self.T) - self.d0t(i)

    def c_ijk(self, i: int, j: int, k: int) -> float:
        return self.dijkt(i, j, k, self.T) - self.dijkt(i, j, k, i)

    def noise(self, t: int, sigma: float) -> float:
        if sigma == 0.0:
            return 0.0
        return sigma * sigma * float(self.noise_unit[t - 1])

    def to_json(self) -> dict:
        entries = {}
        for t in range(1, self.T + 1):
            entries[f"{self.strategy}/d0/{t}"] = self.d0t(t)
            entries[f"{self.strategy}/noise_unit/{t}"] = _json_float(self.noise_unit[t - 1])
        for (i, j, k, t), value in sorted(self.d.items()):
            entries[f"{self.strategy}/{i}/{j}/{k}/{t}"] = value
        return {"strategy": self.strategy, "T": self.T, "coefficients": entries}


def _json_float(value) -> Optional[float]:
    value = float(value)
    return None if math.isnan(value) else value


@dataclass(frozen=True)
class TwoTaskConstants:
    xi1: float
    xi2: float
    mu1: float
    mu2: float
    c_hat1: Dict[str, float]
    c_hat2: Dict[str, float]
    d_hat1: Dict[str, float]
    d_hat2: Dict[str, float]
    noise_hat_F: Dict[str, float]
    noise_hat_G: Dict[str, float]
    forgetting_threshold: float
    generalization_threshold: float
    forgetting_sigma_sq_threshold: float
    generalization_sigma_sq_threshold: float

    def forgetting_conc_worse(self, norm1_sq: float, gap_sq: float, sigma: float) -> bool:
        """True when concurrent rehearsal forgets more than sequential."""
        return self.xi1 * gap_sq + self.xi2 * sigma * sigma > norm1_sq

    def generalization_conc_worse(self, norm1_sq: float, norm2_sq: float, gap_sq: float, sigma: float) -> bool:
        return self.mu1 * gap_sq + self.mu2 * sigma * sigma > norm1_sq + norm2_sq

    def to_dict(self) -> dict:
        return {
            "xi1": self.xi1, "xi2": self.xi2, "mu1": self.mu1, "mu2": self.mu2,
            "c_hat1": self.c_hat1, "c_hat2": self.c_hat2,
            "d_hat1": self.d_hat1, "d_hat2": self.d_hat2,
            "noise_hat_F": self.noise_hat_F, "noise_hat_G": self.noise_hat_G,
            "forgetting_threshold": self.forgetting_threshold,
            "generalization_threshold": self.generalization_threshold,
            "forgetting_sigma_sq_threshold": self.forgetting_sigma_sq_threshold,
            "generalization_sigma_sq_threshold": self.generalization_sigma_sq_threshold,
        }
