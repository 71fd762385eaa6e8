import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from app.exceptions import ConfigInvalid, DimensionTooSmall, InfeasibleGap
from app.models import GroundTruthSet, MemoryAllocation, MemoryBuffer, TaskDataset
from app.schemas import GroundTruthSpec, ProblemConfig

logger = logging.getLogger(__name__)

FEASIBILITY_EPS = 1e-12
RANK_EPS = 1e-12


# ─────────────────────────────────────────────
# Randomness
# ─────────────────────────────────────────────

@dataclass(frozen=True)
class RngStreams:
    """Independent generators for feature matrices and output noise."""

    features: np.random.Generator
    noise: np.random.Generator


def trial_streams(master_seed: int, trial: int, attempt: int = 0) -> RngStreams:
    key = (trial,) if attempt == 0 else (trial, attempt)
    features_ss, noise_ss = np.random.SeedSequence(master_seed, spawn_key=key).spawn(2)
    return RngStreams(
        features=np.random.default_rng(features_ss),
        noise=np.random.default_rng(noise_ss),
    )


def require_overparameterized(cfg: ProblemConfig) -> None:
    if not cfg.overparameterized:
        raise ConfigInvalid("problem.p", f"p must exceed n + M (got p={cfg.p}, n+M={cfg.n + cfg.M})")


# ─────────────────────────────────────────────
# Ground truths
# ─────────────────────────────────────────────

def gap_matrix_of(vectors: np.ndarray) -> np.ndarray:
    """Squared pairwise distances by direct differences (exact zero diagonal)."""
    T = vectors.shape[0]
    gaps = np.zeros((T, T))
    for j in range(T):
        for k in range(j + 1, T):
            diff = vectors[j] - vectors[k]
            gaps[j, k] = gaps[k, j] = float(diff @ diff)
    return gaps


def _orthonormal_frame(p: int, r: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    q, _ = linalg.qr(rng.standard_normal((p, r)), mode="economic")
    return q


def generate_ground_truth(
    kind: str,
    T: int,
    p: int,
    gap_sq: float = 0.0,
    seed: int = 0,
    vectors: Optional[np.ndarray] = None,
) -> GroundTruthSet:
    if kind == "explicit":
        if vectors is None:
            raise ConfigInvalid("ground_truth.vectors_path", "explicit ground truth needs vectors")
        vecs = np.array(vectors, dtype=float, copy=True)
        if vecs.ndim != 2 or vecs.shape != (T, p):
            raise ConfigInvalid(
                "ground_truth.vectors_path",
                f"expected a {T}x{p} array of ground truths, got shape {vecs.shape}",
            )
        return GroundTruthSet(vectors=vecs, gap_matrix=gap_matrix_of(vecs), kind=kind, seed=None)

    if kind == "orthonormal":
        if p < T:
            raise DimensionTooSmall(f"orthonormal ground truth needs p >= T (p={p}, T={T})")
        vecs = _orthonormal_frame(p, T, seed).T.copy()
        return GroundTruthSet(vectors=vecs, gap_matrix=gap_matrix_of(vecs), kind=kind, seed=seed)

    if kind == "equal_gap":
        if T >= 2 and gap_sq > 2.0 * T / (T - 1) - FEASIBILITY_EPS:
            raise InfeasibleGap(
                f"gap_sq={gap_sq} exceeds the unit-sphere simplex bound 2T/(T-1)={2.0 * T / (T - 1):.6g}"
            )
        if gap_sq < 0:
            raise InfeasibleGap(f"gap_sq must be non-negative, got {gap_sq}")
        c = 1.0 - gap_sq / 2.0
        gram = np.full((T, T), c)
        np.fill_diagonal(gram, 1.0)
        eigvals, eigvecs = linalg.eigh(gram)
        if eigvals.min() < -RANK_EPS:
            raise InfeasibleGap(f"Gram matrix for gap_sq={gap_sq} is not positive semidefinite")
        keep = eigvals > RANK_EPS
        factor = eigvecs[:, keep] * np.sqrt(eigvals[keep])        # (T, r)
        r = factor.shape[1]
        if p < r:
            raise DimensionTooSmall(f"equal-gap geometry needs p >= {r} (p={p})")
        vecs = factor @ _orthonormal_frame(p, r, seed).T
        # Renormalise rounding drift; the Gram construction already fixes norms and gaps.
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        return GroundTruthSet(vectors=vecs, gap_matrix=gap_matrix_of(vecs), kind=kind, seed=seed)

    raise ConfigInvalid("ground_truth.kind", f"unknown ground-truth kind '{kind}'")


def load_vectors(path: str) -> np.ndarray:
    """Read a T x p ground-truth array written by ``export_service.write_ground_truth``."""
    frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    return np.atleast_2d(frame.drop(columns="seed", errors="ignore").to_numpy(dtype=float))


def ground_truth_from_spec(
    spec: GroundTruthSpec, T: int, p: int, gap_sq: Optional[float] = None, seed: Optional[int] = None
) -> GroundTruthSet:
    """Ground truths for a validated config section; ``gap_sq`` and ``seed`` override it."""
    vectors = load_vectors(spec.vectors_path) if spec.kind == "explicit" else None
    return generate_ground_truth(
        spec.kind,
        T,
        p,
        gap_sq=spec.gap_sq if gap_sq is None else gap_sq,
        seed=spec.seed if seed is None else seed,
        vectors=vectors,
    )


# ─────────────────────────────────────────────
# Data
# ─────────────────────────────────────────────

def sample_task_dataset(
    gt: GroundTruthSet, task: int, m: int, sigma: float, rng: RngStreams
) -> TaskDataset:
    if not 1 <= task <= gt.T:
        raise ValueError(f"task index {task} outside 1..{gt.T}")
    if m < 0:
        raise ValueError(f"sample count must be non-negative, got {m}")
    if m == 0:
        return TaskDataset(X=np.zeros((gt.p, 0)), Y=np.zeros(0), source_task=task)
    X = rng.features.standard_normal((gt.p, m))
    Y = X.T @ gt.vector(task)
    if sigma > 0:
        Y = Y + sigma * rng.noise.standard_normal(m)
    return TaskDataset(X=X, Y=Y, source_task=task)


def allocate_memory(M: int, t: int) -> MemoryAllocation:
    if t < 2:
        raise ValueError(f"memory is allocated from task 2 on, got t={t}")
    if M < 0:
        raise ValueError(f"memory size must be non-negative, got {M}")
    base, remainder = divmod(M, t - 1)
    counts = tuple(base + 1 if h < remainder else base for h in range(t - 1))
    return MemoryAllocation(counts=counts, uneven=remainder != 0)


def draw_memory(
    gt: GroundTruthSet, counts: Sequence[int], sigma: float, rng: RngStreams
) -> MemoryBuffer:
    chunks = tuple(
        sample_task_dataset(gt, h, m_h, sigma, rng) for h, m_h in enumerate(counts, start=1)
    )
    return MemoryBuffer(per_task=chunks, counts=tuple(int(c) for c in counts))
