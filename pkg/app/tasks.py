"""Picklable units of work executed by the worker pool.

Every function here takes one payload tuple and returns results keyed by trial
index, so the reduction in ``montecarlo_service`` can run in index order no
matter how chunks were scheduled.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from app.exceptions import SingularGram
from app.models import GroundTruthSet, Partition
from app.schemas import GroundTruthSpec, ProblemConfig, StrategySpec
from app.services.problem_service import ground_truth_from_spec, trial_streams
from app.services.solver_service import pinv_apply, project
from app.services.trainer_service import train

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 3

TrialOutcome = Tuple[int, Optional[np.ndarray], Dict[int, Partition]]


# ─────────────────────────────────────────────
# Training trials
# ─────────────────────────────────────────────

def trial_ground_truth(cfg: ProblemConfig, spec: GroundTruthSpec, trial: int) -> GroundTruthSet:
    """Ground truths re-seeded for one trial (exploratory geometry re-draw)."""
    seed = int(np.random.SeedSequence(spec.seed, spawn_key=(trial,)).generate_state(1)[0])
    return ground_truth_from_spec(spec, cfg.T, cfg.p, seed=seed)


def simulate_trial(
    cfg: ProblemConfig,
    gt: GroundTruthSet,
    strategy: StrategySpec,
    seed: int,
    trial: int,
) -> Tuple[Optional[np.ndarray], Dict[int, Partition]]:
    for attempt in range(MAX_ATTEMPTS):
        streams = trial_streams(seed, trial, attempt)
        try:
            trace = train(cfg, gt, strategy, streams)
            return trace.per_step_errors, trace.partitions
        except SingularGram as e:
            logger.warning(f"Trial {trial} attempt {attempt + 1} hit a degenerate draw ({e.detail}), resampling")
    return None, {}


def run_trial_chunk(payload) -> List[TrialOutcome]:
    cfg, gt, strategy, seed, indices, redraw = payload
    outcomes: List[TrialOutcome] = []
    for trial in indices:
        trial_gt = trial_ground_truth(cfg, redraw, trial) if redraw is not None else gt
        errors, partitions = simulate_trial(cfg, trial_gt, strategy, seed, trial)
        outcomes.append((trial, errors, partitions))
    return outcomes


def run_paired_chunk(payload) -> List[Tuple[int, Optional[np.ndarray], Optional[np.ndarray]]]:
    """Two strategies on the same per-trial streams."""
    cfg, gt, first, second, seed, indices = payload
    outcomes = []
    for trial in indices:
        errors_a, _ = simulate_trial(cfg, gt, first, seed, trial)
        errors_b, _ = simulate_trial(cfg, gt, second, seed, trial)
        outcomes.append((trial, errors_a, errors_b))
    return outcomes


# ─────────────────────────────────────────────
# Random-matrix identities
# ─────────────────────────────────────────────

def _unit(p: int) -> np.ndarray:
    v = np.zeros(p)
    v[0] = 1.0
    return v


def identity_sample(name: str, p: int, blocks: Sequence[int], rng) -> float:
    """One draw of the quantity whose expectation the identity ``name`` states.

    ``blocks`` lists the Gaussian block widths; for ``trace`` it is (m, d) with d
    the rank of the coordinate projection removed from a single p x m block.
    """
    v = _unit(p)

    if name == "trace":
        m, d = blocks
        rest = rng.features.standard_normal((p, m))[d:, :]
        factor = linalg.cho_factor(rest.T @ rest, lower=True, check_finite=False)
        return float(np.trace(linalg.cho_solve(factor, np.eye(m), check_finite=False)))

    X = [rng.features.standard_normal((p, m)) for m in blocks]
    if name == "projection":
        proj = project(X[0], v)
        return float(proj @ proj)
    if name == "noise":
        w = pinv_apply(X[0], rng.noise.standard_normal(blocks[0]))
        return float(w @ w)
    if name in ("zero_block", "zero_block3"):
        rhs = np.concatenate([X[0].T @ v] + [np.zeros(m) for m in blocks[1:]])
        w = pinv_apply(np.hstack(X), rhs)
        return float(w @ w)
    if name == "inner_product":
        V = np.hstack(X)
        m1, m2 = blocks
        first = pinv_apply(V, np.concatenate([X[0].T @ v, np.zeros(m2)]))
        second = pinv_apply(V, np.concatenate([np.zeros(m1), X[1].T @ v]))
        return float(first @ second)
    raise ValueError(f"unknown identity '{name}'")


def run_identity_chunk(payload) -> List[Tuple[int, float]]:
    name, p, blocks, seed, indices = payload
    return [(trial, identity_sample(name, p, blocks, trial_streams(seed, trial))) for trial in indices]
