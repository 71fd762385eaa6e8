import numpy as np
import pytest

from app.schemas import PartitionRule, ProblemConfig, StrategySpec
from app.services.problem_service import generate_ground_truth, trial_streams


@pytest.fixture
def small_cfg() -> ProblemConfig:
    return ProblemConfig(p=80, n=6, M=6, T=4, sigma=0.0)


@pytest.fixture
def noisy_cfg() -> ProblemConfig:
    return ProblemConfig(p=80, n=6, M=6, T=4, sigma=0.3)


@pytest.fixture
def small_gt(small_cfg):
    return generate_ground_truth("equal_gap", small_cfg.T, small_cfg.p, gap_sq=0.8, seed=11)


@pytest.fixture
def streams():
    return trial_streams(2024, 0)


@pytest.fixture
def concurrent() -> StrategySpec:
    return StrategySpec(kind="concurrent")


@pytest.fixture
def sequential() -> StrategySpec:
    return StrategySpec(kind="sequential")


def explicit_hybrid(T: int, dis_of) -> StrategySpec:
    """Hybrid spec whose dissimilar set for task t is ``dis_of(t)``."""
    dis_sets = {t: list(dis_of(t)) for t in range(2, T + 1)}
    sim_sets = {t: [h for h in range(1, t) if h not in dis_sets[t]] for t in range(2, T + 1)}
    rule = PartitionRule(mode="explicit_sets", sim_sets=sim_sets, dis_sets=dis_sets)
    return StrategySpec(kind="hybrid", hybrid_partition=rule)


def random_vectors(T: int, p: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((T, p)) / np.sqrt(p)
