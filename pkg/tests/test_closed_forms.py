import math

import numpy as np
import pytest

from app.exceptions import ConfigInvalid, NonIntegerAllocation, NonzeroSigma
from app.models import GroundTruthSet
from app.schemas import ProblemConfig, StrategySpec
from app.services.closed_forms_service import (
    forgetting_crossover,
    generalization_crossover,
    large_p_schedule,
    noise_crossovers,
    three_task,
    three_task_coefficients,
    two_task,
    two_task_constants,
    two_task_metrics,
)
from app.services.problem_service import gap_matrix_of, generate_ground_truth
from app.services.theory_service import predict_recursive

CONC, SEQ = StrategySpec(kind="concurrent"), StrategySpec(kind="sequential")


def _recursion(cfg, gt):
    return {kind: (pred.F, pred.G) for kind, pred in (
        ("concurrent", predict_recursive(cfg, gt, CONC)),
        ("sequential", predict_recursive(cfg, gt, SEQ)),
    )}


@pytest.mark.parametrize("p,n,M,sigma,gap_sq", [
    (500, 24, 24, 0.0, 1.0),
    (200, 10, 20, 0.5, 0.3),
    (1000, 50, 10, 1.2, 1.7),
])
def test_two_task_forms_match_recursion(p, n, M, sigma, gap_sq):
    cfg = ProblemConfig(p=p, n=n, M=M, T=2, sigma=sigma)
    gt = generate_ground_truth("equal_gap", 2, p, gap_sq=gap_sq, seed=5)
    _, closed = two_task(cfg, gt)
    exact = _recursion(cfg, gt)
    for kind in ("concurrent", "sequential"):
        assert closed[kind][0] == pytest.approx(exact[kind][0], rel=1e-10, abs=1e-14)
        assert closed[kind][1] == pytest.approx(exact[kind][1], rel=1e-10, abs=1e-14)


def test_forgetting_root():
    p, n, M = 500, 24, 24
    cfg = ProblemConfig(p=p, n=n, M=M, T=2)
    D = p - n - M - 1
    expected = (p - n) * D / (p * p + p * D)
    assert forgetting_crossover(cfg, 1.0) == pytest.approx(expected, rel=1e-10)
    consts = two_task_constants(cfg)
    m = two_task_metrics(consts, (1.0, 1.0), expected, 0.0)
    assert m["concurrent"][0] - m["sequential"][0] == pytest.approx(0.0, abs=1e-14)


def test_generalization_root():
    cfg = ProblemConfig(p=500, n=24, M=24, T=2)
    gap = generalization_crossover(cfg, 1.0, 1.0)
    m = two_task_metrics(two_task_constants(cfg), (1.0, 1.0), gap, 0.0)
    assert m["concurrent"][1] - m["sequential"][1] == pytest.approx(0.0, abs=1e-14)


def test_predicates_match_direct_difference():
    cfg = ProblemConfig(p=500, n=24, M=24, T=2)
    consts = two_task_constants(cfg)
    disagreements = 0
    for gap_sq in np.linspace(0.0, 2.0, 10):
        for sigma in np.linspace(0.0, 1.5, 10):
            m = two_task_metrics(consts, (1.0, 1.0), gap_sq, sigma)
            dF = m["concurrent"][0] - m["sequential"][0]
            dG = m["concurrent"][1] - m["sequential"][1]
            if abs(dF) > 1e-13 and (dF > 0) != consts.forgetting_conc_worse(1.0, gap_sq, sigma):
                disagreements += 1
            if abs(dG) > 1e-13 and (dG > 0) != consts.generalization_conc_worse(1.0, 1.0, gap_sq, sigma):
                disagreements += 1
    assert disagreements == 0


def test_noise_crossovers_tie_the_strategies():
    cfg = ProblemConfig(p=500, n=24, M=24, T=2)
    consts = two_task_constants(cfg)
    sigma_sq_F, sigma_sq_G = noise_crossovers(cfg, 1.0, 1.0)
    mF = two_task_metrics(consts, (1.0, 1.0), 0.0, math.sqrt(sigma_sq_F))
    mG = two_task_metrics(consts, (1.0, 1.0), 0.0, math.sqrt(sigma_sq_G))
    assert mF["concurrent"][0] == pytest.approx(mF["sequential"][0], rel=1e-10)
    assert mG["concurrent"][1] == pytest.approx(mG["sequential"][1], rel=1e-10)


def test_memoryless_two_task_constants():
    consts = two_task_constants(ProblemConfig(p=100, n=10, M=0, T=2))
    assert math.isinf(consts.xi1)
    assert consts.c_hat1["concurrent"] == pytest.approx(consts.c_hat1["sequential"])


def test_two_task_requires_two_tasks():
    cfg = ProblemConfig(p=100, n=10, M=4, T=3)
    gt = generate_ground_truth("equal_gap", 3, 100, gap_sq=0.5, seed=1)
    with pytest.raises(ConfigInvalid):
        two_task(cfg, gt)


@pytest.mark.parametrize("p,n,M,gap_sq", [(500, 24, 24, 1.0), (300, 10, 8, 0.2), (2000, 40, 6, 1.4)])
def test_three_task_forms_match_recursion(p, n, M, gap_sq):
    cfg = ProblemConfig(p=p, n=n, M=M, T=3)
    gt = generate_ground_truth("equal_gap", 3, p, gap_sq=gap_sq, seed=3)
    closed = three_task(cfg, gt)
    exact = _recursion(cfg, gt)
    for kind in ("concurrent", "sequential"):
        assert closed[kind][0] == pytest.approx(exact[kind][0], rel=1e-10, abs=1e-14)
        assert closed[kind][1] == pytest.approx(exact[kind][1], rel=1e-10, abs=1e-14)


def test_three_task_forms_with_unequal_geometry():
    p = 400
    cfg = ProblemConfig(p=p, n=12, M=10, T=3)
    rng = np.random.default_rng(8)
    vectors = rng.standard_normal((3, p)) / math.sqrt(p) * np.array([[1.0], [1.5], [0.7]])
    gt = GroundTruthSet(vectors=vectors, gap_matrix=gap_matrix_of(vectors))
    closed = three_task(cfg, gt)
    exact = _recursion(cfg, gt)
    for kind in ("concurrent", "sequential"):
        assert closed[kind] == pytest.approx(exact[kind], rel=1e-10, abs=1e-14)


def test_three_task_preconditions():
    with pytest.raises(NonzeroSigma):
        three_task_coefficients(ProblemConfig(p=300, n=10, M=8, T=3, sigma=0.1))
    with pytest.raises(NonIntegerAllocation):
        three_task_coefficients(ProblemConfig(p=300, n=10, M=7, T=3))


def test_large_p_schedule():
    assert large_p_schedule(4, 10, 4) == 2 * 4**4 * 14**2 * 4
    assert large_p_schedule(2, 3, 0) == 2 * 16 * 9
