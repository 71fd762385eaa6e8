import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.exceptions import NonIntegerAllocation, ShapeMismatch
from app.models import GroundTruthSet
from app.schemas import PartitionRule, ProblemConfig, StrategySpec
from app.services import theory_service
from app.services.coefficient_service import (
    assemble_from_coefficients,
    coefficient_orderings,
    expected_errors_from_table,
    hybrid_reduction_tables,
    lam,
    ordering_preconditions,
    predict_coefficients,
)
from app.services.problem_service import gap_matrix_of, generate_ground_truth
from app.services.theory_service import hybrid_partitions, predict_recursive
from tests.conftest import random_vectors


def _random_case(rng: np.random.Generator):
    T = int(rng.integers(2, 6))
    n = int(rng.integers(1, 12))
    M = int(rng.integers(0, 16))
    p = int(n + M + 2 + rng.integers(0, 200))
    sigma = float(rng.choice([0.0, rng.uniform(0.1, 1.0)]))
    cfg = ProblemConfig(p=p, n=n, M=M, T=T, sigma=sigma)
    vectors = random_vectors(T, p, int(rng.integers(0, 2**31)))
    gt = GroundTruthSet(vectors=vectors, gap_matrix=gap_matrix_of(vectors))
    return cfg, gt


def _random_partition_rule(rng: np.random.Generator, T: int) -> PartitionRule:
    dis = {t: [h for h in range(1, t) if rng.random() < 0.5] for t in range(2, T + 1)}
    return PartitionRule(mode="explicit_sets", dis_sets=dis)


@pytest.mark.parametrize("kind", ["concurrent", "sequential", "hybrid"])
def test_coefficient_path_matches_recursion(kind):
    rng = np.random.default_rng({"concurrent": 1, "sequential": 2, "hybrid": 3}[kind])
    for _ in range(50):
        cfg, gt = _random_case(rng)
        spec = StrategySpec(kind=kind)
        partitions = None
        if kind == "hybrid":
            rule = _random_partition_rule(rng, cfg.T)
            spec = StrategySpec(kind="hybrid", hybrid_partition=rule)
            partitions = hybrid_partitions(rule, cfg.T)
        table = predict_coefficients(cfg, spec, partitions, allow_uneven=True)
        pred = predict_recursive(cfg, gt, spec, partitions, allow_uneven=True)
        assert_allclose(expected_errors_from_table(table, gt, cfg.sigma), pred.error_table, rtol=1e-10, atol=1e-14)
        F, G = assemble_from_coefficients(table, gt, cfg.sigma)
        assert F == pytest.approx(pred.F, rel=1e-10, abs=1e-14)
        assert G == pytest.approx(pred.G, rel=1e-10, abs=1e-14)


def test_memoryless_tables_coincide():
    rng = np.random.default_rng(5)
    for _ in range(20):
        T = int(rng.integers(1, 7))
        n = int(rng.integers(1, 30))
        p = int(n + 2 + rng.integers(0, 500))
        cfg = ProblemConfig(p=p, n=n, M=0, T=T)
        conc = predict_coefficients(cfg, StrategySpec(kind="concurrent"))
        seq = predict_coefficients(cfg, StrategySpec(kind="sequential"))
        assert_allclose(conc.d0, seq.d0, rtol=1e-12)
        assert conc.d.keys() == seq.d.keys()
        for key, value in conc.d.items():
            assert value == pytest.approx(seq.d[key], rel=1e-12)


def test_hybrid_reduction_tables():
    cfg = ProblemConfig(p=400, n=10, M=12, T=4)
    tables = hybrid_reduction_tables(cfg)
    conc = predict_coefficients(cfg, StrategySpec(kind="concurrent"))
    seq = predict_coefficients(cfg, StrategySpec(kind="sequential"))
    for reduced, target in ((tables["all_similar"], conc), (tables["all_dissimilar"], seq)):
        assert_allclose(reduced.d0, target.d0, rtol=1e-12)
        for key, value in target.d.items():
            assert reduced.d[key] == pytest.approx(value, rel=1e-12)


@pytest.mark.parametrize("T", [1, 2, 3, 4, 5])
def test_d0_closed_forms(T):
    p, n, M = 500, 24, 24
    cfg = ProblemConfig(p=p, n=n, M=M, T=T)
    conc = predict_coefficients(cfg, StrategySpec(kind="concurrent"))
    seq = predict_coefficients(cfg, StrategySpec(kind="sequential"))
    r_0, r_M = 1 - n / p, 1 - (n + M) / p
    for t in range(1, T + 1):
        assert conc.d0t(t) == pytest.approx(r_0 * r_M ** (t - 1), rel=1e-12)
        decay = np.prod([(1 - M / ((t - l - 1) * p)) ** (t - l - 1) * (1 - n / p) for l in range(t - 1)])
        assert seq.d0t(t) == pytest.approx(r_0 * decay, rel=1e-12)


def test_hybrid_d0_mixes_pooled_and_revisited_memory():
    p, n, M = 300, 8, 12
    cfg = ProblemConfig(p=p, n=n, M=M, T=3)
    partitions = {2: ((), (1,)), 3: ((1,), (2,))}
    table = predict_coefficients(cfg, StrategySpec(kind="hybrid"), partitions)
    step2 = (1 - n / p) * (1 - M / p)
    step3 = (1 - (n + M / 2) / p) * (1 - M / (2 * p))
    assert table.d0t(3) == pytest.approx((1 - n / p) * step2 * step3, rel=1e-12)
    assert table.helpers["K"] == {"0,3,1": pytest.approx((M / 2 / p) / (p - n - M / 2 - 1))}


@pytest.mark.parametrize("kind", ["concurrent", "sequential"])
def test_interference_vanishes_at_large_dimension(kind):
    table = predict_coefficients(ProblemConfig(p=10**6, n=24, M=24, T=5), StrategySpec(kind=kind))
    T = table.T
    pairs = [(j, k) for j in range(1, T + 1) for k in range(j + 1, T + 1)]
    assert max(table.dijkt(i, j, k, T) for i in range(1, T + 1) for j, k in pairs) < 1e-4
    assert max(abs(table.c_ijk(i, j, k)) for i in range(1, T) for j, k in pairs) < 1e-4


def test_table_does_not_follow_the_recursion_schedule(monkeypatch):
    cfg = ProblemConfig(p=500, n=24, M=24, T=5)
    spec = StrategySpec(kind="concurrent")
    gt = generate_ground_truth("orthonormal", 5, 500, seed=2)
    before = predict_coefficients(cfg, spec)

    def no_memory(cfg, t, allow_uneven=False):
        return (0,) * max(t - 1, 0)

    monkeypatch.setattr(theory_service, "memory_counts", no_memory)
    after = predict_coefficients(cfg, spec)
    assert_allclose(after.d0, before.d0, rtol=0)
    assert after.d0t(5) == pytest.approx((1 - 24 / 500) * (1 - 48 / 500) ** 4, rel=1e-12)
    # a broken schedule now shows up as a disagreement between the two paths
    pred = predict_recursive(cfg, gt, spec)
    table = expected_errors_from_table(after, gt, cfg.sigma)
    assert not np.allclose(table, pred.error_table, rtol=1e-6)


def test_uneven_chunks_need_opt_in():
    cfg = ProblemConfig(p=200, n=10, M=4, T=4)
    with pytest.raises(NonIntegerAllocation):
        predict_coefficients(cfg, StrategySpec(kind="sequential"))
    table = predict_coefficients(cfg, StrategySpec(kind="sequential"), allow_uneven=True)
    # 4 memory samples over 3 chunks: tasks 1, 2, 3 keep 2, 1, 1
    assert table.helpers["B"]["0,4,1"] == pytest.approx(2 / 200)
    assert table.helpers["B"]["0,4,3"] == pytest.approx(1 / 200)
    assert table.helpers["B"]["1,4,2"] == pytest.approx(2 / 200)


def test_first_step_coefficients():
    cfg = ProblemConfig(p=100, n=10, M=8, T=3)
    table = predict_coefficients(cfg, StrategySpec(kind="concurrent"))
    assert table.d0t(1) == pytest.approx(0.9)
    # L_2(w_1) picks up n/p of the gap to task 1
    assert table.dijkt(2, 1, 2, 1) == pytest.approx(0.1)
    assert table.dijkt(2, 2, 1, 1) == table.dijkt(2, 1, 2, 1)
    assert table.dijkt(2, 1, 1, 1) == 0.0
    assert table.noise(1, 0.0) == 0.0
    assert table.noise(1, 2.0) == pytest.approx(4 * 10 / 89)


def test_table_and_ground_truth_must_agree():
    cfg = ProblemConfig(p=100, n=10, M=8, T=3)
    table = predict_coefficients(cfg, StrategySpec(kind="concurrent"))
    gt = generate_ground_truth("equal_gap", 4, 100, gap_sq=0.5, seed=1)
    with pytest.raises(ShapeMismatch):
        assemble_from_coefficients(table, gt, 0.0)


def test_lambda_domain():
    assert lam(100, 0) == 0.0
    assert lam(100, 20) == pytest.approx(20 / 79)
    assert np.isnan(lam(10, 9))


def test_coefficients_json_keys():
    cfg = ProblemConfig(p=100, n=10, M=8, T=3)
    payload = predict_coefficients(cfg, StrategySpec(kind="sequential")).to_json()
    keys = payload["coefficients"]
    assert "sequential/d0/3" in keys
    assert "sequential/1/1/2/3" in keys
    json.dumps(payload)


# ── Orderings ────────────────────────────────────────────────────────────────

def test_two_task_orderings_hold():
    report = coefficient_orderings(ProblemConfig(p=500, n=24, M=24, T=2))
    assert report.preconditions["p>n+M+1"] and report.preconditions["M>=2"]
    assert report.all_hold


@pytest.mark.parametrize("T,p,n,M", [(3, 11665, 2, 4), (4, 12289, 2, 2)])
def test_orderings_hold_above_thresholds(T, p, n, M):
    report = coefficient_orderings(ProblemConfig(p=p, n=n, M=M, T=T), allow_uneven=True)
    assert all(report.preconditions.values())
    assert report.all_hold, report.violations[:3]


def test_moderate_dimension_violations_are_exact():
    report = coefficient_orderings(ProblemConfig(p=500, n=24, M=24, T=5))
    assert len(report.entries) == 95
    assert report.family_holds("d_0T")
    assert report.family_holds("c_i") and report.family_holds("d_ijkT")
    assert not report.preconditions["p>2T^4(n+M)nM"]
    violations = {tuple(e.index): e.margin for e in report.violations}
    assert set(violations) == {(3, 1, 2), (3, 2, 3), (4, 1, 2), (4, 2, 4), (4, 3, 4)}
    assert all(e.family == "c_ijk" for e in report.violations)
    # three of the five pairs contain i
    expected = {(3, 1, 2): -1.23e-4, (3, 2, 3): -7.0e-5, (4, 1, 2): -1.23e-4,
                (4, 2, 4): -4.5e-5, (4, 3, 4): -1.42e-4}
    for index, margin in expected.items():
        assert violations[index] == pytest.approx(margin, rel=0.05)


def test_memoryless_orderings_are_equalities():
    report = coefficient_orderings(ProblemConfig(p=300, n=10, M=0, T=4))
    assert report.all_equal


def test_preconditions_flags():
    flags = ordering_preconditions(ProblemConfig(p=500, n=24, M=24, T=5))
    assert flags["p>n+M+1"] and flags["M>=2"]
    assert not flags["p>2T^3(n+M)^2"]
