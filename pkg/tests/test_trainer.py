import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from app.exceptions import ConfigInvalid, PartitionInvalid, PermutationInvalid
from app.schemas import PartitionRule, ProblemConfig, StrategySpec
from app.services.problem_service import (
    draw_memory,
    gap_matrix_of,
    generate_ground_truth,
    sample_task_dataset,
    trial_streams,
)
from app.services.trainer_service import (
    divide_buffer,
    exogenous_partition,
    plan_task_stages,
    sequential_order,
    train,
    train_concurrent,
    train_hybrid,
    train_sequential,
    validate_partition,
)
from tests.conftest import explicit_hybrid


# ── Orders and partitions ─────────────────────────────────────────────────────

def test_sequential_orders():
    assert sequential_order(StrategySpec(kind="sequential"), 4) == [1, 2, 3]
    assert sequential_order(StrategySpec(kind="sequential", sequential_order="newest_first"), 4) == [3, 2, 1]
    spec = StrategySpec(kind="sequential", sequential_order="explicit", explicit_order="4:2,3,1")
    assert sequential_order(spec, 4) == [2, 3, 1]


@pytest.mark.parametrize("order", ["4:1,2", "4:1,2,2", "4:1,2,4"])
def test_explicit_order_must_be_a_permutation(order):
    spec = StrategySpec(kind="sequential", sequential_order="explicit", explicit_order=order)
    with pytest.raises(PermutationInvalid):
        sequential_order(spec, 4)


def test_partition_validation():
    assert validate_partition([2, 1], [3], 4) == ((1, 2), (3,))
    with pytest.raises(PartitionInvalid):
        validate_partition([1, 2], [2, 3], 4)
    with pytest.raises(PartitionInvalid):
        validate_partition([1], [2], 4)
    with pytest.raises(PartitionInvalid):
        validate_partition([1, 1, 2], [3], 4)


def test_explicit_sets_fill_in_the_complement():
    rule = PartitionRule(mode="explicit_sets", dis_sets="4:2")
    assert exogenous_partition(rule, 4) == ((1, 3), (2,))


def test_gap_threshold_partition():
    vectors = np.array([[1.0, 0.0], [0.0, 1.0], [0.9, 0.1]])
    rule = PartitionRule(mode="gap_threshold", gap_tau=0.5)
    # task 3 is close to task 1 and far from task 2
    assert exogenous_partition(rule, 3, gap_matrix_of(vectors)) == ((1,), (2,))


@given(t=st.integers(2, 12), bits=st.integers(0, 2**11 - 1))
def test_explicit_partitions_cover_previous_tasks(t, bits):
    dis = [h for h in range(1, t) if bits >> (h - 1) & 1]
    sim, dis_out = exogenous_partition(PartitionRule(mode="explicit_sets", dis_sets={t: dis}), t)
    assert set(sim) | set(dis_out) == set(range(1, t))
    assert not set(sim) & set(dis_out)


def test_stage_plans():
    counts = (2, 0, 3)
    assert plan_task_stages(1, (), "concurrent") == [(1,)]
    assert plan_task_stages(4, counts, "concurrent") == [(4, 1, 3)]
    assert plan_task_stages(4, counts, "sequential", order=[3, 2, 1]) == [(4,), (3,), (1,)]
    assert plan_task_stages(4, counts, "hybrid", partition=((1, 2), (3,))) == [(4, 1), (3,)]
    with pytest.raises(PartitionInvalid):
        plan_task_stages(4, counts, "hybrid")


# ── Training ──────────────────────────────────────────────────────────────────

def test_trace_shapes_and_interpolation(small_cfg, small_gt, concurrent):
    trace = train(small_cfg, small_gt, concurrent, trial_streams(1, 0))
    assert trace.params.shape == (small_cfg.T, small_cfg.p)
    assert trace.per_step_errors.shape == (small_cfg.T, small_cfg.T)
    assert trace.partitions == {}
    # the final fit interpolates the last task's fresh data, so it moved toward w*_T
    assert trace.error(small_cfg.T, small_cfg.T) < small_gt.norms_sq[-1]


def test_single_task_is_one_min_norm_fit():
    cfg = ProblemConfig(p=80, n=6, M=6, T=1)
    gt = generate_ground_truth("equal_gap", 1, 80, seed=1)
    rng = trial_streams(7, 0)
    trace = train(cfg, gt, StrategySpec(kind="sequential"), rng)
    data = sample_task_dataset(gt, 1, 6, 0.0, trial_streams(7, 0))
    assert_allclose(data.X.T @ trace.params[0], data.Y, atol=1e-10)


def test_same_seed_same_trace(small_cfg, small_gt, sequential):
    a = train(small_cfg, small_gt, sequential, trial_streams(3, 5))
    b = train(small_cfg, small_gt, sequential, trial_streams(3, 5))
    assert_array_equal(a.params, b.params)


def test_memoryless_strategies_coincide(small_gt, concurrent, sequential):
    cfg = ProblemConfig(p=80, n=6, M=0, T=4)
    a = train(cfg, small_gt, concurrent, trial_streams(3, 1))
    b = train(cfg, small_gt, sequential, trial_streams(3, 1))
    assert_array_equal(a.params, b.params)


def test_hybrid_all_similar_is_concurrent(noisy_cfg, small_gt):
    hybrid = explicit_hybrid(noisy_cfg.T, lambda t: [])
    a = train_hybrid(noisy_cfg, small_gt, hybrid, trial_streams(9, 2))
    b = train_concurrent(noisy_cfg, small_gt, trial_streams(9, 2))
    assert_array_equal(a.params, b.params)


def test_hybrid_all_dissimilar_is_sequential(noisy_cfg, small_gt):
    hybrid = explicit_hybrid(noisy_cfg.T, lambda t: range(1, t))
    a = train_hybrid(noisy_cfg, small_gt, hybrid, trial_streams(9, 2))
    b = train_sequential(noisy_cfg, small_gt, StrategySpec(kind="sequential"), trial_streams(9, 2))
    assert_array_equal(a.params, b.params)


def test_hybrid_records_partitions(small_cfg, small_gt):
    hybrid = explicit_hybrid(small_cfg.T, lambda t: [1] if t >= 3 else [])
    trace = train(small_cfg, small_gt, hybrid, trial_streams(1, 1))
    assert trace.partitions[3] == ((2,), (1,))
    assert set(trace.partitions) == {2, 3, 4}


def test_train_rejects_mismatched_ground_truth(small_cfg, concurrent):
    gt = generate_ground_truth("equal_gap", 3, small_cfg.p, gap_sq=0.5, seed=1)
    with pytest.raises(ConfigInvalid):
        train(small_cfg, gt, concurrent, trial_streams(1, 0))


def test_train_rejects_underparameterized(small_gt, concurrent):
    cfg = ProblemConfig.model_construct(p=10, n=6, M=6, T=4, sigma=0.0)
    with pytest.raises(ConfigInvalid):
        train(cfg, small_gt, concurrent, trial_streams(1, 0))


# ── Gradient partitions ───────────────────────────────────────────────────────

def test_single_dissimilar_marks_at_most_one_task(small_cfg, small_gt):
    rng = trial_streams(4, 0)
    current = sample_task_dataset(small_gt, 4, small_cfg.n, 0.0, rng)
    memory = draw_memory(small_gt, (2, 2, 2), 0.0, rng)
    rule = PartitionRule(mode="single_dissimilar", tau=1.0)
    sim, dis = divide_buffer(current, memory, np.zeros(small_cfg.p), rule)
    assert len(dis) == 1
    assert set(sim) | set(dis) == {1, 2, 3}


def test_gradient_cosine_thresholds(small_cfg, small_gt):
    rng = trial_streams(4, 0)
    current = sample_task_dataset(small_gt, 4, small_cfg.n, 0.0, rng)
    memory = draw_memory(small_gt, (2, 2, 2), 0.0, rng)
    w0 = np.zeros(small_cfg.p)
    assert divide_buffer(current, memory, w0, PartitionRule(mode="gradient_cosine", tau=-1.0)) == ((1, 2, 3), ())
    sim, dis = divide_buffer(current, memory, w0, PartitionRule(mode="gradient_cosine", tau=1.0))
    assert sim == () and dis == (1, 2, 3)


def test_vanishing_gradient_defaults_to_similar(small_cfg, small_gt, caplog):
    rng = trial_streams(4, 0)
    current = sample_task_dataset(small_gt, 4, small_cfg.n, 0.0, rng)
    memory = draw_memory(small_gt, (2, 2, 2), 0.0, rng)
    with caplog.at_level(logging.WARNING):
        partition = divide_buffer(current, memory, small_gt.vector(4).copy(),
                                  PartitionRule(mode="gradient_cosine", tau=1.0))
    assert partition == ((1, 2, 3), ())
    assert "vanishes" in caplog.text
