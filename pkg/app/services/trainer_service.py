import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import ConfigInvalid, PartitionInvalid, PermutationInvalid
from app.models import GroundTruthSet, MemoryBuffer, Partition, TaskDataset, TrainTrace
from app.schemas import PartitionRule, ProblemConfig, StrategySpec
from app.services.problem_service import (
    RngStreams,
    allocate_memory,
    draw_memory,
    require_overparameterized,
    sample_task_dataset,
)
from app.services.solver_service import min_norm_fit

logger = logging.getLogger(__name__)

ZERO_GRADIENT = 1e-14

Stage = Tuple[int, ...]


# ── Orders and partitions ─────────────────────────────────────────────────────

def sequential_order(spec: StrategySpec, t: int) -> List[int]:
    if spec.sequential_order == "oldest_first":
        return list(range(1, t))
    if spec.sequential_order == "newest_first":
        return list(range(t - 1, 0, -1))
    order = spec.explicit_order.get(t)
    if order is None or sorted(order) != list(range(1, t)):
        raise PermutationInvalid(f"explicit order for task {t} must permute 1..{t - 1}, got {order}")
    return list(order)


def validate_partition(sim: Sequence[int], dis: Sequence[int], t: int) -> Partition:
    sim_set, dis_set = set(sim), set(dis)
    if len(sim_set) != len(sim) or len(dis_set) != len(dis):
        raise PartitionInvalid(f"task {t}: repeated indices in partition sim={list(sim)} dis={list(dis)}")
    if sim_set & dis_set:
        raise PartitionInvalid(f"task {t}: tasks {sorted(sim_set & dis_set)} are both similar and dissimilar")
    if sim_set | dis_set != set(range(1, t)):
        raise PartitionInvalid(f"task {t}: partition must cover exactly 1..{t - 1}, got sim={sorted(sim_set)} dis={sorted(dis_set)}")
    return tuple(sorted(sim_set)), tuple(sorted(dis_set))


def exogenous_partition(rule: PartitionRule, t: int, gap_matrix: Optional[np.ndarray] = None) -> Partition:
    """Partition that does not depend on drawn data (explicit sets or gap threshold)."""
    previous = list(range(1, t))
    if rule.mode == "explicit_sets":
        sim = rule.sim_sets.get(t)
        dis = rule.dis_sets.get(t)
        if sim is None and dis is not None:
            sim = [h for h in previous if h not in dis]
        if dis is None and sim is not None:
            dis = [h for h in previous if h not in sim]
        return validate_partition(sim or [], dis or [], t)
    if rule.mode == "gap_threshold":
        if gap_matrix is None:
            raise PartitionInvalid("gap_threshold partition needs the ground-truth gap matrix")
        dis = [h for h in previous if gap_matrix[h - 1, t - 1] > rule.gap_tau]
        return validate_partition([h for h in previous if h not in dis], dis, t)
    raise PartitionInvalid(f"partition mode '{rule.mode}' depends on drawn data")


def _mse_gradient(data: TaskDataset, w: np.ndarray) -> np.ndarray:
    return 2.0 * data.X @ (data.X.T @ w - data.Y) / data.m


def divide_buffer(
    current: TaskDataset,
    memory: MemoryBuffer,
    w_prev: np.ndarray,
    rule: PartitionRule,
    gap_matrix: Optional[np.ndarray] = None,
) -> Partition:
    t = current.source_task
    if rule.is_exogenous:
        return exogenous_partition(rule, t, gap_matrix)

    g_cur = _mse_gradient(current, w_prev)
    g_cur_norm = float(np.linalg.norm(g_cur))
    if g_cur_norm < ZERO_GRADIENT:
        logger.warning(f"Task {t}: current-data gradient vanishes, treating all memory as similar")
        return tuple(range(1, t)), ()

    cosines: Dict[int, float] = {}
    for h in range(1, t):
        chunk = memory.chunk(h)
        if chunk.m == 0:
            continue
        g_h = _mse_gradient(chunk, w_prev)
        g_h_norm = float(np.linalg.norm(g_h))
        if g_h_norm < ZERO_GRADIENT:
            logger.warning(f"Task {t}: memory gradient of task {h} vanishes, treating it as similar")
            continue
        cosines[h] = float(g_cur @ g_h) / (g_cur_norm * g_h_norm)

    if rule.mode == "gradient_cosine":
        dis = [h for h, cos in cosines.items() if cos < rule.tau]
    else:
        # single_dissimilar: at most the least similar task is revisited on its own
        dis = []
        if cosines:
            h_min = min(cosines, key=lambda h: (cosines[h], h))
            if cosines[h_min] < rule.tau:
                dis = [h_min]
    sim = [h for h in range(1, t) if h not in dis]
    return validate_partition(sim, sorted(dis), t)


def plan_task_stages(
    t: int,
    counts: Sequence[int],
    kind: str,
    order: Optional[Sequence[int]] = None,
    partition: Optional[Partition] = None,
) -> List[Stage]:
    """Fit stages for task t as tuples of data sources.

    Source t is the current task's data, h < t is the memory chunk of task h.
    Empty memory chunks are dropped.
    """
    if t == 1:
        return [(1,)]

    def has(h: int) -> bool:
        return counts[h - 1] > 0

    if kind == "concurrent":
        return [(t,) + tuple(h for h in range(1, t) if has(h))]
    if kind == "sequential":
        order = list(order) if order is not None else list(range(1, t))
        return [(t,)] + [(h,) for h in order if has(h)]
    if kind == "hybrid":
        if partition is None:
            raise PartitionInvalid(f"hybrid stage plan for task {t} needs a partition")
        sim, dis = partition
        return [(t,) + tuple(h for h in sorted(sim) if has(h))] + [(h,) for h in sorted(dis) if has(h)]
    raise ValueError(f"unknown strategy kind '{kind}'")


# ── Training ──────────────────────────────────────────────────────────────────

def _fit_stage(stage: Stage, current: TaskDataset, memory: Optional[MemoryBuffer], w: np.ndarray) -> np.ndarray:
    t = current.source_task
    blocks = [current if src == t else memory.chunk(src) for src in stage]
    if len(blocks) == 1:
        X, Y = blocks[0].X, blocks[0].Y
    else:
        X = np.hstack([b.X for b in blocks])
        Y = np.concatenate([b.Y for b in blocks])
    return min_norm_fit(X, Y, w).w


def per_step_errors(params: np.ndarray, gt: GroundTruthSet) -> np.ndarray:
    T = params.shape[0]
    errors = np.empty((gt.T, T))
    for t in range(T):
        diffs = params[t][None, :] - gt.vectors
        errors[:, t] = np.einsum("ij,ij->i", diffs, diffs)
    return errors


def train(
    cfg: ProblemConfig,
    gt: GroundTruthSet,
    spec: StrategySpec,
    rng: RngStreams,
    seeds: Optional[Dict[str, int]] = None,
) -> TrainTrace:
    require_overparameterized(cfg)
    if gt.T != cfg.T or gt.p != cfg.p:
        raise ConfigInvalid("ground_truth", f"ground truths are {gt.T}x{gt.p}, problem needs {cfg.T}x{cfg.p}")
    w = np.zeros(gt.p)
    params = np.empty((cfg.T, gt.p))
    partitions: Dict[int, Partition] = {}
    datasets: List[TaskDataset] = []

    for t in range(1, cfg.T + 1):
        # Draw order is fixed for every strategy: current data, then memory chunks 1..t-1.
        current = sample_task_dataset(gt, t, cfg.n, cfg.sigma, rng)
        datasets.append(current)
        memory = None
        counts: Tuple[int, ...] = ()
        if t >= 2:
            counts = allocate_memory(cfg.M, t).counts
            memory = draw_memory(gt, counts, cfg.sigma, rng)

        order = sequential_order(spec, t) if (spec.kind == "sequential" and t >= 2) else None
        partition = None
        if spec.kind == "hybrid" and t >= 2:
            partition = divide_buffer(current, memory, w, spec.hybrid_partition, gt.gap_matrix)
            partitions[t] = partition

        for stage in plan_task_stages(t, counts, spec.kind, order, partition):
            w = _fit_stage(stage, current, memory, w)
        params[t - 1] = w

    snapshot = {"problem": cfg.model_dump(), "strategy": spec.model_dump(mode="json")}
    if seeds:
        snapshot["seeds"] = dict(seeds)
    return TrainTrace(
        params=params,
        per_step_errors=per_step_errors(params, gt),
        strategy=spec.label,
        partitions=partitions,
        config_snapshot=snapshot,
        datasets=tuple(datasets),
    )


def train_concurrent(cfg: ProblemConfig, gt: GroundTruthSet, rng: RngStreams) -> TrainTrace:
    return train(cfg, gt, StrategySpec(kind="concurrent"), rng)


def train_sequential(cfg: ProblemConfig, gt: GroundTruthSet, spec: StrategySpec, rng: RngStreams) -> TrainTrace:
    if spec.kind != "sequential":
        spec = spec.model_copy(update={"kind": "sequential"})
    return train(cfg, gt, spec, rng)


def train_hybrid(cfg: ProblemConfig, gt: GroundTruthSet, spec: StrategySpec, rng: RngStreams) -> TrainTrace:
    if spec.kind != "hybrid":
        spec = spec.model_copy(update={"kind": "hybrid"})
    return train(cfg, gt, spec, rng)
