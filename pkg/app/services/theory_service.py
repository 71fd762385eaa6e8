import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import ConfigInvalid, DenominatorDomain, NonIntegerAllocation
from app.models import GroundTruthSet, Partition, TheoryPrediction
from app.schemas import PartitionRule, ProblemConfig, StrategySpec
from app.services.metrics_service import forgetting_from_errors, generalization_from_errors
from app.services.problem_service import allocate_memory, require_overparameterized
from app.services.trainer_service import exogenous_partition, plan_task_stages, validate_partition

logger = logging.getLogger(__name__)

Block = Tuple[int, int]             # (source task, sample count)
StagePlan = List[List[Block]]       # fit stages of one task


# ─────────────────────────────────────────────
# Stage schedule of the exact recursion
# ─────────────────────────────────────────────

def memory_counts(cfg: ProblemConfig, t: int, allow_uneven: bool = False) -> Tuple[int, ...]:
    if t < 2:
        return ()
    alloc = allocate_memory(cfg.M, t)
    if alloc.uneven:
        if not allow_uneven:
            raise NonIntegerAllocation(
                f"M={cfg.M} is not divisible by t-1={t - 1}; closed forms assume equal memory chunks"
            )
        logger.warning(f"Task {t}: uneven memory chunks {alloc.counts}, evaluating with realized counts")
    return alloc.counts


def hybrid_partitions(rule: PartitionRule, T: int, gap_matrix: Optional[np.ndarray] = None) -> Dict[int, Partition]:
    if not rule.is_exogenous:
        raise ConfigInvalid(
            "partition.mode",
            f"'{rule.mode}' partitions depend on drawn data; pass the realized partitions instead",
        )
    return {t: exogenous_partition(rule, t, gap_matrix) for t in range(2, T + 1)}


def all_similar(T: int) -> Dict[int, Partition]:
    return {t: (tuple(range(1, t)), ()) for t in range(2, T + 1)}


def all_dissimilar(T: int) -> Dict[int, Partition]:
    return {t: ((), tuple(range(1, t))) for t in range(2, T + 1)}


def stage_schedule(
    cfg: ProblemConfig,
    strategy: StrategySpec,
    partitions: Optional[Dict[int, Partition]] = None,
    allow_uneven: bool = False,
) -> List[StagePlan]:
    """Per task t, the list of fit stages as (source, size) blocks."""
    require_overparameterized(cfg)
    if strategy.kind == "sequential" and strategy.sequential_order != "oldest_first":
        raise ConfigInvalid(
            "strategy.sequential_order",
            "closed-form predictions exist only for the oldest-first revisit order",
        )
    if strategy.kind == "hybrid" and partitions is None:
        raise ConfigInvalid("partition", "hybrid predictions need a concrete partition for every task")

    schedule: List[StagePlan] = []
    for t in range(1, cfg.T + 1):
        counts = memory_counts(cfg, t, allow_uneven)
        partition = None
        if strategy.kind == "hybrid" and t >= 2:
            if t not in partitions:
                raise ConfigInvalid("partition", f"no partition given for task {t}")
            partition = validate_partition(*partitions[t], t)
        stages = plan_task_stages(t, counts, strategy.kind, None, partition)
        schedule.append([
            [(src, cfg.n if src == t else counts[src - 1]) for src in stage] for stage in stages
        ])
    return schedule


# ─────────────────────────────────────────────
# Exact expectation recursion
# ─────────────────────────────────────────────

def _stage_step(E: np.ndarray, blocks: Sequence[Block], gaps: np.ndarray, p: int, sigma: float) -> np.ndarray:
    S = sum(m for _, m in blocks)
    denom = p - S - 1
    if denom <= 0 and (len(blocks) >= 2 or sigma > 0):
        raise DenominatorDomain(f"stage with {S} samples needs p > S + 1 (p={p})")

    out = (1.0 - S / p) * E
    for src, m in blocks:
        out = out + (m / p) * gaps[src - 1]
    if len(blocks) >= 2:
        pair = 0.0
        for b in range(len(blocks)):
            for c in range(b + 1, len(blocks)):
                (sb, mb), (sc, mc) = blocks[b], blocks[c]
                pair += mb * mc * gaps[sb - 1, sc - 1]
        out = out + pair / (p * denom)
    if sigma > 0:
        out = out + S * sigma * sigma / denom
    return out


def expected_error_table(
    cfg: ProblemConfig,
    gt: GroundTruthSet,
    schedule: List[StagePlan],
) -> np.ndarray:
    """E[L_i(w_t)] for every i (rows) and t (columns), tasks 1-based."""
    if gt.T != cfg.T:
        raise ConfigInvalid("ground_truth", f"{gt.T} ground truths for a {cfg.T}-task problem")
    E = gt.norms_sq.astype(float)
    table = np.empty((gt.T, cfg.T))
    for t, stages in enumerate(schedule, start=1):
        for blocks in stages:
            E = _stage_step(E, blocks, gt.gap_matrix, cfg.p, cfg.sigma)
        table[:, t - 1] = E
    return table


def metrics_from_table(table: np.ndarray) -> Tuple[float, float]:
    G = generalization_from_errors(table)
    F = forgetting_from_errors(table) if table.shape[1] >= 2 else float("nan")
    return F, G


def predict_recursive(
    cfg: ProblemConfig,
    gt: GroundTruthSet,
    strategy: StrategySpec,
    partitions: Optional[Dict[int, Partition]] = None,
    allow_uneven: bool = False,
) -> TheoryPrediction:
    if strategy.kind == "hybrid" and partitions is None:
        partitions = hybrid_partitions(strategy.hybrid_partition, cfg.T, gt.gap_matrix)
    schedule = stage_schedule(cfg, strategy, partitions, allow_uneven)
    table = expected_error_table(cfg, gt, schedule)
    F, G = metrics_from_table(table)
    return TheoryPrediction(strategy=strategy.label, F=F, G=G, error_table=table)


def predict_for_partitions(
    cfg: ProblemConfig,
    gt: GroundTruthSet,
    strategy: StrategySpec,
    realized: Sequence[Dict[int, Partition]],
    allow_uneven: bool = False,
) -> Tuple[float, float]:
    """Frequency-weighted prediction over partitions realized by data-driven hybrid runs."""
    groups: Dict[tuple, int] = {}
    for parts in realized:
        key = tuple(sorted(parts.items()))
        groups[key] = groups.get(key, 0) + 1
    total = sum(groups.values())
    F_terms, G_terms = [], []
    for key in sorted(groups):
        pred = predict_recursive(cfg, gt, strategy, dict(key), allow_uneven)
        weight = groups[key] / total
        F_terms.append(weight * pred.F)
        G_terms.append(weight * pred.G)
    return math.fsum(F_terms), math.fsum(G_terms)
