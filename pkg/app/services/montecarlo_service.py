import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import ConfigInvalid, DimensionTooSmall, InfeasibleGap, LabError, TooManyDegenerateDraws
from app.models import EstimateWithError, GroundTruthSet, SweepResult, TrialBatch
from app.schemas import CheckReport, CheckRow, GroundTruthSpec, ProblemConfig, StrategySpec
from app.services.metrics_service import forgetting_from_errors, generalization_from_errors
from app.services.problem_service import ground_truth_from_spec
from app.services.theory_service import predict_for_partitions, predict_recursive
from app.tasks import run_identity_chunk, run_paired_chunk, run_trial_chunk
from app.workers import flatten, index_chunks, map_chunks

logger = logging.getLogger(__name__)

FAILURE_RATE_MAX = 0.01
Z_LIMIT = 4.0


def _check_failures(failed: int, trials: int, label: str) -> None:
    if failed > FAILURE_RATE_MAX * trials:
        raise TooManyDegenerateDraws(
            f"{label}: {failed} of {trials} trials stayed degenerate after retries"
        )
    if failed:
        logger.warning(f"{label}: dropped {failed} degenerate trials of {trials}")


def _estimate_table(tables: Sequence[np.ndarray]) -> List[List[EstimateWithError]]:
    stack = np.stack(tables)
    T_rows, T_cols = stack.shape[1], stack.shape[2]
    return [
        [EstimateWithError.from_samples(stack[:, i, t].tolist()) for t in range(T_cols)]
        for i in range(T_rows)
    ]


# ─────────────────────────────────────────────
# Trials
# ─────────────────────────────────────────────

def run_trials(
    cfg: ProblemConfig,
    gt: GroundTruthSet,
    spec: StrategySpec,
    trials: int,
    seed: int,
    workers: int = 1,
    redraw: Optional[GroundTruthSpec] = None,
) -> TrialBatch:
    """Monte Carlo estimates of F_T, G_T and every L_i(w_t) for one strategy.

    Trial k draws from streams derived from (seed, k) only, so the estimates do
    not depend on ``workers``. ``redraw`` re-seeds the ground truths per trial.
    """
    if trials < 2:
        raise ConfigInvalid("run.trials", f"at least two trials are needed for a standard error, got {trials}")
    payloads = [(cfg, gt, spec, seed, chunk, redraw) for chunk in index_chunks(trials, workers)]
    outcomes = sorted(flatten(map_chunks(run_trial_chunk, payloads, workers)), key=lambda o: o[0])

    kept = [(errors, parts) for _, errors, parts in outcomes if errors is not None]
    _check_failures(trials - len(kept), trials, spec.label)

    tables = [errors for errors, _ in kept]
    F_samples = [forgetting_from_errors(E) for E in tables] if cfg.T >= 2 else []
    G_samples = [generalization_from_errors(E) for E in tables]
    if F_samples:
        F = EstimateWithError.from_samples(F_samples)
    else:
        F = EstimateWithError(mean=float("nan"), std_error=float("nan"), trials=len(tables))
    return TrialBatch(
        F=F,
        G=EstimateWithError.from_samples(G_samples),
        error_table=_estimate_table(tables),
        failed_trials=trials - len(kept),
        partitions=[parts for _, parts in kept] if spec.kind == "hybrid" else [],
    )


def run_paired_difference(
    cfg: ProblemConfig,
    gt: GroundTruthSet,
    first: StrategySpec,
    second: StrategySpec,
    trials: int,
    seed: int,
    workers: int = 1,
) -> Tuple[EstimateWithError, EstimateWithError]:
    """Estimates of F_first − F_second and G_first − G_second on common random numbers."""
    if trials < 2:
        raise ConfigInvalid("run.trials", f"at least two trials are needed for a standard error, got {trials}")
    payloads = [(cfg, gt, first, second, seed, chunk) for chunk in index_chunks(trials, workers)]
    outcomes = sorted(flatten(map_chunks(run_paired_chunk, payloads, workers)), key=lambda o: o[0])

    F_diff, G_diff = [], []
    for _, errors_a, errors_b in outcomes:
        if errors_a is None or errors_b is None:
            continue
        F_diff.append(forgetting_from_errors(errors_a) - forgetting_from_errors(errors_b))
        G_diff.append(generalization_from_errors(errors_a) - generalization_from_errors(errors_b))
    _check_failures(trials - len(F_diff), trials, f"{first.label}-{second.label}")
    return EstimateWithError.from_samples(F_diff), EstimateWithError.from_samples(G_diff)


# ─────────────────────────────────────────────
# Sweeps
# ─────────────────────────────────────────────

def sweep_point(cfg: ProblemConfig, axis: str, value: float) -> Tuple[ProblemConfig, Optional[float]]:
    """Problem config and gap override for one grid value."""
    if axis == "gap_sq":
        return cfg, float(value)
    if axis == "sigma":
        return cfg.model_copy(update={"sigma": float(value)}), None
    if axis in ("M", "p"):
        return cfg.model_copy(update={axis: int(round(value))}), None
    raise ValueError(f"unknown sweep axis '{axis}'")


def theory_value(
    cfg: ProblemConfig,
    gt: GroundTruthSet,
    spec: StrategySpec,
    batch: TrialBatch,
    allow_uneven: bool,
) -> Tuple[Optional[float], Optional[float]]:
    try:
        if spec.kind == "hybrid" and not spec.hybrid_partition.is_exogenous:
            return predict_for_partitions(cfg, gt, spec, batch.partitions, allow_uneven)
        prediction = predict_recursive(cfg, gt, spec, allow_uneven=allow_uneven)
        return prediction.F, prediction.G
    except LabError as e:
        logger.warning(f"No theory value for {spec.label} at this point: {e}")
        return None, None


def find_crossover(grid: Sequence[float], diffs: Sequence[Optional[float]]) -> Optional[float]:
    """First sign change of ``diffs`` along ``grid``, linearly interpolated."""
    points = [(x, d) for x, d in zip(grid, diffs) if d is not None and not math.isnan(d)]
    for (x0, d0), (x1, d1) in zip(points, points[1:]):
        if d0 == 0.0:
            return x0
        if d1 == 0.0:
            return x1
        if (d0 < 0) != (d1 < 0):
            return x0 + (x1 - x0) * d0 / (d0 - d1)
    return None


def sweep(
    cfg_base: ProblemConfig,
    gt_spec: GroundTruthSpec,
    axis: str,
    grid: Sequence[float],
    strategies: Sequence[StrategySpec],
    trials: int,
    seed: int,
    workers: int = 1,
    allow_uneven: bool = False,
    redraw_geometry: bool = False,
) -> SweepResult:
    labels = [s.label for s in strategies]
    empirical: Dict[Tuple[str, str], List[Optional[EstimateWithError]]] = {
        (label, metric): [] for label in labels for metric in ("F", "G")
    }
    theory: Dict[Tuple[str, str], List[Optional[float]]] = {key: [] for key in empirical}
    skipped: List[Tuple[float, str]] = []

    def skip(value: float, reason: str) -> None:
        logger.warning(f"Skipping {axis}={value}: {reason}")
        skipped.append((float(value), reason))
        for key in empirical:
            empirical[key].append(None)
            theory[key].append(None)

    for k, value in enumerate(grid):
        cfg, gap_sq = sweep_point(cfg_base, axis, value)
        if cfg.p <= cfg.n + cfg.M + 1:
            skip(value, f"p={cfg.p} does not exceed n+M+1={cfg.n + cfg.M + 1}")
            continue
        try:
            gt = ground_truth_from_spec(gt_spec, cfg.T, cfg.p, gap_sq=gap_sq)
        except (InfeasibleGap, DimensionTooSmall) as e:
            skip(value, e.detail)
            continue

        logger.info(f"Sweep point {k + 1}/{len(grid)}: {axis}={value}")
        for spec in strategies:
            batch = run_trials(cfg, gt, spec, trials, seed, workers, redraw=gt_spec if redraw_geometry else None)
            F_th, G_th = (None, None) if redraw_geometry else theory_value(cfg, gt, spec, batch, allow_uneven)
            empirical[(spec.label, "F")].append(batch.F)
            empirical[(spec.label, "G")].append(batch.G)
            theory[(spec.label, "F")].append(F_th)
            theory[(spec.label, "G")].append(G_th)

    crossovers: Dict[str, Optional[float]] = {}
    if "concurrent" in labels and "sequential" in labels:
        for metric in ("F", "G"):
            conc, seq = empirical[("concurrent", metric)], empirical[("sequential", metric)]
            diffs = [None if a is None or b is None else a.mean - b.mean for a, b in zip(conc, seq)]
            crossovers[metric] = find_crossover(list(grid), diffs)

    return SweepResult(
        axis=axis,
        grid=[float(v) for v in grid],
        strategies=labels,
        empirical=empirical,
        theory=theory,
        skipped=skipped,
        crossovers=crossovers,
    )


# ─────────────────────────────────────────────
# Random-matrix identities
# ─────────────────────────────────────────────

def identity_cases(p: int, m_list: Sequence[int]) -> List[Tuple[str, Tuple[int, ...], float]]:
    """(identity, block widths, analytic expectation) for each m; unit vector v = e1, σ = 1."""
    cases = []
    for m in m_list:
        cases.append(("projection", (m,), m / p))
        cases.append(("noise", (m,), m / (p - m - 1)))
        m1 = max(m // 2, 1)
        m2 = max(m - m1, 1)
        S = m1 + m2
        cases.append(("zero_block", (m1, m2), (m1 / p) * (1 + m2 / (p - S - 1))))
        cases.append(("inner_product", (m1, m2), -m1 * m2 / (p * (p - S - 1))))
        m3 = max(m // 4, 1)
        cases.append(("zero_block3", (m1, m2, m3), (m1 / p) * (1 + (m2 + m3) / (p - S - m3 - 1))))
        d = max(m // 2, 1)
        cases.append(("trace", (m, d), m / (p - d - m - 1)))
    return cases


def verify_identities(p: int, m_list: Sequence[int], trials: int, seed: int, workers: int = 1) -> CheckReport:
    report = CheckReport(
        name="identities",
        grid_description=f"p={p}, m in {list(m_list)}, {trials} trials, |z| < {Z_LIMIT:g}",
    )
    for k, (name, blocks, expected) in enumerate(identity_cases(p, m_list)):
        total = sum(blocks) if name != "trace" else blocks[0] + blocks[1]
        point = {"p": float(p), **{f"m{j + 1}": float(m) for j, m in enumerate(blocks)}}
        if p <= total + 1:
            report.rows.append(CheckRow(
                check=f"identity/{name}", point=point, status="skipped",
                skipped_reason=f"p={p} does not exceed {total + 1}",
            ))
            continue
        # separate stream family per case so cases stay independent
        case_seed = int(np.random.SeedSequence(seed, spawn_key=(k,)).generate_state(1)[0])
        payloads = [(name, p, blocks, case_seed, chunk) for chunk in index_chunks(trials, workers)]
        samples = [value for _, value in sorted(flatten(map_chunks(run_identity_chunk, payloads, workers)))]
        est = EstimateWithError.from_samples(samples)
        z = est.z_score(expected)
        report.rows.append(CheckRow(
            check=f"identity/{name}",
            point=point,
            status="pass" if abs(z) < Z_LIMIT else "fail",
            margin=Z_LIMIT - abs(z),
            values={"empirical": est.mean, "std_error": est.std_error, "analytic": expected, "z": z},
        ))
    logger.info(f"Identity checks: {report.counts()}")
    return report
