import logging
import math
from dataclasses import dataclass
from itertools import product
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.schemas import CheckReport, CheckRow, ProblemConfig, StrategySpec
from app.services.closed_forms_service import large_p_schedule, two_task_constants, two_task_metrics
from app.services.coefficient_service import assemble_from_coefficients, coefficient_orderings, predict_coefficients
from app.services.problem_service import generate_ground_truth
from app.services.theory_service import predict_recursive

logger = logging.getLogger(__name__)

SLACK = 1e-12

DEFAULT_T = (2, 3, 4, 5, 6)
DEFAULT_N = (4, 8, 16, 32, 64)
DEFAULT_M = (0, 2, 8, 24, 48)
FIXED_P = (500, 10_000, 100_000)


def classify(margin: float, rhs: float) -> Tuple[str, float]:
    """Status and relative margin of an inequality whose margin is positive when it holds."""
    scale = abs(rhs) if rhs != 0 else 1.0
    if margin > SLACK * scale:
        return "pass", margin / scale
    if margin >= -SLACK * scale:
        return "marginal", margin / scale
    return "fail", margin / scale


# ─────────────────────────────────────────────
# Scalar lemmas
# ─────────────────────────────────────────────

def _chunk_log(M: int, k: int, p: int) -> float:
    """log of (1 − M/(k p))^k."""
    return k * math.log1p(-M / (k * p))


def _seq_log_prod(n: int, M: int, p: int, t: int) -> float:
    """log Π_{l=0}^{t-2} (1 − M/((t−l−1)p))^{t−l−1}(1 − n/p)."""
    return sum(_chunk_log(M, k, p) + math.log1p(-n / p) for k in range(1, t))


@dataclass(frozen=True)
class Lemma:
    name: str
    # precondition name -> predicate over (n, M, p, T)
    preconditions: Dict[str, Callable[[int, int, int, int], bool]]
    # smallest p the preconditions allow, given (n, M, T)
    threshold: Callable[[int, int, int], int]
    # index tuples to evaluate for a given T, and their names
    indices: Callable[[int], Iterable[Tuple[int, ...]]]
    index_names: Tuple[str, ...]
    # (margin, rhs) with margin > 0 when the inequality holds
    evaluate: Callable[..., Tuple[float, float]]


def _prod_indices(T: int):
    return [(t, l) for t in range(2, T + 1) for l in range(0, t - 1)]


def _power_indices(T: int):
    return [(t,) for t in range(1, T + 1)]


def _pair_indices(T: int):
    return [(t, i) for t in range(2, T + 1) for i in range(1, t)]


def _lower_prod(n, M, p, T, t, l):
    k = t - l - 1
    x = (n + M) / p
    # LHS − (1 − x) with LHS = exp(log)
    margin = math.expm1(_chunk_log(M, k, p) + math.log1p(-n / p)) + x
    return margin, 1 - x


def _upper_prod(n, M, p, T, t, l):
    k = t - l - 1
    x = (n + M) / p
    b = (n + M) * M / p**2
    excess = math.expm1(_chunk_log(M, k, p) + math.log1p(-n / p)) + x
    return b - excess, 1 - x + b


def _power_gap(n, M, p, t):
    """(1 − x + b)^t − (1 − x)^t, computed without cancellation."""
    x = (n + M) / p
    b = (n + M) * M / p**2
    base = t * math.log1p(-x)
    return math.exp(base) * math.expm1(t * math.log1p(b / (1 - x))), math.exp(base)


def _power(n, M, p, T, t):
    gap, base = _power_gap(n, M, p, t)
    bound = T**2 * (n + M) * M / p**2
    return bound - gap, base + bound


def _power_tight(n, M, p, T, t):
    gap, base = _power_gap(n, M, p, t)
    bound = t * (n + M) * M / p**2 + T**3 * (n + M) ** 2 * M**2 / (2 * p**4)
    return bound - gap, base + bound


def _prod_ratio(n, M, p, T, t, l):
    k = t - l - 1
    x = (n + M) / p
    b = (n + M) * M / p**2
    log_lhs = l * math.log1p(-x + b) + _chunk_log(M, k, p)
    log_rhs = math.log1p(-1 / (T * p)) + l * math.log1p(-x)
    rhs = math.exp(log_rhs)
    return -rhs * math.expm1(log_lhs - log_rhs), rhs


def _forgetting_sides(n, M, p, t, i):
    x = (n + M) / p
    log_i, log_t = _seq_log_prod(n, M, p, i), _seq_log_prod(n, M, p, t)
    lhs = math.exp(log_i) * math.expm1(log_t - log_i)
    main = (1 - x) ** (i - 1) * math.expm1((t - i) * math.log1p(-x))
    return lhs, main


def _forgetting_lower(n, M, p, T, t, i):
    lhs, rhs = _forgetting_sides(n, M, p, t, i)
    return lhs - rhs, rhs


def _forgetting_upper(n, M, p, T, t, i):
    lhs, main = _forgetting_sides(n, M, p, t, i)
    rhs = main + T**2 * (n + M) * M / p**2
    return rhs - lhs, rhs


def _forgetting_upper_tight(n, M, p, T, t, i):
    lhs, main = _forgetting_sides(n, M, p, t, i)
    rhs = main + (t - i) * (n + M) * M / p**2 + T**3 * (n + M) ** 2 * M**2 / p**4
    return rhs - lhs, rhs


_POSITIVE_M = {"M>=1": lambda n, M, p, T: M >= 1}
_OVERPARAM = {"p>n+M": lambda n, M, p, T: p > n + M}

LEMMAS: List[Lemma] = [
    Lemma("lower_prod", {**_POSITIVE_M, **_OVERPARAM},
          lambda n, M, T: n + M, _prod_indices, ("t", "l"), _lower_prod),
    Lemma("upper_prod", {**_POSITIVE_M, **_OVERPARAM, "p>TM": lambda n, M, p, T: p > T * M},
          lambda n, M, T: max(n + M, T * M), _prod_indices, ("t", "l"), _upper_prod),
    Lemma("power", {**_POSITIVE_M, **_OVERPARAM},
          lambda n, M, T: n + M, _power_indices, ("t",), _power),
    Lemma("power_tight", {**_POSITIVE_M, **_OVERPARAM},
          lambda n, M, T: n + M, _power_indices, ("t",), _power_tight),
    Lemma("prod_ratio",
          {"M>=2": lambda n, M, p, T: M >= 2, **_OVERPARAM,
           "p>T(n+M)M/(M-1)+n+M": lambda n, M, p, T: M >= 2 and p > T * (n + M) * M / (M - 1) + n + M},
          lambda n, M, T: int(T * (n + M) * M / max(M - 1, 1)) + n + M, _prod_indices, ("t", "l"), _prod_ratio),
    Lemma("forgetting_lower",
          {**_POSITIVE_M, **_OVERPARAM, "p>2T^3(n+M)^2": lambda n, M, p, T: p > 2 * T**3 * (n + M) ** 2},
          lambda n, M, T: 2 * T**3 * (n + M) ** 2, _pair_indices, ("t", "i"), _forgetting_lower),
    Lemma("forgetting_upper", {**_POSITIVE_M, "p>(n+M)T": lambda n, M, p, T: p > (n + M) * T},
          lambda n, M, T: (n + M) * T, _pair_indices, ("t", "i"), _forgetting_upper),
    Lemma("forgetting_upper_tight", {**_POSITIVE_M, "p>(n+M)T": lambda n, M, p, T: p > (n + M) * T},
          lambda n, M, T: (n + M) * T, _pair_indices, ("t", "i"), _forgetting_upper_tight),
]


def _p_candidates(threshold: int) -> List[int]:
    return sorted({threshold + 1, 2 * threshold, 10 * threshold, *FIXED_P})


def check_scalar_lemmas(
    T_values: Sequence[int] = DEFAULT_T,
    n_values: Sequence[int] = DEFAULT_N,
    M_values: Sequence[int] = DEFAULT_M,
    p_values: Optional[Sequence[int]] = None,
    lemmas: Optional[Sequence[str]] = None,
) -> CheckReport:
    """Evaluate every scalar inequality over the grid.

    Without ``p_values`` each lemma is checked just above, at twice and at ten
    times its own dimension threshold, plus a few fixed dimensions.
    """
    selected = [lm for lm in LEMMAS if lemmas is None or lm.name in lemmas]
    report = CheckReport(
        name="scalar_lemmas",
        grid_description=f"T in {list(T_values)}, n in {list(n_values)}, M in {list(M_values)}, "
                         f"p {'in ' + str(list(p_values)) if p_values else 'at lemma thresholds and ' + str(list(FIXED_P))}",
    )
    for lemma in selected:
        for T, n, M in product(T_values, n_values, M_values):
            ps = list(p_values) if p_values else _p_candidates(lemma.threshold(n, M, T))
            for p in ps:
                flags = {key: bool(pred(n, M, p, T)) for key, pred in lemma.preconditions.items()}
                violated = [key for key, ok in flags.items() if not ok]
                for idx in lemma.indices(T):
                    point = {"n": n, "M": M, "p": p, "T": T, **dict(zip(lemma.index_names, idx))}
                    if violated:
                        report.rows.append(CheckRow(
                            check=f"lemma/{lemma.name}", point=point, status="skipped",
                            preconditions=flags, skipped_reason=", ".join(violated),
                        ))
                        continue
                    margin, rhs = lemma.evaluate(n, M, p, T, *idx)
                    status, rel = classify(margin, rhs)
                    report.rows.append(CheckRow(
                        check=f"lemma/{lemma.name}", point=point, status=status,
                        margin=rel, preconditions=flags,
                    ))
    logger.info(f"Scalar lemma checks: {report.counts()}")
    return report


# ─────────────────────────────────────────────
# Theorems
# ─────────────────────────────────────────────

TWO_TASK_CONFIGS = ((500, 24, 24), (200, 10, 20), (1000, 50, 10))
LARGE_P_CONFIG = (4, 10, 4)
ORDERING_CONFIGS = ((2, 500, 24, 24), (3, 500, 24, 24), (5, 500, 24, 24), (3, 11665, 2, 4), (4, 12289, 2, 2))


def _boundary_row(check: str, point: Dict[str, float], diff: float, scale: float) -> CheckRow:
    ok = abs(diff) < 1e-10 * scale
    return CheckRow(check=check, point=point, status="pass" if ok else "fail",
                    margin=1e-10 * scale - abs(diff), values={"difference": diff})


def check_two_task(p: int, n: int, M: int, grid_size: int = 10) -> List[CheckRow]:
    """Predicate with (ξ₁, ξ₂, μ₁, μ₂) against the sign of the direct difference."""
    cfg = ProblemConfig(p=p, n=n, M=M, T=2)
    consts = two_task_constants(cfg)
    norms = (1.0, 1.0)
    rows: List[CheckRow] = []
    gap_max = 3.0 * max(consts.forgetting_threshold, consts.generalization_threshold) * sum(norms)
    sigma_max = 2.0 * math.sqrt(max(consts.forgetting_sigma_sq_threshold, consts.generalization_sigma_sq_threshold) * sum(norms))

    for gap_sq, sigma in product(np.linspace(0.0, gap_max, grid_size), np.linspace(0.0, sigma_max, grid_size)):
        gap_sq, sigma = float(gap_sq), float(sigma)
        metrics = two_task_metrics(consts, norms, gap_sq, sigma)
        diff_F = metrics["concurrent"][0] - metrics["sequential"][0]
        diff_G = metrics["concurrent"][1] - metrics["sequential"][1]
        point = {"p": p, "n": n, "M": M, "gap_sq": gap_sq, "sigma": sigma}
        for metric, diff, predicted in (
            ("F", diff_F, consts.forgetting_conc_worse(norms[0], gap_sq, sigma)),
            ("G", diff_G, consts.generalization_conc_worse(norms[0], norms[1], gap_sq, sigma)),
        ):
            scale = max(abs(metrics["concurrent"][0 if metric == "F" else 1]), 1e-300)
            if abs(diff) <= SLACK * scale:
                status = "marginal"
            else:
                status = "pass" if (diff > 0) == predicted else "fail"
            rows.append(CheckRow(check=f"two_task/{metric}_predicate", point=point, status=status,
                                 margin=abs(diff) / scale, values={"difference": diff}))

    # noiseless roots
    gap_F = consts.forgetting_threshold * norms[0]
    m = two_task_metrics(consts, norms, gap_F, 0.0)
    rows.append(_boundary_row("two_task/F_root", {"p": p, "n": n, "M": M, "gap_sq": gap_F},
                              m["concurrent"][0] - m["sequential"][0], norms[0]))
    gap_G = consts.generalization_threshold * sum(norms)
    m = two_task_metrics(consts, norms, gap_G, 0.0)
    rows.append(_boundary_row("two_task/G_root", {"p": p, "n": n, "M": M, "gap_sq": gap_G},
                              m["concurrent"][1] - m["sequential"][1], sum(norms)))
    return rows


def check_large_p(T: int, n: int, M: int, seed: int = 7) -> List[CheckRow]:
    """Strict concurrent-over-sequential excess at the large-p schedule, both theory paths."""
    p = large_p_schedule(T, n, M)
    cfg = ProblemConfig(p=p, n=n, M=M, T=T)
    gt = generate_ground_truth("orthonormal", T, p, seed=seed)
    conc, seq = StrategySpec(kind="concurrent"), StrategySpec(kind="sequential")
    point = {"T": T, "n": n, "M": M, "p": p}

    def by_recursion(spec: StrategySpec) -> Tuple[float, float]:
        prediction = predict_recursive(cfg, gt, spec, allow_uneven=True)
        return prediction.F, prediction.G

    def by_coefficients(spec: StrategySpec) -> Tuple[float, float]:
        return assemble_from_coefficients(predict_coefficients(cfg, spec, allow_uneven=True), gt, cfg.sigma)

    rows = []
    for path, evaluate in (("recursion", by_recursion), ("coefficients", by_coefficients)):
        (F_c, G_c), (F_s, G_s) = evaluate(conc), evaluate(seq)
        for metric, diff in (("F", F_c - F_s), ("G", G_c - G_s)):
            rows.append(CheckRow(
                check=f"large_p/{metric}_{path}", point=point,
                status="pass" if diff > 0 else "fail", margin=diff,
                values={"concurrent_minus_sequential": diff},
            ))
    return rows


ORDERING_INDEX = {"c_i": ("i",), "c_ijk": ("i", "j", "k"), "d_0T": ("T",), "d_ijkT": ("i", "j", "k", "T")}


def _ordering_required(T: int, flags: Dict[str, bool], family: str) -> List[str]:
    if family == "d_0T":
        keys = ["p>n+M+1"]
    elif T == 2:
        keys = ["p>n+M+1", "M>=2"]
    else:
        keys = list(flags)
    return [key for key in keys if not flags[key]]


def check_orderings(T: int, p: int, n: int, M: int, allow_uneven: bool = True) -> List[CheckRow]:
    """One row per family for the entries that hold, one row per violated entry.

    A violated entry is `skipped` when the configuration is below the family's
    dimension thresholds and `fail` otherwise.
    """
    report = coefficient_orderings(ProblemConfig(p=p, n=n, M=M, T=T), allow_uneven=allow_uneven)
    point = {"T": T, "p": p, "n": n, "M": M}
    rows = []
    for family in ("c_i", "c_ijk", "d_0T", "d_ijkT"):
        entries = [e for e in report.entries if e.family == family]
        held = [e for e in entries if e.holds]
        violated = [e for e in entries if not e.holds]
        if held:
            rows.append(CheckRow(
                check=f"ordering/{family}", point=point, status="pass",
                margin=min(e.margin for e in held),
                values={"entries": float(len(entries)), "holding": float(len(held))},
                preconditions=report.preconditions,
            ))
        unmet = _ordering_required(T, report.preconditions, family)
        for e in violated:
            index = ",".join(str(v) for v in e.index)
            rows.append(CheckRow(
                check=f"ordering/{family}[{index}]",
                point={**point, **dict(zip(ORDERING_INDEX[family], e.index))},
                status="skipped" if unmet else "fail",
                margin=e.margin,
                values={"concurrent": e.concurrent, "sequential": e.sequential},
                preconditions=report.preconditions,
                skipped_reason=", ".join(unmet) or None,
            ))
        if violated:
            logger.info(f"Ordering {family} at T={T}, p={p}: {len(violated)} of {len(entries)} entries violated")
    return rows


def check_theorems(
    two_task_configs: Sequence[Tuple[int, int, int]] = TWO_TASK_CONFIGS,
    large_p_configs: Sequence[Tuple[int, int, int]] = (LARGE_P_CONFIG,),
    ordering_configs: Sequence[Tuple[int, int, int, int]] = ORDERING_CONFIGS,
) -> CheckReport:
    report = CheckReport(
        name="theorems",
        grid_description=f"two-task {list(two_task_configs)}, large-p {list(large_p_configs)}, "
                         f"orderings {list(ordering_configs)}",
    )
    for p, n, M in two_task_configs:
        report.rows.extend(check_two_task(p, n, M))
    for T, n, M in large_p_configs:
        report.rows.extend(check_large_p(T, n, M))
    for T, p, n, M in ordering_configs:
        report.rows.extend(check_orderings(T, p, n, M))
    logger.info(f"Theorem checks: {report.counts()}")
    return report


def render_text(report: CheckReport) -> str:
    counts = report.counts()
    lines = [
        f"{report.name}: {'PASS' if report.passed else 'FAIL'}",
        f"  grid: {report.grid_description}",
        "  " + ", ".join(f"{key}={value}" for key, value in counts.items()),
    ]
    if report.worst_margin is not None:
        lines.append(f"  worst margin: {report.worst_margin:.6g}")
    for label, rows in (("failed", report.failures), ("marginal", report.marginal)):
        for row in rows[:50]:
            lines.append(f"  {label}: {row.check} at {row.point}")
        if len(rows) > 50:
            lines.append(f"  ... {len(rows) - 50} more {label} points")
    return "\n".join(lines)
