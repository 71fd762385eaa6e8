"""Closed-form coefficient tables for expected forgetting and generalization.

Task steps are indexed backwards from the evaluation step t: l = 0 is step t,
l = t − 1 is step 1. With equal memory chunks
    r_a       = 1 − (n + a)/p
    B_{l,t}   = M/((t − l − 1)p)        0 when l = t − 1 (no memory at step 1)
    H_{l,t}   = B_{l,t}/(p − n − M − 1)
    K_{l,t}   = B_{l,t}/(p − n − S_sim − 1)   S_sim the pooled similar memory
    Λ_a       = a/(p − a − 1)           σ = 1
    Δ_t(a)    = Π_{l<a} (1 − B_{l,t})^{t−l−1} r_0
    Γ_t(a)    = Π_{l<a} (1 − B_{l,t})^{|dis|} r_{S_sim}
Concurrent entries are sums of r_M^l-weighted B, H terms, sequential entries
Δ-weighted B terms, hybrid entries Γ-weighted B, K terms. With uneven chunks
B_{l,t} is taken per chunk (remainder to the oldest tasks).
"""
import logging
import math
from itertools import combinations
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.exceptions import ConfigInvalid, DenominatorDomain, NonIntegerAllocation, ShapeMismatch
from app.models import CoefficientTable, GroundTruthSet, Partition
from app.schemas import OrderingEntry, OrderingReport, ProblemConfig, StrategySpec
from app.services.problem_service import require_overparameterized
from app.services.theory_service import all_dissimilar, all_similar, metrics_from_table
from app.services.trainer_service import validate_partition

logger = logging.getLogger(__name__)

EQUAL_RTOL = 1e-12


def r_a(cfg: ProblemConfig, a: float) -> float:
    return 1.0 - (cfg.n + a) / cfg.p


def lam(p: int, a: float) -> float:
    """Λ_a at σ = 1; NaN where the inverse-Wishart moment does not exist."""
    if a == 0:
        return 0.0
    denom = p - a - 1
    return a / denom if denom > 0 else float("nan")


class ClosedForm:
    """Symbols r_a, B, H, K, Δ, Γ and Λ for one configuration."""

    def __init__(
        self,
        cfg: ProblemConfig,
        partitions: Optional[Dict[int, Partition]] = None,
        allow_uneven: bool = False,
    ):
        self.cfg = cfg
        self.p, self.n, self.M = cfg.p, cfg.n, cfg.M
        self.r_0 = r_a(cfg, 0)
        self.r_M = r_a(cfg, cfg.M)
        self.partitions = partitions
        for s in range(2, cfg.T + 1):
            if cfg.M % (s - 1):
                if not allow_uneven:
                    raise NonIntegerAllocation(
                        f"M={cfg.M} is not divisible by t-1={s - 1}; closed forms assume equal memory chunks"
                    )
                logger.warning(f"Task {s}: M={cfg.M} splits unevenly over {s - 1} chunks, using per-chunk B")

    # ── memory symbols ──

    def chunk(self, l: int, t: int, h: int) -> int:
        s = t - l
        if s == 1:
            return 0
        base, remainder = divmod(self.M, s - 1)
        return base + 1 if h <= remainder else base

    def B(self, l: int, t: int, h: int) -> float:
        if l == t - 1:
            return 0.0
        return self.chunk(l, t, h) / self.p

    def H(self, l: int, t: int, h: int) -> float:
        return self._pooled(self.B(l, t, h), self.n + self.M, t - l)

    def K(self, l: int, t: int, h: int) -> float:
        return self._pooled(self.B(l, t, h), self.n + self.sim_size(l, t), t - l)

    def _pooled(self, b: float, S: int, s: int) -> float:
        if b == 0.0:
            return 0.0
        denom = self.p - S - 1
        if denom <= 0:
            raise DenominatorDomain(f"task {s}: joint stage of {S} samples needs p > S + 1 (p={self.p})")
        return b / denom

    def lam(self, a: float) -> float:
        return lam(self.p, a)

    # ── hybrid partition ──

    def split(self, l: int, t: int) -> Partition:
        s = t - l
        if s == 1:
            return (), ()
        if s not in self.partitions:
            raise ConfigInvalid("partition", f"no partition given for task {s}")
        return validate_partition(*self.partitions[s], s)

    def sim_size(self, l: int, t: int) -> int:
        return sum(self.chunk(l, t, h) for h in self.split(l, t)[0])

    def keep_dis(self, l: int, t: int, after: int = 0) -> float:
        """Π (1 − B_{l,t}) over dissimilar chunks revisited after rank `after` (f_t)."""
        dis = self.split(l, t)[1]
        return math.prod(1.0 - self.B(l, t, h) for h in dis[after:])

    def rank(self, l: int, t: int, h: int) -> int:
        return self.split(l, t)[1].index(h) + 1

    # ── decays ──

    def keep_seq(self, l: int, t: int, after: int = 0) -> float:
        """Π (1 − B_{l,t}) over chunks after task `after`: (1 − B)^{t−l−1−after} when even."""
        return math.prod(1.0 - self.B(l, t, h) for h in range(after + 1, t - l))

    def Delta(self, t: int, a: int) -> float:
        return math.prod(self.keep_seq(l, t) * self.r_0 for l in range(a))

    def Gamma(self, t: int, a: int) -> float:
        return math.prod(self.keep_dis(l, t) * r_a(self.cfg, self.sim_size(l, t)) for l in range(a))


# ─────────────────────────────────────────────
# Per-strategy closed forms
# ─────────────────────────────────────────────

def _concurrent_entry(cf: ClosedForm, i: int, j: int, k: int, t: int) -> float:
    n, p, r_M = cf.n, cf.p, cf.r_M
    terms = []
    if i in (j, k):
        u = k if j == i else j
        if u <= t:
            # u as current data, then as memory chunk at every later step
            terms.append((1.0 - cf.r_0) * r_M ** (t - u))
            terms.extend(r_M ** l * cf.B(l, t, u) for l in range(t - u))
    if k <= t:
        terms.append(r_M ** (t - k) * n * cf.H(t - k, t, j))
        terms.extend(r_M ** l * p * cf.B(l, t, j) * cf.H(l, t, k) for l in range(t - k))
    return math.fsum(terms)


def _concurrent_noise(cf: ClosedForm, t: int) -> float:
    return math.fsum([cf.r_M ** (t - 1) * cf.lam(cf.n)]
                     + [cf.r_M ** l * cf.lam(cf.n + cf.M) for l in range(t - 1)])


def _sequential_entry(cf: ClosedForm, i: int, j: int, k: int, t: int) -> float:
    if i not in (j, k):
        return 0.0
    u = k if j == i else j
    if u > t:
        return 0.0
    terms = [(1.0 - cf.r_0) * cf.keep_seq(t - u, t) * cf.Delta(t, t - u)]
    terms.extend(cf.Delta(t, l) * cf.keep_seq(l, t, after=u) * cf.B(l, t, u) for l in range(t - u))
    return math.fsum(terms)


def _sequential_noise(cf: ClosedForm, t: int) -> float:
    terms = []
    for l in range(t):
        delta = cf.Delta(t, l)
        terms.append(delta * cf.keep_seq(l, t) * cf.lam(cf.n))
        terms.extend(delta * cf.keep_seq(l, t, after=h) * cf.lam(cf.chunk(l, t, h)) for h in range(1, t - l))
    return math.fsum(terms)


def _hybrid_memory_weight(cf: ClosedForm, l: int, t: int, h: int) -> float:
    sim, dis = cf.split(l, t)
    if h in sim:
        return cf.keep_dis(l, t) * cf.B(l, t, h)
    if h in dis:
        return cf.keep_dis(l, t, after=cf.rank(l, t, h)) * cf.B(l, t, h)
    return 0.0


def _hybrid_entry(cf: ClosedForm, i: int, j: int, k: int, t: int) -> float:
    n, p = cf.n, cf.p
    terms = []
    if i in (j, k):
        u = k if j == i else j
        if u <= t:
            terms.append((1.0 - cf.r_0) * cf.keep_dis(t - u, t) * cf.Gamma(t, t - u))
            terms.extend(cf.Gamma(t, l) * _hybrid_memory_weight(cf, l, t, u) for l in range(t - u))
    if k <= t:
        if j in cf.split(t - k, t)[0]:
            terms.append(cf.Gamma(t, t - k) * cf.keep_dis(t - k, t) * n * cf.K(t - k, t, j))
        for l in range(t - k):
            sim = cf.split(l, t)[0]
            if j in sim and k in sim:
                terms.append(cf.Gamma(t, l) * cf.keep_dis(l, t) * p * cf.B(l, t, j) * cf.K(l, t, k))
    return math.fsum(terms)


def _hybrid_noise(cf: ClosedForm, t: int) -> float:
    terms = []
    for l in range(t):
        gamma = cf.Gamma(t, l)
        terms.append(gamma * cf.keep_dis(l, t) * cf.lam(cf.n + cf.sim_size(l, t)))
        for f, h in enumerate(cf.split(l, t)[1], start=1):
            terms.append(gamma * cf.keep_dis(l, t, after=f) * cf.lam(cf.chunk(l, t, h)))
    return math.fsum(terms)


def _concurrent_d0(cf: ClosedForm, t: int) -> float:
    return cf.r_0 * cf.r_M ** (t - 1)


def _sequential_d0(cf: ClosedForm, t: int) -> float:
    return cf.r_0 * cf.Delta(t, t - 1)


def _hybrid_d0(cf: ClosedForm, t: int) -> float:
    return cf.r_0 * cf.Gamma(t, t - 1)


_CLOSED_FORMS = {
    "concurrent": (_concurrent_d0, _concurrent_entry, _concurrent_noise),
    "sequential": (_sequential_d0, _sequential_entry, _sequential_noise),
    "hybrid": (_hybrid_d0, _hybrid_entry, _hybrid_noise),
}


def predict_coefficients(
    cfg: ProblemConfig,
    strategy: StrategySpec,
    partitions: Optional[Dict[int, Partition]] = None,
    allow_uneven: bool = False,
) -> CoefficientTable:
    require_overparameterized(cfg)
    if strategy.kind == "sequential" and strategy.sequential_order != "oldest_first":
        raise ConfigInvalid(
            "strategy.sequential_order",
            "closed-form predictions exist only for the oldest-first revisit order",
        )
    if strategy.kind == "hybrid" and partitions is None:
        raise ConfigInvalid("partition", "hybrid predictions need a concrete partition for every task")

    cf = ClosedForm(cfg, partitions, allow_uneven)
    d0_t, entry, noise = _CLOSED_FORMS[strategy.kind]
    T = cfg.T
    d0 = np.array([d0_t(cf, t) for t in range(1, T + 1)])
    noise_unit = np.array([noise(cf, t) for t in range(1, T + 1)])

    d: Dict[Tuple[int, int, int, int], float] = {}
    for t in range(1, T + 1):
        for i in range(1, T + 1):
            for j, k in combinations(range(1, T + 1), 2):
                value = entry(cf, i, j, k, t)
                if value != 0.0:
                    d[(i, j, k, t)] = value
    return CoefficientTable(strategy=strategy.label, T=T, d0=d0, d=d, noise_unit=noise_unit,
                            helpers=_helpers(cf, strategy.kind))


def _helpers(cf: ClosedForm, kind: str) -> dict:
    T = cf.cfg.T
    steps = [(l, T) for l in range(T - 1)]
    helpers = {
        "r_0": cf.r_0,
        "r_M": cf.r_M,
        "B": {f"{l},{t},{h}": cf.B(l, t, h) for l, t in steps for h in range(1, t - l)},
        "Lambda": {str(a): cf.lam(a) for a in sorted({cf.n, cf.n + cf.M})},
    }
    if kind == "concurrent":
        helpers["H"] = {f"{l},{t},{h}": cf.H(l, t, h) for l, t in steps for h in range(1, t - l)}
    elif kind == "sequential":
        helpers["Delta"] = {f"{T},{a}": cf.Delta(T, a) for a in range(T)}
    else:
        helpers["K"] = {f"{l},{t},{h}": cf.K(l, t, h) for l, t in steps for h in cf.split(l, t)[0]}
        helpers["Gamma"] = {f"{T},{a}": cf.Gamma(T, a) for a in range(T)}
    return helpers


def expected_errors_from_table(table: CoefficientTable, gt: GroundTruthSet, sigma: float) -> np.ndarray:
    if gt.T != table.T:
        raise ShapeMismatch(f"coefficient table has T={table.T}, ground truths have T={gt.T}")
    if sigma > 0 and np.isnan(table.noise_unit).any():
        raise DenominatorDomain("noise coefficients are undefined for this configuration (p too small)")
    norms = gt.norms_sq
    pairs = list(combinations(range(1, gt.T + 1), 2))
    E = np.empty((gt.T, table.T))
    for t in range(1, table.T + 1):
        for i in range(1, gt.T + 1):
            terms = [table.d0t(t) * norms[i - 1], table.noise(t, sigma)]
            terms.extend(table.dijkt(i, j, k, t) * gt.gap(j, k) for j, k in pairs)
            E[i - 1, t - 1] = math.fsum(terms)
    return E


def assemble_from_coefficients(table: CoefficientTable, gt: GroundTruthSet, sigma: float) -> Tuple[float, float]:
    return metrics_from_table(expected_errors_from_table(table, gt, sigma))


# ─────────────────────────────────────────────
# Concurrent vs sequential orderings
# ─────────────────────────────────────────────

def ordering_preconditions(cfg: ProblemConfig) -> Dict[str, bool]:
    T, n, M, p = cfg.T, cfg.n, cfg.M, cfg.p
    nm = n + M
    return {
        "p>n+M+1": p > nm + 1,
        "M>=2": M >= 2,
        "p>2T^4(n+M)nM": p > 2 * T**4 * nm * n * M,
        "p>T^4(n+M)M": p > T**4 * nm * M,
        "p>3T^4(n+M)nM": p > 3 * T**4 * nm * n * M,
        "p>(T^4+1)(n+M)M": p > (T**4 + 1) * nm * M,
        "p>T^2(n+M)M": p > T**2 * nm * M,
        "p>2T^3(n+M)^2": p > 2 * T**3 * nm**2,
    }


def _entry(family: str, index, conc: float, seq: float, strict_less: bool) -> OrderingEntry:
    scale = max(abs(conc), abs(seq), 1e-300)
    equal = abs(conc - seq) <= EQUAL_RTOL * scale
    if strict_less:
        margin = seq - conc
        holds = margin > 0
    else:
        margin = conc - seq
        holds = margin >= -EQUAL_RTOL * scale
    return OrderingEntry(family=family, index=list(index), concurrent=conc, sequential=seq,
                         margin=margin, holds=holds, equal=equal)


def coefficient_orderings(cfg: ProblemConfig, t: Optional[int] = None, allow_uneven: bool = False) -> OrderingReport:
    """Compare concurrent and sequential coefficients with target task t (default T)."""
    if t is not None and t != cfg.T:
        cfg = cfg.model_copy(update={"T": t})
    T = cfg.T
    conc = predict_coefficients(cfg, StrategySpec(kind="concurrent"), allow_uneven=allow_uneven)
    seq = predict_coefficients(cfg, StrategySpec(kind="sequential"), allow_uneven=allow_uneven)

    entries: List[OrderingEntry] = []
    for i in range(1, T):
        entries.append(_entry("c_i", [i], conc.c_i(i), seq.c_i(i), strict_less=True))
        for j, k in combinations(range(1, T + 1), 2):
            entries.append(_entry("c_ijk", [i, j, k], conc.c_ijk(i, j, k), seq.c_ijk(i, j, k), strict_less=False))
    entries.append(_entry("d_0T", [T], conc.d0t(T), seq.d0t(T), strict_less=True))
    for i in range(1, T + 1):
        for j, k in combinations(range(1, T + 1), 2):
            entries.append(_entry("d_ijkT", [i, j, k, T], conc.dijkt(i, j, k, T), seq.dijkt(i, j, k, T),
                                  strict_less=False))

    report = OrderingReport(T=T, p=cfg.p, n=cfg.n, M=cfg.M, entries=entries,
                            preconditions=ordering_preconditions(cfg))
    if report.violations:
        logger.info(f"Coefficient orderings at T={T}, p={cfg.p}: {len(report.violations)} entries violate the expected relation")
    return report


def hybrid_reduction_tables(cfg: ProblemConfig, allow_uneven: bool = False) -> Dict[str, CoefficientTable]:
    """Hybrid tables for the all-similar and all-dissimilar partitions."""
    hybrid = StrategySpec(kind="hybrid")
    return {
        "all_similar": predict_coefficients(cfg, hybrid, all_similar(cfg.T), allow_uneven),
        "all_dissimilar": predict_coefficients(cfg, hybrid, all_dissimilar(cfg.T), allow_uneven),
    }
