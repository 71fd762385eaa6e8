"""Explicit two- and three-task forms and the large-p schedule.

Shorthand used below (σ² factored out of every noise term):
    a = n/p, q = M/p, r0 = 1 − a, r = 1 − a − q, D = p − n − M − 1
"""
import logging
from typing import Dict, Tuple

from app.exceptions import ConfigInvalid, DenominatorDomain, NonIntegerAllocation, NonzeroSigma
from app.models import GroundTruthSet, TwoTaskConstants
from app.schemas import ProblemConfig

logger = logging.getLogger(__name__)

STRATEGIES = ("concurrent", "sequential")


def _unit_noise(p: int, a: int) -> float:
    return a / (p - a - 1) if a else 0.0


def _require_task_count(cfg: ProblemConfig, gt: GroundTruthSet, T: int) -> None:
    if cfg.T != T or gt.T != T:
        raise ConfigInvalid("problem.T", f"this closed form covers exactly {T} tasks (config T={cfg.T}, ground truths T={gt.T})")


def _require_denominator(cfg: ProblemConfig) -> None:
    if cfg.p - cfg.n - cfg.M - 1 <= 0:
        raise DenominatorDomain(f"closed forms need p > n + M + 1 (p={cfg.p}, n+M={cfg.n + cfg.M})")


# ── Two tasks ─────────────────────────────────────────────────────────────────

def two_task_constants(cfg: ProblemConfig) -> TwoTaskConstants:
    _require_denominator(cfg)
    p, n, M = cfg.p, cfg.n, cfg.M
    a, q = n / p, M / p
    r0, r = 1 - a, 1 - a - q
    D = p - n - M - 1
    lam_n, lam_M, lam_nM = _unit_noise(p, n), _unit_noise(p, M), _unit_noise(p, n + M)
    pooled = n * M / (p * D)

    c_hat1 = {"concurrent": r0 * (-a - q), "sequential": r0 * (-a - q + a * q)}
    c_hat2 = {"concurrent": a + pooled, "sequential": (1 - q) * a}
    d_hat1 = {"concurrent": 0.5 * r * r0, "sequential": 0.5 * (1 - q) * r0 * r0}
    d_hat2 = {
        "concurrent": 0.5 * ((2 * n + M) / p - n * (n + M) / p**2 + 2 * pooled),
        "sequential": 0.5 * ((1 - q) * a * (2 - a) + q),
    }
    noise_F = {
        "concurrent": lam_nM + (r - 1) * lam_n,
        "sequential": (1 - a - 2 * q + a * q) * lam_n + lam_M,
    }
    noise_G = {
        "concurrent": r * lam_n + lam_nM,
        "sequential": (1 - q) * (2 - a) * lam_n + lam_M,
    }

    if M == 0:
        # Both strategies coincide and every difference vanishes.
        inf = float("inf")
        return TwoTaskConstants(
            xi1=inf, xi2=inf, mu1=inf, mu2=inf,
            c_hat1=c_hat1, c_hat2=c_hat2, d_hat1=d_hat1, d_hat2=d_hat2,
            noise_hat_F=noise_F, noise_hat_G=noise_G,
            forgetting_threshold=0.0, generalization_threshold=0.0,
            forgetting_sigma_sq_threshold=0.0, generalization_sigma_sq_threshold=0.0,
        )

    den = r0 * n * M / p**2
    noise_gap = (n + M) / D - (1 - q + a * q) * n / (p - n - 1) - M / (p - M - 1)
    xi1 = (n * M / p) * (1 / D + 1 / p) / den
    xi2 = noise_gap / den
    mu1 = (n * M / p) * (2 / D + 1 / p - n / p**2) / den
    mu2 = 2 * noise_gap / den
    return TwoTaskConstants(
        xi1=xi1, xi2=xi2, mu1=mu1, mu2=mu2,
        c_hat1=c_hat1, c_hat2=c_hat2, d_hat1=d_hat1, d_hat2=d_hat2,
        noise_hat_F=noise_F, noise_hat_G=noise_G,
        forgetting_threshold=(p - n) * D / (p * p + p * D),
        generalization_threshold=(p - n) * D / (2 * p * p + (p - n) * D),
        forgetting_sigma_sq_threshold=1 / xi2,
        generalization_sigma_sq_threshold=1 / mu2,
    )


def two_task_metrics(consts: TwoTaskConstants, norms_sq, gap_sq: float, sigma: float) -> Dict[str, Tuple[float, float]]:
    """(F_2, G_2) per strategy from norms ‖w*_1‖², ‖w*_2‖² and the gap ‖w*_1 − w*_2‖²."""
    n1, n2 = float(norms_sq[0]), float(norms_sq[1])
    s2 = sigma * sigma
    out = {}
    for kind in STRATEGIES:
        F = consts.c_hat1[kind] * n1 + consts.c_hat2[kind] * gap_sq + consts.noise_hat_F[kind] * s2
        G = consts.d_hat1[kind] * (n1 + n2) + consts.d_hat2[kind] * gap_sq + consts.noise_hat_G[kind] * s2
        out[kind] = (F, G)
    return out


def two_task(cfg: ProblemConfig, gt2: GroundTruthSet) -> Tuple[TwoTaskConstants, Dict[str, Tuple[float, float]]]:
    _require_task_count(cfg, gt2, 2)
    consts = two_task_constants(cfg)
    return consts, two_task_metrics(consts, gt2.norms_sq, gt2.gap(1, 2), cfg.sigma)


def forgetting_crossover(cfg: ProblemConfig, norm1_sq: float) -> float:
    """Gap ‖w*_1 − w*_2‖² at which noiseless two-task forgetting of both strategies is equal."""
    return two_task_constants(cfg).forgetting_threshold * norm1_sq


def generalization_crossover(cfg: ProblemConfig, norm1_sq: float, norm2_sq: float) -> float:
    return two_task_constants(cfg).generalization_threshold * (norm1_sq + norm2_sq)


def noise_crossovers(cfg: ProblemConfig, norm1_sq: float, norm2_sq: float) -> Tuple[float, float]:
    """σ² at which the strategies tie with zero task gap, for forgetting and generalization."""
    consts = two_task_constants(cfg)
    return (
        consts.forgetting_sigma_sq_threshold * norm1_sq,
        consts.generalization_sigma_sq_threshold * (norm1_sq + norm2_sq),
    )


# ── Three tasks (noiseless) ───────────────────────────────────────────────────

def three_task_coefficients(cfg: ProblemConfig) -> Dict[str, Dict[str, Dict[str, float]]]:
    """Per strategy, the F_3 and G_3 weights on norms and on the gaps g12, g13, g23.

    F keys: N1, N2 (weights of ‖w*_1‖², ‖w*_2‖²). G key N weights every norm.
    """
    if cfg.sigma != 0:
        raise NonzeroSigma(f"three-task closed forms are noiseless (sigma={cfg.sigma})")
    if cfg.M % 2:
        raise NonIntegerAllocation(f"three-task closed forms need even M (got M={cfg.M})")
    _require_denominator(cfg)

    p, n, M = cfg.p, cfg.n, cfg.M
    a, q = n / p, M / p
    r0, r = 1 - a, 1 - a - q
    x = a + q
    D = p - n - M - 1
    pooled = n * M / (p * D)
    chunk_pair = M * M / (p * D)
    h = M / (2 * p)
    u = 1 - h

    concurrent = {
        "F": {
            "N1": 0.5 * (r * r - 1) * r0,
            "N2": 0.5 * (r - 1) * r * r0,
            "g12": 0.5 * ((1 - 2 * x) * pooled + chunk_pair / 2 + x * r0 * r),
            "g13": 0.5 * (a + pooled),
            "g23": 0.5 * (a + pooled),
        },
        "G": {
            "N": r * r * r0 / 3,
            "g12": (3 * r * pooled + 0.75 * chunk_pair + x * r0 * (2 - x)) / 3,
            "g13": (a * (2 - 2 * x + x * x) + q * (1 - x) + h + 1.5 * pooled) / 3,
            "g23": (a * (2 - x) + h + 1.5 * pooled) / 3,
        },
    }
    decay = u * u * r0**3 * (1 - q)
    sequential = {
        "F": {
            "N1": 0.5 * (decay - r0),
            "N2": 0.5 * (decay - r0 * r0 * (1 - q)),
            "g12": 0.5 * (r0 * (1 - q) * a * (u * u * (2 - a) - 1) + u * u * r0 * q - h * h),
            "g13": 0.5 * u * u * a,
            "g23": 0.5 * u * u * a,
        },
        "G": {
            "N": decay / 3,
            "g12": (r0 * u * u * ((1 - q) * (2 - a) * a + q) + q - h * h) / 3,
            "g13": (u * u * a + u * u * r0 * q + r0 * r0 * (1 - q) * u * u * a + u * h) / 3,
            "g23": (u * u * a * ((1 - q) * r0 + 1) + h) / 3,
        },
    }
    return {"concurrent": concurrent, "sequential": sequential}


def three_task(cfg: ProblemConfig, gt3: GroundTruthSet) -> Dict[str, Tuple[float, float]]:
    _require_task_count(cfg, gt3, 3)
    coeffs = three_task_coefficients(cfg)
    norms = gt3.norms_sq
    gaps = {"g12": gt3.gap(1, 2), "g13": gt3.gap(1, 3), "g23": gt3.gap(2, 3)}
    out = {}
    for kind, table in coeffs.items():
        F = table["F"]["N1"] * norms[0] + table["F"]["N2"] * norms[1]
        F += sum(table["F"][key] * g for key, g in gaps.items())
        G = table["G"]["N"] * float(norms.sum())
        G += sum(table["G"][key] * g for key, g in gaps.items())
        out[kind] = (float(F), float(G))
    return out


# ── Large-p regime ────────────────────────────────────────────────────────────

def large_p_schedule(T: int, n: int, M: int) -> int:
    """Concrete dimension for the large-p ordering: 2·T⁴·(n+M)²·max(M, 1)."""
    return 2 * T**4 * (n + M) ** 2 * max(M, 1)
