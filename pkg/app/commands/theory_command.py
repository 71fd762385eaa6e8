import logging
import math
import os
from typing import Dict, List, Tuple

from app.commands.common import finish_output, prepare_output, table_path
from app.config import config_snapshot
from app.models import CoefficientTable, GroundTruthSet
from app.schemas import RunConfig
from app.services.closed_forms_service import (
    forgetting_crossover,
    generalization_crossover,
    noise_crossovers,
    three_task,
    two_task,
)
from app.services.coefficient_service import assemble_from_coefficients, coefficient_orderings, predict_coefficients
from app.services.export_service import coefficient_payload, theory_frame, write_json, write_table
from app.services.problem_service import ground_truth_from_spec
from app.services.theory_service import hybrid_partitions, predict_recursive

logger = logging.getLogger(__name__)

AGREEMENT_RTOL = 1e-10


def _relative_gap(a: float, b: float) -> float:
    if math.isnan(a) and math.isnan(b):
        return 0.0
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def _closed_forms(cfg: RunConfig, gt: GroundTruthSet) -> Dict[str, object]:
    pb = cfg.problem
    out: Dict[str, object] = {}
    if not pb.closed_form_ready:
        return out
    norms = gt.norms_sq
    if pb.T == 2:
        consts, values = two_task(pb, gt)
        sigma_sq_F, sigma_sq_G = noise_crossovers(pb, float(norms[0]), float(norms[1]))
        out["two_task"] = {
            "constants": consts.to_dict(),
            "values": {kind: {"F": F, "G": G} for kind, (F, G) in values.items()},
            "gap_crossover": {
                "F": forgetting_crossover(pb, float(norms[0])),
                "G": generalization_crossover(pb, float(norms[0]), float(norms[1])),
            },
            "sigma_sq_crossover": {"F": sigma_sq_F, "G": sigma_sq_G},
        }
    if pb.T == 3 and pb.sigma == 0 and pb.M % 2 == 0:
        out["three_task"] = {kind: {"F": F, "G": G} for kind, (F, G) in three_task(pb, gt).items()}
    return out


def compute(cfg: RunConfig) -> Tuple[Dict[str, Tuple[float, float]], List[CoefficientTable], dict]:
    """Predictions from the stage recursion, cross-checked against the coefficient path."""
    pb = cfg.problem
    gt = ground_truth_from_spec(cfg.ground_truth, pb.T, pb.p)
    predictions: Dict[str, Tuple[float, float]] = {}
    tables: List[CoefficientTable] = []
    details: Dict[str, object] = {"strategies": {}}

    for spec in cfg.strategy_specs():
        partitions = hybrid_partitions(spec.hybrid_partition, pb.T, gt.gap_matrix) if spec.kind == "hybrid" else None
        pred = predict_recursive(pb, gt, spec, partitions, cfg.run.allow_uneven)
        table = predict_coefficients(pb, spec, partitions, cfg.run.allow_uneven)
        F_c, G_c = assemble_from_coefficients(table, gt, pb.sigma)
        gap = max(_relative_gap(pred.F, F_c), _relative_gap(pred.G, G_c))
        if gap > AGREEMENT_RTOL:
            logger.warning(f"{spec.label}: recursion and coefficient paths differ by {gap:.3g} (relative)")
        predictions[spec.label] = (pred.F, pred.G)
        tables.append(table)
        details["strategies"][spec.label] = {
            "F": pred.F,
            "G": pred.G,
            "F_coefficients": F_c,
            "G_coefficients": G_c,
            "error_table": pred.error_table,
            "partitions": {str(t): {"sim": list(s), "dis": list(d)} for t, (s, d) in (partitions or {}).items()},
        }

    details.update(_closed_forms(cfg, gt))
    if {"concurrent", "sequential"} <= set(predictions):
        details["orderings"] = coefficient_orderings(pb, allow_uneven=cfg.run.allow_uneven).model_dump()
    return predictions, tables, details


def render_predictions(predictions: Dict[str, Tuple[float, float]]) -> str:
    width = max(len("strategy"), *(len(label) for label in predictions))
    lines = [f"{'strategy':<{width}}  {'F_T':>22}  {'G_T':>22}"]
    for label, (F, G) in predictions.items():
        lines.append(f"{label:<{width}}  {F:>22.17g}  {G:>22.17g}")
    return "\n".join(lines)


def run(cfg: RunConfig) -> List[str]:
    out_dir = prepare_output(cfg, "theory")
    predictions, tables, details = compute(cfg)
    print(render_predictions(predictions))

    details["config"] = config_snapshot(cfg)
    files = [
        write_table(theory_frame(predictions), table_path(out_dir, "theory", cfg.run.format), cfg.run.format),
        write_json(details, os.path.join(out_dir, "theory_details.json")),
        write_json(coefficient_payload(tables), os.path.join(out_dir, "coefficients.json")),
    ]
    return finish_output(cfg, "theory", out_dir, files)
