import logging
import os
from typing import Dict, List, Optional, Tuple

from app.commands.common import finish_output, prepare_output, table_path
from app.config import config_snapshot
from app.models import TrialBatch
from app.schemas import RunConfig
from app.services.export_service import (
    error_table_frame,
    simulate_frame,
    write_dataset,
    write_ground_truth,
    write_json,
    write_table,
)
from app.services.montecarlo_service import run_trials, theory_value
from app.services.problem_service import ground_truth_from_spec, trial_streams
from app.services.trainer_service import train

logger = logging.getLogger(__name__)


def run(cfg: RunConfig) -> List[str]:
    pb, settings = cfg.problem, cfg.run
    out_dir = prepare_output(cfg, "simulate")
    gt = ground_truth_from_spec(cfg.ground_truth, pb.T, pb.p)
    redraw = cfg.ground_truth if settings.redraw_geometry else None

    batches: Dict[str, TrialBatch] = {}
    theory: Dict[str, Tuple[Optional[float], Optional[float]]] = {}
    traces = {}
    for spec in cfg.strategy_specs():
        logger.info(f"Simulating {spec.label}: {settings.trials} trials on {settings.workers} worker(s)")
        batch = run_trials(pb, gt, spec, settings.trials, settings.seed, settings.workers, redraw=redraw)
        batches[spec.label] = batch
        theory[spec.label] = (None, None) if redraw else theory_value(pb, gt, spec, batch, settings.allow_uneven)
        # trial 0 as a representative trace; every strategy draws the same current-task data
        trace = train(pb, gt, spec, trial_streams(settings.seed, 0), seeds={"master": settings.seed, "trial": 0})
        traces[spec.label] = trace.to_dict(settings.save_params)

    frame = simulate_frame(batches, theory)
    print(frame.to_string(index=False))

    fmt = settings.format
    files = [
        write_table(frame, table_path(out_dir, "results", fmt), fmt),
        write_table(error_table_frame(batches), table_path(out_dir, "error_table", fmt), fmt),
        write_json(
            {
                "config": config_snapshot(cfg),
                "failed_trials": {label: b.failed_trials for label, b in batches.items()},
                "traces": traces,
            },
            os.path.join(out_dir, "results.json" if fmt == "csv" else "run_details.json"),
        ),
        write_ground_truth(gt, os.path.join(out_dir, "ground_truth.csv"), cfg.ground_truth.seed),
        write_dataset(trace.datasets, os.path.join(out_dir, "datasets.csv"), settings.seed),
    ]
    return finish_output(cfg, "simulate", out_dir, files)
