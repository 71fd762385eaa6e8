import logging
import os
from typing import List

from app.commands.common import finish_output, prepare_output, table_path
from app.config import config_snapshot
from app.schemas import RunConfig
from app.services.export_service import sweep_frame, sweep_payload, write_json, write_table
from app.services.montecarlo_service import sweep
from app.services.plot_service import render_sweep_svg, write_gnuplot_data

logger = logging.getLogger(__name__)


def run(cfg: RunConfig) -> List[str]:
    settings = cfg.run
    out_dir = prepare_output(cfg, "sweep")
    logger.info(f"Sweeping {cfg.sweep.axis} over {len(cfg.sweep.grid)} points, {settings.trials} trials each")
    result = sweep(
        cfg.problem,
        cfg.ground_truth,
        cfg.sweep.axis,
        cfg.sweep.grid,
        cfg.strategy_specs(),
        settings.trials,
        settings.seed,
        workers=settings.workers,
        allow_uneven=settings.allow_uneven,
        redraw_geometry=settings.redraw_geometry,
    )
    result.config_snapshot = config_snapshot(cfg)
    for metric, x in result.crossovers.items():
        print(f"crossover {metric}: " + ("none in grid" if x is None else f"{cfg.sweep.axis} ~ {x:.6g}"))

    fmt = settings.format
    files = [
        write_table(sweep_frame(result), table_path(out_dir, "sweep", fmt), fmt),
        write_json(sweep_payload(result), os.path.join(out_dir, "sweep_meta.json")),
        render_sweep_svg(result, os.path.join(out_dir, "sweep.svg")),
        write_gnuplot_data(result, os.path.join(out_dir, "sweep.dat")),
    ]
    return finish_output(cfg, "sweep", out_dir, files)
