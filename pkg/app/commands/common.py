import logging
import os
from typing import List, Optional

from app.config import dump_run_config
from app.schemas import RunConfig
from app.services.export_service import ensure_dir, write_manifest

logger = logging.getLogger(__name__)


def prepare_output(cfg: RunConfig, command: str) -> str:
    out_dir = ensure_dir(cfg.run.out_dir)
    logger.info(f"{command}: writing results to {out_dir}")
    return out_dir


def finish_output(cfg: RunConfig, command: str, out_dir: str, files: List[str], extra: Optional[dict] = None) -> List[str]:
    """Add the resolved config and the manifest next to the result files."""
    files = files + [dump_run_config(cfg, out_dir)]
    manifest = write_manifest(out_dir, command, cfg.run.seed, files + ["manifest.json"], extra)
    logger.info(f"{command}: done ({len(files)} result files)")
    return files + [manifest]


def table_path(out_dir: str, stem: str, fmt: str) -> str:
    return os.path.join(out_dir, f"{stem}.{fmt}")
