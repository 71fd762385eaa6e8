import logging
import os
from typing import List, Optional

from app.commands.common import finish_output, prepare_output
from app.exceptions import VerificationFailed
from app.schemas import CheckReport, RunConfig
from app.services.export_service import write_json
from app.services.montecarlo_service import verify_identities
from app.services.verifier_service import check_scalar_lemmas, check_theorems, render_text

logger = logging.getLogger(__name__)

IDENTITY_P = 100
IDENTITY_M = (10, 20)


def build_reports(cfg: RunConfig, suite: str) -> List[CheckReport]:
    reports = []
    if suite in ("lemmas", "all"):
        reports.append(check_scalar_lemmas())
    if suite in ("theorems", "all"):
        reports.append(check_theorems())
    if suite in ("identities", "all"):
        reports.append(verify_identities(IDENTITY_P, IDENTITY_M, cfg.run.identity_trials,
                                         cfg.run.seed, cfg.run.workers))
    return reports


def run(cfg: RunConfig, suite: Optional[str] = None) -> List[str]:
    suite = suite or cfg.verify.suite
    out_dir = prepare_output(cfg, "verify")
    reports = build_reports(cfg, suite)

    text = "\n\n".join(render_text(r) for r in reports)
    print(text)
    files = [write_json(r.model_dump(), os.path.join(out_dir, f"{r.name}_report.json")) for r in reports]
    text_path = os.path.join(out_dir, "verify_report.txt")
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(text + "\n")
    files.append(text_path)

    failed = [r.name for r in reports if not r.passed]
    files = finish_output(cfg, "verify", out_dir, files, extra={
        "suite": suite,
        "passed": not failed,
        "counts": {r.name: r.counts() for r in reports},
    })
    if failed:
        total = sum(len(r.failures) for r in reports)
        raise VerificationFailed(f"{total} asserted checks failed in {', '.join(failed)}")
    return files
