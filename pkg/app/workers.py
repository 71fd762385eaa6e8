import logging
import os
from typing import Callable, Iterable, List, Sequence, TypeVar

from billiard import Pool

logger = logging.getLogger(__name__)

WORKERS_ENV = "REHEARSAL_LAB_WORKERS"

P = TypeVar("P")
R = TypeVar("R")


def default_workers() -> int:
    raw = os.getenv(WORKERS_ENV, "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        logger.warning(f"Ignoring non-integer {WORKERS_ENV}={raw!r}, using 1 worker")
        return 1


def index_chunks(count: int, workers: int) -> List[range]:
    """Split 0..count-1 into contiguous chunks, a few per worker."""
    if count <= 0:
        return []
    pieces = max(1, min(count, workers * 4))
    size, extra = divmod(count, pieces)
    chunks, start = [], 0
    for k in range(pieces):
        stop = start + size + (1 if k < extra else 0)
        chunks.append(range(start, stop))
        start = stop
    return chunks


def map_chunks(func: Callable[[P], R], payloads: Sequence[P], workers: int) -> List[R]:
    """Apply ``func`` to each payload, in order, inline or on a process pool."""
    if workers <= 1 or len(payloads) <= 1:
        return [func(payload) for payload in payloads]

    size = min(workers, len(payloads))
    logger.info(f"Starting worker pool with {size} processes for {len(payloads)} chunks")
    pool = Pool(processes=size)
    try:
        results = pool.map(func, payloads)
    finally:
        pool.close()
        pool.join()
    return list(results)


def flatten(chunked: Iterable[Iterable[R]]) -> List[R]:
    return [item for chunk in chunked for item in chunk]
