"""
Replica-level worker pool.

Replicas are cut into fixed-size chunks; chunk c draws from
RngStream(seed, stream_base + c). The partition never depends on the number of
workers, so results are identical for every ``threads`` value.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Optional, TypeVar

from scripts.utils.utils import get_logger, get_section
from .errors import ParameterError
from .rand_dist import RngStream

logger = get_logger('parallel')

T = TypeVar('T')

DEFAULT_CHUNK_SIZE = int(get_section('defaults').get('chunk_size', 5000))


def default_threads() -> int:
    return os.cpu_count() or 1


def chunk_counts(n_replicas: int, chunk_size: int) -> List[int]:
    if n_replicas < 1:
        raise ParameterError(f"n_replicas must be >= 1, got {n_replicas}")
    if chunk_size < 1:
        raise ParameterError(f"chunk_size must be >= 1, got {chunk_size}")
    full, rest = divmod(int(n_replicas), int(chunk_size))
    return [int(chunk_size)] * full + ([rest] if rest else [])


def run_chunked(task: Callable[[int, RngStream], T], n_replicas: int, seed: int, stream_base: int = 0,
                chunk_size: Optional[int] = None, threads: int = 1) -> List[T]:
    """
    Run ``task(count, stream)`` for every chunk and return results in chunk order.

    ``task`` must be picklable (module-level function or functools.partial of one)
    when threads > 1.
    """
    counts = chunk_counts(n_replicas, chunk_size or DEFAULT_CHUNK_SIZE)
    streams = [RngStream(seed, stream_base + index) for index in range(len(counts))]
    workers = max(1, min(int(threads), len(counts)))
    logger.info(f"Running {n_replicas} replicas in {len(counts)} chunks on {workers} worker(s), "
                f"seed={seed}, stream_base={stream_base}")

    if workers == 1:
        return [task(count, stream) for count, stream in zip(counts, streams)]

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task, counts, streams))
