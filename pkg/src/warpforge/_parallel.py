"""Fixed-block row parallelism.

Work is always split into the same row blocks whatever the thread count,
so results are bit-identical between serial and threaded runs.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ROW_BLOCK = 4096


def worker_count(requested: int | None = None) -> int:
    if requested is not None and requested > 0:
        cap = requested
    else:
        cap = os.cpu_count() or 1
    env = os.environ.get("WARPFORGE_THREADS", "0").strip() or "0"
    try:
        limit = int(env)
    except ValueError:
        limit = 0
    if limit > 0:
        cap = min(cap, limit)
    return max(1, cap)


def blocks(n: int, block: int = ROW_BLOCK):
    return [(s, min(s + block, n)) for s in range(0, n, block)]


def run_blocks(fn, n: int, threads: int = 1, block: int = ROW_BLOCK):
    """Call ``fn(start, stop)`` on every block; results come back in block order."""
    parts = blocks(n, block)
    if threads <= 1 or len(parts) <= 1:
        return [fn(s, e) for s, e in parts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda se: fn(*se), parts))
