"""Order-preserving process pool map."""

import os
from concurrent.futures import ProcessPoolExecutor


def default_workers() -> int:
    env = os.environ.get("PHNLAB_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def pmap(fn, items, n_workers: int = 1):
    """Map ``fn`` over ``items``; results come back in input order regardless of pool size."""
    items = list(items)
    if n_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(n_workers, len(items))) as pool:
        return list(pool.map(fn, items))
