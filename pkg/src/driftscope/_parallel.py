import os
from concurrent.futures import ThreadPoolExecutor


def thread_cap() -> int:
    """Analysis parallelism, capped by DRIFTSCOPE_THREADS (default 1)."""
    raw = os.environ.get("DRIFTSCOPE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def parallel_map(fn, items, threads=None):
    """Order-preserving map; runs inline when only one thread is allowed."""
    items = list(items)
    n = min(threads or thread_cap(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
