import os
from concurrent.futures import ThreadPoolExecutor

_override: int | None = None


def set_threads(n: int | None) -> None:
    global _override
    if n is not None and n < 1:
        raise ValueError("thread count must be >= 1")
    _override = n


def worker_count() -> int:
    if _override is not None:
        return _override
    env = os.environ.get("GSPN_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("GSPN_THREADS must be >= 1")
        return n
    return 1


def map_ordered(fn, items):
    """``list(map(fn, items))``, optionally on a thread pool; order is preserved."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
