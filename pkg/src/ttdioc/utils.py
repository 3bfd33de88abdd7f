"""Small shared helpers."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor


def ordered_map(fn, items, workers: int = 1) -> list:
    """Map with optional process parallelism and deterministic ordering.

    Results come back in input order regardless of completion order, so
    reductions over them are reproducible.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
