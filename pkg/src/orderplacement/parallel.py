"""Order-preserving process-pool map used by Monte-Carlo estimators and experiments."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

# fixed partition size, so results never depend on the worker count
PARTITION = 25_000


def pmap(fn, items, workers: int = 1) -> list:
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def partitions(count: int, size: int = PARTITION) -> list:
    """(index, length) pairs covering ``count`` draws in fixed-size chunks."""
    out, start, i = [], 0, 0
    while start < count:
        n = min(size, count - start)
        out.append((i, n))
        start += n
        i += 1
    return out
