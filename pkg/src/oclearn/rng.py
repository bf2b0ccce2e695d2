"""Counter-based random streams.

Every Monte-Carlo path owns a Philox generator keyed by
``(master seed, stream, path index)``, so a batch produces the same draws
whether it is generated serially, in chunks, or on several threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

_INDEX_BITS = 40


def path_generator(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    if index < 0 or index >= 1 << _INDEX_BITS:
        raise ValueError(f"path index out of range: {index}")
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, (int(stream) << _INDEX_BITS) | int(index)]
    return np.random.Generator(np.random.Philox(key=key))


def batch_draws(draw, seed: int, paths: int, stream: int = 0, start: int = 0,
                workers: int = 1) -> list:
    """Call ``draw(generator)`` once per path and return the results in path order."""
    indices = range(start, start + paths)
    if workers <= 1 or paths < 2 * workers:
        return [draw(path_generator(seed, k, stream)) for k in indices]

    def chunk(bounds):
        lo, hi = bounds
        return [draw(path_generator(seed, k, stream)) for k in range(lo, hi)]

    edges = np.linspace(start, start + paths, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(chunk, zip(edges[:-1], edges[1:]))
    out: list = []
    for part in parts:
        out.extend(part)
    return out


def batch_normals(seed: int, paths: int, shape: tuple[int, ...], stream: int = 0,
                  start: int = 0, workers: int = 1) -> np.ndarray:
    """Standard normal draws of ``shape`` for each path, stacked on axis 0."""
    shape = tuple(shape)
    draws = batch_draws(lambda g: g.standard_normal(shape), seed, paths, stream, start, workers)
    return np.stack(draws) if draws else np.empty((0, *shape))


def sub_seed(seed: int, label: int) -> int:
    """Deterministic child seed, for loops that need a fresh master seed per iteration."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(label)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
