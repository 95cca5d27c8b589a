"""Seeded random streams, simplex sampling and ordered parallel maps."""
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


def make_rng(seed: int) -> np.random.Generator:
    """Named, seedable generator used by every stochastic operation."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn_rngs(seed: int, count: int) -> List[np.random.Generator]:
    """Split one seed into independent child streams."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.PCG64(child)) for child in children]


def sample_simplex(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples from the probability simplex, shape (count, n).

    Dirichlet(1,...,1) through normalized Exp(1) draws, which keeps every
    coordinate strictly positive.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if count < 0:
        raise ValueError("count must be >= 0")
    g = rng.exponential(1.0, size=(count, n))
    return g / g.sum(axis=1, keepdims=True)


def simplex_vertices(n: int) -> np.ndarray:
    return np.eye(n)


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """Map preserving input order; results never depend on completion order."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
