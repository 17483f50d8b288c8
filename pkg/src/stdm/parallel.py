"""Ordered fan-out of independent jobs."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

import numpy as np


def _guarded(fn, catch, arg):
    try:
        return fn(arg)
    except catch as exc:
        return exc


class _Call:
    def __init__(self, fn, catch):
        self.fn, self.catch = fn, catch

    def __call__(self, arg):
        return _guarded(self.fn, self.catch, arg)


def ordered_map(fn: Callable, args: Sequence, jobs: int = 1, catch: tuple = ()) -> list:
    """``[fn(a) for a in args]`` with optional process parallelism.

    Exceptions of the types in ``catch`` are returned in place of results.
    Output order always follows ``args``, so results do not depend on ``jobs``.
    """
    call = _Call(fn, catch)
    if jobs <= 1 or len(args) <= 1:
        return [call(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(call, args))


def as_seed_sequence(seed) -> np.random.SeedSequence:
    """Accept an int, a sequence of ints or an existing ``SeedSequence``."""
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
