"""Censoring-balanced batch sampling.

Every batch holds an equal number of censored and uncensored subjects, so
the Cox loss always sees at least one event. The majority class is consumed
as a reshuffled cycle (each member appears at least once per epoch); the
minority class is drawn with replacement.
"""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np


class SingleClassCohortError(ValueError):
    """Balanced sampling needs both censored and uncensored subjects."""


def split_by_event(ids: Sequence[str], events: Sequence[int]) -> tuple[list[str], list[str]]:
    censored = [i for i, e in zip(ids, events) if not e]
    uncensored = [i for i, e in zip(ids, events) if e]
    if not censored or not uncensored:
        raise SingleClassCohortError(
            f"cohort has {len(censored)} censored / {len(uncensored)} uncensored "
            "subjects; balanced batches need both"
        )
    return censored, uncensored


def epoch_length(ids: Sequence[str], events: Sequence[int], batch_size: int) -> int:
    censored, uncensored = split_by_event(ids, events)
    majority = max(len(censored), len(uncensored))
    return math.ceil(majority / (batch_size // 2))


def balanced_batches(
    ids: Sequence[str],
    events: Sequence[int],
    batch_size: int,
    seed: int,
) -> Iterator[list[str]]:
    """Endless stream of id batches, batch_size/2 from each censoring class."""
    if batch_size % 2 != 0 or batch_size <= 0:
        raise ValueError(f"batch_size must be a positive even number, got {batch_size}")
    censored, uncensored = split_by_event(ids, events)
    half = batch_size // 2
    rng = np.random.default_rng(seed)
    if len(censored) >= len(uncensored):
        majority, minority = censored, uncensored
    else:
        majority, minority = uncensored, censored

    def cycle(pool: list[str]) -> Iterator[str]:
        while True:
            for k in rng.permutation(len(pool)):
                yield pool[k]

    major_iter = cycle(majority)
    while True:
        major = [next(major_iter) for _ in range(half)]
        minor = [minority[k] for k in rng.integers(0, len(minority), size=half)]
        if majority is censored:
            yield major + minor
        else:
            yield minor + major
