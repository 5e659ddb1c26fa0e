"""Sample-mean transition estimates and Chernoff sample-size bounds."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# value printed in the worked example for alpha=0.01, delta=0.95; the exact
# ceiling of the bound is one larger
PUBLISHED_EXAMPLE_SAMPLES = 73777


@dataclass(frozen=True)
class TransitionCounts:
    """w(s'|s,a) as ``counts[a, s, s']`` and w(s,a) as ``totals[a, s]``."""

    counts: np.ndarray
    totals: np.ndarray = field(init=False)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 3 or counts.shape[1] != counts.shape[2]:
            raise ValueError(f"counts must have shape (A, N, N), got {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        counts = counts.copy()
        counts.setflags(write=False)
        totals = counts.sum(axis=2)
        totals.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "totals", totals)

    def __add__(self, other: "TransitionCounts") -> "TransitionCounts":
        return TransitionCounts(self.counts + other.counts)


@dataclass(frozen=True)
class CoverageReport:
    unvisited: tuple[tuple[int, int], ...]  # (action, state) pairs with w(s,a) = 0
    min_count: int
    totals: np.ndarray

    @property
    def complete(self) -> bool:
        return not self.unvisited

    def insufficient(self, required: int) -> list[tuple[int, int]]:
        """(action, state) pairs with fewer than ``required`` observed transitions."""
        return [(int(a), int(s)) for a, s in zip(*np.nonzero(self.totals < required))]


def count_transitions(
    sequences: Iterable[tuple[Sequence[int], Sequence]],
    num_states: int,
    actions: Sequence,
) -> TransitionCounts:
    """Count state transitions per action.

    Each item is (state labels, action ids) with ``len(actions) == len(labels) - 1``;
    ``actions[t]`` is the action taken between labels[t] and labels[t+1].
    Action ids are resolved against ``actions``.
    """
    index = {a: i for i, a in enumerate(actions)}
    counts = np.zeros((len(actions), num_states, num_states), dtype=np.int64)
    for k, (labels, acts) in enumerate(sequences):
        labels = np.asarray(labels, dtype=np.int64)
        acts = list(acts)
        if len(acts) != max(len(labels) - 1, 0):
            raise ValueError(f"sequence {k}: {len(acts)} actions for {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= num_states):
            raise ValueError(f"sequence {k}: state label outside 0..{num_states - 1}")
        try:
            a_idx = np.array([index[a] for a in acts], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"sequence {k}: unknown action {exc.args[0]!r}") from None
        if a_idx.size:
            np.add.at(counts, (a_idx, labels[:-1], labels[1:]), 1)
    return TransitionCounts(counts)


def estimate_transitions(counts: TransitionCounts) -> tuple[np.ndarray, CoverageReport]:
    """T(s'|s,a) = w(s'|s,a) / w(s,a); unvisited (s,a) rows become uniform and are reported."""
    c = counts.counts.astype(float)
    totals = counts.totals
    n = c.shape[1]
    est = np.full_like(c, 1.0 / n)
    seen = totals > 0
    est[seen] = c[seen] / totals[seen][:, None]
    unvisited = tuple((int(a), int(s)) for a, s in zip(*np.nonzero(~seen)))
    report = CoverageReport(unvisited, int(totals.min()) if totals.size else 0, totals)
    return est, report


def required_samples(alpha: float, delta: float) -> int:
    """Smallest w with 1 - 2 exp(-alpha^2 w / 2) >= delta."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return math.ceil(-(2.0 / alpha**2) * math.log((1.0 - delta) / 2.0))


def confidence_of(alpha: float, w: int) -> float:
    """Chernoff lower bound on P(|estimate - truth| <= alpha) for one entry from w samples."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if w < 0:
        raise ValueError("w must be nonnegative")
    return max(0.0, 1.0 - 2.0 * math.exp(-(alpha**2) * w / 2.0))


def max_entry_error(estimate, truth) -> float:
    return float(np.max(np.abs(np.asarray(estimate) - np.asarray(truth))))
