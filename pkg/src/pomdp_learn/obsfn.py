"""Discrete observation function from Gaussian emissions via the maximum-likelihood rule."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import GaussianEmission, TimeSeries

DEFAULT_N_MC = 10**6
_CHUNK = 250_000


def _static(emissions: Sequence[GaussianEmission]):
    if not emissions:
        raise ValueError("need at least one emission")
    n = emissions[0].dim
    for e in emissions:
        if e.dim != n:
            raise ValueError("emissions have mismatched dimensions")
        if e.ar_order:
            raise ValueError("the ML decision rule is defined for static (r = 0) emissions only")
    return n


def gaussian_loglik(y: np.ndarray, emissions: Sequence[GaussianEmission]) -> np.ndarray:
    """Log density of each row of ``y`` under each emission, shape (len(y), L)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = _static(emissions)
    if y.shape[1] != n:
        raise ValueError(f"observation dimension {y.shape[1]} != emission dimension {n}")
    out = np.empty((y.shape[0], len(emissions)))
    for k, e in enumerate(emissions):
        L = np.linalg.cholesky(e.covariance)
        z = np.linalg.solve(L, (y - e.mean).T)
        out[:, k] = (-0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L)))
                     - 0.5 * n * np.log(2 * np.pi))
    return out


def ml_decide(y, emissions: Sequence[GaussianEmission]) -> int:
    """Index of the emission with the highest likelihood at ``y``; ties go to the lowest index."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ValueError("ml_decide takes a single vector")
    return int(np.argmax(gaussian_loglik(y[None, :], emissions)[0]))


def discretize_series(series: TimeSeries | np.ndarray, emissions) -> np.ndarray:
    values = series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=float)
    if values.size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(gaussian_loglik(values, emissions), axis=1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class ObservationMatrix:
    """probs[i, j] = P(o = z_j | s = z_i), with Monte Carlo standard errors."""

    probs: np.ndarray
    std_err: np.ndarray
    n_mc: int
    seed: int | None

    def to_dict(self) -> dict:
        return {"probs": self.probs.tolist(), "std_err": self.std_err.tolist(),
                "n_mc": self.n_mc, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ObservationMatrix":
        return cls(np.array(d["probs"], dtype=float), np.array(d["std_err"], dtype=float),
                   int(d["n_mc"]), d.get("seed"))


def estimate_observation_matrix(emissions: Sequence[GaussianEmission], n_mc: int = DEFAULT_N_MC,
                                seed: int | None = 0) -> ObservationMatrix:
    """Row i: frequencies of ML decisions over n_mc draws from emission i.

    Row i draws from its own substream of ``seed`` so rows are independent of
    one another and of evaluation order.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    _static(emissions)
    L = len(emissions)
    streams = np.random.SeedSequence(seed).spawn(L)
    counts = np.zeros((L, L), dtype=np.int64)
    for i, e in enumerate(emissions):
        rng = np.random.default_rng(streams[i])
        chol = np.linalg.cholesky(e.covariance)
        done = 0
        while done < n_mc:
            m = min(_CHUNK, n_mc - done)
            y = e.mean + rng.standard_normal((m, e.dim)) @ chol.T
            counts[i] += np.bincount(discretize_series(y, emissions), minlength=L)
            done += m
    probs = counts / float(n_mc)
    std_err = np.sqrt(probs * (1.0 - probs) / n_mc)
    return ObservationMatrix(probs, std_err, n_mc, seed)


def lift_to_product(probs: np.ndarray, passthrough_size: int) -> np.ndarray:
    """Observation matrix on human x (robot, environment) states.

    The extra factors are observed exactly, so the lifted matrix is
    kron(probs, I); flat state index = human * passthrough_size + other.
    """
    return np.kron(np.asarray(probs, dtype=float), np.eye(passthrough_size))
