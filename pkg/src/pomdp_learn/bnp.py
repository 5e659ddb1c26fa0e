"""State discovery with a beta-process (AR-)HMM sampled by MCMC.

Each sequence selects a subset of a shared, unbounded library of hidden
states (binary feature matrix, IBP prior with mass ``c``).  Within a
sequence, rows of the transition matrix are Dirichlet(gamma, ..., gamma +
kappa, ..., gamma) restricted to the selected states, and each state emits
through a Gaussian (r = 0) or vector autoregression (r >= 1).

One sweep of the sampler:

1. Metropolis flips of shared features, labels marginalized by the forward
   algorithm.
2. Birth/death moves for features owned by a single sequence.  Births draw
   the new state's parameters either from the prior or from the conjugate
   posterior of a random data window; the acceptance ratio uses the mixture
   density, so the reverse (death) move sees the same proposal.
3. Forward-filtering backward-sampling of the labels, then merge/split
   proposals over whole features with the transition weights integrated out:
   two states merge by averaging their parameters (the reverse split adds
   and subtracts a random offset and reallocates labels by sequential
   Polya-urn allocation).
4. Conjugate draws of the emission parameters.
5. Dirichlet draws of the transition rows.

Transition weights are kept unnormalized per sequence (``eta``) so flipping a
feature on or off changes the row normalization without resampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln, multigammaln
from scipy.stats import invwishart

from .core import GaussianEmission, TimeSeries

_LOG_PI = math.log(math.pi)


# ---------------------------------------------------------------------------
# conjugate emission prior


def _logdet(a: np.ndarray) -> float:
    sign, val = np.linalg.slogdet(a)
    if sign <= 0:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return float(val)


def _floor_spd(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    floor = 1e-10 * max(float(np.trace(cov)) / cov.shape[0], 1e-300)
    if w.min() >= floor:
        return cov
    w = np.maximum(w, floor)
    return (v * w) @ v.T


@dataclass(frozen=True, eq=False)
class EmissionPrior:
    """Matrix-normal inverse-Wishart prior on (coef, Sigma) for y = coef @ x + e.

    The regressor is x_t = [y_{t-1}, ..., y_{t-r}, 1], so with r = 0 this is
    the normal inverse-Wishart prior on (mean, Sigma) with mean precision
    scale k0 = precision[-1, -1].
    """

    coef_mean: np.ndarray   # (n, d)
    precision: np.ndarray   # (d, d), column precision
    dof: float
    scale: np.ndarray       # (n, n)

    def __post_init__(self):
        n = self.scale.shape[0]
        if self.coef_mean.shape[0] != n or self.coef_mean.shape[1] != self.precision.shape[0]:
            raise ValueError("prior shapes are inconsistent")
        if not self.dof > n - 1:
            raise ValueError(f"degrees of freedom {self.dof} must exceed n - 1 = {n - 1}")
        for name, m in (("scale", self.scale), ("precision", self.precision)):
            if not np.allclose(m, m.T, atol=1e-9) or np.linalg.eigvalsh(m).min() <= 0:
                raise ValueError(f"prior {name} matrix is not symmetric positive definite")

    @classmethod
    def niw(cls, mean, k0: float, dof: float, scale, ar_order: int = 0,
            ar_precision: float = 1.0) -> "EmissionPrior":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        n = mean.shape[0]
        d = n * ar_order + 1
        M0 = np.zeros((n, d))
        M0[:, -1] = mean
        K0 = np.diag([ar_precision] * (n * ar_order) + [k0])
        return cls(M0, K0, float(dof), np.atleast_2d(np.asarray(scale, dtype=float)))

    @property
    def dim(self) -> int:
        return self.scale.shape[0]

    @property
    def ar_order(self) -> int:
        return (self.precision.shape[0] - 1) // self.dim

    def posterior(self, Y: np.ndarray, X: np.ndarray) -> "EmissionPrior":
        if Y.shape[0] == 0:
            return self
        Kn = self.precision + X.T @ X
        MK0 = self.coef_mean @ self.precision
        Mn = np.linalg.solve(Kn, (MK0 + Y.T @ X).T).T
        Sn = self.scale + Y.T @ Y + MK0 @ self.coef_mean.T - Mn @ Kn @ Mn.T
        Sn = 0.5 * (Sn + Sn.T)
        return EmissionPrior(Mn, 0.5 * (Kn + Kn.T), self.dof + Y.shape[0], Sn)

    def log_marginal(self, Y: np.ndarray, X: np.ndarray) -> float:
        """log p(Y | X) with coef and Sigma integrated out."""
        N, n = Y.shape
        if N == 0:
            return 0.0
        post = self.posterior(Y, X)
        return (-0.5 * N * n * _LOG_PI
                + 0.5 * n * (_logdet(self.precision) - _logdet(post.precision))
                + 0.5 * self.dof * _logdet(self.scale) - 0.5 * post.dof * _logdet(post.scale)
                + multigammaln(0.5 * post.dof, n) - multigammaln(0.5 * self.dof, n))

    def sample(self, rng: np.random.Generator) -> GaussianEmission:
        sigma = invwishart.rvs(df=self.dof, scale=self.scale, random_state=rng)
        sigma = _floor_spd(np.atleast_2d(sigma))
        n, d = self.coef_mean.shape
        col_cov_chol = np.linalg.cholesky(np.linalg.inv(self.precision))
        coef = self.coef_mean + np.linalg.cholesky(sigma) @ rng.standard_normal((n, d)) @ col_cov_chol.T
        return coef_to_emission(coef, sigma)

    def logpdf(self, emission: GaussianEmission) -> float:
        coef = emission_to_coef(emission)
        sigma = emission.covariance
        n, d = coef.shape
        diff = coef - self.coef_mean
        quad = np.trace(self.precision @ diff.T @ np.linalg.solve(sigma, diff))
        log_mn = (-0.5 * n * d * math.log(2 * math.pi) - 0.5 * d * _logdet(sigma)
                  + 0.5 * n * _logdet(self.precision) - 0.5 * quad)
        return float(invwishart.logpdf(sigma, df=self.dof, scale=self.scale)) + log_mn


def coef_to_emission(coef: np.ndarray, sigma: np.ndarray) -> GaussianEmission:
    n = coef.shape[0]
    r = (coef.shape[1] - 1) // n
    return GaussianEmission(coef[:, -1].copy(), sigma,
                            tuple(coef[:, j * n:(j + 1) * n].copy() for j in range(r)))


def emission_to_coef(e: GaussianEmission) -> np.ndarray:
    return np.hstack([*e.ar_coeffs, e.mean[:, None]])


# ---------------------------------------------------------------------------
# hyperparameters and sample containers


@dataclass(frozen=True, eq=False)
class BpHmmHyperparams:
    mass: float = 1.0
    gamma: float = 1.0
    kappa: float = 25.0
    ar_order: int = 0
    emission_prior: EmissionPrior | None = None

    def __post_init__(self):
        if not self.mass > 0 or not self.gamma > 0 or not self.kappa >= 0:
            raise ValueError("need mass > 0, gamma > 0 and kappa >= 0")
        if self.ar_order < 0:
            raise ValueError("ar_order must be nonnegative")
        if self.emission_prior is not None and self.emission_prior.ar_order != self.ar_order:
            raise ValueError("emission prior does not match ar_order")

    @classmethod
    def default(cls, dataset: Sequence[TimeSeries], mass=1.0, gamma=1.0, kappa=None,
                ar_order=0, k0=0.01, ar_precision=1.0) -> "BpHmmHyperparams":
        """Scale-adaptive defaults: prior mean and scale from the pooled data."""
        pooled = np.vstack([s.values for s in dataset])
        n = pooled.shape[1]
        mean = pooled.mean(axis=0)
        cov = np.atleast_2d(np.cov(pooled, rowvar=False)) if len(pooled) > 1 else np.zeros((n, n))
        scale = 0.75 * cov
        w = np.linalg.eigvalsh(scale)
        jitter_floor = 1e-6 * max(float(np.trace(scale)) / n, 1.0)
        if w.min() < jitter_floor:
            scale = scale + (jitter_floor - min(w.min(), 0.0)) * np.eye(n)
        prior = EmissionPrior.niw(mean, k0, n + 2, scale, ar_order, ar_precision)
        return cls(mass, gamma, 25.0 * gamma if kappa is None else kappa, ar_order, prior)


@dataclass(frozen=True)
class SamplerConfig:
    sweeps: int = 1000
    burn_in: int | None = None      # default: half of sweeps
    seed: int = 0
    birth_death_proposals_per_sweep: int = 2   # per sequence
    birth_window: int = 15
    prior_birth_prob: float = 0.25  # births draw from the prior, else from a data window's posterior
    merge_split_proposals_per_sweep: int = 2
    split_mean_scale: float = 0.5   # split offset sd, in units of the merged state's noise sd
    split_cov_scale: float = 0.3
    split_ar_scale: float = 0.1
    thin: int = 1
    # long sequences: start from a chain run on the first warm_start_length steps of each
    # sequence, where births and deaths mix faster (0 sweeps disables)
    warm_start_length: int = 500
    warm_start_sweeps: int = 100

    def resolved_burn_in(self) -> int:
        return self.sweeps // 2 if self.burn_in is None else self.burn_in


@dataclass(frozen=True, eq=False)
class PosteriorSample:
    """One retained MCMC draw.

    ``labels[i]`` holds global state indices; ``trans_rows[i]`` is the
    transition matrix over ``active[i]`` (the states sequence i uses), in
    increasing global index order.
    """

    num_states: int
    emissions: tuple[GaussianEmission, ...]
    features: np.ndarray
    trans_rows: tuple[np.ndarray, ...]
    labels: tuple[np.ndarray, ...]
    log_joint: float
    sweep: int = -1

    @property
    def active(self) -> tuple[np.ndarray, ...]:
        return tuple(np.flatnonzero(f) for f in self.features)

    def violations(self) -> list[str]:
        out = []
        F = self.features
        if F.shape[1] != self.num_states or len(self.emissions) != self.num_states:
            out.append("feature/emission count does not match num_states")
        if self.num_states and np.any(F.sum(axis=0) == 0):
            out.append("orphan global state (unused column)")
        if np.any(F.sum(axis=1) == 0):
            out.append("sequence with no active state")
        for i, (lab, act, P) in enumerate(zip(self.labels, self.active, self.trans_rows)):
            if not np.all(np.isin(lab, act)):
                out.append(f"sequence {i}: label outside its active states")
            if P.shape != (len(act), len(act)) or np.any(np.abs(P.sum(axis=1) - 1) > 1e-9):
                out.append(f"sequence {i}: transition rows not stochastic")
        return out

    def permuted(self, perm: Sequence[int]) -> "PosteriorSample":
        """Relabel: old global state k becomes perm[k]."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        F = self.features[:, inv]
        rows = []
        for i, P in enumerate(self.trans_rows):
            old_active = np.flatnonzero(self.features[i])
            order = np.argsort(perm[old_active])
            rows.append(P[np.ix_(order, order)])
        return PosteriorSample(self.num_states, tuple(self.emissions[k] for k in inv), F,
                               tuple(rows), tuple(perm[l] for l in self.labels),
                               self.log_joint, self.sweep)

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "emissions": [e.to_dict() for e in self.emissions],
            "features": self.features.astype(int).tolist(),
            "trans_rows": [P.tolist() for P in self.trans_rows],
            "labels": [l.tolist() for l in self.labels],
            "log_joint": self.log_joint,
            "sweep": self.sweep,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PosteriorSample":
        return cls(int(d["num_states"]),
                   tuple(GaussianEmission.from_dict(e) for e in d["emissions"]),
                   np.array(d["features"], dtype=bool),
                   tuple(np.array(P, dtype=float) for P in d["trans_rows"]),
                   tuple(np.array(l, dtype=np.int64) for l in d["labels"]),
                   float(d["log_joint"]), int(d.get("sweep", -1)))


@dataclass
class FitResult:
    samples: list[PosteriorSample]
    map_sample: PosteriorSample
    num_states_trace: list[int] = field(default_factory=list)
    log_joint_trace: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        return {"num_states_trace": self.num_states_trace,
                "log_joint_trace": self.log_joint_trace,
                "map_sample": self.map_sample.to_dict()}


# ---------------------------------------------------------------------------
# HMM kernels


@numba.njit(cache=True)
def _forward(loglik, trans, init):
    T, L = loglik.shape
    alpha = np.empty((T, L))
    logz = 0.0
    for t in range(T):
        m = loglik[t, 0]
        for j in range(1, L):
            if loglik[t, j] > m:
                m = loglik[t, j]
        s = 0.0
        for j in range(L):
            if t == 0:
                pred = init[j]
            else:
                pred = 0.0
                for i in range(L):
                    pred += alpha[t - 1, i] * trans[i, j]
            a = pred * math.exp(loglik[t, j] - m)
            alpha[t, j] = a
            s += a
        if not s > 0.0:
            return alpha, -np.inf
        for j in range(L):
            alpha[t, j] /= s
        logz += math.log(s) + m
    return alpha, logz


@numba.njit(cache=True)
def _backward_sample(alpha, trans, u):
    T, L = alpha.shape
    z = np.empty(T, dtype=np.int64)
    w = np.empty(L)
    for t in range(T - 1, -1, -1):
        s = 0.0
        for j in range(L):
            w[j] = alpha[t, j] if t == T - 1 else alpha[t, j] * trans[j, z[t + 1]]
            s += w[j]
        target = u[t] * s
        acc = 0.0
        k = L - 1
        for j in range(L):
            acc += w[j]
            if target < acc:
                k = j
                break
        z[t] = k
    return z


@numba.njit(cache=True)
def _urn_alloc(lab, mask, ll_a, ll_b, La, a, b, gamma, kappa, u, sample):
    """Sequential allocation of the masked steps between local states a and b.

    Walks the sequence in time order; a masked step picks a or b with weight
    emission likelihood x Polya-urn predictive of the transition from the
    previous label given the transitions counted so far.  Returns the log
    probability of the (sampled or given) allocation.
    """
    T = lab.shape[0]
    C = np.zeros((La, La))
    rows = np.zeros(La)
    logq = 0.0
    for t in range(T):
        if mask[t]:
            if t == 0:
                la = ll_a[t]
                lb = ll_b[t]
            else:
                p = lab[t - 1]
                den = rows[p] + La * gamma + kappa
                wa = C[p, a] + gamma + (kappa if p == a else 0.0)
                wb = C[p, b] + gamma + (kappa if p == b else 0.0)
                la = math.log(wa / den) + ll_a[t]
                lb = math.log(wb / den) + ll_b[t]
            m = max(la, lb)
            lse = m + math.log(math.exp(la - m) + math.exp(lb - m))
            if sample:
                lab[t] = a if u[t] < math.exp(la - lse) else b
            logq += (la if lab[t] == a else lb) - lse
        if t > 0:
            C[lab[t - 1], lab[t]] += 1.0
            rows[lab[t - 1]] += 1.0
    return logq


def _safe_trans(P: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.maximum(P, 1e-300))


def log_marginal_likelihood(loglik: np.ndarray, trans: np.ndarray) -> float:
    """log p(y) of an HMM with uniform initial state, given per-step log-likelihoods (T, L)."""
    L = trans.shape[0]
    _, logz = _forward(np.ascontiguousarray(loglik), _safe_trans(trans), np.full(L, 1.0 / L))
    return float(logz)


def _ffbs(loglik, trans, rng):
    L = trans.shape[0]
    P = _safe_trans(trans)
    alpha, logz = _forward(np.ascontiguousarray(loglik), P, np.full(L, 1.0 / L))
    if not np.isfinite(logz):
        raise FloatingPointError("forward pass underflowed")
    return _backward_sample(alpha, P, rng.random(loglik.shape[0])), float(logz)


# ---------------------------------------------------------------------------
# data plumbing


def _regressors(values: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """(X, valid): X[t] = [y_{t-1}, ..., y_{t-r}, 1]; valid[t] is False for the first r steps."""
    T, n = values.shape
    X = np.zeros((T, n * r + 1))
    X[:, -1] = 1.0
    for j in range(1, r + 1):
        X[j:, (j - 1) * n:j * n] = values[:-j]
    valid = np.arange(T) >= r
    return X, valid


class _Data:
    def __init__(self, dataset: Sequence[TimeSeries], r: int):
        if not dataset:
            raise ValueError("dataset is empty")
        n = dataset[0].dim
        for s in dataset:
            if s.dim != n:
                raise ValueError(f"series {s.id} has dimension {s.dim}, expected {n}")
            if s.length <= r:
                raise ValueError(f"series {s.id} has {s.length} points, too short for AR order {r}")
        self.n, self.r = n, r
        self.series = list(dataset)
        parts = [_regressors(s.values, r) for s in dataset]
        self.Y = np.vstack([s.values for s in dataset])
        self.X = np.vstack([p[0] for p in parts])
        self.valid = np.concatenate([p[1] for p in parts])
        lengths = [s.length for s in dataset]
        self.offsets = np.concatenate([[0], np.cumsum(lengths)])
        self.K = len(dataset)

    def seq(self, i):
        return slice(self.offsets[i], self.offsets[i + 1])

    def loglik(self, emissions: Sequence[GaussianEmission]) -> np.ndarray:
        """(N_total, L) emission log-likelihoods; zero on the first r steps of each sequence."""
        out = np.zeros((self.Y.shape[0], len(emissions)))
        for k, e in enumerate(emissions):
            out[:, k] = self._loglik_one(e)
        return out

    def _loglik_one(self, e: GaussianEmission) -> np.ndarray:
        resid = self.Y - self.X @ emission_to_coef(e).T
        L = np.linalg.cholesky(e.covariance)
        z = np.linalg.solve(L, resid.T)
        ll = -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * self.n * math.log(2 * math.pi)
        return np.where(self.valid, ll, 0.0)


# ---------------------------------------------------------------------------
# public building blocks


def ffbs_labels(series: TimeSeries, active_emissions: Sequence[GaussianEmission],
                trans_row_matrix: np.ndarray, seed=None) -> np.ndarray:
    """Exact joint posterior draw of the label sequence (indices into ``active_emissions``).

    The initial state is uniform over the active states.
    """
    r = active_emissions[0].ar_order if active_emissions else 0
    data = _Data([series], r)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels, _ = _ffbs(data.loglik(active_emissions), np.asarray(trans_row_matrix, dtype=float), rng)
    return labels


def update_emissions(dataset: Sequence[TimeSeries], labels: Sequence[np.ndarray], num_states: int,
                     prior: EmissionPrior, seed=None) -> list[GaussianEmission]:
    """Conjugate posterior draw of every state's emission; states with no data draw from the prior."""
    data = _Data(dataset, prior.ar_order)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _update_emissions(data, np.concatenate(labels), num_states, prior, rng)


def _update_emissions(data: _Data, labels_all: np.ndarray, num_states: int, prior: EmissionPrior,
                      rng) -> list[GaussianEmission]:
    out = []
    for k in range(num_states):
        mask = (labels_all == k) & data.valid
        out.append(prior.posterior(data.Y[mask], data.X[mask]).sample(rng))
    return out


def sample_trans_rows(labels: Sequence[np.ndarray], features: np.ndarray, gamma: float,
                      kappa: float, seed=None) -> list[np.ndarray]:
    """Row j of sequence i ~ Dirichlet(gamma + counts(j -> .) + kappa * [self]) over its active states."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [P for P, _ in _trans_and_totals(labels, features, gamma, kappa, rng)]


def _trans_and_totals(labels, features, gamma, kappa, rng):
    out = []
    for lab, f in zip(labels, features):
        active = np.flatnonzero(f)
        La = len(active)
        local = np.searchsorted(active, lab)
        if np.any(local >= La) or not np.all(active[np.minimum(local, La - 1)] == lab):
            raise ValueError("labels use a state outside the sequence's active set")
        counts = np.zeros((La, La))
        np.add.at(counts, (local[:-1], local[1:]), 1.0)
        params = gamma + counts + kappa * np.eye(La)
        g = rng.standard_gamma(params)
        P = g / g.sum(axis=1, keepdims=True)
        totals = rng.standard_gamma(np.full(La, La * gamma + kappa))
        out.append((P, totals))
    return out


def match_states(estimated, reference) -> tuple[dict, float]:
    """Best one-to-one relabelling of ``estimated`` onto ``reference`` and the residual mismatch rate.

    Estimated states left without a partner count every point they claim as an error.
    """
    est = np.asarray(estimated)
    ref = np.asarray(reference)
    if est.shape != ref.shape:
        raise ValueError("label sequences must have equal length")
    if est.size == 0:
        return {}, 0.0
    e_ids, e_idx = np.unique(est, return_inverse=True)
    r_ids, r_idx = np.unique(ref, return_inverse=True)
    conf = np.zeros((len(e_ids), len(r_ids)), dtype=np.int64)
    np.add.at(conf, (e_idx, r_idx), 1)
    rows, cols = linear_sum_assignment(-conf)
    mapping = {e_ids[i].item(): r_ids[j].item() for i, j in zip(rows, cols)}
    matched = conf[rows, cols].sum()
    return mapping, float(1.0 - matched / est.size)


# ---------------------------------------------------------------------------
# joint score


def _log_ibp(F: np.ndarray, mass: float) -> float:
    K, L = F.shape
    if L == 0:
        return -mass * sum(1.0 / j for j in range(1, K + 1))
    harmonic = sum(1.0 / j for j in range(1, K + 1))
    m = F.sum(axis=0)
    _, hist_counts = np.unique(F.T.astype(np.int8), axis=0, return_counts=True)
    return float(L * math.log(mass) - gammaln(hist_counts + 1).sum() - mass * harmonic
                 + np.sum(gammaln(K - m + 1) + gammaln(m) - gammaln(K + 1)))


def _log_labels(lab: np.ndarray, active: np.ndarray, gamma: float, kappa: float) -> float:
    La = len(active)
    local = np.searchsorted(active, lab)
    counts = np.zeros((La, La))
    np.add.at(counts, (local[:-1], local[1:]), 1.0)
    alpha = gamma + kappa * np.eye(La)
    return float(-math.log(La) + np.sum(gammaln(alpha.sum(1)) - gammaln(alpha.sum(1) + counts.sum(1)))
                 + np.sum(gammaln(alpha + counts) - gammaln(alpha)))


def log_joint(dataset: Sequence[TimeSeries], features: np.ndarray, labels: Sequence[np.ndarray],
              hyper: BpHmmHyperparams) -> float:
    """Collapsed score log p(Y, Z, F): emission and transition parameters integrated out.

    Invariant under any relabelling of the global states.
    """
    data = _Data(dataset, hyper.ar_order)
    return _log_joint(data, np.asarray(features, dtype=bool), labels, hyper)


def _log_joint(data: _Data, F: np.ndarray, labels, hyper: BpHmmHyperparams) -> float:
    score = _log_ibp(F, hyper.mass)
    for lab, f in zip(labels, F):
        score += _log_labels(lab, np.flatnonzero(f), hyper.gamma, hyper.kappa)
    labels_all = np.concatenate(labels)
    for k in range(F.shape[1]):
        mask = (labels_all == k) & data.valid
        score += hyper.emission_prior.log_marginal(data.Y[mask], data.X[mask])
    return float(score)


# ---------------------------------------------------------------------------
# the sampler


class _Chain:
    def __init__(self, data: _Data, hyper: BpHmmHyperparams, cfg: SamplerConfig,
                 rng: np.random.Generator):
        self.data, self.hyper, self.cfg, self.rng = data, hyper, cfg, rng
        self.prior = hyper.emission_prior
        K = data.K
        valid = data.valid
        first = self.prior.posterior(data.Y[valid], data.X[valid]).sample(rng)
        self.emissions = [first]
        self.F = np.ones((K, 1), dtype=bool)
        self.eta = [self._prior_eta(1) for _ in range(K)]
        self.labels = [np.zeros(data.series[i].length, dtype=np.int64) for i in range(K)]
        self.ll = data.loglik(self.emissions)

    # -- transition weights
    def _prior_eta(self, L):
        return self.rng.standard_gamma(self.hyper.gamma + self.hyper.kappa * np.eye(L))

    def _trans(self, i, active):
        w = self.eta[i][np.ix_(active, active)]
        return w / w.sum(axis=1, keepdims=True)

    def _seq_loglik(self, i, active, ll=None, eta=None):
        ll = self.ll[self.data.seq(i)] if ll is None else ll
        w = (self.eta[i] if eta is None else eta)[np.ix_(active, active)]
        return log_marginal_likelihood(ll[:, active], w / w.sum(axis=1, keepdims=True))

    # -- step 1
    def flip_shared(self, i):
        K = self.data.K
        cur = self._seq_loglik(i, np.flatnonzero(self.F[i]))
        for k in range(self.F.shape[1]):
            m_other = int(self.F[:, k].sum() - self.F[i, k])
            if m_other == 0:
                continue
            on = self.F[i, k]
            if on and self.F[i].sum() == 1:
                continue
            f_new = self.F[i].copy()
            f_new[k] = not on
            prop = self._seq_loglik(i, np.flatnonzero(f_new))
            p_on = m_other / K
            log_prior = math.log(1 - p_on) - math.log(p_on)
            if not on:
                log_prior = -log_prior
            if math.log(self.rng.random()) < prop - cur + log_prior:
                self.F[i, k] = not on
                cur = prop
        self._drop_orphans()

    # -- step 2
    def _random_window(self, i):
        s = self.data.seq(i)
        valid_idx = np.arange(s.start, s.stop)[self.data.valid[s]]
        W = min(self.cfg.birth_window, len(valid_idx))
        start = int(self.rng.integers(len(valid_idx) - W + 1))
        idx = valid_idx[start:start + W]
        return self.prior.posterior(self.data.Y[idx], self.data.X[idx])

    def _log_proposal(self, window, theta):
        rho = self.cfg.prior_birth_prob
        log_p = self.prior.logpdf(theta)
        log_w = window.logpdf(theta)
        if rho <= 0:
            return log_w, log_p
        if rho >= 1:
            return log_p, log_p
        return float(np.logaddexp(math.log(rho) + log_p, math.log1p(-rho) + log_w)), log_p

    def birth_death(self, i):
        K = self.data.K
        rate = self.hyper.mass / K
        unique = [k for k in np.flatnonzero(self.F[i]) if self.F[:, k].sum() == 1]
        nu = len(unique)
        cur = self._seq_loglik(i, np.flatnonzero(self.F[i]))
        if self.rng.random() < 0.5:
            window = self._random_window(i)
            from_prior = self.rng.random() < self.cfg.prior_birth_prob
            theta = (self.prior if from_prior else window).sample(self.rng)
            log_q, log_p = self._log_proposal(window, theta)
            L = self.F.shape[1]
            eta = np.empty((L + 1, L + 1))
            eta[:L, :L] = self.eta[i]
            fresh = self._prior_eta(L + 1)
            eta[L, :] = fresh[L, :]
            eta[:, L] = fresh[:, L]
            s = self.data.seq(i)
            ll = np.column_stack([self.ll[s], self.data._loglik_one(theta)[s]])
            active = np.append(np.flatnonzero(self.F[i]), L)
            new = self._seq_loglik(i, active, ll=ll, eta=eta)
            log_acc = new - cur + math.log(rate / (nu + 1)) + log_p - log_q
            if math.log(self.rng.random()) < log_acc:
                self._add_feature(i, theta, eta)
        else:
            if nu == 0 or self.F[i].sum() == 1:
                return
            k = unique[int(self.rng.integers(nu))]
            log_q, log_p = self._log_proposal(self._random_window(i), self.emissions[k])
            f_new = self.F[i].copy()
            f_new[k] = False
            new = self._seq_loglik(i, np.flatnonzero(f_new))
            log_acc = new - cur + math.log(nu / rate) + log_q - log_p
            if math.log(self.rng.random()) < log_acc:
                self.F[i, k] = False
                self._drop_orphans()

    # -- step 2b: merge/split of whole features across sequences
    def _log_feature_prior(self, F):
        # density of the unordered feature set under the IBP (continuous labels make features distinct)
        K, L = F.shape
        m = F.sum(axis=0)
        return float(L * math.log(self.hyper.mass)
                     + np.sum(gammaln(K - m + 1) + gammaln(m) - gammaln(K + 1)))

    def _log_q_offset(self, coef_u, sigma_u, sigma_m):
        # density of the split offset given the merged parameters
        cfg = self.cfg
        sd_rows = np.sqrt(np.diag(sigma_m))
        coef_sd = np.empty_like(coef_u)
        coef_sd[:, -1] = cfg.split_mean_scale * sd_rows
        coef_sd[:, :-1] = cfg.split_ar_scale
        iu = np.triu_indices(sigma_m.shape[0])
        sig_sd = cfg.split_cov_scale * np.outer(sd_rows, sd_rows)[iu]
        z = np.concatenate([(coef_u / coef_sd).ravel(), sigma_u[iu] / sig_sd])
        logsd = np.log(coef_sd).sum() + np.log(sig_sd).sum()
        return float(-0.5 * z @ z - logsd - 0.5 * z.size * math.log(2 * math.pi))

    def _log_labels_all(self, F, labels):
        h = self.hyper
        return sum(_log_labels(lab, np.flatnonzero(f), h.gamma, h.kappa) for lab, f in zip(labels, F))

    @staticmethod
    def _fit(ll, labels):
        return float(np.take_along_axis(ll, np.concatenate(labels)[:, None], axis=1).sum())

    def _split_alloc(self, lab, active, ka, kb, ll_a, ll_b, mask, sample):
        """Allocate (or score) the steps in ``mask`` of one sequence between global states ka and kb."""
        local = np.searchsorted(active, lab).astype(np.int64)
        a, b = int(np.searchsorted(active, ka)), int(np.searchsorted(active, kb))
        u = self.rng.random(len(lab)) if sample else np.zeros(len(lab))
        h = self.hyper
        logq = _urn_alloc(local, mask, np.ascontiguousarray(ll_a), np.ascontiguousarray(ll_b),
                          len(active), a, b, h.gamma, h.kappa, u, sample)
        return active[local], logq

    def _replace_features(self, drop, new_thetas, new_cols):
        keep = [k for k in range(self.F.shape[1]) if k not in drop]
        F = np.hstack([self.F[:, keep], np.column_stack(new_cols)])
        L = F.shape[1]
        nk = len(keep)
        # placeholder weights of the right shape; the transition draw later in the sweep replaces them
        eta = []
        for e in self.eta:
            grown = self._prior_eta(L)
            grown[:nk, :nk] = e[np.ix_(keep, keep)]
            eta.append(grown)
        ll = np.column_stack([self.ll[:, keep]] + [self.data._loglik_one(t) for t in new_thetas])
        emissions = [self.emissions[k] for k in keep] + list(new_thetas)
        remap = np.full(self.F.shape[1], -1)
        remap[keep] = np.arange(nk)
        return F, eta, ll, emissions, remap

    def merge_split(self):
        """Merge two features or split one, with the transition weights integrated out.

        Operates on (features, emission parameters, labels).  Emission
        parameters map through (theta_m, u) <-> (theta_m + u, theta_m - u);
        split labels come from sequential urn allocation over the points of
        the split state.  Must be followed by a transition draw.
        """
        rng = self.rng
        L = self.F.shape[1]
        n = self.data.n
        d = self.data.X.shape[1]
        D = n * d + n * (n + 1) // 2
        log_j = D * math.log(2.0)   # |Jacobian| of (theta_m, u) -> (theta_m + u, theta_m - u)
        old = (self._log_feature_prior(self.F) + self._log_labels_all(self.F, self.labels)
               + self._fit(self.ll, self.labels))
        if rng.random() < 0.5:
            if L < 2:
                return
            k1, k2 = sorted(int(k) for k in rng.choice(L, size=2, replace=False))
            e1, e2 = self.emissions[k1], self.emissions[k2]
            c1, c2 = emission_to_coef(e1), emission_to_coef(e2)
            sigma_m = 0.5 * (e1.covariance + e2.covariance)
            theta_m = coef_to_emission(0.5 * (c1 + c2), sigma_m)
            col = self.F[:, k1] | self.F[:, k2]
            F, eta, ll, emissions, remap = self._replace_features({k1, k2}, [theta_m], [col])
            remap[[k1, k2]] = L - 2
            labels = [remap[lab] for lab in self.labels]
            log_alloc = 0.0
            for i in np.flatnonzero(self.F[:, k1] & self.F[:, k2]):
                lab = self.labels[i]
                s_i = self.data.seq(i)
                log_alloc += self._split_alloc(lab, np.flatnonzero(self.F[i]), k1, k2, self.ll[s_i, k1],
                                               self.ll[s_i, k2], (lab == k1) | (lab == k2), False)[1]
            new = self._log_feature_prior(F) + self._log_labels_all(F, labels) + self._fit(ll, labels)
            log_target = (new - old + self.prior.logpdf(theta_m)
                          - self.prior.logpdf(e1) - self.prior.logpdf(e2))
            log_q_rev = (-math.log(L - 1) + math.log(2.0)
                         + self._log_q_offset(0.5 * (c1 - c2), 0.5 * (e1.covariance - e2.covariance), sigma_m)
                         - col.sum() * math.log(3.0) + log_alloc)
            log_q_fwd = -math.log(L * (L - 1) / 2)
            log_acc = log_target + log_q_rev - log_q_fwd - log_j
        else:
            k = int(rng.integers(L))
            e = self.emissions[k]
            sigma_m = e.covariance
            coef_m = emission_to_coef(e)
            sd_rows = np.sqrt(np.diag(sigma_m))
            coef_u = rng.standard_normal(coef_m.shape)
            coef_u[:, -1] *= self.cfg.split_mean_scale * sd_rows
            coef_u[:, :-1] *= self.cfg.split_ar_scale
            iu = np.triu_indices(n)
            sigma_u = np.zeros((n, n))
            sigma_u[iu] = rng.standard_normal(len(iu[0])) * self.cfg.split_cov_scale * np.outer(sd_rows, sd_rows)[iu]
            sigma_u = sigma_u + np.triu(sigma_u, 1).T
            s1, s2 = sigma_m + sigma_u, sigma_m - sigma_u
            users = np.flatnonzero(self.F[:, k])
            choice = rng.integers(3, size=len(users))   # 0: first only, 1: second only, 2: both
            if min(np.linalg.eigvalsh(s1).min(), np.linalg.eigvalsh(s2).min()) <= 0:
                return
            t1 = coef_to_emission(coef_m + coef_u, s1)
            t2 = coef_to_emission(coef_m - coef_u, s2)
            col1 = np.zeros(self.data.K, dtype=bool)
            col2 = np.zeros(self.data.K, dtype=bool)
            col1[users] = choice != 1
            col2[users] = choice != 0
            if not (col1.any() and col2.any()):
                return   # an unused feature has no mass under the target
            F, eta, ll, emissions, remap = self._replace_features({k}, [t1, t2], [col1, col2])
            labels = [remap[lab] for lab in self.labels]
            log_alloc = 0.0
            for i, c in zip(users, choice):
                mask = self.labels[i] == k
                if c < 2:
                    labels[i][mask] = L - 1 + c
                    continue
                labels[i][mask] = L - 1
                s_i = self.data.seq(i)
                labels[i], lq = self._split_alloc(labels[i], np.flatnonzero(F[i]), L - 1, L, ll[s_i, L - 1],
                                                  ll[s_i, L], mask, True)
                log_alloc += lq
            new = self._log_feature_prior(F) + self._log_labels_all(F, labels) + self._fit(ll, labels)
            log_target = (new - old + self.prior.logpdf(t1) + self.prior.logpdf(t2)
                          - self.prior.logpdf(e))
            log_q_fwd = (-math.log(L) + math.log(2.0) + self._log_q_offset(coef_u, sigma_u, sigma_m)
                         - len(users) * math.log(3.0) + log_alloc)
            log_q_rev = -math.log((L + 1) * L / 2)
            log_acc = log_target + log_q_rev - log_q_fwd + log_j
        if math.log(rng.random()) < log_acc:
            self.F, self.eta, self.ll, self.emissions, self.labels = F, eta, ll, emissions, labels

    def _add_feature(self, i, theta, eta_i):
        L = self.F.shape[1]
        self.emissions.append(theta)
        col = np.zeros((self.data.K, 1), dtype=bool)
        col[i] = True
        self.F = np.hstack([self.F, col])
        for j in range(self.data.K):
            if j == i:
                self.eta[j] = eta_i
                continue
            grown = np.empty((L + 1, L + 1))
            grown[:L, :L] = self.eta[j]
            fresh = self._prior_eta(L + 1)
            grown[L, :] = fresh[L, :]
            grown[:, L] = fresh[:, L]
            self.eta[j] = grown
        self.ll = np.column_stack([self.ll, self.data._loglik_one(theta)])

    def _drop_orphans(self):
        keep = np.flatnonzero(self.F.any(axis=0))
        if len(keep) == self.F.shape[1]:
            return
        remap = np.full(self.F.shape[1], -1)
        remap[keep] = np.arange(len(keep))
        self.F = self.F[:, keep]
        self.emissions = [self.emissions[k] for k in keep]
        self.eta = [e[np.ix_(keep, keep)] for e in self.eta]
        self.ll = self.ll[:, keep]
        # stale labels on dropped states are overwritten by the next label draw
        self.labels = [np.where(remap[l] >= 0, remap[l], 0) for l in self.labels]

    # -- steps 3-5
    def resample_labels(self):
        for i in range(self.data.K):
            active = np.flatnonzero(self.F[i])
            local, _ = _ffbs(self.ll[self.data.seq(i)][:, active], self._trans(i, active), self.rng)
            self.labels[i] = active[local]

    def resample_emissions(self):
        self.emissions = _update_emissions(self.data, np.concatenate(self.labels), self.F.shape[1],
                                           self.prior, self.rng)
        self.ll = self.data.loglik(self.emissions)

    def resample_transitions(self):
        L = self.F.shape[1]
        draws = _trans_and_totals(self.labels, self.F, self.hyper.gamma, self.hyper.kappa, self.rng)
        for i, (P, totals) in enumerate(draws):
            eta = self._prior_eta(L)
            active = np.flatnonzero(self.F[i])
            eta[np.ix_(active, active)] = P * totals[:, None]
            self.eta[i] = eta

    def sweep(self):
        for i in range(self.data.K):
            self.flip_shared(i)
            for _ in range(self.cfg.birth_death_proposals_per_sweep):
                self.birth_death(i)
        self.resample_labels()
        for _ in range(self.cfg.merge_split_proposals_per_sweep):
            self.merge_split()
        self.resample_emissions()
        self.resample_transitions()

    def snapshot(self, sweep: int) -> PosteriorSample:
        score = _log_joint(self.data, self.F, self.labels, self.hyper)
        rows = tuple(self._trans(i, np.flatnonzero(self.F[i])) for i in range(self.data.K))
        F = self.F.copy()
        F.setflags(write=False)
        return PosteriorSample(self.F.shape[1], tuple(self.emissions), F, rows,
                               tuple(l.copy() for l in self.labels), score, sweep)


def _resolve_hyper(dataset, hyper):
    if hyper is None:
        return BpHmmHyperparams.default(dataset)
    if hyper.emission_prior is None:
        base = BpHmmHyperparams.default(dataset, ar_order=hyper.ar_order)
        return BpHmmHyperparams(hyper.mass, hyper.gamma, hyper.kappa, hyper.ar_order, base.emission_prior)
    return hyper


def fit_bphmm(dataset: Sequence[TimeSeries], hyper: BpHmmHyperparams | None = None,
              config: SamplerConfig | None = None) -> FitResult:
    """Run one MCMC chain; return post-burn-in draws and the draw with the highest joint score."""
    config = config or SamplerConfig()
    burn_in = config.resolved_burn_in()
    if not config.sweeps > burn_in >= 0:
        raise ValueError("need sweeps > burn_in >= 0")
    hyper = _resolve_hyper(dataset, hyper)
    data = _Data(dataset, hyper.ar_order)
    if hyper.emission_prior.dim != data.n:
        raise ValueError("emission prior dimension does not match the data")
    rng = np.random.default_rng(config.seed)
    chain = _Chain(data, hyper, config, rng)
    W = config.warm_start_length
    if config.warm_start_sweeps > 0 and max(s.length for s in dataset) > W > hyper.ar_order:
        short = _Data([TimeSeries(s.values[:W], id=s.id) for s in dataset], hyper.ar_order)
        warm = _Chain(short, hyper, config, rng)
        warm.resample_labels()
        for _ in range(config.warm_start_sweeps):
            warm.sweep()
        chain.F, chain.emissions, chain.eta = warm.F.copy(), list(warm.emissions), list(warm.eta)
        chain.ll = data.loglik(chain.emissions)
    chain.resample_labels()
    samples, ns_trace, lj_trace = [], [], []
    for sweep in range(config.sweeps):
        chain.sweep()
        snap = chain.snapshot(sweep)
        ns_trace.append(snap.num_states)
        lj_trace.append(snap.log_joint)
        if sweep >= burn_in and (sweep - burn_in) % config.thin == 0:
            samples.append(snap)
    best = max(range(len(samples)), key=lambda j: samples[j].log_joint)
    return FitResult(samples, samples[best], ns_trace, lj_trace)


def sample_features(dataset: Sequence[TimeSeries], sample: PosteriorSample,
                    hyper: BpHmmHyperparams | None = None, seed=None,
                    birth_death_proposals: int = 2) -> PosteriorSample:
    """One round of feature moves (shared flips, then birth/death) starting from ``sample``.

    Unnormalized transition weights are rebuilt from ``sample.trans_rows``
    with fresh Gamma totals.  Labels and transition rows of the returned
    sample are redrawn given the new features; emissions of surviving
    states are kept.
    """
    hyper = _resolve_hyper(dataset, hyper)
    data = _Data(dataset, hyper.ar_order)
    if sample.violations():
        raise ValueError("; ".join(sample.violations()))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cfg = SamplerConfig(sweeps=1, birth_death_proposals_per_sweep=birth_death_proposals)
    chain = _Chain(data, hyper, cfg, rng)
    L = sample.num_states
    chain.F = np.array(sample.features, dtype=bool)
    chain.emissions = list(sample.emissions)
    chain.ll = data.loglik(chain.emissions)
    chain.eta = []
    for f, P in zip(chain.F, sample.trans_rows):
        active = np.flatnonzero(f)
        eta = chain._prior_eta(L)
        totals = rng.standard_gamma(np.full(len(active), len(active) * hyper.gamma + hyper.kappa))
        eta[np.ix_(active, active)] = P * totals[:, None]
        chain.eta.append(eta)
    for i in range(data.K):
        chain.flip_shared(i)
        for _ in range(birth_death_proposals):
            chain.birth_death(i)
    chain.resample_labels()
    chain.resample_transitions()
    return chain.snapshot(sample.sweep)
