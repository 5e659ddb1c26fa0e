"""Shared model types: finite POMDPs, Gaussian emissions, time series, policy trees.

Everything here is an immutable value once constructed.  Arrays held by the
dataclasses are copied and marked read-only.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PROB_TOL = 1e-9
COMPARE_TOL = 1e-12


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


class ModelParseError(ValueError):
    """Malformed model document.  ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ModelValidationError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid model:\n  " + "\n  ".join(self.violations))


@dataclass(frozen=True, eq=False)
class PomdpModel:
    """Finite POMDP (S, A, O, T, E, R) with a declared reward bound and initial belief.

    ``transition`` has shape (|A|, N, N) with ``transition[a, s, s2] = T(s2 | s, a)``;
    ``observation_fn`` has shape (N, |O|); ``reward`` has shape (N, |A|).
    """

    states: tuple[str, ...]
    actions: tuple[str, ...]
    observations: tuple[str, ...]
    transition: np.ndarray
    observation_fn: np.ndarray
    reward: np.ndarray
    r_max: float
    initial_belief: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(str(s) for s in self.states))
        object.__setattr__(self, "actions", tuple(str(a) for a in self.actions))
        object.__setattr__(self, "observations", tuple(str(o) for o in self.observations))
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "observation_fn", _frozen(self.observation_fn))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "initial_belief", _frozen(self.initial_belief))
        object.__setattr__(self, "r_max", float(self.r_max))

    @property
    def num_states(self) -> int:
        return len(self.states)

    @property
    def num_actions(self) -> int:
        return len(self.actions)

    @property
    def num_observations(self) -> int:
        return len(self.observations)

    def replace(self, **changes) -> "PomdpModel":
        kw = {
            "states": self.states,
            "actions": self.actions,
            "observations": self.observations,
            "transition": self.transition,
            "observation_fn": self.observation_fn,
            "reward": self.reward,
            "r_max": self.r_max,
            "initial_belief": self.initial_belief,
        }
        kw.update(changes)
        return PomdpModel(**kw)

    def __eq__(self, other):
        if not isinstance(other, PomdpModel):
            return NotImplemented
        return (
            self.states == other.states
            and self.actions == other.actions
            and self.observations == other.observations
            and self.r_max == other.r_max
            and np.array_equal(self.transition, other.transition)
            and np.array_equal(self.observation_fn, other.observation_fn)
            and np.array_equal(self.reward, other.reward)
            and np.array_equal(self.initial_belief, other.initial_belief)
        )

    __hash__ = None


def product_states(*factors: Sequence[str], sep: str = "|") -> list[str]:
    """Flat labels for a factored space, e.g. human x robot x environment."""
    return [sep.join(map(str, combo)) for combo in itertools.product(*factors)]


def _check_stochastic(name: str, mat: np.ndarray, out: list[str], prefix: str = ""):
    for r, row in enumerate(mat):
        bad = np.flatnonzero((row < 0) | (row > 1) | ~np.isfinite(row))
        for c in bad:
            out.append(f"{name}{prefix}[{r}][{c}] = {row[c]!r} outside [0, 1]")
        total = float(np.sum(row))
        if not abs(total - 1.0) <= PROB_TOL:
            out.append(f"{name}{prefix}[{r}] sums to {total:.12g}, expected 1")


def validate_model(model: PomdpModel) -> list[str]:
    """Return human-readable invariant violations; empty when the model is valid."""
    out: list[str] = []
    n, na, no = model.num_states, model.num_actions, model.num_observations
    if n == 0 or na == 0 or no == 0:
        out.append("states, actions and observations must all be non-empty")
        return out
    for label, names in (("states", model.states), ("actions", model.actions),
                         ("observations", model.observations)):
        if len(set(names)) != len(names):
            out.append(f"{label} contains duplicate identifiers")
    if model.transition.shape != (na, n, n):
        out.append(f"transition has shape {model.transition.shape}, expected {(na, n, n)}")
    else:
        for a in range(na):
            _check_stochastic("transition", model.transition[a], out, prefix=f"[{model.actions[a]}]")
    if model.observation_fn.shape != (n, no):
        out.append(f"observation_fn has shape {model.observation_fn.shape}, expected {(n, no)}")
    else:
        _check_stochastic("observation_fn", model.observation_fn, out)
    if not model.r_max > 0:
        out.append(f"r_max = {model.r_max!r} must be positive")
    if model.reward.shape != (n, na):
        out.append(f"reward has shape {model.reward.shape}, expected {(n, na)}")
    else:
        for s, a in zip(*np.nonzero(~(np.abs(model.reward) <= model.r_max))):
            out.append(f"reward[{s}][{a}] = {model.reward[s, a]!r} exceeds r_max = {model.r_max!r}")
    if model.initial_belief.shape != (n,):
        out.append(f"initial_belief has shape {model.initial_belief.shape}, expected {(n,)}")
    else:
        _check_stochastic("initial_belief", model.initial_belief[None, :], out)
    return out


def check_model(model: PomdpModel) -> PomdpModel:
    violations = validate_model(model)
    if violations:
        raise ModelValidationError(violations)
    return model


def alpha_distance(m1: PomdpModel, m2: PomdpModel) -> float | None:
    """Largest entrywise transition difference, or ``None`` if the models are incomparable.

    Models are comparable when they share S, A, O and agree on E, R and the
    initial belief (to 1e-12).
    """
    if (m1.states, m1.actions, m1.observations) != (m2.states, m2.actions, m2.observations):
        return None
    for a, b in ((m1.observation_fn, m2.observation_fn), (m1.reward, m2.reward),
                 (m1.initial_belief, m2.initial_belief)):
        if a.shape != b.shape or np.max(np.abs(a - b), initial=0.0) > COMPARE_TOL:
            return None
    if m1.transition.shape != m2.transition.shape:
        return None
    return float(np.max(np.abs(m1.transition - m2.transition), initial=0.0))


def is_alpha_approximation(approx: PomdpModel, model: PomdpModel, alpha: float) -> bool:
    d = alpha_distance(model, approx)
    return d is not None and d <= alpha


# ---------------------------------------------------------------------------
# serialization

_MODEL_FIELDS = ("states", "actions", "observations", "transition", "observation_fn",
                 "reward", "r_max", "initial_belief")


def model_to_dict(model: PomdpModel) -> dict:
    return {
        "states": list(model.states),
        "actions": list(model.actions),
        "observations": list(model.observations),
        "transition": model.transition.tolist(),
        "observation_fn": model.observation_fn.tolist(),
        "reward": model.reward.tolist(),
        "r_max": model.r_max,
        "initial_belief": model.initial_belief.tolist(),
    }


def _numeric(doc: dict, name: str, ndim: int) -> np.ndarray:
    try:
        arr = np.array(doc[name], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelParseError(f"not a numeric array ({exc})", field=name) from None
    if arr.ndim != ndim:
        raise ModelParseError(f"expected a {ndim}-d array, got {arr.ndim}-d", field=name)
    return arr


def model_from_dict(doc: dict, validate: bool = True) -> PomdpModel:
    if not isinstance(doc, dict):
        raise ModelParseError("top level must be an object")
    for name in _MODEL_FIELDS:
        if name not in doc:
            raise ModelParseError("missing required field", field=name)
    for name in ("states", "actions", "observations"):
        if not isinstance(doc[name], list):
            raise ModelParseError("expected a list of identifiers", field=name)
    try:
        r_max = float(doc["r_max"])
    except (TypeError, ValueError):
        raise ModelParseError("expected a number", field="r_max") from None
    model = PomdpModel(
        states=doc["states"],
        actions=doc["actions"],
        observations=doc["observations"],
        transition=_numeric(doc, "transition", 3),
        observation_fn=_numeric(doc, "observation_fn", 2),
        reward=_numeric(doc, "reward", 2),
        r_max=r_max,
        initial_belief=_numeric(doc, "initial_belief", 1),
    )
    if validate:
        check_model(model)
    return model


def serialize_model(model: PomdpModel, indent: int | None = 2) -> str:
    return json.dumps(model_to_dict(model), indent=indent)


def deserialize_model(text: str) -> PomdpModel:
    """Parse a model JSON document.

    Raises ModelParseError for malformed documents and ModelValidationError
    (carrying the violation list) for well-formed but invalid models.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(exc.msg, line=exc.lineno) from None
    return model_from_dict(doc)


def load_model(path) -> PomdpModel:
    with open(path) as fh:
        return deserialize_model(fh.read())


def save_model(model: PomdpModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_model(model))
        fh.write("\n")


# ---------------------------------------------------------------------------
# continuous emissions and time series


@dataclass(frozen=True, eq=False)
class GaussianEmission:
    """Emission parameters of one hidden state.

    With no AR coefficients this is N(mean, covariance).  With r coefficient
    matrices the emission is y_t = mean + sum_j A_j y_{t-j} + e_t, e_t ~ N(0, covariance).
    """

    mean: np.ndarray
    covariance: np.ndarray
    ar_coeffs: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(np.atleast_1d(self.mean)))
        object.__setattr__(self, "covariance", _frozen(np.atleast_2d(self.covariance)))
        object.__setattr__(self, "ar_coeffs", tuple(_frozen(np.atleast_2d(a)) for a in self.ar_coeffs))
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def ar_order(self) -> int:
        return len(self.ar_coeffs)

    def violations(self) -> list[str]:
        n = self.mean.shape[0]
        out = []
        cov = self.covariance
        if cov.shape != (n, n):
            return [f"covariance shape {cov.shape} does not match mean dimension {n}"]
        if np.max(np.abs(cov - cov.T), initial=0.0) > PROB_TOL:
            out.append("covariance is not symmetric")
        elif not np.all(np.isfinite(cov)) or np.linalg.eigvalsh(cov).min() <= 0:
            out.append("covariance is not positive definite")
        for j, a in enumerate(self.ar_coeffs):
            if a.shape != (n, n):
                out.append(f"ar_coeffs[{j}] has shape {a.shape}, expected {(n, n)}")
        return out

    def to_dict(self) -> dict:
        d = {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}
        if self.ar_coeffs:
            d["ar_coeffs"] = [a.tolist() for a in self.ar_coeffs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianEmission":
        return cls(np.array(d["mean"], dtype=float), np.array(d["covariance"], dtype=float),
                   tuple(np.array(a, dtype=float) for a in d.get("ar_coeffs", [])))


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """One observed sequence: ``values`` is (T, n); ``actions[t]`` is taken between t and t+1."""

    values: np.ndarray
    actions: tuple[str, ...] | None = None
    latent_states: np.ndarray | None = None
    id: str = "0"

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ValueError("values must be a (T, n) matrix")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "id", str(self.id))
        T = values.shape[0]
        if self.actions is not None:
            acts = tuple(str(a) for a in self.actions)
            if len(acts) != max(T - 1, 0):
                raise ValueError(f"series {self.id}: {len(acts)} actions for {T} samples, expected {T - 1}")
            object.__setattr__(self, "actions", acts)
        if self.latent_states is not None:
            lat = _frozen(self.latent_states, dtype=np.int64)
            if lat.shape != (T,):
                raise ValueError(f"series {self.id}: latent_states length {lat.shape} != {T}")
            object.__setattr__(self, "latent_states", lat)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def write_series_csv(series: Iterable[TimeSeries], path) -> None:
    series = list(series)
    if not series:
        raise ValueError("no series to write")
    n = series[0].dim
    with_actions = all(s.actions is not None for s in series)
    with_latent = all(s.latent_states is not None for s in series)
    header = ["seq_id", "t"] + [f"y{j + 1}" for j in range(n)]
    if with_actions:
        header.append("action")
    if with_latent:
        header.append("latent")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in series:
            if s.dim != n:
                raise ValueError(f"series {s.id} has dimension {s.dim}, expected {n}")
            for t in range(s.length):
                row = [s.id, t] + [repr(float(v)) for v in s.values[t]]
                if with_actions:
                    row.append(s.actions[t] if t < s.length - 1 else "")
                if with_latent:
                    row.append(int(s.latent_states[t]))
                w.writerow(row)


def read_series_csv(path) -> list[TimeSeries]:
    """Read the ``seq_id,t,y1..yn[,action][,latent]`` format, grouping rows by seq_id."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ModelParseError("empty file") from None
        if header[:2] != ["seq_id", "t"]:
            raise ModelParseError("header must start with seq_id,t", line=1)
        ycols = [i for i, h in enumerate(header) if h.startswith("y") and h[1:].isdigit()]
        if not ycols:
            raise ModelParseError("no y columns in header", line=1)
        a_col = header.index("action") if "action" in header else None
        z_col = header.index("latent") if "latent" in header else None
        groups: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid, t = row[0], int(row[1])
                y = [float(row[i]) for i in ycols]
            except (ValueError, IndexError) as exc:
                raise ModelParseError(str(exc), line=lineno) from None
            rows = groups.setdefault(sid, [])
            if t != len(rows):
                raise ModelParseError(f"seq {sid}: expected t={len(rows)}, got {t}", line=lineno)
            act = row[a_col] if a_col is not None else None
            lat = int(row[z_col]) if z_col is not None and row[z_col] != "" else None
            rows.append((y, act, lat))
    out = []
    for sid, rows in groups.items():
        values = np.array([r[0] for r in rows])
        actions = tuple(r[1] for r in rows[:-1]) if a_col is not None else None
        latent = None
        if z_col is not None and all(r[2] is not None for r in rows):
            latent = np.array([r[2] for r in rows])
        out.append(TimeSeries(values, actions=actions, latent_states=latent, id=sid))
    return out


def write_labels_csv(labels: Sequence[tuple[str, Sequence[int], Sequence[str] | None]], path) -> None:
    """Write ``seq_id,t,label[,action]`` rows; each item is (seq_id, labels, actions or None)."""
    with_actions = all(a is not None for _, _, a in labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq_id", "t", "label"] + (["action"] if with_actions else []))
        for sid, lab, acts in labels:
            for t, z in enumerate(lab):
                row = [sid, t, int(z)]
                if with_actions:
                    row.append(acts[t] if t < len(lab) - 1 else "")
                w.writerow(row)


def read_labels_csv(path) -> list[tuple[str, np.ndarray, tuple[str, ...] | None]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:3] != ["seq_id", "t", "label"]:
            raise ModelParseError("header must be seq_id,t,label[,action]", line=1)
        has_action = "action" in reader.fieldnames
        groups: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            rows = groups.setdefault(row["seq_id"], [])
            try:
                t, z = int(row["t"]), int(row["label"])
            except ValueError as exc:
                raise ModelParseError(str(exc), line=lineno) from None
            if t != len(rows):
                raise ModelParseError(f"seq {row['seq_id']}: expected t={len(rows)}, got {t}", line=lineno)
            rows.append((z, row.get("action")))
    return [
        (sid, np.array([r[0] for r in rows], dtype=np.int64),
         tuple(r[1] for r in rows[:-1]) if has_action else None)
        for sid, rows in groups.items()
    ]


# ---------------------------------------------------------------------------
# beliefs and policy trees


def validate_belief(b) -> list[str]:
    b = np.asarray(b, dtype=float)
    out = []
    if b.ndim != 1 or b.size == 0:
        return ["belief must be a non-empty vector"]
    if np.any((b < 0) | (b > 1)):
        out.append("belief entries outside [0, 1]")
    if abs(b.sum() - 1.0) > PROB_TOL:
        out.append(f"belief sums to {b.sum()!r}")
    return out


@dataclass(frozen=True)
class PolicyTree:
    """Depth-H policy: the action after observation history ``h`` (1 <= len(h) <= H) is ``actions[h]``.

    The root is a dummy node with no action; every node below it corresponds
    to one observation and carries the action chosen after seeing it.
    """

    horizon: int
    num_observations: int
    actions: dict = field(repr=False)

    def __post_init__(self):
        expected = num_decision_nodes(self.num_observations, self.horizon)
        if len(self.actions) != expected:
            raise ValueError(f"policy tree has {len(self.actions)} nodes, expected {expected}")
        for h in histories(self.num_observations, self.horizon):
            if h not in self.actions:
                raise ValueError(f"policy tree is missing history {h}")

    def action(self, history: Sequence[int]) -> int:
        return self.actions[tuple(history)]

    def to_dict(self, model: PomdpModel | None = None) -> dict:
        obs_name = (lambda o: model.observations[o]) if model else str
        act_name = (lambda a: model.actions[a]) if model else (lambda a: a)

        def node(h):
            d = {"action": act_name(self.actions[h]) if h else None}
            if len(h) < self.horizon:
                d["children"] = {obs_name(o): node(h + (o,)) for o in range(self.num_observations)}
            return d

        return {"horizon": self.horizon, "root": node(())}

    @classmethod
    def from_dict(cls, doc: dict, model: PomdpModel | None = None) -> "PolicyTree":
        H = int(doc["horizon"])
        obs_index = {o: i for i, o in enumerate(model.observations)} if model else None
        act_index = {a: i for i, a in enumerate(model.actions)} if model else None
        actions = {}
        num_obs = None

        def walk(node, h):
            nonlocal num_obs
            if h:
                a = node["action"]
                actions[h] = act_index[a] if act_index else int(a)
            kids = node.get("children") or {}
            if len(h) < H:
                if num_obs is None:
                    num_obs = len(kids)
                for o, child in kids.items():
                    walk(child, h + (obs_index[o] if obs_index else int(o),))

        walk(doc["root"], ())
        return cls(H, num_obs or 0, actions)

    @classmethod
    def constant(cls, horizon: int, num_observations: int, action: int = 0) -> "PolicyTree":
        return cls(horizon, num_observations,
                   {h: action for h in histories(num_observations, horizon)})


def histories(num_observations: int, horizon: int) -> list[tuple[int, ...]]:
    """All observation histories of length 1..horizon, shortest first, lexicographic within a length."""
    out = []
    for t in range(1, horizon + 1):
        out.extend(itertools.product(range(num_observations), repeat=t))
    return out


def num_decision_nodes(num_observations: int, horizon: int) -> int:
    return sum(num_observations ** t for t in range(1, horizon + 1))
