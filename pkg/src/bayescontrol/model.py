"""Problem definition, derived matrices and Bayes updates.

The process has one in-control state (0) and ``N`` out-of-control states,
each reached from state 0 at exponential rate ``lambda_i``.  Observations
are taken every ``h`` time units; the belief vector over the ``N + 1``
states is updated after each sample.

Observation densities are ``normal(mean, variance)``; the second parameter
is always the *variance*.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.linalg import expm

DENSITY_FLOOR = 1e-300
SIMPLEX_TOL = 1e-12


class ValidationError(ValueError):
    """Raised when a problem definition violates an invariant."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class DegenerateModelError(ValidationError):
    pass


class UnderflowError(ArithmeticError):
    """Predictive density vanished; the observation is outside every support."""


class Action(enum.IntEnum):
    CONTINUE = 0
    STOP = 1


class Sufficiency(str, enum.Enum):
    STOP = "Stop"
    CONTINUE = "Continue"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class NormalDensity:
    mean: float
    variance: float

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        z = (y - self.mean) / self.sd
        out = np.exp(-0.5 * z * z) / (self.sd * math.sqrt(2.0 * math.pi))
        return np.where(out < DENSITY_FLOOR, 0.0, out)

    def support(self, n_sigmas: float) -> tuple[float, float]:
        return self.mean - n_sigmas * self.sd, self.mean + n_sigmas * self.sd

    def from_standard(self, z):
        """Map standard-normal draws onto this density."""
        return self.mean + self.sd * np.asarray(z, dtype=float)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "variance": self.variance}


@dataclass(frozen=True)
class ModelSpec:
    """User-level problem definition.

    ``term_costs`` has ``N + 1`` entries (``T_0`` is the false-alarm
    penalty); ``oc_costs`` and ``rates`` have ``N`` entries, the in-control
    cost ``c_0`` being zero.
    """

    rates: tuple[float, ...]
    oc_costs: tuple[float, ...]
    term_costs: tuple[float, ...]
    reward_rate: float
    sample_cost: float
    interval: float
    densities: tuple[NormalDensity, ...]

    def __post_init__(self):
        for name in ("rates", "oc_costs", "term_costs", "densities"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("rates", "oc_costs", "term_costs"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        for name in ("reward_rate", "sample_cost", "interval"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def n_causes(self) -> int:
        return len(self.rates)

    @classmethod
    def from_shifts(cls, *, rates, oc_costs, term_costs, reward_rate, sample_cost,
                    interval, deltas, mu=0.0, sigma=1.0) -> "ModelSpec":
        """Normal observations with means ``mu + delta_i * sigma`` and common variance."""
        shifts = (0.0,) + tuple(deltas)
        dens = tuple(NormalDensity(mu + s * sigma, sigma * sigma) for s in shifts)
        return cls(rates, oc_costs, term_costs, reward_rate, sample_cost, interval, dens)

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "rates": list(self.rates),
            "oc_costs": list(self.oc_costs),
            "term_costs": list(self.term_costs),
            "reward_rate": self.reward_rate,
            "sample_cost": self.sample_cost,
            "interval": self.interval,
            "densities": [d.to_dict() for d in self.densities],
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ModelSpec":
        return spec_from_dict(doc)


_SPEC_KEYS = {"rates", "oc_costs", "term_costs", "reward_rate", "sample_cost",
              "interval", "densities", "mu", "sigma"}
_REQUIRED_KEYS = _SPEC_KEYS - {"mu", "sigma"}


def _number_list(doc, key, length=None) -> list[float]:
    value = doc[key]
    if not isinstance(value, (list, tuple)):
        raise ValidationError(key, "expected an array")
    try:
        out = [float(v) for v in value]
    except (TypeError, ValueError):
        raise ValidationError(key, "expected numbers") from None
    if length is not None and len(out) != length:
        raise ValidationError(key, f"expected {length} entries, got {len(out)}")
    return out


def _number(doc, key) -> float:
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(key, "expected a number")
    return float(value)


def spec_from_dict(doc: Mapping[str, Any]) -> ModelSpec:
    """Parse a JSON-style model document; unknown keys are rejected."""
    if not isinstance(doc, Mapping):
        raise ValidationError("model", "expected an object")
    unknown = set(doc) - _SPEC_KEYS
    if unknown:
        raise ValidationError(sorted(unknown)[0], "unknown key")
    missing = _REQUIRED_KEYS - set(doc)
    if missing:
        raise ValidationError(sorted(missing)[0], "missing key")
    rates = _number_list(doc, "rates")
    n = len(rates)
    oc = _number_list(doc, "oc_costs", n)
    term = _number_list(doc, "term_costs", n + 1)
    raw = doc["densities"]
    if not isinstance(raw, (list, tuple)) or len(raw) != n + 1:
        raise ValidationError("densities", f"expected {n + 1} density descriptors")
    mu = float(doc.get("mu", 0.0))
    sigma = float(doc.get("sigma", 1.0))
    dens = []
    for j, d in enumerate(raw):
        if not isinstance(d, Mapping):
            raise ValidationError(f"densities[{j}]", "expected an object")
        keys = set(d)
        if keys == {"mean", "variance"}:
            dens.append(NormalDensity(_number(d, "mean"), _number(d, "variance")))
        elif keys == {"delta"}:
            dens.append(NormalDensity(mu + _number(d, "delta") * sigma, sigma * sigma))
        else:
            raise ValidationError(f"densities[{j}]",
                                  "expected {mean, variance} or {delta}")
    return ModelSpec(rates, oc, term, _number(doc, "reward_rate"),
                     _number(doc, "sample_cost"), _number(doc, "interval"), dens)


def sojourn_fraction(x):
    """Expected fraction ``1 - (1 - e^-x)/x`` of an interval spent after an exponential event.

    ``x`` is ``lambda * h``.  A series is used for small ``x`` where the
    direct form cancels.
    """
    x = np.asarray(x, dtype=float)
    small = x < 1e-4
    xs = np.where(small, 1.0, x)
    direct = 1.0 - (-np.expm1(-xs)) / xs
    series = x / 2 - x ** 2 / 6 + x ** 3 / 24
    out = np.where(small, series, direct)
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class Model:
    """Validated spec plus all derived quantities.

    ``structured`` is false when inter-transition rates between
    out-of-control states are present; the closed-form bounds (``R0``,
    ``U``) then no longer apply and ``do_not_initiate`` is never set.
    """

    spec: ModelSpec
    P: np.ndarray
    Q: np.ndarray
    gamma: float
    R0: float
    U: np.ndarray
    lambda_vec: np.ndarray
    c: np.ndarray
    T: np.ndarray
    do_not_initiate: bool
    inter_rates: np.ndarray = field(repr=False)
    structured: bool = True

    @property
    def n_causes(self) -> int:
        return self.spec.n_causes

    @property
    def n_states(self) -> int:
        return self.spec.n_causes + 1

    @property
    def h(self) -> float:
        return self.spec.interval

    def densities_at(self, y) -> np.ndarray:
        """Observation densities ``F(y)``, shape ``y.shape + (N + 1,)``."""
        y = np.asarray(y, dtype=float)
        return np.stack([d.pdf(y) for d in self.spec.densities], axis=-1)

    def stop_value(self, beliefs) -> np.ndarray:
        return -(np.asarray(beliefs, dtype=float) @ self.T)

    def upper_value(self, beliefs) -> np.ndarray:
        return -(np.asarray(beliefs, dtype=float) @ self.U)

    def observation_range(self, n_sigmas: float) -> tuple[float, float]:
        means = [d.mean for d in self.spec.densities]
        sd_max = max(d.sd for d in self.spec.densities)
        return min(means) - n_sigmas * sd_max, max(means) + n_sigmas * sd_max


def _check_spec(spec: ModelSpec) -> None:
    n = spec.n_causes
    if n < 1:
        raise ValidationError("rates", "at least one assignable cause is required")
    if len(spec.oc_costs) != n:
        raise ValidationError("oc_costs", f"expected {n} entries")
    if len(spec.term_costs) != n + 1:
        raise ValidationError("term_costs", f"expected {n + 1} entries")
    if len(spec.densities) != n + 1:
        raise ValidationError("densities", f"expected {n + 1} entries")
    values = list(spec.rates) + list(spec.oc_costs) + list(spec.term_costs) + [
        spec.reward_rate, spec.sample_cost, spec.interval]
    if not all(math.isfinite(v) for v in values):
        raise ValidationError("spec", "all numeric fields must be finite")
    if any(r < 0 for r in spec.rates):
        raise ValidationError("rates", "rates must be positive")
    if sum(spec.rates) == 0:
        raise DegenerateModelError("rates", "total rate is zero; the process never leaves control")
    if any(r <= 0 for r in spec.rates):
        raise ValidationError("rates", "rates must be positive")
    if spec.interval <= 0:
        raise ValidationError("interval", "must be positive")
    if spec.reward_rate <= 0:
        raise ValidationError("reward_rate", "must be positive")
    if spec.sample_cost < 0:
        raise ValidationError("sample_cost", "must be nonnegative")
    if any(t < 0 for t in spec.term_costs):
        raise ValidationError("term_costs", "must be nonnegative")
    for i, c in enumerate(spec.oc_costs, start=1):
        if not c > spec.reward_rate:
            raise ValidationError("oc_costs",
                                  f"c_{i}={c} must exceed the reward rate {spec.reward_rate}")
    for j, d in enumerate(spec.densities):
        if not isinstance(d, NormalDensity):
            raise ValidationError(f"densities[{j}]", "unsupported density descriptor")
        if not (d.variance > 0 and math.isfinite(d.variance) and math.isfinite(d.mean)):
            raise ValidationError(f"densities[{j}]", "variance must be positive")


def _generator(rates: np.ndarray, inter: np.ndarray) -> np.ndarray:
    n = len(rates)
    G = np.zeros((n + 1, n + 1))
    G[0, 1:] = rates
    G[1:, 1:] = inter
    G[np.diag_indices(n + 1)] = 0.0
    G[np.diag_indices(n + 1)] = -G.sum(axis=1)
    return G


def _occupancy_matrices(G: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """``P = e^{Gh}`` and ``Q = (1/h) int_0^h e^{Gs} ds`` via one block exponential."""
    m = G.shape[0]
    block = np.zeros((2 * m, 2 * m))
    block[:m, :m] = G
    block[:m, m:] = np.eye(m)
    E = expm(block * h)
    return E[:m, :m], E[:m, m:] / h


def validate_and_build(spec: ModelSpec, inter_rates=None) -> Model:
    """Validate ``spec`` and compute ``P``, ``Q``, ``gamma``, ``R0`` and ``U``.

    ``inter_rates`` (an ``N x N`` matrix of rates between out-of-control
    states) builds the generalized, non-absorbing model used to evaluate
    the true process of a mismatch experiment.
    """
    _check_spec(spec)
    n = spec.n_causes
    lam_i = np.asarray(spec.rates, dtype=float)
    lam = float(lam_i.sum())
    h = spec.interval
    c = np.concatenate([[0.0], spec.oc_costs])
    T = np.asarray(spec.term_costs, dtype=float)
    lambda_vec = np.concatenate([[0.0], lam_i / lam])

    decay = math.exp(-lam * h)
    jump = -math.expm1(-lam * h)
    gamma = sojourn_fraction(lam * h)
    R0 = (gamma * float(c @ lambda_vec) * h - spec.reward_rate * h + spec.sample_cost) / jump \
        + float(T @ lambda_vec)
    U = T.copy()
    U[0] = R0

    if inter_rates is None:
        inter = np.zeros((n, n))
    else:
        inter = np.array(inter_rates, dtype=float)
        if inter.shape != (n, n):
            raise ValidationError("inter_rates", f"expected a {n}x{n} matrix")
        if not np.all(np.isfinite(inter)) or np.any(inter < 0):
            raise ValidationError("inter_rates", "entries must be finite and nonnegative")
        if np.any(np.diag(inter) != 0):
            raise ValidationError("inter_rates", "diagonal must be zero")
    structured = not np.any(inter)

    if structured:
        P = np.eye(n + 1)
        P[0, 0] = decay
        P[0, 1:] = jump * lam_i / lam
        Q = np.eye(n + 1)
        Q[0, 0] = 1.0 - gamma
        Q[0, 1:] = lam_i * gamma / lam
    else:
        P, Q = _occupancy_matrices(_generator(lam_i, inter), h)
        P = np.clip(P, 0.0, None)
        P /= P.sum(axis=1, keepdims=True)

    for a in (P, Q, U):
        a.setflags(write=False)
    return Model(spec=spec, P=P, Q=Q, gamma=float(gamma), R0=float(R0), U=U,
                 lambda_vec=lambda_vec, c=c, T=T,
                 do_not_initiate=bool(structured and R0 > T[0]),
                 inter_rates=inter, structured=structured)


def check_belief(belief, tol: float = SIMPLEX_TOL) -> np.ndarray:
    b = np.asarray(belief, dtype=float)
    if np.any(b < -tol) or np.any(np.abs(b.sum(axis=-1) - 1.0) > tol):
        raise ValidationError("belief", "not a probability vector")
    return b


def predictive_density(model: Model, belief, y):
    """``Pi P F(y)``: density of the next observation given the current belief.

    Broadcasts over leading dimensions of ``belief`` and over ``y``.
    """
    prior = np.asarray(belief, dtype=float) @ model.P
    F = model.densities_at(y)
    return np.sum(prior * F, axis=-1)


def bayes_update(model: Model, belief, y):
    """Posterior belief after observing ``y`` one interval later.

    Vectorized: ``belief`` of shape ``(..., N+1)`` with ``y`` broadcastable
    to ``belief.shape[:-1]``.
    """
    prior = np.asarray(belief, dtype=float) @ model.P
    F = model.densities_at(y)
    joint = prior * F
    den = np.einsum("...j,...j->...", prior, F)
    if np.any(den <= 0):
        raise UnderflowError(
            "predictive density is numerically zero for this observation; "
            "evaluate the update in log space for observations this extreme")
    return joint / den[..., None]


def sufficient_action(model: Model, belief) -> Sufficiency:
    """Closed-form sufficient conditions for stopping or continuing."""
    b = np.asarray(belief, dtype=float)
    h, d, r = model.h, model.spec.sample_cost, model.spec.reward_rate
    base = model.Q @ model.c * h - model.T
    stop_score = float(b @ (base + model.P @ model.U)) + d
    cont_score = float(b @ (base + model.P @ model.T)) + d
    if stop_score > r * h:
        return Sufficiency.STOP
    if cont_score < r * h:
        return Sufficiency.CONTINUE
    return Sufficiency.UNKNOWN


def sufficient_scores(model: Model, beliefs) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (stop, continue) criterion values; compare against ``r h``."""
    b = np.asarray(beliefs, dtype=float)
    base = model.Q @ model.c * model.h - model.T
    d = model.spec.sample_cost
    return b @ (base + model.P @ model.U) + d, b @ (base + model.P @ model.T) + d
