"""Finite-state Feynman-Kac primitives.

The state space is ``{0, ..., d-1}``.  Probability measures, potentials and
test functions are dense vectors; Markov kernels are row-stochastic matrices.
A model is an initial law together with a schedule of selection/mutation
steps: step ``p`` reweights the current measure by the potential ``G_p`` and
then moves it through the Markov kernel ``M_{p+1}``.

Everything in this module is pure.  Arrays are copied at construction time
and marked read-only, so values are safe to share across threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

# Probability vectors and kernel rows are renormalized at construction and
# then obey the 1e-12 tolerance; inputs further off than 1e-9 are rejected.
PROB_ATOL = 1e-12
INPUT_ATOL = 1e-9


class FKError(Exception):
    """Base class for all model errors raised by this package."""


class DimensionMismatch(FKError):
    pass


class InvalidModel(FKError):
    pass


class ScheduleExhausted(FKError):
    pass


class ConvergenceError(FKError):
    pass


class ConsistencyError(FKError):
    """Two supposedly equivalent computation routes disagreed."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.flags.writeable = False
    return out


ArrayLike = Union[np.ndarray, Sequence[float], "FunctionVector"]


def as_values(f: ArrayLike) -> np.ndarray:
    """Coerce a function on the state space to a 1-d float array."""
    if isinstance(f, FunctionVector):
        return f.values
    arr = np.asarray(f, dtype=float)
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a 1-d function vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidModel("function vector has non-finite entries")
    return arr


@dataclass(frozen=True)
class StateSpace:
    """Finite state space {0, ..., size-1}."""

    size: int

    def __post_init__(self) -> None:
        if self.size < 1:
            raise InvalidModel(f"state space needs at least one state, got {self.size}")


@dataclass(frozen=True)
class ProbMeasure:
    """Probability vector over the state space."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise DimensionMismatch("probability vector must be 1-d and non-empty")
        if not np.all(np.isfinite(w)):
            raise InvalidModel("probability vector has non-finite entries")
        if np.any(w < -INPUT_ATOL):
            raise InvalidModel(f"negative probability entry {w.min()!r}")
        total = float(w.sum())
        if abs(total - 1.0) > INPUT_ATOL:
            raise InvalidModel(f"probability vector sums to {total!r}, not 1")
        w = np.clip(w, 0.0, None)
        object.__setattr__(self, "weights", _frozen(w / w.sum()))

    @property
    def d(self) -> int:
        return self.weights.size

    @classmethod
    def uniform(cls, d: int) -> "ProbMeasure":
        return cls(np.full(d, 1.0 / d))

    @classmethod
    def point(cls, d: int, x: int) -> "ProbMeasure":
        w = np.zeros(d)
        w[x] = 1.0
        return cls(w)

    def mean(self, f: ArrayLike) -> float:
        """Integral of ``f`` against this measure."""
        values = as_values(f)
        if values.size != self.d:
            raise DimensionMismatch("function and measure dimensions differ")
        return float(self.weights @ values)


@dataclass(frozen=True)
class FunctionVector:
    """Bounded function on the state space, stored as its value vector."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise DimensionMismatch("function vector must be 1-d and non-empty")
        if not np.all(np.isfinite(v)):
            raise InvalidModel("function vector has non-finite entries")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def d(self) -> int:
        return self.values.size

    @property
    def oscillation(self) -> float:
        return float(self.values.max() - self.values.min())

    @classmethod
    def ones(cls, d: int) -> "FunctionVector":
        return cls(np.ones(d))

    @classmethod
    def indicator(cls, d: int, x: int) -> "FunctionVector":
        v = np.zeros(d)
        v[x] = 1.0
        return cls(v)


@dataclass(frozen=True)
class StochasticKernel:
    """Row-stochastic d x d transition matrix."""

    rows: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.rows, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1] or r.shape[0] == 0:
            raise DimensionMismatch(f"kernel must be a square matrix, got shape {r.shape}")
        if not np.all(np.isfinite(r)):
            raise InvalidModel("kernel has non-finite entries")
        if np.any(r < -INPUT_ATOL):
            raise InvalidModel(f"negative kernel entry {r.min()!r}")
        sums = r.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > INPUT_ATOL):
            raise InvalidModel(f"kernel row sums deviate from 1 by up to {np.abs(sums - 1.0).max()!r}")
        r = np.clip(r, 0.0, None)
        object.__setattr__(self, "rows", _frozen(r / r.sum(axis=1, keepdims=True)))

    @property
    def d(self) -> int:
        return self.rows.shape[0]

    @classmethod
    def identity(cls, d: int) -> "StochasticKernel":
        return cls(np.eye(d))

    def apply(self, f: ArrayLike) -> np.ndarray:
        """Action on functions: (Kf)(x) = sum_y K(x, y) f(y)."""
        return self.rows @ as_values(f)

    def row(self, x: int) -> ProbMeasure:
        return ProbMeasure(self.rows[x])


@dataclass(frozen=True)
class Potential:
    """Strictly positive weight function on the state space."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise DimensionMismatch("potential must be 1-d and non-empty")
        if not np.all(np.isfinite(v)):
            raise InvalidModel("potential has non-finite entries")
        if v.min() <= 0.0:
            raise InvalidModel(f"potential must be strictly positive, min entry is {v.min()!r}")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def d(self) -> int:
        return self.values.size

    @property
    def ratio(self) -> float:
        """sup/inf ratio of the potential; must stay bounded across steps."""
        return float(self.values.max() / self.values.min())


class KernelChoice(enum.Enum):
    """Mean-field transition used by the particle system.

    MULTINOMIAL draws every particle from the reweighted, mutated empirical
    measure.  TRANSPORT keeps a particle with probability equal to its
    potential value (which therefore must be <= 1) and resamples it
    otherwise, then mutates.
    """

    MULTINOMIAL = "multinomial"
    TRANSPORT = "transport"

    @classmethod
    def parse(cls, name: str) -> "KernelChoice":
        try:
            return cls(name.lower())
        except ValueError:
            raise InvalidModel(f"unknown kernel choice {name!r}") from None


@dataclass(frozen=True)
class FKStep:
    """One schedule entry: reweight by ``G``, then move through ``M``."""

    G: Potential
    M: StochasticKernel

    def __post_init__(self) -> None:
        if self.G.d != self.M.d:
            raise DimensionMismatch("potential and kernel dimensions differ")


@dataclass(frozen=True)
class HomogeneousSchedule:
    """Same (G, M) pair at every step."""

    M: StochasticKernel
    G: Potential

    def __post_init__(self) -> None:
        if self.G.d != self.M.d:
            raise DimensionMismatch("potential and kernel dimensions differ")

    def step(self, p: int) -> FKStep:
        if p < 0:
            raise ScheduleExhausted(f"step index {p} is negative")
        return FKStep(self.G, self.M)


@dataclass(frozen=True)
class ExplicitSchedule:
    """Finite list of (G, M) steps."""

    steps: tuple

    def __post_init__(self) -> None:
        steps = tuple(self.steps)
        if not all(isinstance(s, FKStep) for s in steps):
            raise InvalidModel("explicit schedule entries must be FKStep values")
        object.__setattr__(self, "steps", steps)

    def step(self, p: int) -> FKStep:
        if not 0 <= p < len(self.steps):
            raise ScheduleExhausted(f"schedule has {len(self.steps)} steps, step {p} requested")
        return self.steps[p]


@dataclass(frozen=True)
class FKModel:
    """Initial law plus a schedule of selection/mutation steps."""

    space: StateSpace
    eta0: ProbMeasure
    schedule: object  # anything with .step(p) -> FKStep

    def __post_init__(self) -> None:
        if self.eta0.d != self.space.size:
            raise DimensionMismatch("initial law does not match the state space size")

    @property
    def d(self) -> int:
        return self.space.size

    @property
    def homogeneous(self) -> bool:
        return isinstance(self.schedule, HomogeneousSchedule)

    def step(self, p: int) -> FKStep:
        s = self.schedule.step(p)
        if s.G.d != self.d:
            raise DimensionMismatch(f"schedule step {p} has dimension {s.G.d}, model has {self.d}")
        return s


def homogeneous_model(M: StochasticKernel, G: Potential, eta0: ProbMeasure) -> FKModel:
    return FKModel(StateSpace(M.d), eta0, HomogeneousSchedule(M, G))


def explicit_model(steps: Sequence[FKStep], eta0: ProbMeasure) -> FKModel:
    steps = tuple(steps)
    if not steps:
        raise InvalidModel("explicit schedule needs at least one step")
    return FKModel(StateSpace(steps[0].G.d), eta0, ExplicitSchedule(steps))


@dataclass(frozen=True)
class ModelBounds:
    """Fitted contraction diagnostics of a model.

    ``g`` is the largest potential sup/inf ratio seen along the schedule;
    ``a_hat`` and ``lambda_hat`` come from a least-squares fit of the
    Dobrushin coefficients ``beta(P_{0,n})`` against ``n`` on a log scale;
    ``b_bound = exp(a_hat (g - 1) / (1 - exp(-lambda_hat)))`` dominates the
    normalized-semigroup ratio profile when the geometric decay holds.
    These are diagnostics, not assumptions.
    """

    g: float
    a_hat: float
    lambda_hat: float
    b_bound: float
    beta_profile: tuple
    g_profile: tuple
    g_within_bound: bool

    def __post_init__(self) -> None:
        if self.g < 1.0:
            raise InvalidModel(f"potential ratio bound must be >= 1, got {self.g!r}")


def _check_same_d(*dims: int) -> int:
    d = dims[0]
    for other in dims[1:]:
        if other != d:
            raise DimensionMismatch(f"dimension mismatch: {dims}")
    return d


def total_variation(mu: ProbMeasure, nu: ProbMeasure) -> float:
    _check_same_d(mu.d, nu.d)
    return 0.5 * float(np.abs(mu.weights - nu.weights).sum())


def oscillation(f: ArrayLike) -> float:
    v = as_values(f)
    return float(v.max() - v.min())


# Raw-array work-horses shared by the public operations and the particle
# engine; inputs are assumed validated by the callers.

def _bg_raw(mu_w: np.ndarray, g_v: np.ndarray) -> np.ndarray:
    w = mu_w * g_v
    return w / w.sum()


def _phi_raw(mu_w: np.ndarray, g_v: np.ndarray, m_r: np.ndarray) -> np.ndarray:
    return _bg_raw(mu_w, g_v) @ m_r


def _kernel_rows_raw(
    choice: KernelChoice, mu_w: np.ndarray, g_v: np.ndarray, m_r: np.ndarray
) -> np.ndarray:
    phi = _phi_raw(mu_w, g_v, m_r)
    if choice is KernelChoice.MULTINOMIAL:
        return np.tile(phi, (m_r.shape[0], 1))
    if g_v.max() > 1.0:
        raise InvalidModel(
            f"transport kernel needs potential values <= 1, max entry is {g_v.max()!r}"
        )
    return g_v[:, None] * m_r + (1.0 - g_v)[:, None] * phi[None, :]


def boltzmann_gibbs(mu: ProbMeasure, G: Potential) -> ProbMeasure:
    """Reweight ``mu`` by ``G`` and renormalize."""
    _check_same_d(mu.d, G.d)
    return ProbMeasure(_bg_raw(mu.weights, G.values))


def phi_step(mu: ProbMeasure, G: Potential, M: StochasticKernel) -> ProbMeasure:
    """One measure-flow step: Boltzmann-Gibbs reweighting followed by ``M``."""
    _check_same_d(mu.d, G.d, M.d)
    return ProbMeasure(_phi_raw(mu.weights, G.values, M.rows))


def kernel_row(
    choice: KernelChoice, mu: ProbMeasure, G: Potential, M: StochasticKernel, x: int
) -> ProbMeasure:
    """Transition law of one particle at site ``x`` given empirical measure ``mu``.

    For MULTINOMIAL the row does not depend on ``x``; for TRANSPORT the row is
    ``G(x) M(x, .) + (1 - G(x)) (phi_step(mu, G, M))(.)``.  Mixing the rows
    with weights ``mu`` recovers ``phi_step(mu, G, M)`` for both choices.
    """
    d = _check_same_d(mu.d, G.d, M.d)
    if not 0 <= x < d:
        raise DimensionMismatch(f"state index {x} out of range for d={d}")
    return ProbMeasure(_kernel_rows_raw(choice, mu.weights, G.values, M.rows)[x])


def cov_operator(
    choice: KernelChoice,
    mu: ProbMeasure,
    G: Potential,
    M: StochasticKernel,
    f1: ArrayLike,
    f2: ArrayLike,
) -> float:
    """Conditional covariance of the one-step particle fluctuation field.

    Returns ``mu[K(f1 f2) - K(f1) K(f2)]`` where ``K`` collects the rows of
    the chosen mean-field kernel.  For MULTINOMIAL this is the covariance of
    ``(f1, f2)`` under ``phi_step(mu, G, M)``.
    """
    v1 = as_values(f1)
    v2 = as_values(f2)
    _check_same_d(mu.d, G.d, M.d, v1.size, v2.size)
    rows = _kernel_rows_raw(choice, mu.weights, G.values, M.rows)
    k1 = rows @ v1
    k2 = rows @ v2
    k12 = rows @ (v1 * v2)
    return float(mu.weights @ (k12 - k1 * k2))


def dobrushin(P: StochasticKernel) -> float:
    """Dobrushin contraction coefficient: max total-variation distance between rows."""
    diffs = np.abs(P.rows[:, None, :] - P.rows[None, :, :]).sum(axis=2)
    return 0.5 * float(diffs.max())
