"""Stationary-ergodic random environments.

The abstract environment is instantiated as a finite irreducible Markov
chain with an explicit stationary law.  A realized environment path selects
one (kernel, potential) pair per time index; backward limits along the path
are truncated at an explicit depth, justified by the exponential forgetting
of the measure flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    FKError,
    FKModel,
    FKStep,
    FunctionVector,
    InvalidModel,
    KernelChoice,
    Potential,
    ProbMeasure,
    StateSpace,
    StochasticKernel,
    cov_operator,
    _phi_raw,
)

BATCH_COUNT = 32  # batch-means default for correlated time averages


class WindowTooShort(FKError):
    """The environment path window does not cover a requested index."""


def stationary_distribution(P: StochasticKernel) -> ProbMeasure:
    """Stationary law of an irreducible kernel, via the linear system."""
    d = P.d
    A = np.vstack([P.rows.T - np.eye(d), np.ones((1, d))])
    b = np.zeros(d + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    return ProbMeasure(pi)


@dataclass(frozen=True)
class EnvironmentChain:
    """Finite environment driving per-step (kernel, potential) pairs."""

    transition: StochasticKernel
    stationary: ProbMeasure
    family: tuple  # one (StochasticKernel, Potential) pair per environment state

    def __post_init__(self) -> None:
        family = tuple(self.family)
        if len(family) != self.transition.d or self.stationary.d != self.transition.d:
            raise InvalidModel("family, transition and stationary law sizes differ")
        dims = set()
        for entry in family:
            M, G = entry
            if not isinstance(M, StochasticKernel) or not isinstance(G, Potential):
                raise InvalidModel("family entries must be (kernel, potential) pairs")
            if M.d != G.d:
                raise InvalidModel("family kernel and potential dimensions differ")
            dims.add(M.d)
        if len(dims) != 1:
            raise InvalidModel("family entries live on different state spaces")
        drift = np.abs(self.stationary.weights @ self.transition.rows - self.stationary.weights)
        if drift.max() > 1e-10:
            raise InvalidModel(
                f"stationary law is not invariant for the transition (drift {drift.max()!r})"
            )
        object.__setattr__(self, "family", family)

    @property
    def env_size(self) -> int:
        return self.transition.d

    @property
    def state_dim(self) -> int:
        return self.family[0][0].d

    def kernel(self, s: int) -> StochasticKernel:
        return self.family[s][0]

    def potential(self, s: int) -> Potential:
        return self.family[s][1]


@dataclass(frozen=True)
class EnvPath:
    """Realized environment states over a finite index window."""

    states: np.ndarray
    lo: int  # absolute index of states[0]

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=np.int64)
        if states.ndim != 1 or states.size == 0:
            raise InvalidModel("environment path must be 1-d and non-empty")
        states.flags.writeable = False
        object.__setattr__(self, "states", states)

    @property
    def hi(self) -> int:
        return self.lo + self.states.size - 1

    def state(self, index: int) -> int:
        if not self.lo <= index <= self.hi:
            raise WindowTooShort(
                f"index {index} outside the path window [{self.lo}, {self.hi}]"
            )
        return int(self.states[index - self.lo])

    def shift(self, k: int) -> "EnvPath":
        """Reindex so that position p on the shifted path is position p+k here."""
        return EnvPath(self.states, self.lo - k)


def sample_env_path(chain: EnvironmentChain, past: int, horizon: int, seed: int) -> EnvPath:
    """Sample a path over [-past, horizon]: stationary start, then forward moves."""
    if past < 0 or horizon < 0:
        raise ValueError("past and horizon must be >= 0")
    gen = np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))
    length = past + horizon + 1
    states = np.empty(length, dtype=np.int64)
    cum0 = np.cumsum(chain.stationary.weights)
    states[0] = min(int(np.searchsorted(cum0, gen.random(), side="left")), chain.env_size - 1)
    cum_rows = np.cumsum(chain.transition.rows, axis=1)
    for i in range(1, length):
        u = gen.random()
        states[i] = min(
            int(np.searchsorted(cum_rows[states[i - 1]], u, side="left")),
            chain.env_size - 1,
        )
    return EnvPath(states, -past)


@dataclass(frozen=True)
class EnvironmentSchedule:
    """Model schedule read off an environment path: step p reweights by the
    potential of the state at p and mutates by the kernel of the state at p+1."""

    chain: EnvironmentChain
    path: EnvPath

    def step(self, p: int) -> FKStep:
        return FKStep(
            self.chain.potential(self.path.state(p)),
            self.chain.kernel(self.path.state(p + 1)),
        )


def env_model(
    chain: EnvironmentChain, path: EnvPath, eta0: Optional[ProbMeasure] = None
) -> FKModel:
    if eta0 is None:
        eta0 = ProbMeasure.uniform(chain.state_dim)
    return FKModel(StateSpace(chain.state_dim), eta0, EnvironmentSchedule(chain, path))


def eta_inf_env(chain: EnvironmentChain, y: EnvPath, position: int, depth: int) -> ProbMeasure:
    """Backward-limit measure at ``position``, truncated ``depth`` steps back.

    Starts from the uniform law at position - depth and runs the path-driven
    flow forward; by exponential forgetting the starting law only moves the
    result by O(exp(-lambda depth)).
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    mu = np.full(chain.state_dim, 1.0 / chain.state_dim)
    for q in range(position - depth, position):
        g = chain.potential(y.state(q)).values
        m = chain.kernel(y.state(q + 1)).rows
        mu = _phi_raw(mu, g, m)
    return ProbMeasure(mu)


def h_env(chain: EnvironmentChain, y: EnvPath, position: int, depth: int) -> FunctionVector:
    """Limiting normalized-semigroup function at ``position`` via its log series.

    Term ``q`` compares the potential mean of the flow started at each point
    mass against the flow started at the backward-limit measure, both driven
    by the path from ``position``; the series is truncated after ``depth``
    terms.
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    d = chain.state_dim
    base = eta_inf_env(chain, y, position, depth)
    stack = np.vstack([np.eye(d), base.weights])
    logs = np.zeros(d)
    for offset in range(depth):
        g = chain.potential(y.state(position + offset)).values
        weighted = stack * g[None, :]
        denoms = weighted.sum(axis=1)
        logs += np.log(denoms[:d]) - math.log(denoms[d])
        if offset + 1 < depth:
            m = chain.kernel(y.state(position + offset + 1)).rows
            stack = (weighted / denoms[:, None]) @ m
    return FunctionVector(np.exp(logs))


def c_of_y(
    chain: EnvironmentChain,
    choice: KernelChoice,
    y: EnvPath,
    position: int,
    depth: int,
) -> float:
    """Per-step variance contribution of the environment at ``position``:
    the conditional covariance of the limiting function against itself,
    under the backward-limit measure one step earlier."""
    mu = eta_inf_env(chain, y, position - 1, depth)
    h = h_env(chain, y, position, depth)
    G = chain.potential(y.state(position - 1))
    M = chain.kernel(y.state(position))
    return cov_operator(choice, mu, G, M, h, h)


def sigma2_env(
    chain: EnvironmentChain,
    choice: KernelChoice,
    horizon: int,
    depth: int,
    seed: int,
) -> tuple:
    """Ergodic time average of the per-step variance contributions.

    Returns ``(estimate, std_error)`` where the standard error comes from
    batch means over 32 consecutive batches.  Deterministic given the seed.
    """
    if horizon < 100:
        raise ValueError(f"horizon must be >= 100, got {horizon}")
    path = sample_env_path(chain, past=depth, horizon=horizon + depth, seed=seed)
    values = np.array(
        [c_of_y(chain, choice, path, p, depth) for p in range(1, horizon + 1)]
    )
    estimate = float(values.mean())
    bounds = [round(b * horizon / BATCH_COUNT) for b in range(BATCH_COUNT + 1)]
    batch_means = np.array(
        [values[bounds[b] : bounds[b + 1]].mean() for b in range(BATCH_COUNT)]
    )
    std_error = float(batch_means.std(ddof=1) / math.sqrt(BATCH_COUNT))
    return estimate, std_error
