"""Application builders: particle absorption and finite hidden Markov models.

Both come with an independent cross-validation oracle that shares no code
with the semigroup machinery: direct killed-chain simulation for absorption
survival probabilities, and the classical scaled forward recursion for HMM
marginal likelihoods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    FKModel,
    FKStep,
    InvalidModel,
    Potential,
    ProbMeasure,
    StochasticKernel,
    homogeneous_model,
    explicit_model,
    total_variation,
)
from .oracle import fixed_point_eta_inf, propagate
from .randenv import EnvironmentChain, stationary_distribution


@dataclass(frozen=True)
class AbsorptionModel:
    """Killed Markov chain: at each time the particle survives with
    probability G(x), strictly inside (0, 1)."""

    M: StochasticKernel
    G: Potential
    eta0: ProbMeasure

    def __post_init__(self) -> None:
        if not (self.M.d == self.G.d == self.eta0.d):
            raise InvalidModel("absorption model dimensions differ")
        if self.G.values.min() <= 0.0 or self.G.values.max() >= 1.0:
            raise InvalidModel(
                "survival probabilities must lie strictly inside (0, 1), "
                f"got range [{self.G.values.min()!r}, {self.G.values.max()!r}]"
            )

    def to_fk(self) -> FKModel:
        return homogeneous_model(self.M, self.G, self.eta0)


def absorption_build(M: StochasticKernel, G: Potential, eta0: ProbMeasure) -> FKModel:
    """Homogeneous model whose normalizing constant at time n is P(T >= n)."""
    return AbsorptionModel(M, G, eta0).to_fk()


def survival_mc_oracle(
    model: AbsorptionModel, n: int, trials: int, seed: int
) -> tuple:
    """Brute-force survival probability P(T >= n) by direct simulation.

    Simulates the killed chain itself (survive each step with probability
    G at the current site, then move); shares nothing with the semigroup
    code paths.  Returns ``(estimate, binomial standard error)``.
    """
    if trials < 100:
        raise ValueError(f"need at least 100 trials, got {trials}")
    if n < 0:
        raise ValueError(f"step count must be >= 0, got {n}")
    gen = np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))
    cum0 = np.cumsum(model.eta0.weights)
    states = np.minimum(
        np.searchsorted(cum0, gen.random(trials), side="left"), model.M.d - 1
    )
    cum_rows = np.cumsum(model.M.rows, axis=1)
    alive = np.ones(trials, dtype=bool)
    for _ in range(n):
        alive &= gen.random(trials) < model.G.values[states]
        moves = gen.random(trials)
        states = np.minimum(
            (cum_rows[states] < moves[:, None]).sum(axis=1), model.M.d - 1
        )
    estimate = float(alive.mean())
    std_error = math.sqrt(estimate * (1.0 - estimate) / trials)
    return estimate, std_error


def yaglom_check(model: AbsorptionModel, n: int) -> float:
    """Total-variation distance between the conditioned law at time n and
    the quasi-stationary (Yaglom) measure."""
    fk = model.to_fk()
    eta_n = propagate(fk, n).etas[n]
    return total_variation(eta_n, fixed_point_eta_inf(fk))


@dataclass(frozen=True)
class HmmParams:
    """Finite HMM: hidden transition kernel, row-stochastic emission matrix
    over a finite symbol alphabet, and the initial hidden law."""

    transition: StochasticKernel
    emission: np.ndarray
    initial: ProbMeasure

    def __post_init__(self) -> None:
        e = np.asarray(self.emission, dtype=float)
        if e.ndim != 2 or e.shape[0] != self.transition.d:
            raise InvalidModel(
                f"emission matrix must have one row per hidden state, got shape {e.shape}"
            )
        if not np.all(np.isfinite(e)) or np.any(e < 0.0):
            raise InvalidModel("emission probabilities must be finite and non-negative")
        sums = e.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise InvalidModel("emission rows must sum to 1")
        if self.initial.d != self.transition.d:
            raise InvalidModel("initial law does not match the hidden state count")
        e = e / sums[:, None]
        e.flags.writeable = False
        object.__setattr__(self, "emission", e)

    @property
    def hidden_count(self) -> int:
        return self.transition.d

    @property
    def symbol_count(self) -> int:
        return self.emission.shape[1]


def hmm_generate(params: HmmParams, length: int, seed: int) -> tuple:
    """Sample (hidden states, observations) forward; deterministic given seed."""
    if length < 0:
        raise ValueError(f"length must be >= 0, got {length}")
    gen = np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))
    hidden = np.empty(length, dtype=np.int64)
    observed = np.empty(length, dtype=np.int64)
    cum_init = np.cumsum(params.initial.weights)
    cum_trans = np.cumsum(params.transition.rows, axis=1)
    cum_emit = np.cumsum(params.emission, axis=1)
    x = min(int(np.searchsorted(cum_init, gen.random(), side="left")), params.hidden_count - 1)
    for t in range(length):
        hidden[t] = x
        observed[t] = min(
            int(np.searchsorted(cum_emit[x], gen.random(), side="left")),
            params.symbol_count - 1,
        )
        x = min(
            int(np.searchsorted(cum_trans[x], gen.random(), side="left")),
            params.hidden_count - 1,
        )
    return hidden, observed


def _check_symbols(params: HmmParams, observations: Sequence[int]) -> np.ndarray:
    obs = np.asarray(observations, dtype=np.int64)
    if obs.ndim != 1:
        raise InvalidModel("observations must be a 1-d integer sequence")
    if obs.size and (obs.min() < 0 or obs.max() >= params.symbol_count):
        raise InvalidModel(
            f"observation symbol out of range [0, {params.symbol_count - 1}]"
        )
    return obs


def hmm_build(params: HmmParams, observations: Sequence[int]) -> FKModel:
    """Explicit-schedule model whose normalizing constant after all steps is
    the marginal likelihood of the observation sequence.

    Every emission likelihood along the sequence must be strictly positive;
    a symbol with a zero likelihood under some hidden state breaks the
    positive-potential requirement and is rejected.
    """
    obs = _check_symbols(params, observations)
    if obs.size == 0:
        raise InvalidModel("need at least one observation to build a model")
    steps = []
    for t, y in enumerate(obs):
        column = params.emission[:, y]
        if column.min() <= 0.0:
            raise InvalidModel(
                f"emission likelihood of symbol {int(y)} at position {t} vanishes "
                "for some hidden state"
            )
        steps.append(FKStep(Potential(column), params.transition))
    return explicit_model(steps, params.initial)


def forward_likelihood(params: HmmParams, observations: Sequence[int]) -> float:
    """Log marginal likelihood by the classical scaled forward recursion.

    Independent of the measure-flow code on purpose: plain array updates of
    the joint filter with per-step renormalization.
    """
    obs = _check_symbols(params, observations)
    alpha = params.initial.weights.copy()
    total = 0.0
    for t, y in enumerate(obs):
        alpha = alpha * params.emission[:, y]
        c = float(alpha.sum())
        if c <= 0.0:
            raise InvalidModel(f"observation sequence has zero probability at position {t}")
        total += math.log(c)
        alpha = (alpha / c) @ params.transition.rows
    return total


def hmm_filter(params: HmmParams, observations: Sequence[int]) -> ProbMeasure:
    """Predictive filter law of the hidden state after the observations,
    by the same independent forward recursion."""
    obs = _check_symbols(params, observations)
    alpha = params.initial.weights.copy()
    for t, y in enumerate(obs):
        alpha = alpha * params.emission[:, y]
        c = float(alpha.sum())
        if c <= 0.0:
            raise InvalidModel(f"observation sequence has zero probability at position {t}")
        alpha = (alpha / c) @ params.transition.rows
    return ProbMeasure(alpha)


def hmm_env_chain(params: HmmParams) -> EnvironmentChain:
    """Environment chain driven by the observable process, approximated by
    its own finite Markov chain on symbols.

    Environment state s selects the hidden transition kernel together with
    the emission column of s as the potential; the symbol-to-symbol
    transition is the one-step law of consecutive observations under the
    stationary hidden chain.  Emission columns must be strictly positive.
    """
    e = params.emission
    if e.min() <= 0.0:
        raise InvalidModel("environment family needs strictly positive emission columns")
    pi = stationary_distribution(params.transition).weights
    # joint(s, s') = sum_{x, x'} pi(x) e(x, s) M(x, x') e(x', s')
    joint = (e * pi[:, None]).T @ params.transition.rows @ e
    symbol_law = joint.sum(axis=1)
    env_transition = StochasticKernel(joint / symbol_law[:, None])
    family = tuple(
        (params.transition, Potential(e[:, s])) for s in range(params.symbol_count)
    )
    return EnvironmentChain(
        transition=env_transition,
        stationary=stationary_distribution(env_transition),
        family=family,
    )
