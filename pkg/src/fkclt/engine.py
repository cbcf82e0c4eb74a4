"""Mean-field particle simulation of finite-state models.

Each particle moves independently, conditionally on the previous
generation, by a draw from its own kernel row evaluated at the current
empirical measure.  Categorical draws use inverse-CDF lookup on a
cumulative-weights array with one uniform per draw; the empirical measure
is recomputed from state counts at every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import (
    ArrayLike,
    DimensionMismatch,
    FKModel,
    InvalidModel,
    KernelChoice,
    ProbMeasure,
    _kernel_rows_raw,
    _phi_raw,
    as_values,
)

_MASK64 = 0xFFFFFFFFFFFFFFFF
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Disjoint 64-bit child seed for stream ``index`` under ``master_seed``.

    The map is a SplitMix64-style finalizer of ``master + (index+1) gamma``;
    it is injective in the index, so child streams never share a seed.
    """
    if index < 0:
        raise ValueError(f"stream index must be >= 0, got {index}")
    return _mix64((master_seed + (index + 1) * _SPLITMIX_GAMMA) & _MASK64)


class RngStream:
    """Deterministic uniform stream (PCG64) with a draw-position counter."""

    __slots__ = ("seed", "position", "_gen")

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.position = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniforms(self, k: int) -> np.ndarray:
        self.position += k
        return self._gen.random(k)


def _inverse_cdf(cumulative: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """min{x : F(x) >= u} per uniform, clipped against top-end roundoff."""
    idx = np.searchsorted(cumulative, uniforms, side="left")
    return np.minimum(idx, cumulative.size - 1).astype(np.int64)


@dataclass
class ParticleSystem:
    """N particle locations plus the step counter and the owning stream."""

    states: np.ndarray
    step: int
    stream: RngStream
    d: int

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=np.int64)
        if states.ndim != 1 or states.size == 0:
            raise InvalidModel("particle system needs at least one particle")
        if states.min() < 0 or states.max() >= self.d:
            raise InvalidModel("particle state out of range")
        states.flags.writeable = False
        self.states = states

    @property
    def N(self) -> int:
        return self.states.size

    def empirical(self) -> ProbMeasure:
        counts = np.bincount(self.states, minlength=self.d)
        return ProbMeasure(counts / self.N)


@dataclass(frozen=True)
class RunRecord:
    """Summary of one particle run: per-step potential means and the
    log normalizing-constant estimate, optionally normalized by the exact
    value."""

    seed: int
    n: int
    N: int
    kernel: KernelChoice
    potential_means: tuple
    log_gamma_N: float
    log_gamma_bar: Optional[float]
    final_measure: ProbMeasure
    replicate_id: int = -1

    @property
    def gamma_bar(self) -> Optional[float]:
        if self.log_gamma_bar is None:
            return None
        return math.exp(self.log_gamma_bar)


def init_particles(model: FKModel, N: int, seed: int) -> ParticleSystem:
    """Draw N independent particles from the initial law."""
    if N < 1:
        raise ValueError(f"particle count must be >= 1, got {N}")
    stream = RngStream(seed)
    cumulative = np.cumsum(model.eta0.weights)
    states = _inverse_cdf(cumulative, stream.uniforms(N))
    return ParticleSystem(states, 0, stream, model.d)


def step(system: ParticleSystem, model: FKModel, choice: KernelChoice) -> ParticleSystem:
    """Advance the whole generation one step.

    All N particles move simultaneously given the previous generation: the
    empirical measure is frozen while the rows are built, then every
    particle draws once from its own row.
    """
    if system.d != model.d:
        raise DimensionMismatch("system and model dimensions differ")
    fkstep = model.step(system.step)
    counts = np.bincount(system.states, minlength=system.d)
    mu_w = counts / system.N
    rows = _kernel_rows_raw(choice, mu_w, fkstep.G.values, fkstep.M.rows)
    u = system.stream.uniforms(system.N)
    if choice is KernelChoice.MULTINOMIAL:
        states = _inverse_cdf(np.cumsum(rows[0]), u)
    else:
        particle_rows = rows[system.states]
        cumulative = np.cumsum(particle_rows, axis=1)
        idx = (cumulative < u[:, None]).sum(axis=1)
        states = np.minimum(idx, system.d - 1).astype(np.int64)
    return ParticleSystem(states, system.step + 1, system.stream, system.d)


def run(
    model: FKModel,
    N: int,
    n: int,
    choice: KernelChoice,
    seed: int,
    oracle_log_gamma: Optional[float] = None,
    replicate_id: int = -1,
) -> RunRecord:
    """Run n steps and accumulate the log normalizing-constant estimate.

    The estimate is the sum of log empirical potential means, accumulated in
    the log domain so long horizons neither overflow nor underflow.  When
    the exact ``oracle_log_gamma`` is supplied, the normalized log estimate
    is recorded as well.
    """
    if n < 0:
        raise ValueError(f"step count must be >= 0, got {n}")
    system = init_particles(model, N, seed)
    means = []
    log_gamma = 0.0
    for p in range(n):
        g_values = model.step(p).G.values
        mean_p = float(np.mean(g_values[system.states]))
        if mean_p <= 0.0:
            raise InvalidModel(
                f"empirical potential mean vanished at step {p}; "
                "the model violates the positive-potential requirement"
            )
        means.append(mean_p)
        log_gamma += math.log(mean_p)
        system = step(system, model, choice)
    log_gamma_bar = None if oracle_log_gamma is None else log_gamma - oracle_log_gamma
    return RunRecord(
        seed=seed,
        n=n,
        N=N,
        kernel=choice,
        potential_means=tuple(means),
        log_gamma_N=log_gamma,
        log_gamma_bar=log_gamma_bar,
        final_measure=system.empirical(),
        replicate_id=replicate_id,
    )


def local_error_field(
    before: ParticleSystem,
    after: ParticleSystem,
    model: FKModel,
    choice: KernelChoice,
    f: ArrayLike,
) -> float:
    """Scaled one-step sampling error sqrt(N) (eta_n^N(f) - Phi_n(eta_{n-1}^N)(f)).

    The one-step target is evaluated exactly on the empirical measure of
    ``before``; its value does not depend on the kernel choice, only the
    fluctuations around it do.
    """
    del choice
    if after.step != before.step + 1 or after.N != before.N or after.d != before.d:
        raise InvalidModel("systems are not a one-step predecessor/successor pair")
    values = as_values(f)
    if values.size != before.d:
        raise DimensionMismatch("function and system dimensions differ")
    fkstep = model.step(before.step)
    mu_w = np.bincount(before.states, minlength=before.d) / before.N
    target = float(_phi_raw(mu_w, fkstep.G.values, fkstep.M.rows) @ values)
    observed = float(np.mean(values[after.states]))
    return math.sqrt(before.N) * (observed - target)


def global_error_field(system: ParticleSystem, exact_eta: ProbMeasure, f: ArrayLike) -> float:
    """Scaled global error sqrt(N) (eta_n^N(f) - eta_n(f)) against the oracle flow."""
    values = as_values(f)
    if values.size != system.d or exact_eta.d != system.d:
        raise DimensionMismatch("function, measure and system dimensions differ")
    observed = float(np.mean(values[system.states]))
    return math.sqrt(system.N) * (observed - exact_eta.mean(values))


def with_replicate_id(record: RunRecord, replicate_id: int) -> RunRecord:
    return replace(record, replicate_id=replicate_id)
