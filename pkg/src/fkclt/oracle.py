"""Exact finite-state solvers: measure flow, normalizing constants,
weighted semigroups, contraction diagnostics and spectral quantities.

Everything here is deterministic linear algebra on small dense vectors.
Backward semigroup recursions renormalize at every step, so no quantity
underflows even for long horizons; normalizations cancel in all the
reported ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    ArrayLike,
    ConsistencyError,
    ConvergenceError,
    FKModel,
    FunctionVector,
    InvalidModel,
    KernelChoice,
    ModelBounds,
    ProbMeasure,
    StochasticKernel,
    as_values,
    cov_operator,
    dobrushin,
    phi_step,
    total_variation,
)

FIXED_POINT_TOL = 1e-13
ITERATION_CAP = 10**6
BETA_FIT_FLOOR = 1e-14  # log-fits ignore values at or below double-precision noise
SERIES_TAIL_TARGET = 36.0  # default truncation depth T = ceil(36 / lambda_hat)


@dataclass(frozen=True)
class OracleSolution:
    """Exact measure flow and log normalizing constants up to a horizon."""

    etas: tuple
    log_gammas: tuple
    potential_means: tuple

    @property
    def n(self) -> int:
        return len(self.etas) - 1


@dataclass(frozen=True)
class SpectralPair:
    """Principal eigenvalue/eigenfunction data of a homogeneous model.

    ``zeta`` is the top eigenvalue of Q = diag(G) M, ``h`` the matching right
    eigenvector normalized so that ``eta_inf(h) = 1``, and ``eta_inf`` the
    fixed point of the measure flow (the Yaglom measure in absorption
    models).  ``sigma2`` is the limiting per-step variance rate for the
    given kernel choice; it is None when not yet evaluated.
    """

    zeta: float
    h: FunctionVector
    eta_inf: ProbMeasure
    sigma2: Optional[float] = None
    kernel_choice: Optional[KernelChoice] = None


class _KahanSum:
    """Compensated accumulator; used where bit-stable sums are promised."""

    __slots__ = ("value", "_c")

    def __init__(self) -> None:
        self.value = 0.0
        self._c = 0.0

    def add(self, x: float) -> None:
        y = x - self._c
        t = self.value + y
        self._c = (t - self.value) - y
        self.value = t


def propagate(model: FKModel, n: int) -> OracleSolution:
    """Run the exact measure recursion for ``n`` steps.

    Besides the product of per-step potential means, the log normalizing
    constants are recomputed through the unnormalized linear recursion
    ``gamma_{p+1} = (gamma_p . G_p) M_{p+1}`` and the two routes are required
    to agree to 1e-10.
    """
    if n < 0:
        raise ValueError(f"step count must be >= 0, got {n}")
    etas = [model.eta0]
    log_gammas = [0.0]
    means = []
    gvec = model.eta0.weights.copy()
    gshift = 0.0
    for p in range(n):
        step = model.step(p)
        mean_p = etas[p].mean(step.G.values)
        means.append(mean_p)
        log_gammas.append(log_gammas[p] + math.log(mean_p))
        etas.append(phi_step(etas[p], step.G, step.M))
        gvec = (gvec * step.G.values) @ step.M.rows
        total = gvec.sum()
        gshift += math.log(total)
        gvec = gvec / total
        if abs(gshift - log_gammas[p + 1]) > 1e-10 * max(1.0, abs(log_gammas[p + 1])):
            raise ConsistencyError(
                f"normalizing-constant routes disagree at step {p + 1}: "
                f"{gshift!r} vs {log_gammas[p + 1]!r}"
            )
    return OracleSolution(tuple(etas), tuple(log_gammas), tuple(means))


def _factor(model: FKModel, q: int) -> np.ndarray:
    """Matrix of the weighted one-step operator: diag(G_q) M_{q+1}."""
    step = model.step(q)
    return step.G.values[:, None] * step.M.rows


def q_pn_apply(model: FKModel, p: int, n: int, f: ArrayLike) -> FunctionVector:
    """Apply the weighted semigroup between times ``p`` and ``n`` to ``f``."""
    if not 0 <= p <= n:
        raise ValueError(f"need 0 <= p <= n, got p={p}, n={n}")
    u = as_values(f).copy()
    for q in range(n - 1, p - 1, -1):
        u = _factor(model, q) @ u
    return FunctionVector(u)


def qbar_pn_one(model: FKModel, p: int, n: int) -> FunctionVector:
    """Normalized semigroup column: Q_{p,n}(1) scaled to have eta_p-mean one."""
    if not 0 <= p <= n:
        raise ValueError(f"need 0 <= p <= n, got p={p}, n={n}")
    eta_p = propagate(model, p).etas[p]
    u = np.ones(model.d)
    for q in range(n - 1, p - 1, -1):
        u = _factor(model, q) @ u
        u = u / u.max()  # positive rescale, cancels in the final normalization
    return FunctionVector(u / float(eta_p.weights @ u))


def d_pn(model: FKModel, p: int, n: int, f: ArrayLike) -> FunctionVector:
    """Centered normalized semigroup: Q_bar_{p,n}(f - eta_n(f))."""
    if not 0 <= p <= n:
        raise ValueError(f"need 0 <= p <= n, got p={p}, n={n}")
    values = as_values(f)
    sol = propagate(model, n)
    centered = values - sol.etas[n].mean(values)
    stack = np.vstack([centered, np.ones(model.d)])
    for q in range(n - 1, p - 1, -1):
        factor = _factor(model, q)
        stack = stack @ factor.T
        stack = stack / np.abs(stack).max()  # common rescale keeps the ratio exact
    denom = float(sol.etas[p].weights @ stack[1])
    return FunctionVector(stack[0] / denom)


def markov_pn(model: FKModel, p: int, n: int) -> StochasticKernel:
    """Markov kernel obtained by row-normalizing the weighted semigroup."""
    if not 0 <= p <= n:
        raise ValueError(f"need 0 <= p <= n, got p={p}, n={n}")
    Q = np.eye(model.d)
    for q in range(p, n):
        Q = Q @ _factor(model, q)
        Q = Q / Q.max()
    return StochasticKernel(Q / Q.sum(axis=1, keepdims=True))


def _ols_line(xs: Sequence[float], ys: Sequence[float]) -> tuple:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    xm = x.mean()
    ym = y.mean()
    denom = float(((x - xm) ** 2).sum())
    slope = float(((x - xm) * (y - ym)).sum()) / denom
    intercept = ym - slope * xm
    return slope, intercept


def contraction_profile(model: FKModel, n_max: int) -> ModelBounds:
    """Dobrushin-coefficient profile with a fitted geometric decay rate.

    Computes ``beta(P_{0,n})`` and the semigroup ratio ``g_{0,n}`` for
    ``n = 1..n_max`` and fits ``log beta`` against ``n`` by ordinary least
    squares over the points above the noise floor.  When every coefficient
    is at the floor (rank-one mixing), ``lambda_hat`` is reported as
    ``+inf`` with ``a_hat = 1``.
    """
    if n_max < 2:
        raise ValueError(f"profile needs n_max >= 2, got {n_max}")
    d = model.d
    Q = np.eye(d)
    betas = []
    g_values = []
    g_pot = 1.0
    for n in range(1, n_max + 1):
        step = model.step(n - 1)
        g_pot = max(g_pot, step.G.ratio)
        Q = Q @ (step.G.values[:, None] * step.M.rows)
        Q = Q / Q.max()
        row_sums = Q.sum(axis=1)
        betas.append(dobrushin(StochasticKernel(Q / row_sums[:, None])))
        g_values.append(float(row_sums.max() / row_sums.min()))
    points = [(n, math.log(b)) for n, b in zip(range(1, n_max + 1), betas) if b > BETA_FIT_FLOOR]
    if len(points) >= 2:
        slope, intercept = _ols_line([p[0] for p in points], [p[1] for p in points])
        lambda_hat = -slope
        a_hat = math.exp(intercept)
    else:
        lambda_hat = math.inf
        a_hat = 1.0
    if math.isinf(lambda_hat):
        b_bound = math.exp(a_hat * (g_pot - 1.0))
    elif lambda_hat > 0.0:
        b_bound = math.exp(a_hat * (g_pot - 1.0) / (1.0 - math.exp(-lambda_hat)))
    else:
        b_bound = math.inf
    g_within = all(g <= b_bound * (1.0 + 1e-12) for g in g_values)
    return ModelBounds(
        g=g_pot,
        a_hat=a_hat,
        lambda_hat=lambda_hat,
        b_bound=b_bound,
        beta_profile=tuple(betas),
        g_profile=tuple(g_values),
        g_within_bound=g_within,
    )


def v_n(model: FKModel, choice: KernelChoice, n: int) -> float:
    """Accumulated conditional variance of the normalized semigroup columns.

    Term ``q = 0`` is the plain variance under the initial law (the step-0
    kernel is the initial law itself, by convention); terms ``q >= 1`` use
    the conditional covariance of the chosen mean-field kernel.  Summation
    is compensated, in index order.
    """
    if n < 0:
        raise ValueError(f"step count must be >= 0, got {n}")
    if n == 0:
        return 0.0
    sol = propagate(model, n)
    d = model.d
    ubars = [None] * n
    u = np.ones(d)
    for q in range(n - 1, -1, -1):
        u = _factor(model, q) @ u
        u = u / float(sol.etas[q].weights @ u)  # exact eta_q-mean-one normalization
        ubars[q] = u
    acc = _KahanSum()
    centered0 = ubars[0] - 1.0
    acc.add(float(sol.etas[0].weights @ (centered0 * centered0)))
    for q in range(1, n):
        step = model.step(q - 1)
        acc.add(cov_operator(choice, sol.etas[q - 1], step.G, step.M, ubars[q], ubars[q]))
    # Every term is a variance, so the sum is nonnegative up to cancellation
    # noise; clamp the noise.
    return max(acc.value, 0.0)


def fixed_point_eta_inf(model: FKModel) -> ProbMeasure:
    """Fixed point of the homogeneous measure flow, by iteration."""
    if not model.homogeneous:
        raise InvalidModel("fixed point is defined for homogeneous schedules only")
    step = model.step(0)
    mu = model.eta0
    for _ in range(ITERATION_CAP):
        nxt = phi_step(mu, step.G, step.M)
        if total_variation(mu, nxt) < FIXED_POINT_TOL:
            return nxt
        mu = nxt
    raise ConvergenceError(
        f"measure flow did not reach a fixed point within {ITERATION_CAP} iterations"
    )


def eigen_h_zeta(model: FKModel) -> SpectralPair:
    """Principal right eigenvector of Q = diag(G) M by power iteration.

    The eigenvector is normalized to have mean one under the flow's fixed
    point and the eigenvalue is the matching Rayleigh ratio.  Residual
    identities are checked to 1e-10 before returning.
    """
    if not model.homogeneous:
        raise InvalidModel("spectral pair is defined for homogeneous schedules only")
    step = model.step(0)
    Q = step.G.values[:, None] * step.M.rows
    h = np.ones(model.d)
    for _ in range(ITERATION_CAP):
        nxt = Q @ h
        nxt = nxt / nxt.max()
        if np.abs(nxt - h).max() < FIXED_POINT_TOL:
            h = nxt
            break
        h = nxt
    else:
        raise ConvergenceError(
            f"power iteration did not settle within {ITERATION_CAP} iterations "
            "(oscillating iterates)"
        )
    eta_inf = fixed_point_eta_inf(model)
    zeta = float(eta_inf.weights @ (Q @ h)) / float(eta_inf.weights @ h)
    h = h / float(eta_inf.weights @ h)
    residual = np.abs(Q @ h - zeta * h).max()
    if residual > 1e-10:
        raise ConvergenceError(f"eigen residual {residual!r} exceeds 1e-10")
    if abs(float(eta_inf.weights @ h) - 1.0) > 1e-10:
        raise ConvergenceError("eigenvector normalization drifted")
    if abs(zeta - eta_inf.mean(step.G.values)) > 1e-10:
        raise ConsistencyError(
            f"eigenvalue {zeta!r} does not match the fixed-point potential mean"
        )
    return SpectralPair(zeta=zeta, h=FunctionVector(h), eta_inf=eta_inf)


def sigma2_homogeneous(model: FKModel, choice: KernelChoice) -> float:
    """Limiting per-step variance rate of the log normalizing-constant error."""
    pair = eigen_h_zeta(model)
    step = model.step(0)
    return cov_operator(choice, pair.eta_inf, step.G, step.M, pair.h, pair.h)


def spectral_pair(model: FKModel, choice: KernelChoice) -> SpectralPair:
    """Spectral pair with the variance rate for ``choice`` filled in."""
    pair = eigen_h_zeta(model)
    step = model.step(0)
    sigma2 = cov_operator(choice, pair.eta_inf, step.G, step.M, pair.h, pair.h)
    return SpectralPair(
        zeta=pair.zeta,
        h=pair.h,
        eta_inf=pair.eta_inf,
        sigma2=sigma2,
        kernel_choice=choice,
    )


def default_series_depth(lambda_hat: float) -> int:
    """Truncation depth that pushes the geometric series tail to ~2e-16."""
    if lambda_hat <= 0.0:
        raise InvalidModel(f"series depth needs a positive decay rate, got {lambda_hat!r}")
    if math.isinf(lambda_hat):
        return 1
    return max(1, math.ceil(SERIES_TAIL_TARGET / lambda_hat))


def qbar_p_inf(model: FKModel, p: int, depth: Optional[int] = None) -> FunctionVector:
    """Limit of the normalized semigroup columns, through its log series.

    The series term at lag ``q`` is the log ratio of the potential means of
    the flow started from each point mass against the flow started from
    ``eta_p``.  When ``depth`` is omitted it is derived from the fitted
    contraction rate.
    """
    if depth is None:
        depth = default_series_depth(contraction_profile(model, 30).lambda_hat)
    if depth < 1:
        raise ValueError(f"series depth must be >= 1, got {depth}")
    d = model.d
    eta_p = propagate(model, p).etas[p]
    # Rows 0..d-1 carry the flow of each point mass, row d the flow of eta_p.
    stack = np.vstack([np.eye(d), eta_p.weights])
    logs = np.zeros(d)
    for offset in range(depth):
        step = model.step(p + offset)
        weighted = stack * step.G.values[None, :]
        denoms = weighted.sum(axis=1)
        logs += np.log(denoms[:d]) - math.log(denoms[d])
        if offset + 1 < depth:
            stack = (weighted / denoms[:, None]) @ step.M.rows
    return FunctionVector(np.exp(logs))


def oracle_report(
    model: FKModel,
    n: int,
    choice: KernelChoice,
    profile_depth: int = 30,
    series_depth: Optional[int] = None,
) -> dict:
    """Assemble the JSON-ready oracle record for a model.

    Always contains the measure flow and log normalizing constants; for
    homogeneous models it adds the spectral pair, the variance-rate table
    and the contraction diagnostics.
    """
    sol = propagate(model, n)
    report = {
        "schema": 1,
        "n": n,
        "kernel": choice.value,
        "etas": [list(map(float, eta.weights)) for eta in sol.etas],
        "log_gammas": [float(x) for x in sol.log_gammas],
        "potential_means": [float(x) for x in sol.potential_means],
    }
    if model.homogeneous:
        pair = spectral_pair(model, choice)
        bounds = contraction_profile(model, profile_depth)
        depth = series_depth
        if depth is None and bounds.lambda_hat > 0.0:
            depth = default_series_depth(bounds.lambda_hat)
        report.update(
            {
                "zeta": pair.zeta,
                "h": list(map(float, pair.h.values)),
                "eta_inf": list(map(float, pair.eta_inf.weights)),
                "sigma2": pair.sigma2,
                "v_n_table": [v_n(model, choice, k) for k in range(1, n + 1)],
                "beta_profile": list(bounds.beta_profile),
                "g_profile": list(bounds.g_profile),
                "g": bounds.g,
                "lambda_hat": bounds.lambda_hat,
                "a_hat": bounds.a_hat,
                "b_bound": bounds.b_bound,
                "qbar_limit": list(map(float, qbar_p_inf(model, 0, depth).values))
                if depth is not None
                else None,
            }
        )
    return report
