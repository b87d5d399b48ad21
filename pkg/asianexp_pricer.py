"""
Expansion pricer: U_N(t, x) = u0 + sum_{n=1}^N L_n u0.

Builds the model jets at the base point, the operators L_1..L_N, reduces them
at the evaluation state and applies the resulting derivative stencils to the
leading Gaussian term. Also provides Greeks, the predicted error order, the
density expansion and the self-consistency convergence study.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numpy as np
import pandas as pd

from asianexp_algebra import (
    MAX_ORDER,
    build_operators,
    compose_derivative,
    evaluate_at_basepoint,
    reduce_operator,
)
from asianexp_errors import ConfigError, KernelError, OperatorError
from asianexp_geometry import GroupPoint, covariance, matrix_exp, unit_index
from asianexp_kernel import GaussianKernel, LeadingTerm, kernel_derivative, kernel_eval, leading_term_values

# Configuration
BASE_CHOICES = ("start", "end")
SLOPE_TOLERANCE = 0.3
STANDARDIZE_ITERATIONS = 50
STANDARDIZE_RTOL = 1e-14

logger = logging.getLogger(__name__)


@dataclass
class ExpansionContext:
    """Everything needed to apply the stencils again (Greeks) without rebuilding operators."""

    model: object
    payoff: object
    t: float
    T: float
    x: np.ndarray
    N: int
    base_point: GroupPoint
    operators: list
    leading: LeadingTerm

    @property
    def theta(self):
        return self.T - self.t

    @property
    def increment(self):
        return self.x - matrix_exp(self.model.structure, self.t - self.base_point.t) @ self.base_point.x


@dataclass
class ExpansionResult:
    values: list
    cumulative: list
    greeks: dict
    k: float
    error_order: Fraction
    diagnostics: dict = field(default_factory=dict)
    context: Optional[ExpansionContext] = field(default=None, repr=False)

    @property
    def price(self):
        return self.cumulative[-1]

    def delta(self):
        return self.greeks[unit_index(self.context.model.d, 0)]

    def gamma(self):
        return self.greeks[tuple(2 if i == 0 else 0 for i in range(self.context.model.d))]


@dataclass(frozen=True)
class ErrorOrder:
    exponent: Fraction
    small_vol: bool


def error_order_estimate(k, N, model=None):
    """
    Predicted short-time exponent (N + k + 1)/2. small_vol is True when the
    same exponent also applies in the small-diffusion limit (M theta).
    """
    exponent = (Fraction(N) + Fraction(k).limit_denominator(1000) + 1) / 2
    small_vol = bool(model.small_vol_applicable()) if model is not None else False
    return ErrorOrder(exponent, small_vol)


def resolve_base_point(base, t, T, x):
    if isinstance(base, GroupPoint):
        return base
    if base == "start":
        return GroupPoint(t, x)
    if base == "end":
        return GroupPoint(T, x)
    raise ConfigError("base", f"unknown base point {base!r}; choose from {', '.join(BASE_CHOICES)}")


def prepare(model, payoff, t, T, x, N, base="start", strategy="auto", quadrature_points=None):
    if not T > t:
        raise KernelError(f"price needs T > t, got t={t}, T={T}")
    if not 0 <= N <= MAX_ORDER:
        raise OperatorError(f"N must be in 0..{MAX_ORDER}, got {N}")
    payoff.check_exponent(model.structure)
    x = np.asarray(x, dtype=float)
    if not model.in_domain(x):
        logger.warning("State x=%s is outside the domain of model %s", x.tolist(), model.name)
    zbar = resolve_base_point(base, t, T, x)
    jets = model.jets(zbar, N)
    kernel = GaussianKernel(model.structure, jets.a0(), t, T)
    operators = build_operators(model.structure, jets, N, tau=t - zbar.t)
    leading = LeadingTerm(kernel, payoff, strategy, quadrature_points)
    return ExpansionContext(model, payoff, t, T, x, N, zbar, operators, leading)


def _apply(context, reduced_list, extra_alphas=()):
    """Evaluate every reduced stencil against D^alpha u0; returns values and unconverged alphas."""
    alphas = sorted({a for reduced in reduced_list for a in reduced} | set(extra_alphas))
    leading = leading_term_values(context.leading, alphas, context.x)
    flags = [list(a) for a, v in leading.items() if not v.converged]
    totals = [math.fsum(w * leading[a].value for a, w in sorted(reduced.items())) for reduced in reduced_list]
    return totals, {a: v.value for a, v in leading.items()}, flags


def greeks(context, alphas):
    """{alpha: D^alpha U_N} with the base point held fixed at context.base_point."""
    structure = context.model.structure
    alphas = [tuple(a) for a in alphas]
    out = {}
    flags = []
    for gamma in alphas:
        if structure.b_length(gamma) > context.N:
            logger.warning(
                "Greek D^%s has |alpha|_B=%d > N=%d: outside the guaranteed-order regime",
                list(gamma), structure.b_length(gamma), context.N,
            )
        reduced = [
            reduce_operator(compose_derivative(gamma, op), context.theta, context.increment)
            for op in context.operators
        ]
        totals, leading, unconverged = _apply(context, reduced, [gamma])
        flags.extend(unconverged)
        out[gamma] = leading[gamma] + math.fsum(totals)
    return out, flags


def price(model, payoff, t, T, x, N, base="start", greek_alphas=(), strategy="auto", quadrature_points=None):
    """U_0..U_N at (t, x) for payoff maturity T, plus optional Greeks D^alpha U_N."""
    context = prepare(model, payoff, t, T, x, N, base, strategy, quadrature_points)
    reduced = [reduce_operator(op, context.theta, context.increment) for op in context.operators]
    zero = (0,) * model.d
    totals, leading, flags = _apply(context, reduced, [zero])
    values = [leading[zero]] + totals
    cumulative = list(np.cumsum(values))

    greek_values, greek_flags = greeks(context, greek_alphas) if greek_alphas else ({}, [])
    if base == "start":
        stencil_sizes = [len(evaluate_at_basepoint(op)) for op in context.operators]
    else:
        stencil_sizes = [len(r) for r in reduced]
    diagnostics = {
        "base": base if isinstance(base, str) else "frozen",
        "base_point": [context.base_point.t, *context.base_point.x.tolist()],
        "operator_terms": [len(op) for op in context.operators],
        "stencil_sizes": stencil_sizes,
        "leading_strategy": context.leading.strategy,
        "quadrature_unconverged": flags + greek_flags,
        "greeks_outside_regime": [
            list(a) for a in greek_values if model.structure.b_length(a) > N
        ],
    }
    logger.debug("Priced %s/%s at t=%g T=%g N=%d: %s", model.name, payoff.name, t, T, N, values)
    return ExpansionResult(
        values=[float(v) for v in values],
        cumulative=[float(v) for v in cumulative],
        greeks=greek_values,
        k=payoff.k,
        error_order=error_order_estimate(payoff.k, N, model).exponent,
        diagnostics=diagnostics,
        context=context,
    )


@dataclass
class DensityResult:
    values: list
    cumulative: list


def density_expansion(model, t, T, x, y, N, base="start"):
    """Gamma_N(t, x; T, y) = Gamma_0 + sum L_n Gamma_0, applying each L_n in x."""
    if not T > t:
        raise KernelError(f"density needs T > t, got t={t}, T={T}")
    x = np.asarray(x, dtype=float)
    zbar = resolve_base_point(base, t, T, x)
    jets = model.jets(zbar, N)
    kernel = GaussianKernel(model.structure, jets.a0(), t, T)
    xi = x - matrix_exp(model.structure, t - zbar.t) @ zbar.x
    values = [float(kernel_eval(kernel, x, y))]
    for op in build_operators(model.structure, jets, N, tau=t - zbar.t):
        reduced = reduce_operator(op, T - t, xi)
        values.append(math.fsum(w * float(kernel_derivative(kernel, a, x, y)) for a, w in sorted(reduced.items())))
    return DensityResult(values, [float(v) for v in np.cumsum(values)])


def standardized_state(model, payoff, t, T, x, target):
    """
    Adjust the last coordinate with a non-zero weight so that
    (w . e^{theta B} x - K) / sqrt(w^T C(theta) w) equals `target`.
    """
    plane = payoff.hyperplane
    if plane is None or plane.kind == "linear":
        raise ConfigError("state.rule", f"standardized states need a call/put hyperplane payoff, got {payoff.name}")
    x = np.array(x, dtype=float)
    theta = T - t
    direction = matrix_exp(model.structure, theta).T @ plane.w
    j = max(i for i in range(model.d) if direction[i] != 0.0)
    for _ in range(STANDARDIZE_ITERATIONS):
        a0 = model.diffusion_matrix(t, x)
        spread = math.sqrt(float(plane.w @ covariance(model.structure, a0, theta) @ plane.w))
        goal = plane.strike + target * spread
        rest = float(direction @ x) - direction[j] * x[j]
        updated = (goal - rest) / direction[j]
        converged = abs(updated - x[j]) <= STANDARDIZE_RTOL * max(1.0, abs(updated))
        x[j] = updated
        if converged:
            break
    return x


@dataclass(frozen=True)
class StateRule:
    """
    Maps a maturity theta to (t, T, x, payoff).

    fixed: t = t0, T = t0 + theta, state x.
    standardized: payoff maturity fixed at `maturity`, t = maturity - theta and
    the last state coordinate solved for standardized moneyness `target`.
    """

    kind: str
    x: tuple
    t0: float = 0.0
    maturity: Optional[float] = None
    target: float = 0.5

    def state(self, model, theta, payoff_factory: Callable):
        if self.kind == "fixed":
            T = self.t0 + theta
            return self.t0, T, np.array(self.x, dtype=float), payoff_factory(T)
        if self.kind == "standardized":
            if self.maturity is None or theta > self.maturity:
                raise ConfigError("state.maturity", "standardized rule needs a maturity >= every theta")
            T = self.maturity
            t = T - theta
            payoff = payoff_factory(T)
            return t, T, standardized_state(model, payoff, t, T, self.x, self.target), payoff
        raise ConfigError("state.rule", f"unknown state rule {self.kind!r}")


def fit_slope(thetas, errors):
    """Least-squares slope of log(error) against log(theta); None with fewer than two points."""
    thetas = np.asarray(thetas, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(thetas) < 2:
        return None
    slope, _ = np.polyfit(np.log(thetas), np.log(errors), 1)
    return float(slope)


@dataclass
class SlopeReport:
    N: int
    slope: Optional[float]
    expected: float
    points: int
    passed: bool
    note: str = ""


def _map(func, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]


def self_consistency_table(model, payoff_factory, maturities, orders, rule, base="start", workers=1):
    """
    |U_{N+1} - U_N| against theta for every N in orders, with fitted slopes
    checked against (N + k + 1)/2 within SLOPE_TOLERANCE.
    """
    orders = sorted(set(orders))
    top = max(orders) + 1

    def run(theta):
        t, T, x, payoff = rule.state(model, theta, payoff_factory)
        return theta, t, T, x, payoff, price(model, payoff, t, T, x, top, base)

    rows = []
    results = _map(run, list(maturities), workers)
    for theta, t, T, x, payoff, result in results:
        for N in orders:
            rows.append({
                "theta": theta,
                "t": t,
                "T": T,
                "N": N,
                "U_N": result.cumulative[N],
                "U_N+1": result.cumulative[N + 1],
                "difference": abs(result.cumulative[N + 1] - result.cumulative[N]),
                "vanishing": result.values[N + 1] == 0.0,
            })
    table = pd.DataFrame(rows)
    k = results[0][4].k if results else 0
    slopes = []
    for N in orders:
        part = table[(table["N"] == N) & ~table["vanishing"]]
        expected = float(error_order_estimate(k, N).exponent)
        slope = fit_slope(part["theta"], part["difference"])
        if slope is None:
            slopes.append(SlopeReport(N, None, expected, len(part), True, "vanishing"))
            continue
        passed = abs(slope - expected) <= SLOPE_TOLERANCE
        slopes.append(SlopeReport(N, slope, expected, len(part), passed))
        logger.info("Self-consistency N=%d: slope %.3f (expected %.3f)", N, slope, expected)
    return table, slopes
