"""
Frozen-coefficient Gaussian kernel and the leading term u0.

Gamma_0(t, x; T, y) is the normal density with mean e^{(T-t)B}x and covariance
C(T-t) = int_0^{T-t} e^{uB} A e^{uB*} du. Its x-derivatives are Gamma_0 times
multivariate Hermite polynomials in the whitened variable z = F^{-1}(y - m),
with C = F F^T. The leading term D^alpha u0 is computed in closed form for
payoffs built from hyperplanes. The quadrature path cuts the whitened space
at the kinks of such payoffs and uses tensor Gauss-Hermite for anything else.
"""
import logging
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Optional

import numpy as np
from numpy.polynomial.hermite_e import hermeval, hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.linalg import cholesky, solve_triangular
from scipy.stats import norm

from asianexp_errors import KernelError
from asianexp_geometry import covariance, matrix_exp, monomial, sub_index, unit_index, zero_index

# Configuration
QUADRATURE_POINTS = {1: 96, 2: 64, 3: 24}
QUADRATURE_FALLBACK_POINTS = 12
QUADRATURE_RTOL = 1e-6
QUADRATURE_ATOL = 1e-12
QUADRATURE_SPAN = 12.0  # truncation of the normal axis across kinks
SPLIT_POINTS = 64  # Gauss-Legendre nodes per kink interval
TRANSVERSE_POINTS = 24
PARALLEL_TOLERANCE = 1e-12
EIGEN_SWITCH_CONDITION = 1e12

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GaussianKernel:
    """Gamma_0 for the diffusion matrix A0 frozen at a base point, between times t < T."""

    structure: object
    A0: np.ndarray
    t: float
    T: float
    mean_matrix: np.ndarray = field(init=False, repr=False)
    cov: np.ndarray = field(init=False, repr=False)
    factor: np.ndarray = field(init=False, repr=False)
    factor_inv: np.ndarray = field(init=False, repr=False)
    log_det: float = field(init=False, repr=False)
    factorization: str = field(init=False)

    def __post_init__(self):
        if not self.T > self.t:
            raise KernelError(f"kernel needs T > t, got t={self.t}, T={self.T}")
        theta = self.T - self.t
        A0 = np.atleast_2d(np.asarray(self.A0, dtype=float))
        cov = covariance(self.structure, A0, theta)
        cov = 0.5 * (cov + cov.T)
        condition = np.linalg.cond(cov)
        if not np.isfinite(condition):
            raise KernelError("covariance is singular")
        if condition > EIGEN_SWITCH_CONDITION:
            values, vectors = np.linalg.eigh(cov)
            if values.min() <= 0:
                raise KernelError(f"covariance is not positive definite (min eigenvalue {values.min():.3g})")
            factor = vectors * np.sqrt(values)
            factor_inv = (vectors / np.sqrt(values)).T
            method = "eigh"
        else:
            try:
                factor = cholesky(cov, lower=True)
            except np.linalg.LinAlgError as exc:
                raise KernelError(f"covariance is not positive definite: {exc}") from exc
            factor_inv = solve_triangular(factor, np.eye(len(cov)), lower=True)
            method = "cholesky"
        sign, log_det = np.linalg.slogdet(cov)
        if sign <= 0:
            raise KernelError("covariance has non-positive determinant")
        object.__setattr__(self, "A0", A0)
        object.__setattr__(self, "mean_matrix", matrix_exp(self.structure, theta))
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "factor", factor)
        object.__setattr__(self, "factor_inv", factor_inv)
        object.__setattr__(self, "log_det", float(log_det))
        object.__setattr__(self, "factorization", method)
        logger.debug("Kernel theta=%.6g, cond=%.3g, factor=%s", theta, condition, method)

    @property
    def theta(self):
        return self.T - self.t

    @property
    def d(self):
        return self.structure.d

    def mean(self, x):
        return np.asarray(x, dtype=float) @ self.mean_matrix.T

    def whiten(self, x, y):
        """z = F^{-1}(y - m(x)), vectorised over leading axes of y."""
        return (np.asarray(y, dtype=float) - self.mean(x)) @ self.factor_inv.T

    def hermite_weights(self):
        """Columns w_i = F^{-1} e^{theta B} e_i and their Gram matrix."""
        W = self.factor_inv @ self.mean_matrix
        return W, W.T @ W


def heat_kernel(structure, lam, t, T):
    return GaussianKernel(structure, lam * np.eye(structure.p0), t, T)


def kernel_eval(kernel, x, y):
    z = kernel.whiten(x, y)
    quad = np.sum(z * z, axis=-1)
    return np.exp(-0.5 * quad - 0.5 * kernel.log_det - 0.5 * kernel.d * math.log(2.0 * math.pi))


def hermite_table(kernel, z, alphas):
    """
    {gamma: H_gamma(z)} for every gamma below the requested alphas, with
    D_x^gamma Gamma_0 = Gamma_0 H_gamma and
    H_{gamma+e_i} = (w_i . z) H_gamma - sum_a gamma_a G_ia H_{gamma-e_a}.
    """
    W, G = kernel.hermite_weights()
    z = np.asarray(z, dtype=float)
    u = z @ W
    d = kernel.d
    table = {zero_index(d): np.ones(z.shape[:-1])}

    def build(gamma):
        if gamma in table:
            return table[gamma]
        i = max(j for j, g in enumerate(gamma) if g)
        prev = sub_index(gamma, unit_index(d, i))
        value = u[..., i] * build(prev)
        for a, g in enumerate(prev):
            if g:
                value = value - g * G[i, a] * build(sub_index(prev, unit_index(d, a)))
        table[gamma] = value
        return value

    for alpha in alphas:
        build(tuple(alpha))
    return table


def kernel_derivative(kernel, alpha, x, y):
    """D_x^alpha Gamma_0(t, x; T, y)."""
    alpha = tuple(alpha)
    z = kernel.whiten(x, y)
    return kernel_eval(kernel, x, y) * hermite_table(kernel, z, [alpha])[alpha]


def _kink_frame(kernel, components):
    """
    Orthogonal Q whose first column is the common whitened normal F^T w of
    every hyperplane piece; None when the pieces are not parallel.
    """
    normals = [kernel.factor.T @ plane.w for _, plane in components]
    normals = [v for v in normals if np.linalg.norm(v) > 0.0]
    if not normals:
        return None
    u = normals[0] / np.linalg.norm(normals[0])
    for v in normals[1:]:
        if np.linalg.norm(v - (v @ u) * u) > PARALLEL_TOLERANCE * np.linalg.norm(v):
            return None
    Q, _ = np.linalg.qr(np.column_stack([u, np.eye(kernel.d)]))
    if Q[:, 0] @ u < 0:
        Q = -Q
    return Q


@dataclass(frozen=True, eq=False)
class LeadingTerm:
    kernel: GaussianKernel
    payoff: object
    strategy: str = "auto"
    quadrature_points: Optional[int] = None
    frame: Optional[np.ndarray] = field(init=False, default=None, repr=False)

    def __post_init__(self):
        strategy = self.strategy
        if strategy == "auto":
            strategy = "closed-form" if self.payoff.components else "quadrature"
        if strategy not in ("closed-form", "quadrature"):
            raise KernelError(f"unknown leading-term strategy {self.strategy!r}")
        if strategy == "closed-form" and not self.payoff.components:
            raise KernelError(f"payoff {self.payoff.name} has no hyperplane descriptor")
        object.__setattr__(self, "strategy", strategy)
        if strategy == "quadrature" and self.payoff.components:
            object.__setattr__(self, "frame", _kink_frame(self.kernel, self.payoff.components))


@dataclass(frozen=True)
class LeadingValue:
    value: float
    converged: bool = True


def gaussian_density_derivative(j, d):
    """phi^{(j)}(d) = (-1)^j He_j(d) phi(d)."""
    coeffs = np.zeros(j + 1)
    coeffs[j] = 1.0
    return (-1) ** j * hermeval(d, coeffs) * norm.pdf(d)


def hyperplane_derivative(plane, mu, variance, order):
    """
    d^order/dmu of E[psi(mu + sqrt(v) Z)] for the hyperplane profile psi of `plane`,
    where mu = w.m(x) and v = w^T C w.
    """
    if plane.kind == "linear":
        if order == 0:
            return mu - plane.strike
        return 1.0 if order == 1 else 0.0
    if variance <= 0:
        raise KernelError("hyperplane payoff has zero variance along w")
    sd = math.sqrt(variance)
    dist = (mu - plane.strike) / sd
    if order == 0:
        if plane.kind == "call":
            return (mu - plane.strike) * norm.cdf(dist) + sd * norm.pdf(dist)
        return (plane.strike - mu) * norm.cdf(-dist) + sd * norm.pdf(dist)
    if order == 1:
        return norm.cdf(dist) if plane.kind == "call" else norm.cdf(dist) - 1.0
    return sd ** (-(order - 1)) * gaussian_density_derivative(order - 2, dist)


def _plane_value(kernel, plane, alpha, x):
    direction = kernel.mean_matrix.T @ plane.w
    weight = float(monomial(direction, alpha))
    if weight == 0.0:
        return 0.0
    mu = float(direction @ np.asarray(x, dtype=float))
    variance = float(plane.w @ kernel.cov @ plane.w)
    return weight * hyperplane_derivative(plane, mu, variance, sum(alpha))


def _closed_form(leading, alpha, x):
    return math.fsum(c * _plane_value(leading.kernel, plane, alpha, x) for c, plane in leading.payoff.components)


def _tensor_rule(d, points):
    nodes, weights = hermegauss(points)
    weights = weights / math.sqrt(2.0 * math.pi)
    grid = np.array(list(product(nodes, repeat=d)))
    mass = np.array([math.prod(w) for w in product(weights, repeat=d)])
    return grid, mass


def _split_rule(leading, x, points):
    """
    Whitened nodes z = Q eta: Gauss-Legendre in eta_1 on [-SPAN, SPAN] cut at
    every kink, Gauss-Hermite in the transverse directions where phi is constant.
    """
    kernel = leading.kernel
    Q = leading.frame
    u = Q[:, 0]
    mean = kernel.mean(x)
    kinks = []
    for _, plane in leading.payoff.components:
        slope = float((kernel.factor.T @ plane.w) @ u)
        if plane.kind != "linear" and slope != 0.0:
            kinks.append((plane.strike - float(plane.w @ mean)) / slope)
    edges = [-QUADRATURE_SPAN, *sorted(k for k in kinks if abs(k) < QUADRATURE_SPAN), QUADRATURE_SPAN]
    nodes, weights = leggauss(points)
    first, first_mass = [], []
    for lo, hi in zip(edges, edges[1:]):
        if hi > lo:
            half = 0.5 * (hi - lo)
            eta = lo + half * (nodes + 1.0)
            first.append(eta)
            first_mass.append(half * weights * norm.pdf(eta))
    first, first_mass = np.concatenate(first), np.concatenate(first_mass)
    cross, cross_mass = _tensor_rule(kernel.d - 1, TRANSVERSE_POINTS)
    eta = np.column_stack([np.repeat(first, len(cross_mass)), np.tile(cross, (len(first), 1))])
    mass = np.repeat(first_mass, len(cross_mass)) * np.tile(cross_mass, len(first))
    return eta @ Q.T, mass


def _quadrature(leading, alphas, x, points):
    kernel = leading.kernel
    if leading.frame is not None:
        z, mass = _split_rule(leading, x, points)
    else:
        z, mass = _tensor_rule(kernel.d, points)
    y = kernel.mean(x) + z @ kernel.factor.T
    payoff = leading.payoff(y)
    table = hermite_table(kernel, z, alphas)
    return {tuple(a): float(np.sum(mass * payoff * table[tuple(a)])) for a in alphas}


def leading_term_values(leading, alphas, x):
    """{alpha: LeadingValue(D^alpha u0(t, x))} for every alpha, sharing quadrature nodes."""
    alphas = [tuple(a) for a in alphas]
    if leading.strategy == "closed-form":
        return {a: LeadingValue(_closed_form(leading, a, x)) for a in alphas}
    d = leading.kernel.d
    points = leading.quadrature_points
    if points is None:
        points = SPLIT_POINTS if leading.frame is not None else QUADRATURE_POINTS.get(d, QUADRATURE_FALLBACK_POINTS)
    coarse = _quadrature(leading, alphas, x, points)
    fine = _quadrature(leading, alphas, x, 2 * points)
    out = {}
    for a in alphas:
        ok = abs(fine[a] - coarse[a]) <= QUADRATURE_RTOL * abs(fine[a]) + QUADRATURE_ATOL
        if not ok:
            logger.warning(
                "Quadrature for D^%s u0 not converged: %.12g vs %.12g (%d and %d points)",
                list(a), coarse[a], fine[a], points, 2 * points,
            )
        out[a] = LeadingValue(fine[a], ok)
    logger.debug("Quadrature with %d points per axis for %d derivatives", 2 * points, len(alphas))
    return out


def leading_term_eval(leading, alpha, x):
    alpha = tuple(alpha)
    return leading_term_values(leading, [alpha], x)[alpha]
