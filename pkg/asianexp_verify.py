"""
Identity suites run by `asianexp verify`.

Each check computes a residual (or a fitted exponent) and compares it with a
tolerance. Suites: geometry, kernel, algebra, taylor.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from asianexp_algebra import build_operators, evaluate_at_basepoint, shift_matrix_coefficients, structural_violations
from asianexp_errors import ConfigError
from asianexp_geometry import (
    BlockStructure,
    GroupPoint,
    covariance,
    dilate,
    dilate_spatial,
    estimate_norm_constant,
    group_compose,
    group_inverse,
    homogeneous_norm,
    matrix_exp,
    monomial,
    spatial_dilation_matrix,
)
from asianexp_kernel import GaussianKernel, kernel_derivative, kernel_eval
from asianexp_models import ExpressionCoefficient, bs_asian_model
from asianexp_pricer import fit_slope
from asianexp_taylor import taylor_eval

# Configuration
IDENTITY_TOLERANCE = 1e-12
KERNEL_TOLERANCE = 1e-8
KERNEL_FD_TOLERANCE = 1e-6
KERNEL_POINTS = 1000
TAYLOR_TEST_FUNCTION = "exp(0.3*t)*sin(1 + x1)*cos(0.5*x2) + x1**2*x2"
TAYLOR_LAMBDAS = (0.02, 0.01, 0.005, 0.0025)
SUITES = ("geometry", "kernel", "algebra", "taylor")

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    residual: float
    tolerance: float
    passed: bool


def _check(suite, name, residual, tolerance, larger_is_better=False):
    residual = float(residual)
    passed = residual >= tolerance if larger_is_better else residual < tolerance
    return CheckResult(suite, name, residual, tolerance, bool(passed and np.isfinite(residual)))


def sample_structures():
    return [
        BlockStructure.prototype(),
        BlockStructure.from_blocks([[[1.0]], [[1.0]]]),
        BlockStructure.from_blocks([[[1.0, 0.5]]]),
    ]


def geometry_suite(seed=0, samples=200):
    rng = np.random.default_rng(seed)
    results = []
    for structure in sample_structures():
        label = f"p={list(structure.p)}"
        inverse = compose = norm_scale = semigroup = length = 0.0
        for _ in range(samples):
            z = GroupPoint(rng.standard_normal(), rng.standard_normal(structure.d))
            w = GroupPoint(rng.standard_normal(), rng.standard_normal(structure.d))
            lam = math.exp(rng.uniform(-2.0, 2.0))
            ident = group_compose(structure, z, group_inverse(structure, z))
            inverse = max(inverse, abs(ident.t), np.abs(ident.x).max())
            back = group_compose(structure, group_compose(structure, z, w), group_inverse(structure, w))
            compose = max(compose, abs(back.t - z.t), np.abs(back.x - z.x).max())
            scaled = homogeneous_norm(structure, dilate(structure, lam, z))
            norm_scale = max(norm_scale, abs(scaled - lam * homogeneous_norm(structure, z)) / (lam * homogeneous_norm(structure, z)))
            s, u = rng.standard_normal(2)
            product = matrix_exp(structure, s) @ matrix_exp(structure, u)
            semigroup = max(semigroup, np.abs(product - matrix_exp(structure, s + u)).max())
            beta = tuple(rng.integers(0, 3, structure.d))
            x = rng.standard_normal(structure.d)
            lhs = float(monomial(dilate_spatial(structure, lam, x), beta))
            rhs = lam ** structure.b_length(beta) * float(monomial(x, beta))
            length = max(length, abs(lhs - rhs) / max(1.0, abs(rhs)))
        constants = estimate_norm_constant(structure, samples=2000, seed=seed)
        results += [
            _check("geometry", f"{label} inverse round trip", inverse, IDENTITY_TOLERANCE),
            _check("geometry", f"{label} compose/inverse", compose, 1e-10),
            _check("geometry", f"{label} norm homogeneity", norm_scale, IDENTITY_TOLERANCE),
            _check("geometry", f"{label} exponential semigroup", semigroup, IDENTITY_TOLERANCE),
            _check("geometry", f"{label} B-length homogeneity", length, 1e-10),
            _check("geometry", f"{label} quasi-triangle constant finite", constants.group, 1e6),
            _check("geometry", f"{label} exponential constant finite", constants.exponential, 1e6),
        ]
    for structure in sample_structures()[:2]:
        label = f"p={list(structure.p)}"
        A0 = np.eye(structure.p0)
        c1 = covariance(structure, A0, 1.0)
        e1 = matrix_exp(structure, 1.0)
        mv1 = matrix_exp(structure, -1.0) @ c1 @ matrix_exp(structure, -1.0).T
        worst = 0.0
        for delta in (0.1, 1.0, 2.5):
            D = spatial_dilation_matrix(structure, math.sqrt(delta))
            D_inv = spatial_dilation_matrix(structure, 1.0 / math.sqrt(delta))
            cd = covariance(structure, A0, delta)
            mvd = matrix_exp(structure, -delta) @ cd @ matrix_exp(structure, -delta).T
            worst = max(
                worst,
                np.abs(cd - D @ c1 @ D).max(),
                np.abs(mvd - D @ mv1 @ D).max(),
                np.abs(matrix_exp(structure, delta) - D @ e1 @ D_inv).max(),
            )
        results.append(_check("geometry", f"{label} matrix homogeneity", worst, IDENTITY_TOLERANCE))
    return results


def _prototype_kernel(theta=0.5, a=0.09):
    return GaussianKernel(BlockStructure.prototype(), np.array([[a]]), 0.0, theta)


def kernel_suite(seed=0, points=KERNEL_POINTS):
    rng = np.random.default_rng(seed)
    kernel = _prototype_kernel()
    structure = kernel.structure
    d = structure.d
    K = sum(c * kernel.theta ** m for m, c in enumerate(shift_matrix_coefficients(structure, kernel.A0)))
    units = [tuple(1 if j == i else 0 for j in range(d)) for i in range(d)]
    cov_inv = np.linalg.inv(kernel.cov)
    whitened_rate = np.abs(kernel.hermite_weights()[0]).max()
    grad, grad_fd, polyn = 0.0, 0.0, 0.0
    for _ in range(points):
        x = rng.standard_normal(d) * np.array([0.5, 0.5])
        y = kernel.mean(x) + kernel.factor @ rng.standard_normal(d)
        gamma = float(kernel_eval(kernel, x, y))
        gx = np.array([float(kernel_derivative(kernel, u, x, y)) for u in units])
        gy = -cov_inv @ (y - kernel.mean(x)) * gamma
        scale = np.abs(gx).max() + gamma * whitened_rate + 1e-300
        grad = max(grad, np.abs(gx + kernel.mean_matrix.T @ gy).max() / scale)
        h = 1e-4 * np.sqrt(np.diag(kernel.cov))
        gy_fd = np.array([
            (float(kernel_eval(kernel, x, y + h[j] * np.eye(d)[j])) - float(kernel_eval(kernel, x, y - h[j] * np.eye(d)[j]))) / (2 * h[j])
            for j in range(d)
        ])
        grad_fd = max(grad_fd, np.abs(gx + kernel.mean_matrix.T @ gy_fd).max() / scale)
        m_gamma = kernel.mean(x) * gamma + K @ gx
        polyn = max(polyn, np.abs(y * gamma - m_gamma).max() / (np.abs(y).max() * gamma + 1e-300))
    nodes, weights = np.polynomial.hermite_e.hermegauss(40)
    grid = np.array([[a, b] for a in nodes for b in nodes])
    mass = np.array([wa * wb for wa in weights for wb in weights])
    x0 = np.array([0.3, -0.2])
    density = kernel_eval(kernel, x0, kernel.mean(x0) + grid @ kernel.factor.T)
    # dy = |det F| d eta, and the rule carries the weight exp(-|eta|^2 / 2)
    integral = np.sum(mass * np.exp(0.5 * np.sum(grid ** 2, axis=1)) * density) * math.exp(0.5 * kernel.log_det)
    normalization = abs(integral - 1.0)
    return [
        _check("kernel", "gradient symmetry (analytic y-gradient)", grad, KERNEL_TOLERANCE),
        _check("kernel", "gradient symmetry (central differences in y)", grad_fd, KERNEL_FD_TOLERANCE),
        _check("kernel", "y Gamma = M Gamma", polyn, KERNEL_TOLERANCE),
        _check("kernel", "normalization", normalization, 1e-8),
    ]


def prototype_l1_expected(a, da):
    """Hand expansion of the prototype L_1 stencil: {alpha: (theta power, coefficient)}."""
    return {
        (3, 0): (2, a * da / 4.0),
        (2, 1): (3, -5.0 * a * da / 12.0),
        (1, 2): (4, a * da / 4.0),
        (0, 3): (5, -a * da / 20.0),
    }


def algebra_suite(sigma=0.3, s0=1.2):
    model = bs_asian_model(sigma)
    structure = model.structure
    zbar = GroupPoint(0.0, [s0, 0.4])
    jets = model.jets(zbar, 4)
    operators = build_operators(structure, jets, 4)
    results = []
    for n, op in enumerate(operators, start=1):
        bad = structural_violations(op, structure, n)
        results.append(_check("algebra", f"L_{n} canonical index bounds ({len(op)} terms)", len(bad), 1))
    a, da = sigma ** 2 * s0 ** 2, 2 * sigma ** 2 * s0
    expected = prototype_l1_expected(a, da)
    stencil = {e.alpha: (e.theta_power, e.coeff) for e in evaluate_at_basepoint(operators[0])}
    worst = 0.0 if set(stencil) == set(expected) else math.inf
    for alpha, (power, coeff) in expected.items():
        got_power, got = stencil.get(alpha, (None, 0.0))
        if got_power != power:
            worst = math.inf
        worst = max(worst, abs(got - coeff) / abs(coeff))
    results.append(_check("algebra", "prototype L_1 stencil", worst, IDENTITY_TOLERANCE))
    return results


def taylor_remainder_slopes(orders=(1, 2, 3), lambdas=TAYLOR_LAMBDAS):
    """Fitted exponents of |f - T_n f| along zeta o D(lambda)(1, x0)."""
    structure = BlockStructure.prototype()
    f = ExpressionCoefficient(TAYLOR_TEST_FUNCTION, structure)
    zeta = GroupPoint(0.1, [0.2, -0.3])
    direction = GroupPoint(1.0, [0.7, -0.4])
    slopes = {}
    for n in orders:
        jet = f.jet(structure, zeta, n)
        norms, errors = [], []
        for lam in lambdas:
            step = dilate(structure, lam, direction)
            z = group_compose(structure, zeta, step)
            errors.append(abs(float(f(z.t, z.x)) - taylor_eval(jet, z)))
            norms.append(homogeneous_norm(structure, step))
        slopes[n] = fit_slope(norms, errors)
    return slopes


def taylor_suite():
    return [
        _check("taylor", f"T_{n} remainder exponent", slope, n + 0.9, larger_is_better=True)
        for n, slope in taylor_remainder_slopes().items()
    ]


def run_suite(name):
    runners = {
        "geometry": geometry_suite,
        "kernel": kernel_suite,
        "algebra": algebra_suite,
        "taylor": taylor_suite,
    }
    if name == "all":
        return [r for suite in SUITES for r in runners[suite]()]
    if name not in runners:
        raise ConfigError("suite", f"unknown suite {name!r}; choose from {', '.join(SUITES)}, all")
    return runners[name]()
