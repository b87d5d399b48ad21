"""
Intrinsic (B-)Taylor polynomials.

An IntrinsicJet stores the Lie derivatives Y^k d^beta f at a base point, graded
by 2k + |beta|_B. Evaluation expands in the group increments
(t - s)^k (x - e^{(t-s)B} xi)^beta.
"""
import logging
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from asianexp_errors import JetError
from asianexp_geometry import (
    GroupPoint,
    homogeneous_norm,
    index_factorial,
    matrix_exp,
    monomial,
    zero_index,
)

# Configuration
MAX_FD_ORDER = 4
FD_EPSILON = sys.float_info.epsilon

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class IntrinsicJet:
    """Intrinsic derivatives {(k, beta): Y^k d^beta f(zeta)} with 2k + |beta|_B <= order.

    Missing keys are zero derivatives.
    """

    structure: object
    base_point: GroupPoint
    order: int
    coeffs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.order < 0:
            raise JetError(f"jet order must be non-negative, got {self.order}")
        clean = {}
        for (k, beta), value in self.coeffs.items():
            beta = tuple(int(b) for b in beta)
            if len(beta) != self.structure.d:
                raise JetError(f"multi-index {beta} does not match dimension {self.structure.d}")
            if k < 0 or any(b < 0 for b in beta):
                raise JetError(f"negative index in jet key {(k, beta)}")
            if self.grade(k, beta) > self.order:
                raise JetError(f"jet key {(k, beta)} exceeds order {self.order}")
            clean[(int(k), beta)] = float(value)
        object.__setattr__(self, "coeffs", clean)

    def grade(self, k, beta):
        return 2 * k + self.structure.b_length(beta)

    @property
    def value(self):
        return self.coeffs.get((0, zero_index(self.structure.d)), 0.0)

    def get(self, k, beta):
        return self.coeffs.get((k, tuple(beta)), 0.0)

    def graded(self, n):
        """Non-zero terms of exact grade n, as {(k, beta): value}."""
        return {key: v for key, v in self.coeffs.items() if self.grade(*key) == n and v != 0.0}

    def truncate(self, n):
        """The jet of order n <= self.order at the same base point."""
        if n > self.order:
            raise JetError(f"cannot raise jet order from {self.order} to {n}")
        return IntrinsicJet(
            self.structure,
            self.base_point,
            n,
            {key: v for key, v in self.coeffs.items() if self.grade(*key) <= n},
        )


def _evaluate_terms(jet, terms, z):
    s, xi = jet.base_point.t, jet.base_point.x
    dt = z.t - s
    increment = np.asarray(z.x, dtype=float) - matrix_exp(jet.structure, dt) @ xi
    total = 0.0
    for (k, beta), value in terms.items():
        total += value / (math.factorial(k) * index_factorial(beta)) * dt ** k * float(monomial(increment, beta))
    return total


def taylor_eval(jet, z):
    return _evaluate_terms(jet, jet.coeffs, z)


def taylor_increment(jet_n, jet_prev, z):
    """
    T_n(f, zeta)(z) - T_{n-1}(f, zeta)(z): the grade-n terms only.
    With T_{-1} = 0, order 0 takes jet_prev=None.
    """
    if jet_prev is None:
        if jet_n.order != 0:
            raise JetError(f"only an order 0 jet has no predecessor, got order {jet_n.order}")
        return _evaluate_terms(jet_n, jet_n.graded(0), z)
    if not jet_n.base_point.allclose(jet_prev.base_point, atol=0.0):
        raise JetError("taylor_increment needs jets at the same base point")
    if jet_prev.order != jet_n.order - 1:
        raise JetError(f"expected consecutive orders, got {jet_n.order} and {jet_prev.order}")
    return _evaluate_terms(jet_n, jet_n.graded(jet_n.order), z)


def fd_step(levels, scale):
    """Step for a `levels`-fold nested central difference."""
    return FD_EPSILON ** (1.0 / (levels + 2)) * max(1.0, scale)


def _partial(structure, g, j, h):
    unit = np.zeros(structure.d)
    unit[j] = h

    def derivative(t, x):
        return (g(t, x + unit) - g(t, x - unit)) / (2.0 * h)

    return derivative


def _lie(structure, g, h):
    forward = matrix_exp(structure, h)
    backward = matrix_exp(structure, -h)

    def derivative(t, x):
        return (g(t + h, forward @ x) - g(t - h, backward @ x)) / (2.0 * h)

    return derivative


def finite_difference_jet(structure, f, zeta, n):
    """
    Jet of f(t, x) at zeta by nested central differences. Spatial derivatives
    are applied first, then Y along the integral curve (t + h, e^{hB} x).
    """
    if n > MAX_FD_ORDER:
        raise JetError(f"finite-difference jets are limited to order {MAX_FD_ORDER}, got {n}")
    scale = homogeneous_norm(structure, zeta)

    def base(t, x):
        return float(f(t, x))

    coeffs = {}
    for k in range(n // 2 + 1):
        for beta in structure.multi_indices(n - 2 * k):
            levels = k + sum(beta)
            h = fd_step(levels, scale)
            g = base
            for j, b in enumerate(beta):
                for _ in range(b):
                    g = _partial(structure, g, j, h)
            for _ in range(k):
                g = _lie(structure, g, h)
            coeffs[(k, beta)] = g(zeta.t, np.array(zeta.x))
    logger.debug("Finite-difference jet of order %d with %d entries", n, len(coeffs))
    return IntrinsicJet(structure, zeta, n, coeffs)
