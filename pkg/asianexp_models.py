"""
Coefficient models and payoffs.

A CoefficientModel holds the diffusion coefficients a_ij and drift coefficients
a_i (i, j < p0) of the Kolmogorov operator together with its BlockStructure,
and answers intrinsic jets of every coefficient at a base point. Payoffs carry
their declared intrinsic Hoelder exponent k and, for the shipped ones, a
hyperplane descriptor used by the closed-form leading term.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import reduce
from threading import Lock
from typing import Callable, Optional

import numpy as np
import sympy

from asianexp_errors import ConfigError, JetError
from asianexp_geometry import BlockStructure, GroupPoint
from asianexp_taylor import IntrinsicJet, finite_difference_jet

# Configuration
PARABOLICITY_SAMPLES = 256
FIXED_STRIKE_EXPONENT = 3
FLOAT_STRIKE_EXPONENT = 1

logger = logging.getLogger(__name__)


def _state_symbols(d):
    return sympy.Symbol("t"), sympy.symbols(f"x1:{d + 1}")


class Coefficient(ABC):
    """A scalar coefficient c(t, x), vectorised over the leading axes of x."""

    @abstractmethod
    def __call__(self, t, x):
        ...

    @abstractmethod
    def jet(self, structure, base_point, order):
        """IntrinsicJet of the coefficient at base_point."""

    def is_constant(self):
        return False

    def depends_only_on(self, p0):
        """True when the coefficient depends on x_1..x_p0 only and not on t."""
        return False


class ExpressionCoefficient(Coefficient):
    """
    Coefficient given as an expression in t, x1..xd and named parameters.
    Jets are exact: Y^k d^beta is taken symbolically.
    """

    def __init__(self, text, structure, params=None):
        self.text = str(text)
        self.structure = structure
        self._t, self._x = _state_symbols(structure.d)
        local = {"t": self._t, **{s.name: s for s in self._x}}
        try:
            expr = sympy.sympify(self.text, locals=local)
        except (sympy.SympifyError, SyntaxError, TypeError) as exc:
            raise ConfigError("model.coefficients", f"cannot parse {self.text!r}: {exc}") from exc
        expr = expr.subs({sympy.Symbol(k): v for k, v in (params or {}).items()})
        unknown = expr.free_symbols - {self._t, *self._x}
        if unknown:
            names = ", ".join(sorted(s.name for s in unknown))
            raise ConfigError("model.coefficients", f"unbound symbols in {self.text!r}: {names}")
        self.expr = expr
        self._derivatives = {}
        self._lock = Lock()
        self._numeric = self._lambdify(expr)
        drift = sympy.Matrix(structure.matrix.tolist()) * sympy.Matrix(self._x)
        self._bx = [sympy.nsimplify(v) for v in drift]

    def _lambdify(self, expr):
        return sympy.lambdify((self._t, *self._x), expr, modules="numpy")

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        value = self._numeric(t, *np.moveaxis(x, -1, 0))
        return np.broadcast_to(np.asarray(value, dtype=float), x.shape[:-1]).copy()

    def _lie(self, expr):
        return sympy.diff(expr, self._t) + sum(b * sympy.diff(expr, xi) for b, xi in zip(self._bx, self._x))

    def derivative(self, k, beta):
        """Symbolic Y^k d^beta c."""
        key = (k, tuple(beta))
        with self._lock:
            if key not in self._derivatives:
                expr = self.expr
                for j, b in enumerate(beta):
                    if b:
                        expr = sympy.diff(expr, self._x[j], b)
                for _ in range(k):
                    expr = self._lie(expr)
                self._derivatives[key] = (expr, self._lambdify(expr))
            return self._derivatives[key]

    def jet(self, structure, base_point, order):
        if structure is not self.structure and structure.d != self.structure.d:
            raise JetError("coefficient was built for another block structure")
        coeffs = {}
        for k in range(order // 2 + 1):
            for beta in structure.multi_indices(order - 2 * k):
                expr, numeric = self.derivative(k, beta)
                if expr.is_zero:
                    continue
                coeffs[(k, beta)] = float(numeric(base_point.t, *base_point.x))
        return IntrinsicJet(structure, base_point, order, coeffs)

    def is_constant(self):
        return not self.expr.free_symbols

    def depends_only_on(self, p0):
        return self.expr.free_symbols <= set(self._x[:p0])

    def __repr__(self):
        return f"ExpressionCoefficient({self.text!r})"


class CallableCoefficient(Coefficient):
    """Coefficient given as a Python function f(t, x); jets by finite differences."""

    def __init__(self, func, p0_only=False):
        self.func = func
        self.p0_only = p0_only

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.func(t, x), dtype=float), x.shape[:-1]).copy()

    def jet(self, structure, base_point, order):
        return finite_difference_jet(structure, self.func, base_point, order)

    def depends_only_on(self, p0):
        return self.p0_only


@dataclass(frozen=True)
class ModelJets:
    """Jets of every coefficient at one base point: a_ij to order N, a_i to order N-1."""

    base_point: GroupPoint
    order: int
    diffusion: dict
    drift: dict

    def a0(self):
        p0 = max((max(i, j) for i, j in self.diffusion), default=-1) + 1
        out = np.zeros((p0, p0))
        for (i, j), jet in self.diffusion.items():
            out[i, j] = out[j, i] = jet.value
        return out


@dataclass(eq=False)
class CoefficientModel:
    """
    Kolmogorov operator 1/2 sum a_ij d_ij + sum a_i d_i + <Bx, grad> + d_t.
    `diffusion` is keyed by (i, j) with i <= j (0-based, both < p0); `drift` by i.
    """

    name: str
    structure: BlockStructure
    diffusion: dict
    drift: dict = field(default_factory=dict)
    bounds: Optional[tuple] = None  # (M, mu) of the non-degeneracy condition
    domain: Optional[Callable] = None

    def __post_init__(self):
        p0 = self.structure.p0
        clean = {}
        for (i, j), coeff in self.diffusion.items():
            i, j = min(i, j), max(i, j)
            if j >= p0:
                raise ConfigError("model.diffusion", f"a_{i + 1}{j + 1} is outside the p0={p0} block")
            clean[(i, j)] = coeff
        for i in range(p0):
            if (i, i) not in clean:
                raise ConfigError("model.diffusion", f"missing diagonal coefficient a_{i + 1}{i + 1}")
        if any(i >= p0 for i in self.drift):
            raise ConfigError("model.drift", f"drift coefficients must act on the first {p0} coordinates")
        self.diffusion = clean

    @property
    def d(self):
        return self.structure.d

    @property
    def p0(self):
        return self.structure.p0

    def diffusion_matrix(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.p0, self.p0))
        for (i, j), coeff in self.diffusion.items():
            value = coeff(t, x)
            out[..., i, j] = value
            out[..., j, i] = value
        return out

    def drift_vector(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.p0,))
        for i, coeff in self.drift.items():
            out[..., i] = coeff(t, x)
        return out

    def jets(self, base_point, order):
        diffusion = {key: c.jet(self.structure, base_point, order) for key, c in self.diffusion.items()}
        drift = {}
        if order >= 1:
            drift = {i: c.jet(self.structure, base_point, order - 1) for i, c in self.drift.items()}
        return ModelJets(base_point, order, diffusion, drift)

    def is_constant(self):
        return all(c.is_constant() for c in (*self.diffusion.values(), *self.drift.values()))

    def small_vol_applicable(self):
        """Coefficients depend on the first p0 spatial variables only."""
        return all(c.depends_only_on(self.p0) for c in (*self.diffusion.values(), *self.drift.values()))

    def in_domain(self, x):
        return True if self.domain is None else bool(self.domain(np.asarray(x, dtype=float)))

    def check_parabolicity(self, t, x, spread=0.5, samples=PARABOLICITY_SAMPLES, seed=0):
        """Sample A_0 around x; True when every sample is positive definite and within bounds."""
        rng = np.random.default_rng(seed)
        x = np.asarray(x, dtype=float)
        points = x + spread * np.abs(x).max(initial=1.0) * rng.uniform(-1.0, 1.0, size=(samples, self.d))
        eigen = np.linalg.eigvalsh(self.diffusion_matrix(t, points))
        low, high = (0.0, np.inf)
        if self.bounds is not None:
            M, mu = self.bounds
            low, high = mu * M, M
        ok = bool(np.all(eigen > low) and np.all(eigen < high))
        if not ok:
            logger.warning(
                "Non-degeneracy fails for %s near x=%s: eigenvalues in [%.3g, %.3g]",
                self.name, x.tolist(), eigen.min(), eigen.max(),
            )
        return ok


def bs_asian_model(sigma, structure=None):
    """Black-Scholes averaged diffusion: a_11 = sigma^2 x1^2."""
    structure = structure or BlockStructure.prototype()
    coeff = ExpressionCoefficient("sigma**2 * x1**2", structure, {"sigma": sigma})
    return CoefficientModel("bs-asian", structure, {(0, 0): coeff}, domain=lambda x: x[0] > 0)


def bachelier_asian_model(sigma, structure=None):
    """Constant-coefficient averaged diffusion: a_11 = sigma^2."""
    structure = structure or BlockStructure.prototype()
    coeff = ExpressionCoefficient("sigma**2", structure, {"sigma": sigma})
    return CoefficientModel("bachelier-asian", structure, {(0, 0): coeff})


def _parse_pair(key):
    text = str(key).replace("a", "").replace("_", "")
    if len(text) != 2 or not text.isdigit():
        raise ConfigError("model.diffusion", f"keys must look like a11 or a12, got {key!r}")
    return int(text[0]) - 1, int(text[1]) - 1


def custom_model(diffusion, drift=None, structure=None, params=None, name="custom"):
    """
    Model from expression mappings, e.g. diffusion={"a11": "0.09*x1**2"},
    drift={"a1": "0.1*x1"}.
    """
    structure = structure or BlockStructure.prototype()
    if not diffusion:
        raise ConfigError("model.diffusion", "custom models need at least one diffusion coefficient")
    diff = {_parse_pair(k): ExpressionCoefficient(v, structure, params) for k, v in diffusion.items()}
    dr = {}
    for key, text in (drift or {}).items():
        idx = str(key).replace("a", "").replace("_", "")
        if not idx.isdigit():
            raise ConfigError("model.drift", f"keys must look like a1, got {key!r}")
        dr[int(idx) - 1] = ExpressionCoefficient(text, structure, params)
    return CoefficientModel(name, structure, diff, dr)


@dataclass(frozen=True, eq=False)
class Hyperplane:
    """phi(y) = (w.y - K)^+ (call), (K - w.y)^+ (put) or w.y - K (linear)."""

    w: np.ndarray
    strike: float
    kind: str = "call"

    def __post_init__(self):
        if self.kind not in ("call", "put", "linear"):
            raise ConfigError("payoff.kind", f"unknown hyperplane kind {self.kind!r}")
        w = np.array(self.w, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    def __call__(self, y):
        s = np.asarray(y, dtype=float) @ self.w - self.strike
        if self.kind == "call":
            return np.maximum(s, 0.0)
        if self.kind == "put":
            return np.maximum(-s, 0.0)
        return s


@dataclass(frozen=True, eq=False)
class PayoffSpec:
    """
    Payoff phi with intrinsic exponent k. `components` lists weighted hyperplane
    pieces (c, plane) summing to phi; a single-plane payoff also sets `hyperplane`.
    """

    name: str
    function: Callable
    k: float
    hyperplane: Optional[Hyperplane] = None
    components: tuple = ()

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError("payoff.k", f"intrinsic exponent must be non-negative, got {self.k}")
        if self.hyperplane is not None and not self.components:
            object.__setattr__(self, "components", ((1.0, self.hyperplane),))

    def __call__(self, y):
        return self.function(np.asarray(y, dtype=float))

    def check_exponent(self, structure):
        if self.k > 2 * structure.r + 1:
            raise ConfigError("payoff.k", f"k={self.k} exceeds 2r+1={2 * structure.r + 1}")


def hyperplane_payoff(name, w, strike, kind, k):
    plane = Hyperplane(w, strike, kind)
    return PayoffSpec(name, plane, k, plane)


def combine_payoffs(terms, name="combination"):
    """
    Linear combination sum c_i phi_i. Hyperplane pieces of the terms are kept,
    so a combination of hyperplane payoffs is still priced in closed form.
    """
    terms = [(float(c), p) for c, p in terms]

    def function(y):
        return reduce(np.add, (c * p(y) for c, p in terms))

    components = ()
    if all(p.components for _, p in terms):
        components = tuple((c * weight, plane) for c, p in terms for weight, plane in p.components)
    return PayoffSpec(name, function, min(p.k for _, p in terms), components=components)


def make_payoff(name, structure, strike=None, maturity=None, value=1.0):
    """
    Shipped payoffs on the averaged state (S, A): the average is A_T / maturity,
    read from the last coordinate.
    """
    d = structure.d
    needs_strike = name in ("fixed-call", "fixed-put")
    needs_maturity = name in ("fixed-call", "fixed-put", "float-call", "float-put")
    if needs_strike and strike is None:
        raise ConfigError("strike", f"payoff {name} needs a strike")
    if needs_maturity and not (maturity and maturity > 0):
        raise ConfigError("T", f"payoff {name} needs a positive maturity")

    last = np.zeros(d)
    last[-1] = 1.0
    first = np.zeros(d)
    first[0] = 1.0
    if name in ("fixed-call", "fixed-put"):
        kind = "call" if name == "fixed-call" else "put"
        return hyperplane_payoff(name, last / maturity, float(strike), kind, FIXED_STRIKE_EXPONENT)
    if name in ("float-call", "float-put"):
        kind = "call" if name == "float-call" else "put"
        return hyperplane_payoff(name, first - last / maturity, 0.0, kind, FLOAT_STRIKE_EXPONENT)
    if name == "average":
        return hyperplane_payoff(name, last, 0.0, "linear", 2 * structure.r + 1)
    if name == "constant":
        return hyperplane_payoff(name, np.zeros(d), -float(value), "linear", 2 * structure.r + 1)
    raise ConfigError("payoff", f"unknown payoff {name!r}; choose from {', '.join(PAYOFFS)}")


MODELS = ("bs-asian", "bachelier-asian", "custom")
PAYOFFS = ("fixed-call", "fixed-put", "float-call", "float-put", "average", "constant")
