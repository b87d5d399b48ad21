"""
Normal-ordered differential operators.

Operators are finite sums c * Theta^b * Delta_1^k1 ... Delta_h^kh * xi^delta * D_x^alpha
with all multiplications by the increment xi = x - e^{(t - tbar)B} xbar to the
left of all derivatives. Theta = T - t; Delta_j = s_j - t is the pending time
variable of the j-th factor of an iterated integral. Products are rewritten
back into normal order with the Leibniz rule, and the iterated time integrals
over t <= s_1 <= ... <= s_h <= T are done exactly on monomials.
"""
import logging
import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from asianexp_errors import JetError, OperatorError
from asianexp_geometry import (
    add_index,
    covariance_coefficients,
    index_factorial,
    sub_index,
    unit_index,
    zero_index,
)

# Configuration
MAX_ORDER = 4
TIME_SLOTS = MAX_ORDER  # Delta_1..Delta_4; slot 0 of a monomial is Theta
PRUNE_RELATIVE = 1e-15
SYMMETRY_TOLERANCE = 1e-12

logger = logging.getLogger(__name__)

THETA_ONLY = (0,) * (TIME_SLOTS + 1)


def time_monomial(theta=0, **deltas):
    """Exponent tuple for Theta^theta * prod Delta_j^k, e.g. time_monomial(1, d2=3)."""
    mono = [theta] + [0] * TIME_SLOTS
    for name, power in deltas.items():
        mono[int(name[1:])] = power
    return tuple(mono)


def _delta_power(slot, power):
    mono = [0] * (TIME_SLOTS + 1)
    mono[slot] = power
    return tuple(mono)


def _check_slot(slot):
    if not 1 <= slot <= TIME_SLOTS:
        raise OperatorError(f"time slot must be in 1..{TIME_SLOTS}, got {slot}")


class NormalOrderedOperator:
    """Sum of normal-ordered terms keyed by (time monomial, delta, alpha)."""

    def __init__(self, d, terms=None, base_point=None):
        self.d = d
        self.base_point = base_point
        self.terms = {}
        for (mono, delta, alpha), c in (terms or {}).items():
            if c != 0.0:
                self.terms[(tuple(mono), tuple(delta), tuple(alpha))] = float(c)

    @classmethod
    def identity(cls, d, base_point=None):
        return cls(d, {(THETA_ONLY, zero_index(d), zero_index(d)): 1.0}, base_point)

    @classmethod
    def derivative(cls, alpha, base_point=None):
        alpha = tuple(alpha)
        return cls(len(alpha), {(THETA_ONLY, zero_index(len(alpha)), alpha): 1.0}, base_point)

    @classmethod
    def increment(cls, delta, base_point=None):
        delta = tuple(delta)
        return cls(len(delta), {(THETA_ONLY, delta, zero_index(len(delta))): 1.0}, base_point)

    def __len__(self):
        return len(self.terms)

    def __iter__(self):
        return iter(self.terms.items())

    def is_zero(self):
        return not self.terms

    def _merged_base(self, other):
        if self.d != other.d:
            raise OperatorError(f"dimension mismatch {self.d} != {other.d}")
        if self.base_point is None:
            return other.base_point
        if other.base_point is not None and not self.base_point.allclose(other.base_point, atol=0.0):
            raise OperatorError("operators are built on different base points")
        return self.base_point

    def __add__(self, other):
        base = self._merged_base(other)
        out = dict(self.terms)
        for key, c in other.terms.items():
            out[key] = out.get(key, 0.0) + c
        return NormalOrderedOperator(self.d, out, base)

    def scaled(self, factor):
        return NormalOrderedOperator(self.d, {k: factor * c for k, c in self.terms.items()}, self.base_point)

    def __matmul__(self, other):
        return normal_order_product(self, other)

    def max_abs(self):
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def pruned(self, relative=PRUNE_RELATIVE):
        cut = relative * self.max_abs()
        return NormalOrderedOperator(
            self.d, {k: c for k, c in self.terms.items() if abs(c) > cut}, self.base_point
        )

    def pending_slots(self):
        return {j for (mono, _, _) in self.terms for j in range(1, TIME_SLOTS + 1) if mono[j]}

    def format(self):
        """One term per line: coeff * Theta^b * Delta-monomial * x^delta * D^alpha."""
        lines = []
        for (mono, delta, alpha), c in sorted(self.terms.items()):
            deltas = " * ".join(f"Delta{j}^{k}" for j, k in enumerate(mono) if j and k) or "1"
            lines.append(
                f"{c:+.17g} * Theta^{mono[0]} * {deltas} * x^{list(delta)} * D^{list(alpha)}"
            )
        return "\n".join(lines)


def _falling(n, k):
    return math.perm(n, k)


def normal_order_product(P, Q):
    """
    P o Q in normal order, using
    D^a (xi^b f) = sum_g binom(a, g) b!/(b-g)! xi^(b-g) D^(a-g) f.
    """
    base = P._merged_base(Q)
    d = P.d
    out = {}
    for (m1, d1, a1), c1 in P.terms.items():
        for (m2, d2, a2), c2 in Q.terms.items():
            mono = tuple(x + y for x, y in zip(m1, m2))
            ranges = [range(min(a, b) + 1) for a, b in zip(a1, d2)]
            for gamma in product(*ranges):
                weight = 1.0
                for a, b, g in zip(a1, d2, gamma):
                    weight *= math.comb(a, g) * _falling(b, g)
                key = (mono, add_index(d1, sub_index(d2, gamma)), add_index(sub_index(a1, gamma), a2))
                out[key] = out.get(key, 0.0) + c1 * c2 * weight
    return NormalOrderedOperator(d, out, base).pruned()


def compositions(n):
    """All (i_1, ..., i_h) of positive integers summing to n."""
    if n == 0:
        yield ()
        return
    for first in range(1, n + 1):
        for rest in compositions(n - first):
            yield (first,) + rest


def w_operator(structure, i, slot=1):
    """W_i(Delta) = (e^{-Delta B*} grad)_i = sum_j (e^{-Delta B})_{ji} d_j."""
    if not 0 <= i < structure.p0:
        raise OperatorError(f"W_i needs i < p0={structure.p0}, got {i}")
    _check_slot(slot)
    terms = {}
    for k, coeff in enumerate(structure.exp_coefficients(sign=-1.0)):
        for j in range(structure.d):
            if coeff[j, i] != 0.0:
                key = (_delta_power(slot, k), zero_index(structure.d), unit_index(structure.d, j))
                terms[key] = terms.get(key, 0.0) + coeff[j, i]
    return NormalOrderedOperator(structure.d, terms)


def shift_matrix_coefficients(structure, A0):
    """Polynomial coefficients of K(Delta) = C(Delta) e^{-Delta B*}."""
    cov = covariance_coefficients(structure, A0)
    neg = structure.exp_coefficients(sign=-1.0)
    out = [np.zeros((structure.d, structure.d)) for _ in range(len(cov) + len(neg) - 1)]
    for m, C in enumerate(cov):
        for k, E in enumerate(neg):
            out[m + k] += C @ E.T
    return out


def _check_symmetric(A0):
    A0 = np.atleast_2d(np.asarray(A0, dtype=float))
    if not np.allclose(A0, A0.T, rtol=0.0, atol=SYMMETRY_TOLERANCE * max(1.0, np.abs(A0).max())):
        raise OperatorError("A0 must be symmetric")
    return A0


def m_operator(structure, A0, j, slot=1, base_point=None):
    """
    Component j of M(Delta, x) in increment coordinates:
    (e^{Delta B} xi)_j + (C(Delta) e^{-Delta B*} grad)_j.
    """
    A0 = _check_symmetric(A0)
    _check_slot(slot)
    d = structure.d
    terms = {}
    for k, E in enumerate(structure.exp_coefficients()):
        for l in range(d):
            if E[j, l] != 0.0:
                key = (_delta_power(slot, k), unit_index(d, l), zero_index(d))
                terms[key] = terms.get(key, 0.0) + E[j, l]
    for m, K in enumerate(shift_matrix_coefficients(structure, A0)):
        for l in range(d):
            if K[j, l] != 0.0:
                key = (_delta_power(slot, m), zero_index(d), unit_index(d, l))
                terms[key] = terms.get(key, 0.0) + K[j, l]
    return NormalOrderedOperator(d, terms, base_point)


class _SlotContext:
    """Per-slot cache of M components and their powers."""

    def __init__(self, structure, A0, slot, base_point):
        self.structure = structure
        self.slot = slot
        self.base_point = base_point
        self.components = [m_operator(structure, A0, j, slot, base_point) for j in range(structure.d)]
        self.w = [w_operator(structure, i, slot) for i in range(structure.p0)]
        self._powers = {zero_index(structure.d): NormalOrderedOperator.identity(structure.d, base_point)}

    def power(self, beta):
        beta = tuple(beta)
        if beta not in self._powers:
            j = max(i for i, b in enumerate(beta) if b)
            prev = self.power(sub_index(beta, unit_index(len(beta), j)))
            self._powers[beta] = normal_order_product(prev, self.components[j])
        return self._powers[beta]

    def time_factor(self, k, tau):
        """(s - tbar)^k = (Delta + tau)^k with tau = t - tbar."""
        d = self.structure.d
        terms = {}
        for i in range(k + 1):
            c = math.comb(k, i) * tau ** (k - i)
            if c != 0.0:
                terms[(_delta_power(self.slot, i), zero_index(d), zero_index(d))] = c
        return NormalOrderedOperator(d, terms, self.base_point)

    def substituted_increment(self, graded_terms, tau):
        """Grade-n Taylor terms with the spatial argument replaced by M."""
        out = NormalOrderedOperator(self.structure.d, base_point=self.base_point)
        for (k, beta), value in graded_terms.items():
            factor = value / (math.factorial(k) * index_factorial(beta))
            term = normal_order_product(self.time_factor(k, tau), self.power(beta))
            out = out + term.scaled(factor)
        return out


def _slot_context(cache, structure, jets, slot):
    if slot not in cache:
        cache[slot] = _SlotContext(structure, jets.a0(), slot, jets.base_point)
    return cache[slot]


def build_G(n, structure, jets, slot=1, tau=0.0, cache=None):
    """
    G_n(t, s, x) = 1/2 sum_ij (T_n - T_{n-1})(a_ij)(s, M) W_i W_j
                   + sum_i (T_{n-1} - T_{n-2})(a_i)(s, M) W_i,
    with s - t = Delta_slot and tau = t - tbar.
    """
    if n < 1:
        raise OperatorError(f"G_n needs n >= 1, got {n}")
    if jets.order < n:
        raise JetError(f"G_{n} needs jets of order {n}, have {jets.order}")
    cache = {} if cache is None else cache
    ctx = _slot_context(cache, structure, jets, slot)
    out = NormalOrderedOperator(structure.d, base_point=jets.base_point)
    for (i, j), jet in jets.diffusion.items():
        graded = jet.graded(n)
        if not graded:
            continue
        weight = 0.5 if i == j else 1.0
        left = ctx.substituted_increment(graded, tau)
        out = out + normal_order_product(left, normal_order_product(ctx.w[i], ctx.w[j])).scaled(weight)
    for i, jet in jets.drift.items():
        graded = jet.graded(n - 1)
        if not graded:
            continue
        left = ctx.substituted_increment(graded, tau)
        out = out + normal_order_product(left, ctx.w[i])
    return out.pruned()


def integrate_simplex(mono, h):
    """
    Integrate Theta^b prod Delta_j^{k_j} over t <= s_1 <= ... <= s_h <= T,
    innermost first. Returns {theta_power: coefficient}.
    """
    poly = {tuple(mono): 1.0}
    for j in range(h, 0, -1):
        nxt = {}
        for m, c in poly.items():
            k = m[j]
            reduced = list(m)
            reduced[j] = 0
            upper = list(reduced)
            upper[0] += k + 1
            upper = tuple(upper)
            nxt[upper] = nxt.get(upper, 0.0) + c / (k + 1)
            if j > 1:
                lower = list(reduced)
                lower[j - 1] += k + 1
                lower = tuple(lower)
                nxt[lower] = nxt.get(lower, 0.0) - c / (k + 1)
        poly = {m: c for m, c in nxt.items() if c != 0.0}
    return {m[0]: c for m, c in poly.items()}


def _integrated(op, h):
    out = {}
    for (mono, delta, alpha), c in op.terms.items():
        for power, w in integrate_simplex(mono, h).items():
            key = (time_monomial(power), delta, alpha)
            out[key] = out.get(key, 0.0) + c * w
    return NormalOrderedOperator(op.d, out, op.base_point).pruned()


def build_L(n, structure, jets, tau=0.0, cache=None, g_cache=None):
    """
    L_n = sum_h sum_{i_1+...+i_h = n} int_simplex G_{i_1}(s_1) ... G_{i_h}(s_h),
    returned as a pure Theta-polynomial operator.
    """
    if n < 1:
        raise OperatorError(f"L_n needs n >= 1, got {n}")
    if n > jets.order:
        raise JetError(f"L_{n} needs jets of order {n}, have {jets.order}")
    cache = {} if cache is None else cache
    g_cache = {} if g_cache is None else g_cache

    def g(order, slot):
        if (order, slot) not in g_cache:
            g_cache[(order, slot)] = build_G(order, structure, jets, slot, tau, cache)
        return g_cache[(order, slot)]

    total = NormalOrderedOperator(structure.d, base_point=jets.base_point)
    for parts in compositions(n):
        chain = g(parts[0], 1)
        for slot, order in enumerate(parts[1:], start=2):
            if chain.is_zero():
                break
            chain = normal_order_product(chain, g(order, slot))
        if chain.is_zero():
            continue
        total = total + _integrated(chain, len(parts))
    total = total.pruned()
    logger.debug("L_%d has %d terms", n, len(total))
    return total


def build_operators(structure, jets, N, tau=0.0):
    """[L_1, ..., L_N] sharing one cache of M powers and G operators."""
    if N > MAX_ORDER:
        raise OperatorError(f"orders above {MAX_ORDER} are not supported, got {N}")
    cache, g_cache = {}, {}
    return [build_L(n, structure, jets, tau, cache, g_cache) for n in range(1, N + 1)]


@dataclass(frozen=True)
class StencilEntry:
    theta_power: int
    coeff: float
    alpha: tuple


def evaluate_at_basepoint(op):
    """delta = 0 terms of a Theta-polynomial operator: the stencil sum c Theta^q D^alpha."""
    if op.pending_slots():
        raise OperatorError("operator still has unintegrated time variables")
    d = op.d
    return [
        StencilEntry(mono[0], c, alpha)
        for (mono, delta, alpha), c in sorted(op.terms.items())
        if delta == zero_index(d)
    ]


def reduce_operator(op, theta, xi):
    """Collapse an integrated operator at Theta and increment xi into {alpha: weight}."""
    if op.pending_slots():
        raise OperatorError("operator still has unintegrated time variables")
    xi = np.asarray(xi, dtype=float)
    out = {}
    for (mono, delta, alpha), c in op.terms.items():
        weight = c * theta ** mono[0]
        for value, power in zip(xi, delta):
            if power:
                weight *= value ** power
        if weight != 0.0:
            out[alpha] = out.get(alpha, 0.0) + weight
    return out


def compose_derivative(gamma, op):
    return normal_order_product(NormalOrderedOperator.derivative(gamma, op.base_point), op)


def structural_violations(op, structure, n, kind="L"):
    """
    Terms outside the canonical index sets: for L_n, 1 <= |alpha| <= 3n,
    |delta|_B <= n and Theta power (|alpha|_B - |delta|_B + n)/2; for G_n,
    1 <= |alpha| <= n + 2 and total time degree (|alpha|_B - |delta|_B + n - 2)/2.
    """
    bad = []
    for (mono, delta, alpha), c in op.terms.items():
        a_len, d_len = structure.b_length(alpha), structure.b_length(delta)
        if kind == "L":
            expected = a_len - d_len + n
            ok = 1 <= sum(alpha) <= 3 * n and d_len <= n and not any(mono[1:]) and 2 * mono[0] == expected
        else:
            expected = a_len - d_len + n - 2
            ok = 1 <= sum(alpha) <= n + 2 and d_len <= n and 2 * sum(mono) == expected
        if not ok:
            bad.append((mono, delta, alpha, c))
    return bad
