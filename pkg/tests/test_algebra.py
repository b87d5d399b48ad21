"""Tests for normal-ordered operators, G_n and L_n."""

import math

import numpy as np
import pytest
import sympy
from scipy import integrate

from asianexp_algebra import (
    THETA_ONLY,
    NormalOrderedOperator,
    build_G,
    build_operators,
    compose_derivative,
    compositions,
    evaluate_at_basepoint,
    integrate_simplex,
    m_operator,
    normal_order_product,
    reduce_operator,
    structural_violations,
    time_monomial,
    w_operator,
)
from asianexp_errors import JetError, OperatorError
from asianexp_geometry import BlockStructure, GroupPoint
from asianexp_models import bachelier_asian_model, bs_asian_model, custom_model
from asianexp_verify import prototype_l1_expected, run_suite


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def assert_same_operator(P, Q, atol=1e-14):
    keys = set(P.terms) | set(Q.terms)
    for key in keys:
        assert P.terms.get(key, 0.0) == pytest.approx(Q.terms.get(key, 0.0), abs=atol), key


@pytest.fixture
def proto():
    return BlockStructure.prototype()


@pytest.fixture
def bs_jets():
    model = bs_asian_model(0.3)
    return model, model.jets(GroupPoint(0.0, [1.2, 0.4]), 4)


# ---------------------------------------------------------------------------
# Products
# ---------------------------------------------------------------------------


def test_derivative_past_increment():
    product = NormalOrderedOperator.derivative((1, 0)) @ NormalOrderedOperator.increment((1, 0))
    assert product.terms == {
        (THETA_ONLY, (1, 0), (1, 0)): 1.0,
        (THETA_ONLY, (0, 0), (0, 0)): 1.0,
    }


def test_second_power_of_increment_derivative():
    # d1^2 o xi1^2 = xi1^2 d1^2 + 4 xi1 d1 + 2
    product = NormalOrderedOperator.derivative((2, 0)) @ NormalOrderedOperator.increment((2, 0))
    assert product.terms == {
        (THETA_ONLY, (2, 0), (2, 0)): 1.0,
        (THETA_ONLY, (1, 0), (1, 0)): 4.0,
        (THETA_ONLY, (0, 0), (0, 0)): 2.0,
    }


def test_w_operator_prototype(proto):
    W = w_operator(proto, 0)
    assert W.terms == {
        (THETA_ONLY, (0, 0), (1, 0)): 1.0,
        (time_monomial(d1=1), (0, 0), (0, 1)): -1.0,
    }
    square = W @ W
    assert square.terms == {
        (THETA_ONLY, (0, 0), (2, 0)): 1.0,
        (time_monomial(d1=1), (0, 0), (1, 1)): -2.0,
        (time_monomial(d1=2), (0, 0), (0, 2)): 1.0,
    }


def test_w_operator_outside_first_block(proto):
    with pytest.raises(OperatorError):
        w_operator(proto, 1)


def test_m_operator_prototype(proto):
    a = 0.09
    M1 = m_operator(proto, [[a]], 0)
    M2 = m_operator(proto, [[a]], 1)
    expected_1 = NormalOrderedOperator(2, {
        (THETA_ONLY, (1, 0), (0, 0)): 1.0,
        (time_monomial(d1=1), (0, 0), (1, 0)): a,
        (time_monomial(d1=2), (0, 0), (0, 1)): -a / 2,
    })
    expected_2 = NormalOrderedOperator(2, {
        (time_monomial(d1=1), (1, 0), (0, 0)): 1.0,
        (THETA_ONLY, (0, 1), (0, 0)): 1.0,
        (time_monomial(d1=2), (0, 0), (1, 0)): a / 2,
        (time_monomial(d1=3), (0, 0), (0, 1)): -a / 6,
    })
    assert_same_operator(M1, expected_1)
    assert_same_operator(M2, expected_2)


def test_m_components_commute(proto):
    M1 = m_operator(proto, [[0.2]], 0)
    M2 = m_operator(proto, [[0.2]], 1)
    assert_same_operator(M1 @ M2, M2 @ M1)


def test_m_operator_rejects_non_symmetric():
    structure = BlockStructure.from_blocks([[[1.0, 0.5]]])
    with pytest.raises(OperatorError):
        m_operator(structure, [[1.0, 2.0], [0.0, 1.0]], 0)


def test_product_is_associative(proto):
    P = m_operator(proto, [[0.3]], 1)
    Q = w_operator(proto, 0, slot=2)
    R = m_operator(proto, [[0.3]], 0, slot=3)
    assert_same_operator(normal_order_product(normal_order_product(P, Q), R), normal_order_product(P, normal_order_product(Q, R)))


def test_base_point_mismatch():
    left = NormalOrderedOperator.identity(2, GroupPoint(0.0, [1.0, 0.0]))
    right = NormalOrderedOperator.identity(2, GroupPoint(0.0, [2.0, 0.0]))
    with pytest.raises(OperatorError):
        left + right


# ---------------------------------------------------------------------------
# Time integrals
# ---------------------------------------------------------------------------


def test_compositions():
    assert sorted(compositions(3)) == [(1, 1, 1), (1, 2), (2, 1), (3,)]
    assert list(compositions(0)) == [()]


def test_single_slot_integral():
    assert integrate_simplex(time_monomial(d1=2), 1) == {3: pytest.approx(1.0 / 3.0)}


def test_two_slot_integral():
    result = integrate_simplex(time_monomial(d1=1, d2=2), 2)
    assert {p: c for p, c in result.items() if abs(c) > 1e-15} == {5: pytest.approx(0.1)}


def test_three_slot_integral_matches_quadrature():
    theta = 0.7
    mono = time_monomial(1, d1=1, d2=0, d3=2)
    exact = sum(c * theta ** p for p, c in integrate_simplex(mono, 3).items())
    numeric, _ = integrate.nquad(
        lambda s3, s2, s1: theta * s1 * s3 ** 2,
        [lambda s2, s1: [s2, theta], lambda s1: [s1, theta], [0.0, theta]],
    )
    assert exact == pytest.approx(numeric, rel=1e-10)


# ---------------------------------------------------------------------------
# G_n and L_n
# ---------------------------------------------------------------------------


def test_prototype_first_order_stencil(bs_jets):
    model, jets = bs_jets
    (L1,) = build_operators(model.structure, jets, 1)
    sigma, s0 = 0.3, 1.2
    expected = prototype_l1_expected(sigma ** 2 * s0 ** 2, 2 * sigma ** 2 * s0)
    stencil = {e.alpha: (e.theta_power, e.coeff) for e in evaluate_at_basepoint(L1)}
    assert set(stencil) == set(expected)
    for alpha, (power, coeff) in expected.items():
        assert stencil[alpha][0] == power
        assert stencil[alpha][1] == pytest.approx(coeff, rel=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_operator_index_bounds(bs_jets, n):
    model, jets = bs_jets
    operators = build_operators(model.structure, jets, n)
    assert structural_violations(operators[-1], model.structure, n) == []


@pytest.mark.parametrize("n", [1, 2])
def test_g_index_bounds(bs_jets, n):
    model, jets = bs_jets
    G = build_G(n, model.structure, jets)
    assert not G.is_zero()
    assert structural_violations(G, model.structure, n, kind="G") == []


def test_constant_model_has_no_corrections():
    model = bachelier_asian_model(0.3)
    jets = model.jets(GroupPoint(0.0, [1.0, 0.0]), 3)
    assert all(op.is_zero() for op in build_operators(model.structure, jets, 3))


def test_operator_needs_long_enough_jets(bs_jets):
    model, jets = bs_jets
    with pytest.raises(JetError):
        build_G(3, model.structure, model.jets(jets.base_point, 2))
    with pytest.raises(OperatorError):
        build_operators(model.structure, jets, 5)


def test_reduce_operator():
    op = NormalOrderedOperator(2, {
        (time_monomial(2), (1, 0), (0, 1)): 3.0,
        (time_monomial(1), (0, 0), (0, 1)): 1.0,
    })
    reduced = reduce_operator(op, 0.5, [2.0, -1.0])
    assert reduced == {(0, 1): pytest.approx(3.0 * 0.25 * 2.0 + 0.5)}


def test_reduce_rejects_pending_slots(proto):
    with pytest.raises(OperatorError):
        reduce_operator(w_operator(proto, 0), 1.0, [0.0, 0.0])


def test_compose_derivative_acts_on_increments():
    op = NormalOrderedOperator.increment((0, 1))
    composed = compose_derivative((0, 1), op)
    assert composed.terms == {
        (THETA_ONLY, (0, 1), (0, 1)): 1.0,
        (THETA_ONLY, (0, 0), (0, 0)): 1.0,
    }


def test_drift_enters_first_order(proto):
    model = custom_model({"a11": "0.04"}, {"a1": "0.1"})
    jets = model.jets(GroupPoint(0.0, [1.0, 0.0]), 1)
    (L1,) = build_operators(model.structure, jets, 1)
    stencil = {e.alpha: (e.theta_power, e.coeff) for e in evaluate_at_basepoint(L1)}
    # int_0^Theta 0.1 W_1(s) ds = 0.1 (Theta d1 - Theta^2/2 d2)
    assert stencil == {
        (1, 0): (1, pytest.approx(0.1)),
        (0, 1): (2, pytest.approx(-0.05)),
    }
    assert math.isclose(L1.max_abs(), 0.1)


def test_third_order_g_vanishes_for_quadratic_coefficient(bs_jets):
    model, jets = bs_jets
    assert build_G(3, model.structure, jets).is_zero()


# ---------------------------------------------------------------------------
# Products applied to functions
# ---------------------------------------------------------------------------

X1, X2 = sympy.symbols("x1 x2")
SMOOTH = sympy.exp(0.3 * X1 - 0.2 * X2) * sympy.cos(0.7 * X1 + 0.4 * X2) + X1 ** 3 * X2
TIMES = (0.7, 0.2, 0.45, 0.3, 0.6)  # Theta, Delta_1..Delta_4


def apply_operator(op, g):
    # increments are taken about the origin, so xi = x
    total = sympy.Integer(0)
    for (mono, delta, alpha), c in op.terms.items():
        weight = c * math.prod(value ** power for value, power in zip(TIMES, mono))
        total += weight * X1 ** delta[0] * X2 ** delta[1] * sympy.diff(g, X1, alpha[0], X2, alpha[1])
    return total


def operator_pairs():
    proto = BlockStructure.prototype()
    model = bs_asian_model(0.3)
    jets = model.jets(GroupPoint(0.0, [1.2, 0.4]), 4)
    W1 = w_operator(proto, 0)
    return [
        (m_operator(proto, [[0.09]], 0), m_operator(proto, [[0.09]], 1, slot=2)),
        (W1 @ W1, m_operator(proto, [[0.09]], 0, slot=2) @ m_operator(proto, [[0.09]], 1, slot=2)),
        (build_G(1, proto, jets, slot=1), build_G(1, proto, jets, slot=2)),
    ]


@pytest.mark.parametrize("index", range(3))
def test_product_matches_successive_application(index):
    P, Q = operator_pairs()[index]
    combined = apply_operator(normal_order_product(P, Q), SMOOTH)
    successive = apply_operator(P, apply_operator(Q, SMOOTH))
    rng = np.random.default_rng(index)
    for point in rng.uniform(-1.0, 1.0, size=(5, 2)):
        values = {X1: float(point[0]), X2: float(point[1])}
        expected = float(successive.evalf(subs=values))
        assert float(combined.evalf(subs=values)) == pytest.approx(expected, rel=1e-9, abs=1e-10)


@pytest.mark.parametrize("suite", ["geometry", "algebra", "taylor"])
def test_identity_suite(suite):
    results = run_suite(suite)
    assert results
    assert all(r.passed for r in results), [r for r in results if not r.passed]
