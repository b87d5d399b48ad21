"""Tests for the Monte Carlo oracle."""

import math

import numpy as np
import pytest
from scipy.stats import norm

from asianexp_errors import ConfigError, KernelError, NumericalFailure
from asianexp_geometry import BlockStructure
from asianexp_mc import McConfig, _combine, convergence_table, simulate_price
from asianexp_models import bachelier_asian_model, bs_asian_model, custom_model, make_payoff
from asianexp_pricer import StateRule, price


@pytest.fixture
def proto():
    return BlockStructure.prototype()


def test_zero_volatility_is_deterministic(proto):
    model = bachelier_asian_model(0.0)
    cfg = McConfig(paths=1000, steps_per_unit=100, seed=1)
    estimate = simulate_price(model, make_payoff("average", proto), 0.0, 0.5, [1.2, 0.1], cfg, workers=1)
    assert estimate.mean == pytest.approx(0.1 + 1.2 * 0.5, abs=1e-12)
    assert estimate.stderr == pytest.approx(0.0, abs=1e-12)


def test_average_mean_under_bs(proto):
    cfg = McConfig(paths=20_000, steps_per_unit=200, seed=5)
    estimate = simulate_price(bs_asian_model(0.3), make_payoff("average", proto), 0.0, 0.5, [1.0, 0.0], cfg, workers=1)
    assert abs(estimate.mean - 0.5) < 4 * estimate.stderr


def test_same_seed_same_result_for_any_worker_count(proto):
    cfg = McConfig(paths=120_000, steps_per_unit=50, seed=11)
    payoff = make_payoff("fixed-call", proto, 1.0, 0.2)
    model = bs_asian_model(0.3)
    one = simulate_price(model, payoff, 0.0, 0.2, [1.0, 0.0], cfg, workers=1)
    two = simulate_price(model, payoff, 0.0, 0.2, [1.0, 0.0], cfg, workers=3)
    assert one == two
    other = simulate_price(model, payoff, 0.0, 0.2, [1.0, 0.0], McConfig(paths=120_000, steps_per_unit=50, seed=12), 1)
    assert other.mean != one.mean


def test_antithetic_pairs_reduce_variance(proto):
    model = bs_asian_model(0.3)
    payoff = make_payoff("average", proto)
    plain = simulate_price(model, payoff, 0.0, 0.5, [1.0, 0.0], McConfig(paths=10_000, steps_per_unit=100, seed=2), 1)
    paired = simulate_price(
        model, payoff, 0.0, 0.5, [1.0, 0.0], McConfig(paths=10_000, steps_per_unit=100, seed=2, antithetic=True), 1
    )
    assert paired.stderr < 0.5 * plain.stderr


def test_chan_combine_matches_pooled():
    rng = np.random.default_rng(0)
    parts = [rng.standard_normal(n) for n in (5, 17, 8)]
    stats = [(len(p), p.mean(), float(np.sum((p - p.mean()) ** 2))) for p in parts]
    count, mean, m2 = _combine(stats)
    pooled = np.concatenate(parts)
    assert count == 30
    assert mean == pytest.approx(pooled.mean())
    assert m2 == pytest.approx(float(np.sum((pooled - pooled.mean()) ** 2)))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"paths": 1},
        {"steps_per_unit": 0},
        {"min_steps": -1},
        {"paths": 11, "antithetic": True},
        {"scheme": "milstein"},
        {"seed": -1},
    ],
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        McConfig(**kwargs)


def test_steps_rounding():
    cfg = McConfig(steps_per_unit=2000)
    assert cfg.steps(0.25) == 500
    assert cfg.steps(1e-6) == 1
    floored = McConfig(steps_per_unit=2000, min_steps=1000)
    assert floored.steps(1 / 32) == 1000
    assert floored.steps(1.0) == 2000


def test_blow_up_is_reported(proto):
    model = custom_model({"a11": "0.01"}, {"a1": "1e10*x1**3"})
    cfg = McConfig(paths=100, steps_per_unit=10, seed=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalFailure, match="non-finite"):
            simulate_price(model, make_payoff("average", proto), 0.0, 1.0, [1.0, 0.0], cfg, workers=1)


def test_needs_positive_horizon(proto):
    with pytest.raises(KernelError):
        simulate_price(bs_asian_model(0.3), make_payoff("average", proto), 1.0, 1.0, [1.0, 0.0], McConfig(), 1)


@pytest.mark.slow
def test_bachelier_call_matches_closed_form(proto):
    sigma, T, strike = 0.3, 0.25, 1.0
    cfg = McConfig(paths=100_000, steps_per_unit=2000, seed=3, antithetic=True)
    n = cfg.steps(T)
    h = T / n
    # left-endpoint sums: A - n h S0 = sigma h^1.5 sum_m m Z_m, m < n
    sd = sigma * math.sqrt(h ** 3 * (n - 1) * n * (2 * n - 1) / 6) / T
    estimate = simulate_price(bachelier_asian_model(sigma), make_payoff("fixed-call", proto, strike, T), 0.0, T, [1.0, 0.0], cfg)
    expected = sd * norm.pdf(0.0)
    assert abs(estimate.mean - expected) < 3 * estimate.stderr


@pytest.mark.slow
def test_second_order_price_within_noise(proto):
    T = 0.25
    model = bs_asian_model(0.3)
    payoff = make_payoff("fixed-call", proto, 1.0, T)
    cfg = McConfig(paths=1_000_000, steps_per_unit=2000, seed=20240601)
    assert cfg.steps(T) == 500
    estimate = simulate_price(model, payoff, 0.0, T, [1.0, 0.0], cfg)
    assert estimate.stderr < 2e-4
    assert abs(price(model, payoff, 0.0, T, [1.0, 0.0], 2).price - estimate.mean) < 3 * estimate.stderr


@pytest.mark.slow
def test_halving_the_step_stays_within_noise(proto):
    T = 0.25
    model = bs_asian_model(0.3)
    payoff = make_payoff("fixed-call", proto, 1.0, T)
    coarse = simulate_price(model, payoff, 0.0, T, [1.0, 0.0], McConfig(paths=200_000, steps_per_unit=2000, seed=4))
    fine = simulate_price(model, payoff, 0.0, T, [1.0, 0.0], McConfig(paths=200_000, steps_per_unit=4000, seed=4))
    assert abs(coarse.mean - fine.mean) < 3 * math.hypot(coarse.stderr, fine.stderr)


@pytest.mark.slow
def test_bs_convergence_slopes(proto):
    def factory(maturity):
        return make_payoff("fixed-call", proto, 1.0, maturity)

    rule = StateRule("standardized", (1.0, 0.0), maturity=1.0, target=0.5)
    cfg = McConfig(paths=1_000_000, steps_per_unit=4000, min_steps=1000, seed=7, antithetic=True)
    table, slopes = convergence_table(bs_asian_model(0.3), factory, [0.25, 0.125, 0.0625, 0.03125], cfg, [0, 1], rule)
    assert set(table.columns) >= {"theta", "N", "U_N", "mc_mean", "stderr", "error", "noise_dominated"}
    assert [report.N for report in slopes] == [0, 1]
    for report in slopes:
        assert report.passed, report
