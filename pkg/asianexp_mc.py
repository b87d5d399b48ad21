"""
Monte Carlo oracle for Kolmogorov diffusions.

Euler scheme for dX = (BX + a(t, X)) dt + Sigma(t, X) dW with Sigma Sigma* = A_0
acting on the first p0 coordinates. For the averaged diffusion this is
S_{k+1} = S_k + sigma(S_k) sqrt(h) Z_k, A_{k+1} = A_k + S_k h.
Paths are simulated in fixed-size chunks, each with its own counter-based
stream keyed by (seed, chunk), so results do not depend on the worker count.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
import psutil

from asianexp_errors import ConfigError, KernelError, NumericalFailure
from asianexp_pricer import SLOPE_TOLERANCE, SlopeReport, error_order_estimate, fit_slope, price

# Configuration
CHUNK_PATHS = 50_000
DEFAULT_PATHS = 100_000
DEFAULT_STEPS_PER_UNIT = 2000
DEFAULT_SEED = 20240601
NOISE_MULTIPLE = 3.0

logger = logging.getLogger(__name__)


def default_workers():
    return psutil.cpu_count(logical=False) or 1


@dataclass(frozen=True)
class McConfig:
    paths: int = DEFAULT_PATHS
    steps_per_unit: int = DEFAULT_STEPS_PER_UNIT
    min_steps: int = 0  # floor on steps per path for short horizons
    seed: int = DEFAULT_SEED
    antithetic: bool = False
    scheme: str = "euler"

    def __post_init__(self):
        if self.paths < 2:
            raise ConfigError("mc.paths", f"need at least 2 paths, got {self.paths}")
        if self.steps_per_unit < 1:
            raise ConfigError("mc.steps_per_unit", f"need at least 1 step per unit time, got {self.steps_per_unit}")
        if self.min_steps < 0:
            raise ConfigError("mc.min_steps", f"must be non-negative, got {self.min_steps}")
        if self.antithetic and self.paths % 2:
            raise ConfigError("mc.paths", "antithetic sampling needs an even number of paths")
        if self.scheme != "euler":
            raise ConfigError("mc.scheme", f"only the euler scheme is available, got {self.scheme!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("mc.seed", "seed must be a 64-bit unsigned integer")

    def steps(self, theta):
        return max(1, self.min_steps, math.ceil(self.steps_per_unit * theta - 1e-9))


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    paths: int


def _chunk_sizes(paths):
    full, rest = divmod(paths, CHUNK_PATHS)
    return [CHUNK_PATHS] * full + ([rest] if rest else [])


def _diffusion_factor(A):
    if A.shape[-1] == 1:
        return np.sqrt(np.clip(A, 0.0, None))
    return np.linalg.cholesky(A)


def _simulate_chunk(model, payoff, t, T, x, steps, cfg, chunk, size):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(chunk,))))
    B = model.structure.matrix
    p0 = model.p0
    h = (T - t) / steps
    sqrt_h = math.sqrt(h)
    X = np.tile(np.asarray(x, dtype=float), (size, 1))
    for k in range(steps):
        tk = t + k * h
        if cfg.antithetic:
            half = rng.standard_normal((size // 2, p0))
            Z = np.concatenate([half, -half])
        else:
            Z = rng.standard_normal((size, p0))
        step = X @ B.T
        step[:, :p0] += model.drift_vector(tk, X)
        noise = np.einsum("nij,nj->ni", _diffusion_factor(model.diffusion_matrix(tk, X)), Z)
        X = X + step * h
        X[:, :p0] += noise * sqrt_h
        bad = ~np.isfinite(X).all(axis=1)
        if bad.any():
            raise NumericalFailure(
                f"non-finite path values at step {k + 1}/{steps} in chunk {chunk}: {int(bad.sum())} paths"
            )
    values = payoff(X)
    if cfg.antithetic:
        values = 0.5 * (values[: size // 2] + values[size // 2:])
    mean = float(np.mean(values))
    return len(values), mean, float(np.sum((values - mean) ** 2))


def _combine(stats):
    count, mean, m2 = stats[0]
    for n_b, mean_b, m2_b in stats[1:]:
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * n_b / total
        m2 = m2 + m2_b + delta * delta * count * n_b / total
        count = total
    return count, mean, m2


def simulate_price(model, payoff, t, T, x, cfg, workers=None):
    """E[phi(X_T) | X_t = x] with its standard error."""
    if not T > t:
        raise KernelError(f"simulation needs T > t, got t={t}, T={T}")
    steps = cfg.steps(T - t)
    sizes = _chunk_sizes(cfg.paths)
    if cfg.antithetic and any(s % 2 for s in sizes):
        raise ConfigError("mc.paths", "antithetic chunks need an even number of paths")
    workers = workers or default_workers()
    logger.debug("Simulating %d paths in %d chunks, %d steps, %d workers", cfg.paths, len(sizes), steps, workers)

    def run(item):
        chunk, size = item
        return _simulate_chunk(model, payoff, t, T, x, steps, cfg, chunk, size)

    items = list(enumerate(sizes))
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            stats = list(pool.map(run, items))
    else:
        stats = [run(item) for item in items]
    count, mean, m2 = _combine(stats)
    stderr = math.sqrt(m2 / (count - 1) / count) if count > 1 else 0.0
    return McEstimate(mean, stderr, cfg.paths)


def convergence_table(model, payoff_factory, maturities, cfg, orders, rule, base="start", workers=None):
    """
    |U_N - MC| against theta for each N, with slopes fitted on the points
    that are not noise-dominated (|error| >= 3 stderr).
    """
    orders = sorted(set(orders))
    rows = []
    k = None
    for theta in maturities:
        t, T, x, payoff = rule.state(model, theta, payoff_factory)
        k = payoff.k
        estimate = simulate_price(model, payoff, t, T, x, cfg, workers)
        result = price(model, payoff, t, T, x, max(orders), base)
        for N in orders:
            error = abs(result.cumulative[N] - estimate.mean)
            rows.append({
                "theta": theta,
                "t": t,
                "T": T,
                "N": N,
                "U_N": result.cumulative[N],
                "mc_mean": estimate.mean,
                "stderr": estimate.stderr,
                "error": error,
                "noise_dominated": error < NOISE_MULTIPLE * estimate.stderr,
            })
        logger.info("theta=%g: MC %.8g +- %.2g", theta, estimate.mean, estimate.stderr)
    table = pd.DataFrame(rows)
    slopes = []
    for N in orders:
        part = table[(table["N"] == N) & ~table["noise_dominated"]]
        expected = float(error_order_estimate(k or 0, N).exponent)
        slope = fit_slope(part["theta"], part["error"])
        if slope is None:
            note = "exact" if len(part) == 0 else "too few points"
            slopes.append(SlopeReport(N, None, expected, len(part), len(part) == 0, note))
            continue
        slopes.append(SlopeReport(N, slope, expected, len(part), slope >= expected - SLOPE_TOLERANCE))
    return table, slopes
