"""
Intrinsic geometry of a Kolmogorov operator.

Encodes the block drift matrix B, the homogeneous group law, the anisotropic
dilations, the homogeneous norm and the exact exponential of the nilpotent B.
Everything else in asianexp consumes these objects.
"""
import logging
import math
from dataclasses import dataclass, field
from itertools import product
from typing import NamedTuple

import numpy as np

from asianexp_errors import StructureError

# Configuration
RANK_TOLERANCE = 1e-10  # relative to the largest singular value of each block

logger = logging.getLogger(__name__)

MultiIndex = tuple[int, ...]


def height(beta):
    return sum(beta)


def index_factorial(beta):
    return math.prod(math.factorial(b) for b in beta)


def unit_index(d, i):
    return tuple(1 if j == i else 0 for j in range(d))


def zero_index(d):
    return (0,) * d


def add_index(a, b):
    return tuple(x + y for x, y in zip(a, b))


def sub_index(a, b):
    return tuple(x - y for x, y in zip(a, b))


def index_leq(a, b):
    return all(x <= y for x, y in zip(a, b))


def monomial(values, beta):
    """Evaluate values**beta over the last axis (works for stacked arrays)."""
    values = np.asarray(values, dtype=float)
    out = np.ones(values.shape[:-1])
    for j, b in enumerate(beta):
        if b:
            out = out * values[..., j] ** b
    return out


def _frozen_array(values):
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BlockStructure:
    """
    Drift matrix B with the sub-diagonal block layout

        B = [[0,   0,  ..., 0  ],
             [B_1, 0,  ..., 0  ],
             [0,   B_2,..., 0  ],
             ...
             [0,   ..., B_r, 0 ]]

    where B_j is p_j x p_{j-1} with full rank p_j and p_0 >= p_1 >= ... >= p_r.
    """

    p: tuple[int, ...]
    blocks: tuple[np.ndarray, ...] = ()
    matrix: np.ndarray = field(init=False, repr=False)
    sigma: tuple[int, ...] = field(init=False)
    _powers: tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self):
        p = tuple(int(v) for v in self.p)
        if not p or any(v < 1 for v in p):
            raise StructureError("block sizes must be positive integers")
        if any(a < b for a, b in zip(p, p[1:])):
            raise StructureError(f"block sizes must be non-increasing, got {p}")
        blocks = tuple(_frozen_array(b) for b in self.blocks)
        if len(blocks) != len(p) - 1:
            raise StructureError(f"expected {len(p) - 1} blocks for sizes {p}, got {len(blocks)}")

        d = sum(p)
        offsets = np.concatenate([[0], np.cumsum(p)])
        B = np.zeros((d, d))
        for j, block in enumerate(blocks, start=1):
            if block.shape != (p[j], p[j - 1]):
                raise StructureError(
                    f"block B_{j} must have shape {(p[j], p[j - 1])}, got {block.shape}"
                )
            singular = np.linalg.svd(block, compute_uv=False)
            rank = int(np.sum(singular > RANK_TOLERANCE * singular.max())) if singular.max() > 0 else 0
            if rank != p[j]:
                raise StructureError(f"block B_{j} has rank {rank}, needs full rank {p[j]}")
            B[offsets[j]:offsets[j + 1], offsets[j - 1]:offsets[j]] = block
        B.setflags(write=False)

        sigma = tuple(2 * j + 1 for j, size in enumerate(p) for _ in range(size))

        powers = [np.eye(d)]
        for _ in range(len(p) - 1):
            powers.append(powers[-1] @ B)
        for P in powers:
            P.setflags(write=False)
        if np.any(powers[-1] @ B != 0.0):
            raise StructureError("B is not nilpotent of order r + 1")

        object.__setattr__(self, "p", p)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "matrix", B)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "_powers", tuple(powers))
        logger.debug("Block structure p=%s, d=%d, sigma=%s", p, d, sigma)

    @classmethod
    def prototype(cls):
        """d=2 averaged diffusion: B = [[0, 0], [1, 0]]."""
        return cls((1, 1), (np.array([[1.0]]),))

    @classmethod
    def from_blocks(cls, blocks, p0=None):
        """Build from a list of dense blocks; sizes are read off the block shapes."""
        arrays = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
        if not arrays:
            if p0 is None:
                raise StructureError("p0 is required when there are no blocks")
            return cls((int(p0),), ())
        sizes = [arrays[0].shape[1]] + [a.shape[0] for a in arrays]
        return cls(tuple(sizes), tuple(arrays))

    @property
    def d(self):
        return sum(self.p)

    @property
    def r(self):
        return len(self.p) - 1

    @property
    def p0(self):
        return self.p[0]

    @property
    def homogeneous_dimension(self):
        """Q = sum of sigma_j, the spatial homogeneous dimension."""
        return sum(self.sigma)

    def b_length(self, beta):
        """|beta|_B = sum sigma_j beta_j."""
        return sum(s * b for s, b in zip(self.sigma, beta))

    def exp_coefficients(self, sign=1.0):
        """Matrices (sign B)^k / k!, k = 0..r: e^{sign t B} = sum_k t^k coeff_k."""
        return [(sign ** k) * P / math.factorial(k) for k, P in enumerate(self._powers)]

    def multi_indices(self, max_length):
        """All beta with |beta|_B <= max_length."""
        bounds = [max_length // s for s in self.sigma]
        for beta in product(*(range(b + 1) for b in bounds)):
            if self.b_length(beta) <= max_length:
                yield beta


@dataclass(frozen=True, eq=False)
class GroupPoint:
    t: float
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "x", _frozen_array(np.ravel(self.x)))

    @classmethod
    def identity(cls, d):
        return cls(0.0, np.zeros(d))

    def allclose(self, other, atol=1e-12):
        return abs(self.t - other.t) <= atol and np.allclose(self.x, other.x, rtol=0.0, atol=atol)


class NormConstants(NamedTuple):
    group: float
    exponential: float


def matrix_exp(structure, t):
    """Exact e^{tB} from the finite nilpotent series sum_{k<=r} (tB)^k/k!."""
    out = np.zeros((structure.d, structure.d))
    for k, coeff in enumerate(structure.exp_coefficients()):
        out += coeff * t ** k
    return out


def group_compose(structure, z, w):
    """(t, x) o (s, xi) = (t + s, e^{sB} x + xi)."""
    return GroupPoint(z.t + w.t, matrix_exp(structure, w.t) @ z.x + w.x)


def group_inverse(structure, z):
    """(t, x)^{-1} = (-t, -e^{-tB} x)."""
    return GroupPoint(-z.t, -(matrix_exp(structure, -z.t) @ z.x))


def _check_lambda(lam):
    if not lam > 0:
        raise StructureError(f"dilation parameter must be positive, got {lam}")


def spatial_dilation_matrix(structure, lam):
    _check_lambda(lam)
    return np.diag([lam ** s for s in structure.sigma])


def dilate_spatial(structure, lam, x):
    _check_lambda(lam)
    return np.asarray(x, dtype=float) * np.array([lam ** s for s in structure.sigma])


def dilate(structure, lam, z):
    """D(lambda)(t, x) = (lambda^2 t, D_0(lambda) x)."""
    return GroupPoint(lam ** 2 * z.t, dilate_spatial(structure, lam, z.x))


def spatial_norm(structure, x):
    """[x]_B = sum_j |x_j|^{1/sigma_j}; vectorised over leading axes."""
    x = np.abs(np.asarray(x, dtype=float))
    exponents = 1.0 / np.array(structure.sigma, dtype=float)
    return np.sum(x ** exponents, axis=-1)


def homogeneous_norm(structure, z):
    """||(t, x)||_B = |t|^{1/2} + [x]_B."""
    return math.sqrt(abs(z.t)) + float(spatial_norm(structure, z.x))


def estimate_norm_constant(structure, samples=10_000, seed=0, scale=1.0):
    """
    Empirical constants for the quasi-triangle inequality
    ||z o w|| <= c (||z|| + ||w||) and for [e^{tB}x] <= c (|t|^{1/2} + [x]).
    Only lower estimates of the true constants; used to check finiteness.
    """
    rng = np.random.default_rng(seed)
    d = structure.d
    group_ratio = 1.0
    exp_ratio = 1.0
    for _ in range(samples):
        z = GroupPoint(scale * rng.standard_normal(), scale * rng.standard_normal(d))
        w = GroupPoint(scale * rng.standard_normal(), scale * rng.standard_normal(d))
        denom = homogeneous_norm(structure, z) + homogeneous_norm(structure, w)
        if denom > 0:
            group_ratio = max(group_ratio, homogeneous_norm(structure, group_compose(structure, z, w)) / denom)
        moved = spatial_norm(structure, matrix_exp(structure, z.t) @ z.x)
        base = math.sqrt(abs(z.t)) + spatial_norm(structure, z.x)
        if base > 0:
            exp_ratio = max(exp_ratio, float(moved / base))
    return NormConstants(group_ratio, exp_ratio)


def covariance_coefficients(structure, A0):
    """
    Polynomial coefficients of C(t) = int_0^t e^{uB} A e^{uB*} du, with A the
    p0-block embedding of A0: C(t) = sum_m t^m coeffs[m].
    """
    A = embed_diffusion(structure, A0)
    exps = structure.exp_coefficients()
    coeffs = [np.zeros((structure.d, structure.d)) for _ in range(2 * structure.r + 2)]
    for k, Ek in enumerate(exps):
        for l, El in enumerate(exps):
            coeffs[k + l + 1] += (Ek @ A @ El.T) / (k + l + 1)
    return coeffs


def covariance(structure, A0, t):
    return sum(c * t ** m for m, c in enumerate(covariance_coefficients(structure, A0)))


def embed_diffusion(structure, A0):
    A0 = np.atleast_2d(np.asarray(A0, dtype=float))
    if A0.shape != (structure.p0, structure.p0):
        raise StructureError(f"A0 must be {structure.p0}x{structure.p0}, got {A0.shape}")
    A = np.zeros((structure.d, structure.d))
    A[:structure.p0, :structure.p0] = A0
    return A
