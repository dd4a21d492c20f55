"""
Preference machinery: simplex sampling, Tchebycheff aggregation, the
preference / reference-vector transform and the hypervolume scalarization estimator.

All objectives are minimized. Arrays broadcast over leading dimensions, the last
axis is the objective axis.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import gammaln

from helpers.errors import DomainError

logger = logging.getLogger(__name__)

PREFERENCE_FLOOR = 1e-6
_HV_CHUNK = 8192


@dataclass(frozen=True)
class Preference:
    """Point on the probability simplex, every weight at least PREFERENCE_FLOOR"""
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("preference weights must be a non-empty vector")
        if abs(w.sum() - 1.0) > 1e-9 or np.any(w < PREFERENCE_FLOOR * (1 - 1e-9)):
            raise ValueError(f"not a floored simplex point: {w}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_weights(cls, weights) -> "Preference":
        """Project arbitrary nonnegative weights onto the floored simplex"""
        return cls(project_to_simplex(np.asarray(weights, dtype=float)))

    @property
    def m(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class ScalarizationContext:
    """Ideal point z* the scalarization is measured from (minimization)"""
    ideal_point: np.ndarray


def _ideal(ctx: Optional[ScalarizationContext], m: int) -> np.ndarray:
    return np.zeros(m) if ctx is None else np.asarray(ctx.ideal_point, dtype=float)


def _weights(lam: Union[Preference, np.ndarray]) -> np.ndarray:
    return lam.weights if isinstance(lam, Preference) else np.asarray(lam, dtype=float)


def project_to_simplex(weights: np.ndarray) -> np.ndarray:
    """Normalize to unit L1 norm, floor at PREFERENCE_FLOOR and renormalize"""
    w = np.maximum(np.asarray(weights, dtype=float), 0.0)
    total = w.sum(axis=-1, keepdims=True)
    w = np.where(total > 0, w / np.where(total > 0, total, 1.0), 1.0 / w.shape[-1])
    w = np.maximum(w, PREFERENCE_FLOOR)
    return w / w.sum(axis=-1, keepdims=True)


def sample_preferences(rng: np.random.Generator, m: int, n: int) -> np.ndarray:
    """
    Draw n preferences uniformly from the simplex

    Normalized unit-rate exponentials are exactly uniform on the simplex.

    Returns:
        Array of shape (n, m)
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    draws = rng.exponential(1.0, size=(n, m))
    return project_to_simplex(draws)


def sample_preference(rng: np.random.Generator, m: int) -> Preference:
    """Draw one preference uniformly from the simplex"""
    return Preference(sample_preferences(rng, m, 1)[0])


def tchebycheff(y, lam, ctx: Optional[ScalarizationContext] = None) -> np.ndarray:
    """
    Tchebycheff scalarization s = max_i lam_i (y_i - z*_i)

    Args:
        y: Objective vectors, shape (..., m)
        lam: Preferences, shape (..., m), broadcast against y
        ctx: Ideal point; z* = 0 when omitted

    Returns:
        Scalarized values, shape broadcast(y, lam)[:-1]
    """
    y = np.asarray(y, dtype=float)
    w = _weights(lam)
    return np.max(w * (y - _ideal(ctx, y.shape[-1])), axis=-1)


def aggregation_target(y, lam, ctx: Optional[ScalarizationContext] = None) -> np.ndarray:
    """Aggregation target g = -tchebycheff(y, lam); larger is better"""
    return -tchebycheff(y, lam, ctx)


def lambda_constant(lam) -> np.ndarray:
    """c_lambda = sqrt(sum_j 1 / lambda_j^2)"""
    w = _weights(lam)
    return np.sqrt(np.sum(1.0 / np.square(w), axis=-1))


def preference_to_refvec(lam) -> np.ndarray:
    """w_j = 1 / (lambda_j c_lambda), a unit vector in the positive orthant"""
    w = _weights(lam)
    return 1.0 / (w * lambda_constant(w)[..., None])


def refvec_to_preference(w) -> np.ndarray:
    """Inverse transform: lambda_j proportional to 1 / w_j, normalized to the simplex"""
    inv = 1.0 / np.asarray(w, dtype=float)
    return inv / inv.sum(axis=-1, keepdims=True)


def dimension_constant(m: int) -> float:
    """c_m = pi^(m/2) / (2^m Gamma(m/2 + 1)), the volume of the unit-ball orthant"""
    if m < 1:
        raise ValueError("m must be at least 1")
    return float(np.exp(0.5 * m * np.log(np.pi) - m * np.log(2.0) - gammaln(0.5 * m + 1.0)))


def sample_refvecs(rng: np.random.Generator, m: int, n: int) -> np.ndarray:
    """Reference vectors uniform on the positive-orthant unit sphere, shape (n, m)"""
    draws = np.abs(rng.standard_normal(size=(n, m)))
    # a zero row has probability zero but would divide by zero
    draws = np.maximum(draws, np.finfo(float).tiny)
    return draws / np.linalg.norm(draws, axis=1, keepdims=True)


def check_refvecs(refvecs, m: int) -> np.ndarray:
    """
    Validate pre-drawn reference vectors: shape (K, m), positive, unit norm

    Raises:
        DomainError: If a row leaves the positive-orthant unit sphere
    """
    w = np.atleast_2d(np.asarray(refvecs, dtype=float))
    if w.shape[1] != m or w.shape[0] == 0:
        raise DomainError(f"expected reference vectors of shape (K, {m}), got {w.shape}")
    if np.any(w <= 0) or np.any(np.abs(np.linalg.norm(w, axis=1) - 1.0) > 1e-9):
        raise DomainError("reference vectors must be positive unit vectors")
    return w


def refvec_tchebycheff(y, w, ctx: Optional[ScalarizationContext] = None) -> np.ndarray:
    """s_w(y) = max_j (y_j - z*_j) / w_j"""
    y = np.asarray(y, dtype=float)
    return np.max((y - _ideal(ctx, y.shape[-1])) / np.asarray(w, dtype=float), axis=-1)


def hv_scalarization_estimate(
    front,
    ref_point,
    ctx: Optional[ScalarizationContext] = None,
    n_samples: int = 100_000,
    rng: Optional[np.random.Generator] = None,
    refvecs: Optional[np.ndarray] = None,
    return_stderr: bool = False,
) -> Union[float, Tuple[float, float]]:
    """
    Monte-Carlo hypervolume via the Tchebycheff scalarization identity

    HV = prod_j (r_j - z*_j) - c_m E_w[rho(w)^m] with w uniform on the positive
    unit sphere, where rho(w) is the radial extent of the undominated part of the
    box [z*, r] along w: min(min_i s_w(y_i), min_j (r_j - z*_j) / w_j).

    Args:
        front: Points, shape (n, m), each with z* <= y < r
        ref_point: Reference point r
        ctx: Ideal point z*; origin when omitted
        n_samples: Number K of reference vectors
        rng: Generator for the reference vectors
        refvecs: Pre-drawn reference vectors (K, m); shared across calls for common random numbers
        return_stderr: Also return the Monte-Carlo standard error

    Returns:
        The estimate, or (estimate, standard error)

    Raises:
        DomainError: If a point violates z* <= y < r
    """
    front = np.atleast_2d(np.asarray(front, dtype=float))
    r = np.asarray(ref_point, dtype=float)
    m = front.shape[1]
    z = _ideal(ctx, m)
    if front.shape[0] == 0:
        raise DomainError("front must be nonempty")
    if np.any(front < z) or np.any(front >= r):
        raise DomainError("every front point must satisfy z* <= y < r")

    if refvecs is None:
        rng = rng if rng is not None else np.random.default_rng()
        refvecs = sample_refvecs(rng, m, n_samples)
    else:
        refvecs = check_refvecs(refvecs, m)
    box = r - z

    powered = np.empty(refvecs.shape[0])
    for start in range(0, refvecs.shape[0], _HV_CHUNK):
        w = refvecs[start:start + _HV_CHUNK]
        s = np.max((front[None, :, :] - z) / w[:, None, :], axis=2).min(axis=1)
        exit_dist = np.min(box / w, axis=1)
        powered[start:start + _HV_CHUNK] = np.minimum(s, exit_dist) ** m

    c_m = dimension_constant(m)
    estimate = float(np.prod(box) - c_m * powered.mean())
    if return_stderr:
        return estimate, float(c_m * powered.std(ddof=1) / np.sqrt(powered.size))
    return estimate
