"""
Quality measurement for multi-objective runs

Objective normalization, Pareto filtering, IGD+, exact 2-D hypervolume and the
Monte-Carlo hypervolume used for three or more objectives. All objectives are minimized.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from core.schemas.schemas import MetricConfig
from core.services.scalarize import ScalarizationContext, hv_scalarization_estimate
from helpers.errors import DimensionMismatch, DomainError

logger = logging.getLogger(__name__)

DEGENERATE_RANGE = 1e-12
REFERENCE_LEVEL = 1.1
REPORT_HV_SAMPLES = 200_000


@dataclass(frozen=True)
class NormalizationBounds:
    """Per-objective offset and scale of a min-max normalization"""
    offset: np.ndarray
    scale: np.ndarray


@dataclass
class HVResult:
    """Normalized hypervolume with the provenance needed in reports"""
    value: float
    n_samples: Optional[int] = None
    empty_after_filter: bool = False


def normalize_trajectory(raw) -> Tuple[np.ndarray, NormalizationBounds]:
    """
    Per-objective min-max normalization over the evaluated samples

    An objective whose range is below 1e-12 (for example a single observation) uses
    range 1 and offset equal to its value, so it maps to 0.

    Args:
        raw: Observations, shape (n, m), n >= 1

    Returns:
        (normalized observations, bounds to apply to further points)
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    lo = raw.min(axis=0)
    span = raw.max(axis=0) - lo
    scale = np.where(span < DEGENERATE_RANGE, 1.0, span)
    bounds = NormalizationBounds(offset=lo, scale=scale)
    return apply_normalization(raw, bounds), bounds


def apply_normalization(y, bounds: NormalizationBounds) -> np.ndarray:
    """Map raw objectives into the normalized space described by bounds"""
    return (np.asarray(y, dtype=float) - bounds.offset) / bounds.scale


def dominates(a, b) -> np.ndarray:
    """
    True where a is no worse than b everywhere and strictly better somewhere

    Broadcasts over leading axes; the last axis holds the objectives.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.all(a <= b, axis=-1) & np.any(a < b, axis=-1)


def pareto_mask(points) -> np.ndarray:
    """Boolean mask of the nondominated rows (duplicates all kept)"""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    dominated = np.any(dominates(P[:, None, :], P[None, :, :]), axis=0)
    return ~dominated


def pareto_filter(points) -> np.ndarray:
    """
    Maximal nondominated subset with duplicates removed

    Args:
        points: Objective vectors, shape (n, m)

    Returns:
        Front of shape (k, m), rows sorted lexicographically
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[0] == 0:
        return P
    P = np.unique(P, axis=0)
    return P[pareto_mask(P)]


def igd_plus(front, reference) -> float:
    """
    Inverted generational distance plus

    Mean over reference points v of min over front points u of
    sqrt(sum_i max(u_i - v_i, 0)^2).

    Raises:
        DimensionMismatch: If the two sets do not share m
    """
    U = np.atleast_2d(np.asarray(front, dtype=float))
    V = np.atleast_2d(np.asarray(reference, dtype=float))
    if U.shape[0] == 0 or V.shape[0] == 0:
        raise ValueError("front and reference must be nonempty")
    if U.shape[1] != V.shape[1]:
        raise DimensionMismatch(f"front has m={U.shape[1]}, reference has m={V.shape[1]}")
    diff = np.maximum(U[None, :, :] - V[:, None, :], 0.0)
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    return float(np.mean(dist.min(axis=1)))


def hv_exact_2d(front, ref_point) -> float:
    """
    Exact two-objective hypervolume by a sweep over the first objective

    Raises:
        DomainError: If m != 2 or a point does not lie strictly below r
    """
    r = np.asarray(ref_point, dtype=float)
    if r.shape != (2,):
        raise DomainError("hv_exact_2d needs two objectives")
    P = np.asarray(front, dtype=float)
    if P.size == 0:
        return 0.0
    P = np.atleast_2d(P)
    if P.shape[1] != 2:
        raise DomainError("hv_exact_2d needs two objectives")
    if np.any(P >= r):
        raise DomainError("every point must be componentwise below the reference point")
    P = pareto_filter(P)
    P = P[np.argsort(P[:, 0])]
    right = np.append(P[1:, 0], r[0])
    return float(np.sum((right - P[:, 0]) * (r[1] - P[:, 1])))


def hv_estimate(front, ref_point, ideal=None, n_samples: int = REPORT_HV_SAMPLES,
                rng: Optional[np.random.Generator] = None, refvecs: Optional[np.ndarray] = None) -> float:
    """Monte-Carlo hypervolume for any m (z* = 0 unless ideal is given)"""
    P = np.atleast_2d(np.asarray(front, dtype=float))
    ctx = ScalarizationContext(np.zeros(P.shape[1]) if ideal is None else np.asarray(ideal, dtype=float))
    return hv_scalarization_estimate(P, ref_point, ctx=ctx, n_samples=n_samples, rng=rng, refvecs=refvecs)


def metric_config(reference_front) -> MetricConfig:
    """
    Ideal, nadir and reference point of the normalized metric space

    A degenerate objective (range below 1e-12) gets nadir = ideal + 1.

    Raises:
        ValueError: If the reference front is empty
    """
    R = np.atleast_2d(np.asarray(reference_front, dtype=float))
    if R.shape[0] == 0 or R.size == 0:
        raise ValueError("reference front must be nonempty")
    ideal = R.min(axis=0)
    span = R.max(axis=0) - ideal
    nadir = ideal + np.where(span < DEGENERATE_RANGE, 1.0, span)
    return MetricConfig(reference_point=[REFERENCE_LEVEL] * R.shape[1], ideal=ideal.tolist(), nadir=nadir.tolist())


def to_metric_space(points, config: MetricConfig) -> np.ndarray:
    """Map raw objective vectors by (y - ideal) / (nadir - ideal)"""
    ideal = np.asarray(config.ideal, dtype=float)
    span = np.asarray(config.nadir, dtype=float) - ideal
    P = np.asarray(points, dtype=float).reshape(-1, ideal.size)
    return (P - ideal) / span


def normalized_hv(front_raw, reference_front=None, n_samples: int = REPORT_HV_SAMPLES,
                  rng: Optional[np.random.Generator] = None, config: Optional[MetricConfig] = None) -> HVResult:
    """
    Hypervolume in the space normalized by the reference front's ideal and nadir points

    Points are not clipped; those that do not strictly dominate r = (1.1, ..., 1.1)
    are dropped. Two objectives use the exact sweep, more use the Monte-Carlo estimate
    with z* = 0.

    Args:
        front_raw: Obtained objective vectors, raw scale
        reference_front: Reference front in the same raw scale; unused when config is given
        n_samples: Reference vectors for m >= 3
        rng: Generator for m >= 3
        config: Precomputed metric_config of the reference front

    Returns:
        HVResult; value 0 with empty_after_filter set when no point survives
    """
    if config is None:
        if reference_front is None:
            raise ValueError("normalized_hv needs a reference front or a metric config")
        config = metric_config(reference_front)
    P = to_metric_space(front_raw, config)
    r = np.asarray(config.reference_point, dtype=float)
    m = r.size

    P = P[np.all(P < r, axis=1)]
    if P.shape[0] == 0:
        logger.warning("No point dominates the reference point; hypervolume is 0")
        return HVResult(value=0.0, empty_after_filter=True)
    P = pareto_filter(P)
    if m == 2:
        return HVResult(value=hv_exact_2d(P, r))
    # points below the ideal get z* at their own minimum so the estimator stays in its domain
    z = np.minimum(P.min(axis=0), 0.0)
    ctx = ScalarizationContext(z)
    estimate = hv_scalarization_estimate(P, r, ctx=ctx, n_samples=n_samples,
                                         rng=rng if rng is not None else np.random.default_rng(0))
    return HVResult(value=estimate, n_samples=n_samples)
