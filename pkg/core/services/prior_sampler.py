"""
Synthetic multi-objective tasks sampled from GP priors

A task is built in three steps: sample its shape (d, m, n), sample m latent
functions from zero-mean RBF Gaussian processes on N uniform inputs, then split
the N points into an n-point trajectory and N - n query points whose aggregation
targets the model learns to predict.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from core.schemas.schemas import PriorConfig, PriorLimits
from core.services.metrics import apply_normalization, normalize_trajectory
from core.services.scalarize import aggregation_target, sample_preferences
from helpers.errors import FactorizationError
from helpers.persistence import read_batch_records, write_batch_records

logger = logging.getLogger(__name__)

INITIAL_JITTER = 1e-8
MAX_JITTER = 1e-4


@dataclass(frozen=True)
class TaskShape:
    d: int
    m: int
    n: int
    N: int

    def __post_init__(self):
        if self.d < 1 or self.m < 1 or self.N < 2 or not 1 <= self.n <= self.N - 1:
            raise ValueError(f"invalid task shape {self}")

    @property
    def n_query(self) -> int:
        return self.N - self.n


@dataclass(frozen=True)
class GPHyper:
    lengthscales: np.ndarray
    output_scale: float = 1.0
    noise_variance: float = 1e-4

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be positive")
        if self.noise_variance <= 0:
            raise ValueError("noise_variance must be positive")
        object.__setattr__(self, "lengthscales", ls)


@dataclass
class SyntheticTask:
    shape: TaskShape
    hyper: List[GPHyper]
    inputs: np.ndarray        # (N, d) in the unit cube
    observations: np.ndarray  # (N, m)


@dataclass
class TrainingBatch:
    """
    One padded batch of prior tasks

    Arrays are padded to the model's K_x / K_y. Objectives are normalized with
    trajectory-only statistics; target holds g for every position but only query
    positions (traj_mask False) enter the loss.
    """
    x: np.ndarray          # (B, N, K_x)
    y: np.ndarray          # (B, N, K_y)
    preference: np.ndarray # (B, K_y)
    target: np.ndarray     # (B, N)
    traj_mask: np.ndarray  # (B, N) bool
    d: np.ndarray          # (B,)
    m: np.ndarray          # (B,)
    n: np.ndarray          # (B,)

    @property
    def query_targets(self) -> np.ndarray:
        return self.target[~self.traj_mask]

    def to_record(self) -> dict:
        return {
            "x": self.x, "y": self.y, "preference": self.preference, "target": self.target,
            "traj_mask": self.traj_mask, "d": self.d, "m": self.m, "n": self.n,
        }

    @classmethod
    def from_record(cls, record: dict) -> "TrainingBatch":
        return cls(
            x=record["x"], y=record["y"], preference=record["preference"], target=record["target"],
            traj_mask=record["traj_mask"] > 0.5,
            d=record["d"].astype(int), m=record["m"].astype(int), n=record["n"].astype(int),
        )


def trajectory_length_weights(N: int) -> np.ndarray:
    """Probabilities of n = 1..N-1, proportional to 1 / (N - n)"""
    n = np.arange(1, N)
    w = 1.0 / (N - n)
    return w / w.sum()


def sample_trajectory_lengths(rng: np.random.Generator, N: int, size: int) -> np.ndarray:
    """Vectorized draw of trajectory lengths with the 1 / (N - n) weighting"""
    return rng.choice(np.arange(1, N), size=size, p=trajectory_length_weights(N))


def sample_task_shape(rng: np.random.Generator, limits: PriorLimits) -> TaskShape:
    """
    Sample a task shape: d and m uniform over their ranges, n weighted by 1 / (N - n)

    Args:
        rng: Random generator
        limits: Shape bounds (D_max, M_max, N)

    Returns:
        The sampled TaskShape
    """
    d = int(rng.integers(1, limits.max_features + 1))
    m = int(rng.integers(1, limits.max_objectives + 1))
    n = int(sample_trajectory_lengths(rng, limits.sample_length, 1)[0])
    return TaskShape(d=d, m=m, n=n, N=limits.sample_length)


def sample_gp_hyper(rng: np.random.Generator, d: int, prior: Optional[PriorConfig] = None) -> GPHyper:
    """
    Sample GP hyperparameters: one Gamma(shape, rate) lengthscale per feature

    Args:
        rng: Random generator
        d: Feature dimension
        prior: Prior settings; defaults to Gamma(3, 6), sigma = 1, noise variance 1e-4

    Returns:
        The sampled GPHyper
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    prior = prior or PriorConfig()
    lengthscales = rng.gamma(shape=prior.lengthscale_shape, scale=1.0 / prior.lengthscale_rate, size=d)
    return GPHyper(lengthscales=lengthscales, output_scale=prior.output_scale, noise_variance=prior.noise_variance)


def rbf_kernel_matrix(X: np.ndarray, hyper: GPHyper, X2: Optional[np.ndarray] = None) -> np.ndarray:
    """
    RBF kernel with per-dimension lengthscales (automatic relevance scaling)

    k(x, x') = sigma^2 exp(-0.5 * sum_i ((x_i - x'_i) / l_i)^2)

    Args:
        X: Points, shape (N, d)
        hyper: Kernel hyperparameters
        X2: Optional second point set, shape (M, d); defaults to X

    Returns:
        Kernel matrix of shape (N, M)
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X2 = X if X2 is None else np.atleast_2d(np.asarray(X2, dtype=float))
    A = X / hyper.lengthscales
    B = X2 / hyper.lengthscales
    sq = np.sum(np.square(A[:, None, :] - B[None, :, :]), axis=-1)
    return hyper.output_scale ** 2 * np.exp(-0.5 * sq)


def robust_cholesky(matrix: np.ndarray, initial_jitter: float = INITIAL_JITTER, max_jitter: float = MAX_JITTER) -> np.ndarray:
    """
    Lower Cholesky factor with escalating diagonal jitter

    Tries the plain matrix first, then adds jitter 1e-8, 1e-7, ... up to max_jitter.

    Raises:
        FactorizationError: If the factorization fails at the jitter ceiling
    """
    try:
        return cholesky(matrix, lower=True, check_finite=False)
    except LinAlgError:
        pass
    eye = np.eye(matrix.shape[0])
    jitter = initial_jitter
    while jitter <= max_jitter * (1 + 1e-12):
        try:
            factor = cholesky(matrix + jitter * eye, lower=True, check_finite=False)
            logger.warning(f"Cholesky needed jitter {jitter:.0e}")
            return factor
        except LinAlgError:
            jitter *= 10.0
    raise FactorizationError(f"Cholesky failed with jitter up to {max_jitter:.0e} (degenerate inputs?)")


def sample_gp_function_values(
    X: np.ndarray,
    hyper: GPHyper,
    rng: np.random.Generator,
    n_samples: Optional[int] = None,
    max_jitter: float = MAX_JITTER,
) -> np.ndarray:
    """
    Joint draw of noisy function values from a zero-mean GP

    The covariance is K + noise_variance * I, so the draw already carries the
    i.i.d. observation noise.

    Args:
        X: Inputs, shape (N, d)
        hyper: Kernel hyperparameters
        rng: Random generator
        n_samples: Number of independent draws; one draw of shape (N,) when omitted
        max_jitter: Jitter ceiling for the factorization

    Returns:
        Values of shape (N,) or (n_samples, N)

    Raises:
        FactorizationError: If the covariance cannot be factorized
    """
    K = rbf_kernel_matrix(X, hyper)
    K[np.diag_indices_from(K)] += hyper.noise_variance
    L = robust_cholesky(K, max_jitter=max_jitter)
    if n_samples is None:
        return L @ rng.standard_normal(K.shape[0])
    return rng.standard_normal((n_samples, K.shape[0])) @ L.T


def sample_task(rng: np.random.Generator, prior: PriorConfig, shape: Optional[TaskShape] = None) -> SyntheticTask:
    """
    Sample one GP world: shape, hyperparameters, inputs and noisy observations

    A factorization failure resamples the whole task, up to prior.max_resample attempts.

    Raises:
        FactorizationError: If every attempt fails
    """
    shape = shape or sample_task_shape(rng, prior.limits)
    for attempt in range(1, prior.max_resample + 1):
        inputs = rng.uniform(size=(shape.N, shape.d))
        hypers = [sample_gp_hyper(rng, shape.d, prior) for _ in range(shape.m)]
        try:
            observations = np.stack([sample_gp_function_values(inputs, h, rng) for h in hypers], axis=1)
            return SyntheticTask(shape=shape, hyper=hypers, inputs=inputs, observations=observations)
        except FactorizationError as e:
            logger.warning(f"Resampling task after factorization failure (attempt {attempt}/{prior.max_resample}): {e}")
    raise FactorizationError(f"Task sampling failed {prior.max_resample} times in a row")


def generate_training_batch(
    rng: np.random.Generator,
    prior: PriorConfig,
    batch_size: int,
    pad_features: Optional[int] = None,
    pad_objectives: Optional[int] = None,
) -> TrainingBatch:
    """
    Generate a padded batch of (trajectory, queries, preference, targets)

    Objectives are min-max normalized with trajectory statistics only and the
    target of every point is g = -max_i lambda_i y_i (z* = 0).

    Args:
        rng: Random generator
        prior: Prior settings
        batch_size: Tasks in the batch
        pad_features: K_x; defaults to prior.limits.max_features
        pad_objectives: K_y; defaults to prior.limits.max_objectives

    Returns:
        The TrainingBatch
    """
    limits = prior.limits
    K_x = pad_features or limits.max_features
    K_y = pad_objectives or limits.max_objectives
    N = limits.sample_length

    x = np.zeros((batch_size, N, K_x), dtype=np.float32)
    y = np.zeros((batch_size, N, K_y), dtype=np.float32)
    pref = np.zeros((batch_size, K_y), dtype=np.float32)
    target = np.zeros((batch_size, N), dtype=np.float32)
    traj_mask = np.zeros((batch_size, N), dtype=bool)
    dims = np.zeros((3, batch_size), dtype=np.int64)

    for b in range(batch_size):
        task = sample_task(rng, prior)
        s = task.shape
        _, bounds = normalize_trajectory(task.observations[:s.n])
        y_norm = apply_normalization(task.observations, bounds)
        lam = sample_preferences(rng, s.m, 1)[0]

        x[b, :, :s.d] = task.inputs
        y[b, :, :s.m] = y_norm
        pref[b, :s.m] = lam
        target[b] = aggregation_target(y_norm, lam)
        traj_mask[b, :s.n] = True
        dims[:, b] = (s.d, s.m, s.n)

    return TrainingBatch(x=x, y=y, preference=pref, target=target, traj_mask=traj_mask,
                         d=dims[0], m=dims[1], n=dims[2])


def sample_prior_targets(rng: np.random.Generator, prior: PriorConfig, n_targets: int, batch_size: int = 64) -> np.ndarray:
    """Collect at least n_targets query aggregation targets from fresh prior batches"""
    collected = []
    total = 0
    while total < n_targets:
        batch = generate_training_batch(rng, prior, batch_size)
        q = batch.query_targets.astype(float)
        collected.append(q)
        total += q.size
    return np.concatenate(collected)[:n_targets]


def dump_training_batches(path: str, batches: Iterable[TrainingBatch]) -> int:
    """Append batches to a length-prefixed binary dump"""
    return write_batch_records(path, (b.to_record() for b in batches))


def load_training_batches(path: str) -> Iterator[TrainingBatch]:
    """Iterate over batches stored by dump_training_batches"""
    for record in read_batch_records(path):
        yield TrainingBatch.from_record(record)
