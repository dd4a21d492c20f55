"""
Comparison algorithms: Sobol random search and a GP-ParEGO style baseline

GP-ParEGO samples one preference per candidate, fits a zero-mean RBF GP to the
Tchebycheff aggregation of the normalized trajectory and maximizes Gaussian EI
with the same pool + refinement optimizer as the in-context acquisitions.
"""
import time
import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np
from scipy.linalg import cho_solve
from scipy.stats import norm

from core.schemas.schemas import AcquisitionSpec, RunRecord
from core.services.acquisition import (
    NormalizedTrajectory,
    Proposal,
    evaluate_candidate,
    is_duplicate,
    maximize_scores,
    run_loop,
)
from core.services.benchmarks import BenchmarkProblem, sobol_points
from core.services.prior_sampler import GPHyper, rbf_kernel_matrix, robust_cholesky
from core.services.scalarize import aggregation_target, sample_preferences
from helpers.persistence import derive_seed

logger = logging.getLogger(__name__)

LENGTHSCALE_GRID = np.logspace(np.log10(0.05), np.log10(2.0), 16)
SIGNAL_GRID = (0.25, 0.5, 1.0, 2.0)
GP_NOISE = 1e-6
VARIANCE_FLOOR = 1e-12


@dataclass
class GPPosterior:
    """Exact GP posterior with an isotropic RBF kernel and zero prior mean"""
    X: np.ndarray
    y: np.ndarray
    lengthscale: float
    signal_variance: float
    noise_variance: float
    chol: np.ndarray
    alpha: np.ndarray
    log_marginal_likelihood: float

    @property
    def hyper(self) -> GPHyper:
        return GPHyper(
            lengthscales=np.full(self.X.shape[1], self.lengthscale),
            output_scale=float(np.sqrt(self.signal_variance)),
            noise_variance=self.noise_variance,
        )

    def predict(self, Xq) -> Tuple[np.ndarray, np.ndarray]:
        """
        Latent predictive mean and variance

        Returns:
            (mean, variance) of shape (q,); variance floored at 1e-12
        """
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        k_star = rbf_kernel_matrix(Xq, self.hyper, self.X)
        mean = k_star @ self.alpha
        v = cho_solve((self.chol, True), k_star.T)
        var = self.signal_variance - np.sum(k_star * v.T, axis=1)
        return mean, np.maximum(var, VARIANCE_FLOOR)


def _fit_one(X: np.ndarray, y: np.ndarray, lengthscale: float, signal: float, noise: float) -> GPPosterior:
    hyper = GPHyper(lengthscales=np.full(X.shape[1], lengthscale), output_scale=float(np.sqrt(signal)), noise_variance=noise)
    K = rbf_kernel_matrix(X, hyper)
    K[np.diag_indices_from(K)] += noise
    L = robust_cholesky(K)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * y.size * np.log(2.0 * np.pi)
    return GPPosterior(X=X, y=y, lengthscale=lengthscale, signal_variance=signal, noise_variance=noise,
                       chol=L, alpha=alpha, log_marginal_likelihood=lml)


def gp_fit(X, g_values, noise_variance: float = GP_NOISE) -> GPPosterior:
    """
    Fit a GP by grid search over (lengthscale, signal variance) on the marginal likelihood

    Args:
        X: Inputs, shape (n, d), n >= 2
        g_values: Targets, shape (n,)
        noise_variance: Fixed observation noise

    Returns:
        The GPPosterior with the highest log marginal likelihood

    Raises:
        FactorizationError: If no grid point can be factorized
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(g_values, dtype=float).ravel()
    if X.shape[0] < 2 or X.shape[0] != y.size:
        raise ValueError(f"gp_fit needs at least 2 matching points, got X {X.shape} and {y.size} targets")
    best = None
    for lengthscale in LENGTHSCALE_GRID:
        for signal in SIGNAL_GRID:
            candidate = _fit_one(X, y, float(lengthscale), signal, noise_variance)
            if best is None or candidate.log_marginal_likelihood > best.log_marginal_likelihood:
                best = candidate
    logger.debug(f"GP fit: lengthscale {best.lengthscale:.3f}, signal {best.signal_variance}, lml {best.log_marginal_likelihood:.3f}")
    return best


def gaussian_ei(mean, std, g_star) -> np.ndarray:
    """
    Expected improvement over g_star for maximization under N(mean, std^2)

    (mean - g*) Phi(z) + std phi(z), z = (mean - g*) / std; (mean - g*)_+ when std = 0
    """
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    diff = mean - g_star
    safe = np.where(std > 0, std, 1.0)
    z = diff / safe
    ei = diff * norm.cdf(z) + safe * norm.pdf(z)
    return np.where(std > 0, np.maximum(ei, 0.0), np.maximum(diff, 0.0))


def gp_parego_step(trajectory: NormalizedTrajectory, rng: np.random.Generator, spec: Optional[AcquisitionSpec] = None,
                   preference=None) -> Proposal:
    """
    One GP-ParEGO candidate for a normalized trajectory

    Samples a preference (unless given), fits the GP to the trajectory's
    aggregation targets and maximizes Gaussian EI over the unit cube.
    """
    spec = spec or AcquisitionSpec()
    lam = sample_preferences(rng, trajectory.m, 1)[0] if preference is None else np.asarray(preference, dtype=float)
    g = aggregation_target(trajectory.y, lam)
    gp = gp_fit(trajectory.x, g)
    g_star = float(np.max(g))

    def score(X: np.ndarray) -> np.ndarray:
        mean, var = gp.predict(X)
        return gaussian_ei(mean, np.sqrt(var), g_star)

    x, utility = maximize_scores(score, trajectory.d, rng, spec.candidate_pool, spec.restarts, spec.refine_steps)
    return Proposal(x=x, utility=utility, preference=lam)


def gp_parego_batch(trajectory: NormalizedTrajectory, rng: np.random.Generator, q: int, spec: Optional[AcquisitionSpec] = None) -> List[Proposal]:
    """q candidates, one sampled preference each, with the duplicate re-optimization rule"""
    spec = spec or AcquisitionSpec()
    prefs = sample_preferences(rng, trajectory.m, q)
    proposals: List[Proposal] = []
    for lam in prefs:
        proposal = gp_parego_step(trajectory, rng, spec, preference=lam)
        if is_duplicate(proposal.x, list(trajectory.x) + [p.x for p in proposals]):
            logger.warning("GP-ParEGO candidate repeats an evaluated or proposed point; re-optimizing with a fresh seed")
            proposal = gp_parego_step(trajectory, np.random.default_rng(int(rng.integers(2 ** 63))), spec, preference=lam)
        proposals.append(proposal)
    return proposals


def run_gp_parego(problem: BenchmarkProblem, budget: int, seed: int, spec: Optional[AcquisitionSpec] = None) -> Iterator[RunRecord]:
    """GP-ParEGO run with the shared initial design and loop"""
    spec = spec or AcquisitionSpec()

    def proposer(trajectory: NormalizedTrajectory, rng: np.random.Generator, q: int) -> List[Proposal]:
        return gp_parego_batch(trajectory, rng, q, spec)

    yield from run_loop(problem, proposer, "gp-parego", budget, spec.q, seed)


def sobol_search(problem: BenchmarkProblem, budget: int, seed: int) -> Iterator[RunRecord]:
    """
    Evaluate `budget` scrambled Sobol points

    The first 2(d + 1) points coincide with the initial design of the model-based
    runs under the same seed and are recorded as the init phase. All points are
    generated at once, so the generation time is charged to the init records.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    init_seed = derive_seed(seed, "init")
    start = time.perf_counter()
    points = sobol_points(problem.d, budget, seed=init_seed)
    wall_ms = int((time.perf_counter() - start) * 1000)
    n_init = 2 * (problem.d + 1)
    logger.info(f"Starting sobol on {problem.name}: budget {budget}")
    for i, x in enumerate(points):
        y = evaluate_candidate(problem, x)
        phase = "init" if i < n_init else "opt"
        yield RunRecord(iter=0 if i < n_init else i - n_init + 1, phase=phase, x=x.tolist(), y=y.tolist(),
                        acq="sobol", seed=init_seed, wall_ms=wall_ms if i < n_init else 0)
