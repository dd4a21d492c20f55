"""
In-context acquisition functions, their optimization and the optimization loop

Acquisitions are scored on the normalized trajectory (z* = 0) with one batched
model call per pool or refinement step. Model parameters are never updated here.
"""
import time
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np

from core.schemas.schemas import AcquisitionSpec, RunRecord
from core.services.benchmarks import BenchmarkProblem, sobol_points
from core.services.metrics import NormalizationBounds, normalize_trajectory
from core.services.pfn_model import PosteriorHistogram, PosteriorModel, histogram_stats, predict_posterior
from core.services.scalarize import aggregation_target, dimension_constant, lambda_constant, sample_preferences
from helpers.errors import EmptyTrajectory, FomemoError, ProblemEvaluationError, ShapeError
from helpers.persistence import derive_seed

logger = logging.getLogger(__name__)

DUPLICATE_TOL = 1e-6
SIGMA_START = 0.1
SIGMA_END = 0.01

Scorer = Callable[[np.ndarray], np.ndarray]
PreferenceSampler = Callable[[np.random.Generator, int, int], np.ndarray]


@dataclass
class Trajectory:
    """Evaluated points: unit-cube inputs and raw objective vectors"""
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.x.shape[0] != self.y.shape[0]:
            raise ShapeError(f"{self.x.shape[0]} inputs but {self.y.shape[0]} observations")

    @classmethod
    def empty(cls, d: int, m: int) -> "Trajectory":
        return cls(np.zeros((0, d)), np.zeros((0, m)))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.y.shape[1]

    def append(self, x, y) -> None:
        self.x = np.vstack([self.x, np.atleast_2d(x)])
        self.y = np.vstack([self.y, np.atleast_2d(y)])

    def normalized(self) -> "NormalizedTrajectory":
        if self.n == 0:
            raise EmptyTrajectory("cannot normalize an empty trajectory")
        y_norm, bounds = normalize_trajectory(self.y)
        return NormalizedTrajectory(x=self.x.copy(), y=y_norm, bounds=bounds)


@dataclass
class NormalizedTrajectory:
    """Trajectory with objectives min-max normalized over its own points"""
    x: np.ndarray
    y: np.ndarray
    bounds: Optional[NormalizationBounds] = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.y.shape[1]


@dataclass
class Proposal:
    x: np.ndarray
    utility: float
    preference: Optional[np.ndarray] = None
    pref_set: Optional[np.ndarray] = field(default=None, repr=False)


def best_aggregation(trajectory: NormalizedTrajectory, lam) -> float:
    """
    Best observed aggregation g*_lambda = max_i -max_j lambda_j y_ij

    Raises:
        EmptyTrajectory: If no point has been evaluated
    """
    if trajectory.n == 0:
        raise EmptyTrajectory("best_aggregation needs at least one evaluated point")
    return float(np.max(aggregation_target(trajectory.y, lam)))


def acq_ei(posterior: PosteriorHistogram, g_star) -> np.ndarray:
    """Expected improvement E[(g - g*)_+] under the predicted histogram"""
    return histogram_stats(posterior).ei_partial(g_star)


def acq_ucb(posterior: PosteriorHistogram, beta: float) -> np.ndarray:
    """Upper confidence bound mu + beta * sigma"""
    stats = histogram_stats(posterior)
    return stats.mean + beta * stats.std


def uhvi_utility(ucb: np.ndarray, best_g: np.ndarray, prefs: np.ndarray) -> np.ndarray:
    """
    Hypervolume-improvement utility from UCB values over a preference set

    c_m * mean_p (c_lambda_p)^m * max(0, (-g*_p)^m - max(-UCB_p, 0)^m)

    Args:
        ucb: UCB of the aggregation, shape (P, Q) for P preferences and Q candidates
        best_g: Best observed aggregation per preference, shape (P,)
        prefs: The preference set, shape (P, m)

    Returns:
        Utilities of shape (Q,)
    """
    prefs = np.atleast_2d(prefs)
    m = prefs.shape[1]
    weight = lambda_constant(prefs) ** m
    current = np.maximum(-np.asarray(best_g, dtype=float), 0.0) ** m
    candidate = np.maximum(-np.asarray(ucb, dtype=float), 0.0) ** m
    gain = np.maximum(current[:, None] - candidate, 0.0)
    return dimension_constant(m) * np.mean(weight[:, None] * gain, axis=0)


def acq_uhvi(model: PosteriorModel, trajectory: NormalizedTrajectory, x: np.ndarray, pref_set: np.ndarray, beta: float) -> np.ndarray:
    """
    UHVI for a batch of candidates, one forward pass over every (preference, candidate) pair

    Raises:
        EmptyTrajectory: If no point has been evaluated
    """
    if trajectory.n == 0:
        raise EmptyTrajectory("UHVI needs at least one evaluated point")
    x = np.atleast_2d(x)
    pref_set = np.atleast_2d(pref_set)
    n_pref, n_cand = pref_set.shape[0], x.shape[0]
    queries = np.tile(x, (n_pref, 1))
    per_query = np.repeat(pref_set, n_cand, axis=0)
    posterior = predict_posterior(model, trajectory.x, trajectory.y, queries, per_query)
    ucb = acq_ucb(posterior, beta).reshape(n_pref, n_cand)
    best_g = np.array([best_aggregation(trajectory, lam) for lam in pref_set])
    return uhvi_utility(ucb, best_g, pref_set)


def make_scorer(
    model: PosteriorModel,
    trajectory: NormalizedTrajectory,
    spec: AcquisitionSpec,
    preference: Optional[np.ndarray] = None,
    pref_set: Optional[np.ndarray] = None,
) -> Scorer:
    """Batched acquisition X (k, d) -> utilities (k,) for one proposal round"""
    if spec.kind == "uhvi":
        if pref_set is None:
            raise ValueError("UHVI needs a preference set")
        return lambda X: acq_uhvi(model, trajectory, X, pref_set, spec.beta)
    if preference is None:
        raise ValueError(f"{spec.kind} needs a preference")
    if spec.kind == "ei":
        g_star = best_aggregation(trajectory, preference)
        return lambda X: acq_ei(predict_posterior(model, trajectory.x, trajectory.y, X, preference), g_star)
    return lambda X: acq_ucb(predict_posterior(model, trajectory.x, trajectory.y, X, preference), spec.beta)


def maximize_scores(
    score: Scorer,
    d: int,
    rng: np.random.Generator,
    candidate_pool: int = 1024,
    restarts: int = 20,
    refine_steps: int = 50,
) -> Tuple[np.ndarray, float]:
    """
    Pool screening followed by multi-start Gaussian-perturbation local search

    Scores a scrambled Sobol pool, keeps the best `restarts` points and refines
    them together: each step perturbs every point with N(0, sigma^2) noise (sigma
    decays geometrically from 0.1 to 0.01), clips to the cube and keeps strict
    improvements.

    Returns:
        (best x of shape (d,), its utility)
    """
    pool = sobol_points(d, candidate_pool, seed=int(rng.integers(2 ** 63)))
    pool_values = np.asarray(score(pool), dtype=float)
    order = np.argsort(-pool_values, kind="stable")[:restarts]
    current = pool[order].copy()
    values = pool_values[order].copy()

    for step in range(refine_steps):
        frac = step / (refine_steps - 1) if refine_steps > 1 else 0.0
        sigma = SIGMA_START * (SIGMA_END / SIGMA_START) ** frac
        proposal = np.clip(current + sigma * rng.standard_normal(current.shape), 0.0, 1.0)
        proposal_values = np.asarray(score(proposal), dtype=float)
        better = proposal_values > values
        current[better] = proposal[better]
        values[better] = proposal_values[better]

    best = int(np.argmax(values))
    return current[best], float(values[best])


def optimize_acquisition(
    model: PosteriorModel,
    trajectory: NormalizedTrajectory,
    spec: AcquisitionSpec,
    rng: np.random.Generator,
    preference: Optional[np.ndarray] = None,
    pref_set: Optional[np.ndarray] = None,
) -> Proposal:
    """
    Maximize one acquisition over the unit cube

    Args:
        model: Trained posterior model
        trajectory: Normalized trajectory, nonempty
        spec: Acquisition settings
        rng: Generator for the pool scrambling and the local search
        preference: Preference for EI / UCB
        pref_set: Preference set for UHVI, shared by every candidate of this round

    Returns:
        The best Proposal found
    """
    if trajectory.n == 0:
        raise EmptyTrajectory("cannot optimize an acquisition without evaluated points")
    score = make_scorer(model, trajectory, spec, preference=preference, pref_set=pref_set)
    x, utility = maximize_scores(score, trajectory.d, rng, spec.candidate_pool, spec.restarts, spec.refine_steps)
    return Proposal(x=x, utility=utility, preference=None if spec.kind == "uhvi" else np.asarray(preference), pref_set=pref_set)


def is_duplicate(x: np.ndarray, others: List[np.ndarray]) -> bool:
    return any(np.max(np.abs(x - o)) < DUPLICATE_TOL for o in others)


def propose_batch(
    model: PosteriorModel,
    trajectory: NormalizedTrajectory,
    spec: AcquisitionSpec,
    rng: np.random.Generator,
    q: Optional[int] = None,
    pref_sampler: PreferenceSampler = sample_preferences,
) -> List[Proposal]:
    """
    Generate q candidates

    EI / UCB sample q preferences and optimize once per preference; UHVI repeats
    the optimization q times with fresh preference sets. A candidate within L-inf
    distance 1e-6 of an evaluated point or an earlier candidate is re-optimized
    once with a fresh seed and then accepted.
    """
    q = spec.q if q is None else q
    m = trajectory.m
    proposals: List[Proposal] = []
    prefs = pref_sampler(rng, m, q) if spec.kind != "uhvi" else None
    for j in range(q):
        kwargs = {"preference": prefs[j]} if prefs is not None else {"pref_set": pref_sampler(rng, m, spec.n_pref_samples)}
        proposal = optimize_acquisition(model, trajectory, spec, rng, **kwargs)
        if is_duplicate(proposal.x, list(trajectory.x) + [p.x for p in proposals]):
            logger.warning(f"Candidate {j} repeats an evaluated or proposed point; re-optimizing with a fresh seed")
            fresh = np.random.default_rng(int(rng.integers(2 ** 63)))
            proposal = optimize_acquisition(model, trajectory, spec, fresh, **kwargs)
        proposals.append(proposal)
    return proposals


def initial_design(d: int, seed: int) -> np.ndarray:
    """The 2(d + 1)-point Sobol initial design shared by every algorithm"""
    return sobol_points(d, 2 * (d + 1), seed=derive_seed(seed, "init"))


def evaluate_candidate(problem: BenchmarkProblem, x: np.ndarray) -> np.ndarray:
    """
    Evaluate a unit-cube point, wrapping unexpected failures

    Raises:
        ProblemEvaluationError: If the evaluator fails with a non-package error
    """
    try:
        return problem.evaluate_unit(x)
    except FomemoError:
        raise
    except Exception as e:
        logger.error(f"Evaluation of {problem.name} failed at {x}: {e}")
        raise ProblemEvaluationError(f"{problem.name} failed at {x.tolist()}: {e}") from e


Proposer = Callable[[NormalizedTrajectory, np.random.Generator, int], List[Proposal]]


def run_loop(problem: BenchmarkProblem, proposer: Proposer, acq_label: str, budget: int, q: int, seed: int) -> Iterator[RunRecord]:
    """
    Initial design, then propose / evaluate / append until the budget is spent

    The trajectory is renormalized before every proposal round. Every evaluated
    point is yielded as a RunRecord as soon as it exists, so a consumer that
    persists records keeps the partial run if evaluation fails.

    Args:
        problem: Problem to optimize
        proposer: (normalized trajectory, rng, q) -> proposals
        acq_label: Value of the records' acq field
        budget: Evaluations after the initial design
        q: Candidates per round (the last round may be smaller)
        seed: Run seed; each round uses derive_seed(seed, round)
    """
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    trajectory = Trajectory.empty(problem.d, problem.m)
    init_seed = derive_seed(seed, "init")

    start = time.perf_counter()
    X0 = initial_design(problem.d, seed)
    init_ms = int((time.perf_counter() - start) * 1000)
    logger.info(f"Starting {acq_label} on {problem.name}: {X0.shape[0]} initial points, budget {budget}, q={q}")
    for x in X0:
        y = evaluate_candidate(problem, x)
        trajectory.append(x, y)
        yield RunRecord(iter=0, phase="init", x=x.tolist(), y=y.tolist(), acq=acq_label, seed=init_seed, wall_ms=init_ms)

    remaining = budget
    iteration = 0
    while remaining > 0:
        iteration += 1
        batch = min(q, remaining)
        step_seed = derive_seed(seed, iteration)
        rng = np.random.default_rng(step_seed)
        start = time.perf_counter()
        proposals = proposer(trajectory.normalized(), rng, batch)
        wall_ms = int((time.perf_counter() - start) * 1000)
        for proposal in proposals:
            y = evaluate_candidate(problem, proposal.x)
            trajectory.append(proposal.x, y)
            yield RunRecord(
                iter=iteration,
                phase="opt",
                x=proposal.x.tolist(),
                y=y.tolist(),
                acq=acq_label,
                preference=None if proposal.preference is None else np.asarray(proposal.preference).tolist(),
                utility=proposal.utility,
                seed=step_seed,
                wall_ms=wall_ms,
            )
        remaining -= batch
        logger.debug(f"{acq_label} iteration {iteration}: trajectory length {trajectory.n}, {wall_ms} ms")


def check_context_length(model: PosteriorModel, d: int, budget: int, q: int) -> None:
    """
    Raises:
        ShapeError: If a proposal round would see more points than the model accepts
    """
    last_batch = budget % q or q
    longest = 2 * (d + 1) + budget - last_batch if budget > 0 else 0
    limit = model.config.max_sample_length - 1
    if longest > limit:
        raise ShapeError(f"the trajectory would reach {longest} points but the model accepts at most {limit}")


def run_optimization(
    problem: BenchmarkProblem,
    model: PosteriorModel,
    spec: AcquisitionSpec,
    budget: int,
    seed: int,
) -> Iterator[RunRecord]:
    """
    In-context multi-objective optimization with a frozen model

    Args:
        problem: Problem to optimize
        model: Trained posterior model
        spec: Acquisition settings (kind, beta, q, optimizer sizes)
        budget: Evaluations after the 2(d + 1) initial points
        seed: Run seed

    Yields:
        One RunRecord per evaluated point

    Raises:
        ProblemEvaluationError: If an evaluation fails; records yielded so far stand
    """
    check_context_length(model, problem.d, budget, spec.q)

    def proposer(trajectory: NormalizedTrajectory, rng: np.random.Generator, q: int) -> List[Proposal]:
        return propose_batch(model, trajectory, spec, rng, q=q)

    yield from run_loop(problem, proposer, spec.kind, budget, spec.q, seed)
