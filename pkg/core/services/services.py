"""
Service layer shared by the command line and the HTTP API
"""
import os
import re
import time
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from core.schemas.api import Candidate, PosteriorRequest, PosteriorResponse, ProposeRequest, ProposeResponse, TrajectoryPayload
from core.schemas.schemas import AcquisitionSpec, CellStatus, RunManifest, RunRecord
from core.services.acquisition import Trajectory, acq_ucb, propose_batch, run_optimization
from core.services.baselines import run_gp_parego, sobol_search
from core.services.benchmarks import BenchmarkProblem, get_problem, sobol_points
from core.services.metrics import igd_plus, metric_config, normalized_hv, pareto_filter, to_metric_space, REPORT_HV_SAMPLES
from core.services.pfn_model import PosteriorModel, histogram_stats, predict_posterior
from core.services.scalarize import project_to_simplex
from helpers.errors import (
    BoundsError,
    CheckpointError,
    DimensionError,
    FomemoError,
    MissingReference,
    NoAnalyticFront,
    ProblemError,
)
from helpers.persistence import (
    append_jsonl,
    config_hash,
    derive_seed,
    read_jsonl,
    read_manifest,
    utc_now,
    write_csv,
    write_manifest,
)

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"
ALGORITHMS = ("fomemo-ei", "fomemo-ucb", "fomemo-uhvi", "sobol", "gp-parego")
REPORT_HEADER = ["problem", "algo", "acq", "seed", "budget", "metric", "value", "K", "wall_ms"]
SUMMARY_HEADER = ["problem", "algo", "budget", "metric", "mean", "std", "n_runs"]
POSTERIOR_HEADER = ["pref_index", "preference", "x", "mean", "std", "ucb"]
ANALYTIC_FRONT_POINTS = 1000
RUN_NAME = re.compile(r"^(?P<problem>.+)__(?P<algo>[a-z\-]+)__seed(?P<seed>\d+)\.jsonl$")


def run_file_name(problem: str, algo: str, replicate: int) -> str:
    return f"{problem}__{algo}__seed{replicate}.jsonl"


def parse_run_name(filename: str) -> Tuple[str, str, int]:
    """
    Raises:
        ProblemError: If the name does not follow <problem>__<algo>__seed<k>.jsonl
    """
    match = RUN_NAME.match(os.path.basename(filename))
    if not match:
        raise ProblemError(f"{filename} is not a run file (<problem>__<algo>__seed<k>.jsonl)")
    return match.group("problem"), match.group("algo"), int(match.group("seed"))


def _trajectory_from(payload: TrajectoryPayload) -> Trajectory:
    trajectory = Trajectory(np.asarray(payload.x, dtype=float), np.asarray(payload.y, dtype=float))
    if np.any(trajectory.x < 0.0) or np.any(trajectory.x > 1.0):
        raise BoundsError("trajectory inputs must lie in the unit cube")
    return trajectory


class OptimizationService:
    """
    In-context posterior queries, candidate proposals and full optimization runs
    """

    def __init__(self, model: Optional[PosteriorModel] = None):
        self.model = model

    @property
    def ready(self) -> bool:
        return self.model is not None

    def _require_model(self) -> PosteriorModel:
        if self.model is None:
            raise CheckpointError("no checkpoint is loaded")
        return self.model

    def posterior(self, request: PosteriorRequest) -> PosteriorResponse:
        """
        Posterior mean, std and UCB of the aggregation at the query points

        Args:
            request: Raw trajectory, query points and preference

        Returns:
            PosteriorResponse with one entry per query
        """
        model = self._require_model()
        trajectory = _trajectory_from(request.trajectory).normalized()
        query = np.asarray(request.query_x, dtype=float)
        if np.any(query < 0.0) or np.any(query > 1.0):
            raise BoundsError("query points must lie in the unit cube")
        if query.shape[1] != trajectory.d:
            raise DimensionError(f"queries have d={query.shape[1]}, trajectory has d={trajectory.d}")
        lam = project_to_simplex(np.asarray(request.preference, dtype=float))
        logger.info(f"Posterior request: n={trajectory.n}, queries={query.shape[0]}, m={trajectory.m}")
        hist = predict_posterior(model, trajectory.x, trajectory.y, query, lam)
        stats = histogram_stats(hist)
        return PosteriorResponse(
            mean=stats.mean.tolist(),
            std=stats.std.tolist(),
            ucb=acq_ucb(hist, request.beta).tolist(),
            preference=lam.tolist(),
        )

    def propose(self, request: ProposeRequest) -> ProposeResponse:
        """
        One proposal round of q candidates for a trajectory
        """
        model = self._require_model()
        trajectory = _trajectory_from(request.trajectory).normalized()
        spec = request.acquisition
        logger.info(f"Propose request: n={trajectory.n}, kind={spec.kind}, q={spec.q}")
        start = time.perf_counter()
        proposals = propose_batch(model, trajectory, spec, np.random.default_rng(request.seed))
        wall_ms = int((time.perf_counter() - start) * 1000)
        return ProposeResponse(
            candidates=[
                Candidate(x=p.x.tolist(), utility=p.utility, preference=None if p.preference is None else p.preference.tolist())
                for p in proposals
            ],
            wall_ms=wall_ms,
        )

    def run_records(
        self,
        problem: BenchmarkProblem,
        algo: str,
        budget: int,
        seed: int,
        q: int = 1,
        beta: float = 1.0,
        n_pref_samples: int = 32,
    ) -> Iterator[RunRecord]:
        """
        RunRecord stream of one algorithm on one problem

        Args:
            problem: Problem to optimize
            algo: One of ALGORITHMS
            budget: Evaluations after the 2(d + 1) initial points
            seed: Run seed
            q: Candidates per round
            beta: UCB exploration weight
            n_pref_samples: UHVI preference-set size
        """
        if algo not in ALGORITHMS:
            raise ProblemError(f"unknown algorithm {algo!r}; choose from {', '.join(ALGORITHMS)}")
        if algo == "sobol":
            return sobol_search(problem, 2 * (problem.d + 1) + budget, seed)
        spec = AcquisitionSpec(kind=algo.split("-")[-1] if algo.startswith("fomemo-") else "ucb",
                               beta=beta, q=q, n_pref_samples=n_pref_samples)
        if algo == "gp-parego":
            return run_gp_parego(problem, budget, seed, spec)
        return run_optimization(problem, self._require_model(), spec, budget, seed)

    @staticmethod
    def write_run(path: str, records: Iterable[RunRecord]) -> int:
        """Append every record to a JSONL file as soon as it is produced"""
        count = 0
        for record in records:
            append_jsonl(path, [record.model_dump_json()])
            count += 1
        return count

    def posterior_curves(
        self,
        problem: BenchmarkProblem,
        n_traj: int,
        preferences: Sequence[Sequence[float]],
        grid: int,
        seed: int,
        beta: float = 1.0,
    ) -> List[list]:
        """
        Posterior mean / std / UCB over a grid for several preferences on a 1-d problem

        Returns:
            Rows matching POSTERIOR_HEADER, len(preferences) * grid of them

        Raises:
            DimensionError: If the problem is not 1-dimensional
        """
        if problem.d != 1:
            raise DimensionError(f"posterior dumps need a 1-d problem, {problem.name} has d={problem.d}")
        model = self._require_model()
        X = sobol_points(1, n_traj, seed=derive_seed(seed, "posterior"))
        trajectory = Trajectory(X, np.array([problem.evaluate_unit(x) for x in X])).normalized()
        xs = np.linspace(0.0, 1.0, grid)[:, None]
        rows = []
        for index, pref in enumerate(preferences):
            lam = project_to_simplex(np.asarray(pref, dtype=float))
            if lam.size != problem.m:
                raise DimensionError(f"preference {pref} has {lam.size} components, problem has m={problem.m}")
            hist = predict_posterior(model, trajectory.x, trajectory.y, xs, lam)
            stats = histogram_stats(hist)
            ucb = stats.mean + beta * stats.std
            label = ";".join(f"{w:.6g}" for w in lam)
            for x, mean, std, u in zip(xs[:, 0], stats.mean, stats.std, ucb):
                rows.append([index, label, f"{x:.6f}", f"{mean:.6f}", f"{std:.6f}", f"{u:.6f}"])
        return rows


def load_run(path: str) -> List[RunRecord]:
    """
    Raises:
        ConfigError: Naming file:line of a malformed line
    """
    return [RunRecord(**row) for row in read_jsonl(path)]


def reference_front_for(problem: str, d: int, reference: str) -> np.ndarray:
    """
    Reference front from the analytic sampler or a CSV file of objective vectors

    Raises:
        MissingReference: If no analytic front exists for the problem
    """
    if reference != "analytic":
        try:
            return np.loadtxt(reference, delimiter=",", ndmin=2)
        except (OSError, ValueError) as e:
            raise MissingReference(f"cannot read reference front {reference}: {e}") from e
    try:
        return get_problem(problem, d=d).true_front(ANALYTIC_FRONT_POINTS)
    except (NoAnalyticFront, ProblemError) as e:
        raise MissingReference(f"no reference front for {problem}: {e}") from e


def anytime_metrics(
    records: List[RunRecord],
    reference_front: np.ndarray,
    metric: str,
    hv_samples: int = REPORT_HV_SAMPLES,
) -> List[Tuple[int, float, Optional[int], int]]:
    """
    Metric of the best-so-far front after every evaluation past the initial design

    IGD+ is computed after normalizing both fronts by the reference front's
    ideal and nadir points; HV uses metrics.normalized_hv.

    Returns:
        (budget, value, K, cumulative wall_ms) per budget step
    """
    Y = np.array([r.y for r in records], dtype=float)
    n_init = sum(1 for r in records if r.phase == "init")
    config = metric_config(reference_front)
    ref_norm = to_metric_space(reference_front, config)

    cumulative = []
    total = 0
    seen = set()
    for r in records:
        if r.phase == "opt" and r.iter not in seen:
            seen.add(r.iter)
            total += r.wall_ms
        cumulative.append(total)

    rows = []
    for k in range(max(n_init, 1), Y.shape[0] + 1):
        front = pareto_filter(Y[:k])
        if metric == "igdplus":
            value, K = igd_plus(to_metric_space(front, config), ref_norm), None
        else:
            result = normalized_hv(front, n_samples=hv_samples, rng=np.random.default_rng(0), config=config)
            value, K = result.value, result.n_samples
        rows.append((k - n_init, float(value), K, cumulative[k - 1]))
    return rows


def report_rows(paths: Sequence[str], metric: str, reference: str = "analytic") -> List[list]:
    """Report CSV rows for a set of run files"""
    rows = []
    fronts: Dict[Tuple[str, int], np.ndarray] = {}
    for path in sorted(paths):
        problem, algo, replicate = parse_run_name(path)
        records = load_run(path)
        if not records:
            continue
        d = len(records[0].x)
        if (problem, d) not in fronts:
            fronts[(problem, d)] = reference_front_for(problem, d, reference)
        for budget, value, K, wall_ms in anytime_metrics(records, fronts[(problem, d)], metric):
            rows.append([problem, algo, records[-1].acq, replicate, budget, metric, f"{value:.10g}", "" if K is None else K, wall_ms])
    return rows


def summarize(rows: Sequence[Sequence]) -> List[list]:
    """Mean and standard deviation over seeds per (problem, algo, budget, metric)"""
    groups: Dict[Tuple[str, str, int, str], List[float]] = {}
    for problem, algo, _acq, _seed, budget, metric, value, *_ in rows:
        groups.setdefault((problem, algo, int(budget), metric), []).append(float(value))
    out = []
    for (problem, algo, budget, metric), values in sorted(groups.items()):
        arr = np.asarray(values)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        out.append([problem, algo, budget, metric, f"{arr.mean():.10g}", f"{std:.10g}", arr.size])
    return out


@dataclass
class BenchOutcome:
    manifest: RunManifest
    failed: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)


def run_bench(
    service: OptimizationService,
    problems: Sequence[str],
    algos: Sequence[str],
    seeds: int,
    budget: int,
    out_dir: str,
    master_seed: int = 0,
    q: int = 1,
    threads: int = 1,
    dim: Optional[int] = None,
    command_line: Optional[List[str]] = None,
    checkpoint_id: Optional[str] = None,
    metrics: Sequence[str] = ("igdplus", "hv"),
) -> BenchOutcome:
    """
    Run problems x algorithms x seeds in a worker pool and aggregate the results

    Cells already marked done in the directory's manifest with the same
    settings hash are skipped. Run seeds depend on (master seed, problem,
    replicate) so every algorithm starts from the same initial design.

    Returns:
        BenchOutcome with the final manifest and the failed cell keys
    """
    os.makedirs(out_dir, exist_ok=True)
    settings = {"problems": list(problems), "algos": list(algos), "seeds": seeds, "budget": budget,
                "q": q, "dim": dim, "master_seed": master_seed, "checkpoint": checkpoint_id}
    previous = read_manifest(out_dir) or {}
    manifest = RunManifest(
        tool_version=TOOL_VERSION,
        command_line=command_line or [],
        config_hash=config_hash(settings),
        master_seed=master_seed,
        started_at=utc_now(),
        checkpoint_id=checkpoint_id,
        cells={k: CellStatus(**v) for k, v in previous.get("cells", {}).items()},
        derived_seeds=previous.get("derived_seeds", {}),
    )
    lock = threading.Lock()
    outcome = BenchOutcome(manifest=manifest)

    cells = []
    for problem in problems:
        for algo in algos:
            for replicate in range(seeds):
                key = run_file_name(problem, algo, replicate)[: -len(".jsonl")]
                cell_hash = config_hash({"problem": problem, "algo": algo, "replicate": replicate, "budget": budget,
                                         "q": q, "dim": dim, "master_seed": master_seed, "checkpoint": checkpoint_id})
                status = manifest.cells.get(key)
                run_path = os.path.join(out_dir, run_file_name(problem, algo, replicate))
                if status and status.status == "done" and status.config_hash == cell_hash and os.path.exists(run_path):
                    outcome.skipped.append(key)
                    continue
                cells.append((key, cell_hash, problem, algo, replicate, run_path))

    def run_cell(key: str, cell_hash: str, problem_name: str, algo: str, replicate: int, run_path: str) -> CellStatus:
        seed = derive_seed(master_seed, problem_name, replicate)
        with lock:
            manifest.derived_seeds[key] = seed
        if os.path.exists(run_path):
            os.remove(run_path)
        logger.info(f"Bench cell {key} started (seed {seed})")
        try:
            with get_problem(problem_name, d=dim) as problem:
                service.write_run(run_path, service.run_records(problem, algo, budget, seed, q=q))
        except FomemoError as e:
            logger.error(f"Bench cell {key} failed: {e}")
            return CellStatus(config_hash=cell_hash, status="failed", run_file=os.path.basename(run_path), error=str(e))
        except Exception as e:
            logger.exception(f"Bench cell {key} failed unexpectedly: {e}")
            return CellStatus(config_hash=cell_hash, status="failed", run_file=os.path.basename(run_path),
                              error=f"{type(e).__name__}: {e}")
        logger.info(f"Bench cell {key} finished")
        return CellStatus(config_hash=cell_hash, status="done", run_file=os.path.basename(run_path))

    if outcome.skipped:
        logger.info(f"Skipping {len(outcome.skipped)} completed cells")
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        futures = {pool.submit(run_cell, *cell): cell[0] for cell in cells}
        for future in as_completed(futures):
            key = futures[future]
            status = future.result()
            with lock:
                manifest.cells[key] = status
                write_manifest(out_dir, manifest)

    outcome.failed = sorted(k for k, s in manifest.cells.items() if s.status == "failed")
    done_files = [os.path.join(out_dir, s.run_file) for s in manifest.cells.values() if s.status == "done" and s.run_file]

    rows: List[list] = []
    for metric in metrics:
        try:
            rows.extend(report_rows(done_files, metric))
        except MissingReference as e:
            logger.warning(f"Skipping {metric} for runs without a reference front: {e}")
    results_path = os.path.join(out_dir, "results.csv")
    summary_path = os.path.join(out_dir, "summary.csv")
    write_csv(results_path, REPORT_HEADER, rows)
    write_csv(summary_path, SUMMARY_HEADER, summarize(rows))

    manifest.artifacts = sorted({s.run_file for s in manifest.cells.values() if s.run_file and os.path.exists(os.path.join(out_dir, s.run_file))}
                                | {"results.csv", "summary.csv"})
    manifest.finished_at = utc_now()
    write_manifest(out_dir, manifest)
    logger.info(f"Bench finished: {len(manifest.cells)} cells, {len(outcome.failed)} failed")
    return outcome
