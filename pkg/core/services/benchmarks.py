"""
Benchmark problems, the Sobol initializer and the external-problem adapter

The optimizer always works in the unit cube; every problem maps unit-cube
points onto its native box with an affine map before evaluating.
"""
import json
import shlex
import queue
import logging
import warnings
import threading
import subprocess
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from core.services.metrics import pareto_filter
from helpers.errors import (
    BoundsError,
    ChildExitError,
    DimensionError,
    EvaluationTimeout,
    NoAnalyticFront,
    ProblemError,
    ProtocolError,
)

logger = logging.getLogger(__name__)

MAX_SOBOL_DIM = 30
ZDT_DEFAULT_DIM = 8
ZDT3_SWEEP = 10_000
ZDT6_F1_MIN = 0.2807753191
BOUNDS_TOL = 1e-12


@dataclass
class BenchmarkProblem:
    """
    A box-bounded multi-objective problem (minimization)

    evaluator takes a decision vector in the native bounds; evaluate_unit maps
    a unit-cube point there first.
    """
    name: str
    d: int
    m: int
    bounds: np.ndarray
    evaluator: Callable[[np.ndarray], np.ndarray]
    front_sampler: Optional[Callable[[int], np.ndarray]] = None
    closer: Optional[Callable[[], None]] = None

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float).reshape(self.d, 2)
        if np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
            raise ProblemError(f"{self.name}: every lower bound must be below its upper bound")

    def to_native(self, u) -> np.ndarray:
        """Affine map from the unit cube to the native box (exact at the corners)"""
        u = np.asarray(u, dtype=float)
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return np.where(u >= 1.0, hi, lo + u * (hi - lo))

    def to_unit(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return (x - lo) / (hi - lo)

    def evaluate(self, x) -> np.ndarray:
        """Evaluate a native decision vector"""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d,):
            raise BoundsError(f"{self.name} expects a {self.d}-vector, got shape {x.shape}")
        return np.asarray(self.evaluator(x), dtype=float)

    def evaluate_unit(self, u) -> np.ndarray:
        """Evaluate a unit-cube decision vector"""
        u = np.asarray(u, dtype=float)
        if np.any(u < -BOUNDS_TOL) or np.any(u > 1 + BOUNDS_TOL):
            raise BoundsError(f"{self.name}: {u} lies outside the unit cube")
        return self.evaluate(self.to_native(np.clip(u, 0.0, 1.0)))

    def true_front(self, n_points: int) -> np.ndarray:
        if self.front_sampler is None:
            raise NoAnalyticFront(f"{self.name} has no analytic Pareto front")
        return self.front_sampler(n_points)

    def close(self) -> None:
        if self.closer is not None:
            self.closer()

    def __enter__(self) -> "BenchmarkProblem":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _check_box(x: np.ndarray, lo: float, hi: float, name: str) -> None:
    if np.any(x < lo - BOUNDS_TOL) or np.any(x > hi + BOUNDS_TOL):
        raise BoundsError(f"{name}: {x} lies outside [{lo}, {hi}]")


def zdt_evaluate(variant: int, x) -> np.ndarray:
    """
    ZDT test function on a unit-cube decision vector

    f1 = x_1 (ZDT6: 1 - exp(-4 x_1) sin^6(6 pi x_1)) and f2 = h * shape(f1 / h).
    ZDT4 maps x_2..x_d onto [-5, 5]; with d = 1 every variant uses h = 1.

    Args:
        variant: 1, 2, 3, 4 or 6
        x: Decision vector in [0, 1]^d

    Returns:
        Objective vector (f1, f2)

    Raises:
        BoundsError: If x leaves the unit cube
    """
    x = np.asarray(x, dtype=float)
    _check_box(x, 0.0, 1.0, f"ZDT{variant}")
    x = np.clip(x, 0.0, 1.0)
    tail = x[1:]
    k = tail.size

    if variant == 6:
        f1 = 1.0 - np.exp(-4.0 * x[0]) * np.sin(6.0 * np.pi * x[0]) ** 6
    else:
        f1 = x[0]

    if k == 0:
        h = 1.0
    elif variant == 4:
        z = -5.0 + 10.0 * tail
        h = 1.0 + 10.0 * k + np.sum(z * z - 10.0 * np.cos(4.0 * np.pi * z))
    elif variant == 6:
        h = 1.0 + 9.0 * (np.sum(tail) / k) ** 0.25
    else:
        h = 1.0 + 9.0 * np.sum(tail) / k

    ratio = f1 / h
    if variant in (1, 4):
        f2 = h * (1.0 - np.sqrt(ratio))
    elif variant in (2, 6):
        f2 = h * (1.0 - ratio ** 2)
    elif variant == 3:
        f2 = h * (1.0 - np.sqrt(ratio) - ratio * np.sin(10.0 * np.pi * f1))
    else:
        raise ProblemError(f"unknown ZDT variant {variant}")
    return np.array([f1, f2])


def omnitest_evaluate(x) -> np.ndarray:
    """
    Omnitest: f1 = sum_i sin(pi x_i), f2 = sum_i cos(pi x_i) on [0, 6]^d

    Raises:
        BoundsError: If x leaves [0, 6]^d
    """
    x = np.asarray(x, dtype=float)
    _check_box(x, 0.0, 6.0, "Omnitest")
    return np.array([np.sum(np.sin(np.pi * x)), np.sum(np.cos(np.pi * x))])


def _zdt3_segments() -> List[np.ndarray]:
    f1 = np.linspace(0.0, 1.0, ZDT3_SWEEP)
    f2 = 1.0 - np.sqrt(f1) - f1 * np.sin(10.0 * np.pi * f1)
    front = pareto_filter(np.column_stack([f1, f2]))
    kept = np.sort(front[:, 0])
    gaps = np.nonzero(np.diff(kept) > 1.5 / (ZDT3_SWEEP - 1))[0]
    return np.split(kept, gaps + 1)


def _split_counts(lengths: Sequence[float], n_points: int) -> List[int]:
    """Distribute n_points over segments proportionally to their length, at least one each"""
    lengths = np.asarray(lengths, dtype=float)
    if n_points <= lengths.size:
        counts = np.zeros(lengths.size, dtype=int)
        counts[np.argsort(-lengths)[:n_points]] = 1
        return counts.tolist()
    share = lengths / lengths.sum() * (n_points - lengths.size)
    counts = 1 + np.floor(share).astype(int)
    for i in np.argsort(-(share - np.floor(share)))[: n_points - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def true_front(problem: str, n_points: int, d: int = 2) -> np.ndarray:
    """
    Evenly spaced points of an analytic Pareto front

    ZDT1 / ZDT4 are spaced evenly in f2, ZDT2 / ZDT6 evenly in f1, ZDT3 evenly in
    f1 within each disconnected segment, Omnitest evenly in angle.

    Args:
        problem: Registered problem name
        n_points: Points to return
        d: Decision dimension (only Omnitest's front depends on it)

    Returns:
        Array of shape (k, 2); k = n_points except for ZDT3, where the final
        dominance filter may drop segment endpoints

    Raises:
        NoAnalyticFront: For problems without a closed-form front
    """
    if n_points < 1:
        raise ValueError("n_points must be at least 1")
    name = problem.lower()
    if name in ("zdt1", "zdt4"):
        f2 = np.linspace(1.0, 0.0, n_points)
        return np.column_stack([(1.0 - f2) ** 2, f2])
    if name in ("zdt2", "zdt6"):
        f1 = np.linspace(0.0 if name == "zdt2" else ZDT6_F1_MIN, 1.0, n_points)
        return np.column_stack([f1, 1.0 - f1 ** 2])
    if name == "zdt3":
        segments = _zdt3_segments()
        counts = _split_counts([s[-1] - s[0] for s in segments], n_points)
        f1 = np.concatenate([np.linspace(s[0], s[-1], c) for s, c in zip(segments, counts) if c > 0])
        f2 = 1.0 - np.sqrt(f1) - f1 * np.sin(10.0 * np.pi * f1)
        return pareto_filter(np.column_stack([f1, f2]))
    if name == "omnitest":
        theta = np.linspace(np.pi, 1.5 * np.pi, n_points)
        return np.column_stack([d * np.sin(theta), d * np.cos(theta)])
    raise NoAnalyticFront(f"{problem} has no analytic Pareto front")


def sobol_points(d: int, n: int, seed: Optional[int] = None, scramble: bool = True) -> np.ndarray:
    """
    Scrambled Sobol points in the unit cube, skipping the first point of the stream

    Args:
        d: Dimension, at most 30
        n: Number of points
        seed: Scrambling seed
        scramble: Owen scrambling with a digital shift (off gives the raw sequence)

    Returns:
        Array of shape (n, d)

    Raises:
        DimensionError: If d > 30
    """
    if not 1 <= d <= MAX_SOBOL_DIM:
        raise DimensionError(f"Sobol points support 1..{MAX_SOBOL_DIM} dimensions, got {d}")
    if n <= 0:
        return np.zeros((0, d))
    sampler = qmc.Sobol(d, scramble=scramble, seed=np.random.default_rng(seed) if scramble else None)
    sampler.fast_forward(1)
    with warnings.catch_warnings():
        # balance properties need powers of two; prefixes are used on purpose
        warnings.simplefilter("ignore", UserWarning)
        points = sampler.random(n)
    if scramble and (np.any(points <= 0.0) or np.any(points >= 1.0)):
        logger.warning("Scrambled Sobol produced a boundary point; nudging into the open cube")
        eps = np.finfo(float).eps
        points = np.clip(points, eps, 1.0 - eps)
    return points


class ExternalEvaluator:
    """
    Child process speaking line-delimited JSON: {"x": [...]} in, {"y": [...]} out

    A reader thread moves stdout lines into a queue so replies can be awaited
    with a timeout; a second one drains stderr into the debug log. The child
    persists across evaluations until it exits or misses a deadline, after
    which it is killed so a late reply is never taken for the next answer.
    """

    def __init__(self, command: str, m: int, timeout: float = 60.0):
        self.command = command
        self.m = m
        self.timeout = timeout
        self._lines: "queue.Queue" = queue.Queue()
        self._lock = threading.Lock()
        try:
            self._proc = subprocess.Popen(
                shlex.split(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as e:
            raise ProblemError(f"Cannot start external problem {command!r}: {e}") from e
        self._reader = threading.Thread(target=self._read, name="external-problem-reader", daemon=True)
        self._reader.start()
        self._stderr_reader = threading.Thread(target=self._drain_stderr, name="external-problem-stderr", daemon=True)
        self._stderr_reader.start()
        logger.info(f"Started external problem {command!r} (pid {self._proc.pid})")

    def _read(self) -> None:
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _drain_stderr(self) -> None:
        for line in self._proc.stderr:
            logger.debug(f"external problem stderr: {line.rstrip()}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        with self._lock:
            if self._proc.poll() is not None:
                raise ChildExitError(f"external problem exited with code {self._proc.returncode}")
            try:
                self._proc.stdin.write(json.dumps({"x": [float(v) for v in x]}) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as e:
                raise ChildExitError(f"external problem closed its input: {e}") from e
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty as e:
                logger.error(f"External problem {self.command!r} missed its {self.timeout} s deadline; killing it")
                self._proc.kill()
                self._proc.wait(timeout=5)
                raise EvaluationTimeout(f"external problem did not answer within {self.timeout} s") from e
        if line is None:
            code = self._proc.wait(timeout=5)
            raise ChildExitError(f"external problem exited with code {code} while a reply was pending")
        return self._parse(line)

    def _parse(self, line: str) -> np.ndarray:
        try:
            payload = json.loads(line)
            y = np.asarray(payload["y"], dtype=float)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"malformed reply {line.strip()!r}: {e}") from e
        if y.shape != (self.m,) or not np.all(np.isfinite(y)):
            raise ProtocolError(f"expected {self.m} finite objectives, got {line.strip()!r}")
        return y

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
        logger.info(f"Closed external problem {self.command!r}")


def external_problem(command: str, d: int, m: int, bounds=None, timeout: float = 60.0) -> BenchmarkProblem:
    """
    Problem whose objectives come from a persistent child process

    Args:
        command: Shell-style command line of the child
        d: Decision dimension
        m: Objective dimension
        bounds: (d, 2) native bounds; the unit cube when omitted
        timeout: Seconds to wait for each reply

    Returns:
        BenchmarkProblem; close() terminates the child
    """
    evaluator = ExternalEvaluator(command, m, timeout=timeout)
    box = np.tile([0.0, 1.0], (d, 1)) if bounds is None else bounds
    return BenchmarkProblem(name=f"external:{command}", d=d, m=m, bounds=box, evaluator=evaluator, closer=evaluator.close)


def zdt_problem(variant: int, d: int = ZDT_DEFAULT_DIM) -> BenchmarkProblem:
    if d < 1:
        raise ProblemError("d must be at least 1")
    return BenchmarkProblem(
        name=f"zdt{variant}",
        d=d,
        m=2,
        bounds=np.tile([0.0, 1.0], (d, 1)),
        evaluator=lambda x: zdt_evaluate(variant, x),
        front_sampler=lambda n: true_front(f"zdt{variant}", n),
    )


def omnitest_problem(d: int = 2) -> BenchmarkProblem:
    if d < 1:
        raise ProblemError("d must be at least 1")
    return BenchmarkProblem(
        name="omnitest",
        d=d,
        m=2,
        bounds=np.tile([0.0, 6.0], (d, 1)),
        evaluator=omnitest_evaluate,
        front_sampler=lambda n: true_front("omnitest", n, d=d),
    )


PROBLEMS: Dict[str, Callable[..., BenchmarkProblem]] = {
    "zdt1": lambda d=None: zdt_problem(1, d or ZDT_DEFAULT_DIM),
    "zdt2": lambda d=None: zdt_problem(2, d or ZDT_DEFAULT_DIM),
    "zdt3": lambda d=None: zdt_problem(3, d or ZDT_DEFAULT_DIM),
    "zdt4": lambda d=None: zdt_problem(4, d or ZDT_DEFAULT_DIM),
    "zdt6": lambda d=None: zdt_problem(6, d or ZDT_DEFAULT_DIM),
    "omnitest": lambda d=None: omnitest_problem(d or 2),
}

SYNTHETIC_SUITE = ["zdt1", "zdt2", "zdt3", "omnitest"]


def get_problem(name: str, d: Optional[int] = None, m: Optional[int] = None, timeout: float = 60.0) -> BenchmarkProblem:
    """
    Look up a registered problem or start an `external:<command>` problem

    Raises:
        ProblemError: For unknown names, listing the registered ones
    """
    if name.startswith("external:"):
        if d is None or m is None:
            raise ProblemError("external problems need both a decision dimension and an objective count")
        return external_problem(name[len("external:"):], d, m, timeout=timeout)
    factory = PROBLEMS.get(name.lower())
    if factory is None:
        raise ProblemError(f"unknown problem {name!r}; registered: {', '.join(sorted(PROBLEMS))}")
    return factory(d)
