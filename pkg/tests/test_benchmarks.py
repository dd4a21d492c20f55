"""
Tests for benchmark problems, Sobol points and the external-problem adapter
"""
import sys
import textwrap
import numpy as np
import pytest

from core.services.benchmarks import (
    PROBLEMS,
    SYNTHETIC_SUITE,
    ZDT6_F1_MIN,
    external_problem,
    get_problem,
    omnitest_evaluate,
    sobol_points,
    true_front,
    zdt_evaluate,
)
from core.services.metrics import dominates, pareto_filter
from helpers.errors import (
    BoundsError,
    ChildExitError,
    DimensionError,
    EvaluationTimeout,
    NoAnalyticFront,
    ProblemError,
    ProtocolError,
)


def star_discrepancy_estimate(points, rng, n_boxes=4000):
    """Largest |empirical - volume| over random anchored boxes (a lower bound on D*)"""
    corners = rng.random((n_boxes, points.shape[1]))
    inside = np.all(points[None, :, :] < corners[:, None, :], axis=2).mean(axis=1)
    return float(np.max(np.abs(inside - np.prod(corners, axis=1))))


def test_zdt1_examples():
    np.testing.assert_allclose(zdt_evaluate(1, np.zeros(8)), [0.0, 1.0])
    x = np.zeros(8)
    x[0] = 1.0
    np.testing.assert_allclose(zdt_evaluate(1, x), [1.0, 0.0])


def test_zdt2_front_point():
    x = np.zeros(8)
    x[0] = 0.25
    np.testing.assert_allclose(zdt_evaluate(2, x), [0.25, 0.9375])


def test_zdt3_and_zdt4_on_the_front():
    x = np.zeros(8)
    x[0] = 0.5
    f = zdt_evaluate(3, x)
    assert f[1] == pytest.approx(1 - np.sqrt(0.5) - 0.5 * np.sin(5 * np.pi))
    u = np.full(8, 0.5)
    u[0] = 0.25
    np.testing.assert_allclose(zdt_evaluate(4, u), [0.25, 0.5])


def test_zdt6_smallest_f1():
    f1 = [zdt_evaluate(6, np.array([u]))[0] for u in np.linspace(0.0, 1.0, 20_001)]
    assert min(f1) == pytest.approx(ZDT6_F1_MIN, abs=1e-6)
    assert true_front("zdt6", 10)[0, 0] == pytest.approx(ZDT6_F1_MIN)


def test_zdt_single_variable_has_unit_h():
    np.testing.assert_allclose(zdt_evaluate(1, np.array([0.49])), [0.49, 1 - np.sqrt(0.49)])


def test_zdt_rejects_points_outside_the_cube():
    with pytest.raises(BoundsError):
        zdt_evaluate(1, np.array([1.2, 0.0]))


def test_omnitest_examples():
    np.testing.assert_allclose(omnitest_evaluate([0.5, 0.5]), [2.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(omnitest_evaluate([0.0, 0.0]), [0.0, 2.0])
    np.testing.assert_allclose(omnitest_evaluate([1.3, 0.4]), omnitest_evaluate([3.3, 0.4]), atol=1e-12)
    with pytest.raises(BoundsError):
        omnitest_evaluate([6.5, 1.0])


def test_true_front_zdt1_three_points():
    np.testing.assert_allclose(true_front("zdt1", 3), [[0.0, 1.0], [0.25, 0.5], [1.0, 0.0]])


@pytest.mark.parametrize("name", ["zdt1", "zdt2", "zdt3", "zdt4", "zdt6", "omnitest"])
def test_true_fronts_are_nondominated(name):
    front = true_front(name, 200)
    assert pareto_filter(front).shape[0] == front.shape[0]


def test_zdt2_front_is_concave():
    front = true_front("zdt2", 50)
    for i in range(0, 50, 7):
        for j in range(i + 1, 50, 9):
            midpoint = 0.5 * (front[i] + front[j])
            assert any(dominates(p, midpoint) for p in front)


def test_zdt3_front_has_disconnected_segments():
    front = true_front("zdt3", 500)
    gaps = np.diff(np.sort(front[:, 0]))
    assert np.sum(gaps > 0.05) >= 4


def test_true_front_points_are_attainable():
    problem = get_problem("zdt1", d=4)
    front = problem.true_front(5)
    for f1, f2 in front:
        np.testing.assert_allclose(problem.evaluate_unit(np.array([f1, 0, 0, 0])), [f1, f2], atol=1e-12)


def test_external_problems_have_no_front(loopback_command):
    with external_problem(loopback_command, d=2, m=2) as problem:
        with pytest.raises(NoAnalyticFront):
            problem.true_front(10)
    with pytest.raises(NoAnalyticFront):
        true_front("external", 10)


def test_sobol_unscrambled_first_points():
    np.testing.assert_allclose(sobol_points(1, 3, scramble=False).ravel(), [0.5, 0.75, 0.25])


def test_sobol_points_fill_the_open_cube(rng):
    points = sobol_points(2, 256, seed=3)
    assert np.all(points > 0) and np.all(points < 1)
    sobol = star_discrepancy_estimate(points, np.random.default_rng(9))
    random = np.mean([star_discrepancy_estimate(rng.random((256, 2)), np.random.default_rng(9)) for _ in range(20)])
    assert sobol < random


def test_sobol_points_are_seeded():
    np.testing.assert_array_equal(sobol_points(3, 8, seed=1), sobol_points(3, 8, seed=1))
    assert not np.array_equal(sobol_points(3, 8, seed=1), sobol_points(3, 8, seed=2))
    with pytest.raises(DimensionError):
        sobol_points(31, 4)


def test_problem_maps_the_unit_cube_onto_native_bounds():
    problem = get_problem("omnitest")
    np.testing.assert_allclose(problem.to_native([0.0, 1.0]), [0.0, 6.0])
    np.testing.assert_allclose(problem.to_unit(problem.to_native([0.25, 0.8])), [0.25, 0.8])
    np.testing.assert_allclose(problem.evaluate_unit([0.5 / 6, 0.5 / 6]), [2.0, 0.0], atol=1e-12)
    with pytest.raises(BoundsError):
        problem.evaluate_unit([1.5, 0.0])


def test_registry_and_dimension_overrides():
    assert set(SYNTHETIC_SUITE) <= set(PROBLEMS)
    assert get_problem("zdt1").d == 8
    assert get_problem("ZDT4", d=30).d == 30
    assert get_problem("omnitest").d == 2
    with pytest.raises(ProblemError, match="zdt1"):
        get_problem("dtlz2")
    with pytest.raises(ProblemError):
        get_problem("external:whatever")


def test_external_problem_loopback(loopback_command):
    with get_problem(f"external:{loopback_command}", d=3, m=2) as problem:
        np.testing.assert_allclose(problem.evaluate_unit([0.1, 0.2, 0.3]), [0.6, 2.4])
        np.testing.assert_allclose(problem.evaluate_unit([1.0, 1.0, 1.0]), [3.0, 0.0])


def test_external_problem_protocol_errors(loopback_command):
    with external_problem(loopback_command, d=2, m=2) as problem:
        with pytest.raises(ProtocolError):
            problem.evaluator(np.array([-1.0, 0.0]))
    with external_problem(loopback_command, d=2, m=3) as problem:
        with pytest.raises(ProtocolError):
            problem.evaluate_unit([0.5, 0.5])


def test_external_problem_child_exit(loopback_command):
    with external_problem(loopback_command, d=2, m=2) as problem:
        problem.evaluate_unit([0.5, 0.5])
        with pytest.raises(ChildExitError):
            problem.evaluator(np.array([-2.0, 0.0]))
        with pytest.raises(ChildExitError):
            problem.evaluate_unit([0.5, 0.5])


def test_external_problem_timeout(tmp_path):
    script = tmp_path / "silent.py"
    script.write_text("import sys, time\nfor line in sys.stdin:\n    time.sleep(5)\n", encoding="utf-8")
    with external_problem(f"{sys.executable} {script}", d=1, m=1, timeout=0.2) as problem:
        with pytest.raises(EvaluationTimeout):
            problem.evaluate_unit([0.5])


def test_external_problem_that_cannot_start():
    with pytest.raises(ProblemError):
        external_problem("/nonexistent/binary --flag", d=1, m=1)


def test_external_problem_with_a_chatty_stderr(tmp_path):
    script = tmp_path / "chatty.py"
    script.write_text(textwrap.dedent(
        """
        import json
        import sys

        for line in sys.stdin:
            x = json.loads(line)["x"]
            sys.stderr.write("progress " * 15_000 + "\\n")
            sys.stderr.flush()
            print(json.dumps({"y": [sum(x), -sum(x)]}), flush=True)
        """
    ), encoding="utf-8")
    with external_problem(f"{sys.executable} {script}", d=2, m=2, timeout=3) as problem:
        for _ in range(3):
            np.testing.assert_allclose(problem.evaluate_unit([0.25, 0.5]), [0.75, -0.75])


def test_external_problem_late_reply_is_not_reused(tmp_path):
    script = tmp_path / "slow_first.py"
    script.write_text(textwrap.dedent(
        """
        import json
        import sys
        import time

        for i, line in enumerate(sys.stdin):
            if i == 0:
                time.sleep(1.0)
            print(json.dumps({"y": [float(i)]}), flush=True)
        """
    ), encoding="utf-8")
    with external_problem(f"{sys.executable} {script}", d=1, m=1, timeout=0.3) as problem:
        with pytest.raises(EvaluationTimeout):
            problem.evaluate_unit([0.5])
        with pytest.raises(ChildExitError):
            problem.evaluate_unit([0.5])
