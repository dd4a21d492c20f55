"""
Tests for acquisition functions, their optimizer and the in-context loop
"""
import numpy as np
import pytest

from core.schemas.schemas import AcquisitionSpec
from core.services import acquisition
from core.services.acquisition import (
    NormalizedTrajectory,
    Proposal,
    Trajectory,
    acq_ei,
    acq_uhvi,
    acq_ucb,
    best_aggregation,
    check_context_length,
    initial_design,
    make_scorer,
    maximize_scores,
    propose_batch,
    run_optimization,
    uhvi_utility,
)
from core.services.benchmarks import get_problem, sobol_points
from core.services.pfn_model import PosteriorHistogram, RiemannSupport, predict_posterior
from core.services.scalarize import aggregation_target, hv_scalarization_estimate, refvec_to_preference
from helpers.errors import EmptyTrajectory, ShapeError


@pytest.fixture
def five_bin_support():
    return RiemannSupport(boundaries=np.array([-0.1, 0.0, 0.1, 0.2]), tail_scale=0.1)


@pytest.fixture
def small_spec():
    """Optimizer sizes small enough for the tiny model"""
    return AcquisitionSpec(kind="ei", candidate_pool=64, restarts=4, refine_steps=5, n_pref_samples=4)


@pytest.fixture
def zdt1_trajectory():
    problem = get_problem("zdt1", d=2)
    X = initial_design(2, seed=0)
    trajectory = Trajectory(X, np.array([problem.evaluate_unit(x) for x in X]))
    return trajectory.normalized()


def one_hot(index, n=5):
    p = np.zeros(n)
    p[index] = 1.0
    return p


def test_best_aggregation_example():
    trajectory = NormalizedTrajectory(x=np.zeros((1, 2)), y=np.array([[0.2, 0.4]]))
    assert best_aggregation(trajectory, [0.5, 0.5]) == pytest.approx(-0.2)


def test_best_aggregation_grows_with_better_points():
    worse = NormalizedTrajectory(x=np.zeros((1, 2)), y=np.array([[0.6, 0.6]]))
    better = NormalizedTrajectory(x=np.zeros((2, 2)), y=np.array([[0.6, 0.6], [0.3, 0.5]]))
    assert best_aggregation(better, [0.4, 0.6]) >= best_aggregation(worse, [0.4, 0.6])


def test_best_aggregation_needs_points():
    with pytest.raises(EmptyTrajectory):
        best_aggregation(NormalizedTrajectory(x=np.zeros((0, 2)), y=np.zeros((0, 2))), [0.5, 0.5])
    with pytest.raises(EmptyTrajectory):
        Trajectory.empty(2, 2).normalized()


def test_acq_ei_on_a_single_bin(five_bin_support):
    posterior = PosteriorHistogram(five_bin_support, one_hot(2))
    assert float(acq_ei(posterior, 0.0)) == pytest.approx(0.05)
    assert float(acq_ei(posterior, 0.2)) == pytest.approx(0.0, abs=1e-12)


def test_acq_ei_is_nonnegative(five_bin_support, rng):
    posterior = PosteriorHistogram(five_bin_support, rng.dirichlet(np.ones(5), size=10))
    assert np.all(acq_ei(posterior, 0.05) >= 0)


def test_acq_ucb_beta(five_bin_support):
    posterior = PosteriorHistogram(five_bin_support, one_hot(2))
    assert float(acq_ucb(posterior, 0.0)) == pytest.approx(0.05)
    assert float(acq_ucb(posterior, 1.0)) == pytest.approx(0.05 + 0.1 / np.sqrt(12), abs=1e-6)


def test_uhvi_single_objective_is_clamped_improvement():
    ucb = np.array([[-0.5, -0.3, -0.1, 0.0]])
    best_g = np.array([-0.3])
    utility = uhvi_utility(ucb, best_g, np.array([[1.0]]))
    np.testing.assert_allclose(utility, np.maximum(0.0, ucb[0] - best_g[0]))
    assert utility[1] == pytest.approx(0.0)


def test_uhvi_is_nonnegative(rng):
    prefs = rng.dirichlet(np.ones(2), size=8)
    utility = uhvi_utility(rng.normal(-0.5, 0.5, size=(8, 20)), rng.normal(-0.5, 0.2, size=8), prefs)
    assert utility.shape == (20,)
    assert np.all(utility >= 0)


def test_make_scorer_requires_preferences(tiny_model, zdt1_trajectory, small_spec):
    with pytest.raises(ValueError):
        make_scorer(tiny_model, zdt1_trajectory, small_spec)
    with pytest.raises(ValueError):
        make_scorer(tiny_model, zdt1_trajectory, small_spec.model_copy(update={"kind": "uhvi"}))


def test_maximize_scores_on_a_constant_landscape():
    x, utility = maximize_scores(lambda X: np.zeros(X.shape[0]), 3, np.random.default_rng(0), 32, 4, 5)
    assert x.shape == (3,)
    assert np.all((x >= 0) & (x <= 1))
    assert utility == 0.0


def test_maximize_scores_refines_beyond_the_pool():
    target = np.array([0.3, 0.7])

    def score(X):
        return -np.sum((X - target) ** 2, axis=1)

    pool_seed = int(np.random.default_rng(5).integers(2 ** 63))
    pool_best = score(sobol_points(2, 64, seed=pool_seed)).max()
    x, utility = maximize_scores(score, 2, np.random.default_rng(5), 64, 4, 50)
    assert utility >= pool_best
    assert np.max(np.abs(x - target)) < 0.1


def test_maximize_scores_is_deterministic():
    def score(X):
        return np.sin(5 * X).sum(axis=1)

    a = maximize_scores(score, 2, np.random.default_rng(11), 32, 4, 10)
    b = maximize_scores(score, 2, np.random.default_rng(11), 32, 4, 10)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1] == b[1]


def test_propose_batch_ei_uses_one_preference_per_candidate(tiny_model, zdt1_trajectory, small_spec):
    proposals = propose_batch(tiny_model, zdt1_trajectory, small_spec, np.random.default_rng(0), q=5)
    assert len(proposals) == 5
    prefs = np.array([p.preference for p in proposals])
    assert len({tuple(np.round(p, 12)) for p in prefs}) == 5
    np.testing.assert_allclose(prefs.sum(axis=1), 1.0)
    for p in proposals:
        assert np.all((p.x >= 0) & (p.x <= 1))


def test_propose_batch_uhvi_uses_fresh_preference_sets(tiny_model, zdt1_trajectory, small_spec):
    spec = small_spec.model_copy(update={"kind": "uhvi"})
    proposals = propose_batch(tiny_model, zdt1_trajectory, spec, np.random.default_rng(0), q=3)
    assert len(proposals) == 3
    for p in proposals:
        assert p.preference is None
        assert p.pref_set.shape == (4, 2)
        assert p.utility >= 0
    assert not np.array_equal(proposals[0].pref_set, proposals[1].pref_set)


def test_run_with_zero_budget_is_the_initial_design(tiny_model, small_spec):
    records = list(run_optimization(get_problem("zdt1", d=2), tiny_model, small_spec, budget=0, seed=4))
    assert len(records) == 6
    assert all(r.phase == "init" and r.iter == 0 for r in records)
    np.testing.assert_allclose([r.x for r in records], initial_design(2, 4))


def test_run_with_batches(tiny_model, small_spec):
    spec = small_spec.model_copy(update={"kind": "ucb", "q": 5})
    records = list(run_optimization(get_problem("zdt1", d=2), tiny_model, spec, budget=40, seed=1))
    opt = [r for r in records if r.phase == "opt"]
    assert len(records) == 46
    assert sorted({r.iter for r in opt}) == list(range(1, 9))
    assert all(len(r.preference) == 2 and r.utility is not None for r in opt)


def test_run_is_reproducible(tiny_model, small_spec):
    problem = get_problem("zdt2", d=2)
    a = list(run_optimization(problem, tiny_model, small_spec, budget=3, seed=9))
    b = list(run_optimization(problem, tiny_model, small_spec, budget=3, seed=9))
    assert [r.x for r in a] == [r.x for r in b]
    assert [r.y for r in a] == [r.y for r in b]


def test_context_length_limit(tiny_model, small_spec):
    check_context_length(tiny_model, 2, 57, 1)
    with pytest.raises(ShapeError):
        check_context_length(tiny_model, 2, 59, 1)
    with pytest.raises(ShapeError):
        next(run_optimization(get_problem("zdt1", d=2), tiny_model, small_spec, budget=200, seed=0))


def test_uhvi_single_objective_matches_ucb_improvement(tiny_model, rng):
    for _ in range(100):
        n = int(rng.integers(2, 8))
        trajectory = Trajectory(rng.random((n, 2)), rng.normal(size=(n, 1))).normalized()
        x = rng.random((4, 2))
        ucb = acq_ucb(predict_posterior(tiny_model, trajectory.x, trajectory.y, x, np.ones(1)), 1.0)
        g_best = best_aggregation(trajectory, np.ones(1))
        utility = acq_uhvi(tiny_model, trajectory, x, np.ones((1, 1)), 1.0)
        np.testing.assert_allclose(utility, np.maximum(0.0, np.minimum(ucb, 0.0) - g_best), atol=1e-5)


def test_propose_batch_reoptimizes_a_repeat_of_an_evaluated_point(tiny_model, zdt1_trajectory, small_spec, monkeypatch):
    calls = []

    def optimize_once(model, trajectory, spec, rng, preference=None, pref_set=None):
        calls.append(preference)
        x = trajectory.x[2] if len(calls) == 1 else np.array([0.5, 0.5])
        return Proposal(x=np.array(x), utility=0.0, preference=preference)

    monkeypatch.setattr(acquisition, "optimize_acquisition", optimize_once)
    [proposal] = propose_batch(tiny_model, zdt1_trajectory, small_spec, np.random.default_rng(0), q=1)
    assert len(calls) == 2
    np.testing.assert_array_equal(proposal.x, [0.5, 0.5])


@pytest.mark.parametrize("kind", ["ei", "ucb"])
def test_candidate_is_invariant_to_rescaling_an_objective(tiny_model, small_spec, kind):
    problem = get_problem("zdt1", d=2)
    X = initial_design(2, seed=3)
    Y = np.array([problem.evaluate_unit(x) for x in X])
    # power-of-two scales keep the normalized trajectory bit-identical
    rescaled = Y * np.array([4.0, 0.25])
    spec = small_spec.model_copy(update={"kind": kind})

    a = Trajectory(X, Y).normalized()
    b = Trajectory(X, rescaled).normalized()
    np.testing.assert_array_equal(a.y, b.y)
    first = propose_batch(tiny_model, a, spec, np.random.default_rng(8), q=2)
    second = propose_batch(tiny_model, b, spec, np.random.default_rng(8), q=2)
    for p, r in zip(first, second):
        np.testing.assert_array_equal(p.x, r.x)


def hv_improvement_case():
    """Two-point front and a knee candidate adding the square [0.3, 0.6)^2 inside the unit box"""
    front = np.array([[0.1, 0.6], [0.6, 0.1]])
    candidate = np.array([0.3, 0.3])
    return front, candidate, 0.09


def uhvi_of_exact_objectives(front, candidate, prefs):
    ucb = aggregation_target(candidate, prefs)[:, None]
    best_g = np.max(aggregation_target(front[None, :, :], prefs[:, None, :]), axis=1)
    return float(uhvi_utility(ucb, best_g, prefs)[0])


def test_uhvi_matches_the_scalarization_hypervolume_improvement():
    front, candidate, exact = hv_improvement_case()
    theta = (np.arange(20_000) + 0.5) * (np.pi / 2) / 20_000
    refvecs = np.stack([np.cos(theta), np.sin(theta)], axis=1)

    after = hv_scalarization_estimate(np.vstack([front, candidate]), [1.0, 1.0], refvecs=refvecs)
    before = hv_scalarization_estimate(front, [1.0, 1.0], refvecs=refvecs)
    assert after - before == pytest.approx(exact, abs=1e-3)

    # preferences induced by sphere-uniform reference vectors reproduce the same rays
    prefs = refvec_to_preference(refvecs)
    assert uhvi_of_exact_objectives(front, candidate, prefs) == pytest.approx(after - before, rel=1e-9)


def test_uhvi_with_simplex_uniform_preferences_is_biased_by_the_density_ratio():
    front, candidate, exact = hv_improvement_case()
    t = (np.arange(200_000) + 0.5) / 200_000
    prefs = np.stack([t, 1.0 - t], axis=1)
    value = uhvi_of_exact_objectives(front, candidate, prefs)
    # the simplex-to-sphere density ratio lies in [1, 2] for two objectives
    assert np.pi / 4 * exact - 1e-4 <= value <= np.pi / 2 * exact + 1e-4
    assert value < 0.9 * exact
