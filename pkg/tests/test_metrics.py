"""
Tests for normalization, Pareto filtering, IGD+ and hypervolume
"""
import numpy as np
import pytest

from core.schemas.schemas import MetricConfig
from core.services.metrics import (
    apply_normalization,
    dominates,
    hv_estimate,
    hv_exact_2d,
    igd_plus,
    metric_config,
    normalize_trajectory,
    normalized_hv,
    pareto_filter,
    pareto_mask,
    to_metric_space,
)
from helpers.errors import DimensionMismatch, DomainError


def brute_force_front(points):
    keep = []
    for i, p in enumerate(points):
        if not any(dominates(q, p) for j, q in enumerate(points) if j != i):
            keep.append(tuple(p))
    return sorted(set(keep))


def test_normalize_trajectory_examples():
    norm, _ = normalize_trajectory([[1.0], [3.0]])
    np.testing.assert_allclose(norm.ravel(), [0.0, 1.0])

    norm, bounds = normalize_trajectory([[4.0, -2.0]])
    np.testing.assert_allclose(norm, [[0.0, 0.0]])
    np.testing.assert_allclose(bounds.scale, [1.0, 1.0])


def test_normalize_trajectory_is_affine_invariant(rng):
    raw = rng.normal(size=(20, 2))
    a, _ = normalize_trajectory(raw)
    b, _ = normalize_trajectory(3.5 * raw - 7.0)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert a.min() == 0.0 and a.max() == 1.0


def test_apply_normalization_uses_stored_bounds():
    _, bounds = normalize_trajectory([[0.0, 10.0], [2.0, 20.0]])
    np.testing.assert_allclose(apply_normalization([[1.0, 25.0]], bounds), [[0.5, 1.5]])


def test_pareto_filter_examples():
    front = pareto_filter([[0, 1], [1, 0], [1, 1]])
    np.testing.assert_array_equal(front, [[0, 1], [1, 0]])
    np.testing.assert_array_equal(pareto_filter([[0.3, 0.7]]), [[0.3, 0.7]])


def test_pareto_filter_drops_duplicates():
    front = pareto_filter([[0.2, 0.5], [0.2, 0.5], [0.5, 0.2]])
    assert front.shape == (2, 2)


def test_pareto_filter_matches_brute_force(rng):
    points = rng.random((200, 3))
    front = pareto_filter(points)
    assert sorted(map(tuple, front)) == brute_force_front(points)


def test_igd_plus_examples():
    reference = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert igd_plus([[0.0, 1.0]], reference) == pytest.approx(0.5)
    assert igd_plus(reference, reference) == 0.0
    assert igd_plus(np.vstack([reference, [[0.5, 0.5]]]), reference) == 0.0
    assert igd_plus(reference - 0.1, reference) == 0.0


def test_igd_plus_matches_the_pairwise_formula(rng):
    for _ in range(100):
        m = int(rng.integers(1, 4))
        front = rng.random((int(rng.integers(1, 21)), m))
        reference = rng.random((int(rng.integers(1, 21)), m))
        expected = np.mean([
            min(np.sqrt(sum(max(u[i] - v[i], 0.0) ** 2 for i in range(m))) for u in front)
            for v in reference
        ])
        assert igd_plus(front, reference) == pytest.approx(expected, rel=1e-12, abs=1e-15)


def test_igd_plus_rejects_mismatched_dimensions():
    with pytest.raises(DimensionMismatch):
        igd_plus([[0.0, 1.0]], [[0.0, 1.0, 2.0]])


def test_hv_exact_2d_examples():
    assert hv_exact_2d([[0.25, 0.75], [0.75, 0.25]], [1.0, 1.0]) == pytest.approx(0.3125)
    assert hv_exact_2d([[0.0, 0.0]], [1.0, 1.0]) == pytest.approx(1.0)
    assert hv_exact_2d(np.zeros((0, 2)), [1.0, 1.0]) == 0.0
    assert hv_exact_2d([], [1.0, 1.0]) == 0.0
    assert hv_exact_2d(np.zeros(0), [1.0, 1.0]) == 0.0


def test_hv_exact_2d_ignores_dominated_points():
    front = [[0.25, 0.75], [0.75, 0.25]]
    base = hv_exact_2d(front, [1.0, 1.0])
    assert hv_exact_2d(front + [[0.8, 0.8]], [1.0, 1.0]) == pytest.approx(base)


def test_hv_exact_2d_domain_errors():
    with pytest.raises(DomainError):
        hv_exact_2d([[1.0, 0.5]], [1.0, 1.0])
    with pytest.raises(DomainError):
        hv_exact_2d([[0.1, 0.2, 0.3]], [1.0, 1.0, 1.0])


def test_hv_estimate_agrees_with_the_exact_sweep(rng):
    front = pareto_filter(rng.random((15, 2)) * 0.9)
    exact = hv_exact_2d(front, [1.0, 1.0])
    assert hv_estimate(front, [1.0, 1.0], n_samples=100_000, rng=rng) == pytest.approx(exact, abs=0.01)


def test_hv_estimate_on_random_fronts_is_within_two_percent(rng):
    for _ in range(20):
        front = pareto_filter(0.05 + 0.9 * rng.random((int(rng.integers(1, 9)), 2)))
        exact = hv_exact_2d(front, [1.0, 1.0])
        assert hv_estimate(front, [1.0, 1.0], n_samples=100_000, rng=rng) == pytest.approx(exact, rel=0.02)


def test_normalized_hv_endpoints_of_the_reference_front():
    reference = np.array([[1.0, 5.0], [2.0, 4.5], [3.0, 3.0]])
    result = normalized_hv([[1.0, 5.0], [3.0, 3.0]], reference)
    assert result.value == pytest.approx(0.21)
    assert result.n_samples is None


def test_normalized_hv_empty_after_filter():
    reference = np.array([[0.0, 1.0], [1.0, 0.0]])
    result = normalized_hv([[5.0, 5.0]], reference)
    assert result.value == 0.0
    assert result.empty_after_filter


def test_normalized_hv_grows_with_a_nondominated_point():
    reference = np.array([[0.0, 1.0], [1.0, 0.0]])
    front = [[0.0, 1.0], [1.0, 0.0]]
    before = normalized_hv(front, reference).value
    after = normalized_hv(front + [[0.4, 0.4]], reference).value
    assert after > before


def test_normalized_hv_three_objectives_uses_the_estimator():
    reference = np.eye(3)
    result = normalized_hv([[0.5, 0.5, 0.5]], reference, n_samples=50_000)
    assert result.n_samples == 50_000
    assert result.value == pytest.approx(0.6 ** 3, rel=0.03)


def test_dominance_is_a_strict_partial_order(rng):
    points = rng.integers(0, 3, size=(40, 3)).astype(float)
    D = dominates(points[:, None, :], points[None, :, :])
    assert not np.any(np.diag(D))
    assert not np.any(D & D.T)
    implied = (D.astype(int) @ D.astype(int)) > 0
    assert np.all(D[implied])


def test_pareto_mask_keeps_exactly_the_undominated_rows(rng):
    points = rng.integers(0, 4, size=(30, 2)).astype(float)
    expected = [not any(dominates(q, p) for q in points) for p in points]
    np.testing.assert_array_equal(pareto_mask(points), expected)


def test_igd_plus_is_zero_exactly_when_the_reference_is_weakly_dominated(rng):
    zero_cases = 0
    for _ in range(300):
        front = rng.integers(0, 3, size=(int(rng.integers(1, 5)), 2)).astype(float)
        reference = rng.integers(0, 3, size=(int(rng.integers(1, 4)), 2)).astype(float)
        covered = all(np.any(np.all(front <= v, axis=1)) for v in reference)
        assert (igd_plus(front, reference) == 0.0) == covered
        zero_cases += covered
    assert 0 < zero_cases < 300


def test_metric_config_from_a_reference_front():
    config = metric_config([[1.0, 5.0], [2.0, 4.5], [3.0, 3.0]])
    assert config.ideal == [1.0, 3.0]
    assert config.nadir == [3.0, 5.0]
    assert config.reference_point == [1.1, 1.1]
    np.testing.assert_allclose(to_metric_space([[2.0, 4.0]], config), [[0.5, 0.5]])

    degenerate = metric_config([[0.5, 2.0]])
    assert degenerate.nadir == [1.5, 3.0]


def test_metric_config_validation():
    with pytest.raises(ValueError):
        MetricConfig(reference_point=[1.1, 1.1], ideal=[0.0, 1.0], nadir=[1.0, 1.0])
    with pytest.raises(ValueError):
        MetricConfig(reference_point=[1.1], ideal=[0.0, 0.0], nadir=[1.0, 1.0])
    with pytest.raises(ValueError):
        metric_config(np.zeros((0, 2)))


def test_normalized_hv_accepts_a_precomputed_config():
    reference = np.array([[1.0, 5.0], [2.0, 4.5], [3.0, 3.0]])
    front = [[1.0, 5.0], [3.0, 3.0]]
    assert normalized_hv(front, config=metric_config(reference)).value == pytest.approx(0.21)
    with pytest.raises(ValueError):
        normalized_hv(front)
