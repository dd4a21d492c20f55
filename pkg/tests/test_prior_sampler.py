"""
Tests for the synthetic GP prior
"""
import math
import numpy as np
import pytest

from core.schemas.schemas import PriorConfig, PriorLimits
from core.services import prior_sampler
from core.services.prior_sampler import (
    GPHyper,
    TaskShape,
    dump_training_batches,
    generate_training_batch,
    load_training_batches,
    rbf_kernel_matrix,
    robust_cholesky,
    sample_gp_function_values,
    sample_gp_hyper,
    sample_prior_targets,
    sample_task,
    sample_task_shape,
    sample_trajectory_lengths,
    trajectory_length_weights,
)
from helpers.errors import FactorizationError


def test_trajectory_length_weights_examples():
    w = trajectory_length_weights(8)
    harmonic = sum(1.0 / k for k in range(1, 8))
    assert w[-1] == pytest.approx(1.0 / harmonic)
    assert w[-1] == pytest.approx(0.38573, abs=1e-5)
    assert w[0] / w[-1] == pytest.approx(1.0 / 7.0)
    np.testing.assert_allclose(trajectory_length_weights(2), [1.0])


def test_sample_trajectory_lengths_frequencies(rng):
    draws = sample_trajectory_lengths(rng, 8, 50_000)
    assert draws.min() >= 1 and draws.max() <= 7
    assert np.mean(draws == 7) == pytest.approx(0.38573, abs=0.01)


def test_sample_task_shape_respects_limits(rng):
    limits = PriorLimits(max_features=3, max_objectives=2, sample_length=10)
    for _ in range(200):
        shape = sample_task_shape(rng, limits)
        assert 1 <= shape.d <= 3
        assert 1 <= shape.m <= 2
        assert 1 <= shape.n <= 9
        assert shape.n_query == 10 - shape.n


def test_task_shape_rejects_empty_query_set():
    with pytest.raises(ValueError):
        TaskShape(d=1, m=1, n=5, N=5)


def test_sample_gp_hyper_gamma_mean(rng):
    lengthscales = np.concatenate([sample_gp_hyper(rng, 10).lengthscales for _ in range(10_000)])
    assert lengthscales.mean() == pytest.approx(0.5, abs=0.01)


def test_sample_gp_hyper_fields(rng):
    hyper = sample_gp_hyper(rng, 3)
    assert hyper.lengthscales.shape == (3,)
    assert hyper.output_scale == 1.0
    assert hyper.noise_variance == pytest.approx(1e-4)


def test_rbf_kernel_matrix_examples(rng):
    hyper = GPHyper(lengthscales=np.array([0.5]))
    K = rbf_kernel_matrix(np.array([[0.0], [0.5]]), hyper)
    assert K[0, 0] == pytest.approx(1.0)
    assert K[0, 1] == pytest.approx(math.exp(-0.5), abs=1e-5)

    X = rng.random((5, 3))
    K = rbf_kernel_matrix(X, sample_gp_hyper(rng, 3))
    np.testing.assert_allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() >= -1e-8


def test_rbf_kernel_matrix_cross_shape(rng):
    hyper = GPHyper(lengthscales=np.array([0.3, 0.3]))
    assert rbf_kernel_matrix(rng.random((4, 2)), hyper, rng.random((7, 2))).shape == (4, 7)


def test_gp_values_reproduce_the_kernel_covariance(rng):
    X = rng.random((5, 2))
    hyper = GPHyper(lengthscales=np.array([0.4, 0.6]))
    draws = sample_gp_function_values(X, hyper, rng, n_samples=20_000)
    K = rbf_kernel_matrix(X, hyper) + hyper.noise_variance * np.eye(5)
    np.testing.assert_allclose(np.cov(draws, rowvar=False), K, atol=0.05)


def test_gp_values_single_point_variance(rng):
    hyper = GPHyper(lengthscales=np.array([0.5]), noise_variance=1e-4)
    draws = sample_gp_function_values(np.array([[0.3]]), hyper, rng, n_samples=200_000)
    assert draws.var() == pytest.approx(1.0001, rel=0.01)


def test_robust_cholesky_escalates_jitter():
    ones = np.ones((3, 3))
    L = robust_cholesky(ones)
    np.testing.assert_allclose(L @ L.T, ones, atol=1e-3)


def test_robust_cholesky_without_headroom_fails():
    with pytest.raises(FactorizationError):
        robust_cholesky(np.ones((3, 3)), max_jitter=0.0)
    with pytest.raises(FactorizationError):
        robust_cholesky(-np.eye(3))


def test_sample_task_shapes(rng):
    prior = PriorConfig(limits=PriorLimits(max_features=2, max_objectives=3, sample_length=12))
    task = sample_task(rng, prior)
    assert task.inputs.shape == (12, task.shape.d)
    assert task.observations.shape == (12, task.shape.m)
    assert len(task.hyper) == task.shape.m


def test_generate_training_batch_invariants(rng):
    prior = PriorConfig(limits=PriorLimits(max_features=3, max_objectives=2, sample_length=16))
    batch = generate_training_batch(rng, prior, batch_size=16)
    assert batch.x.shape == (16, 16, 3)
    assert batch.y.shape == (16, 16, 2)
    for b in range(16):
        n, d, m = batch.n[b], batch.d[b], batch.m[b]
        traj_y = batch.y[b, :n, :m]
        assert traj_y.min() >= -1e-6 and traj_y.max() <= 1 + 1e-6
        assert np.all(batch.target[b, :n] <= 1e-6)
        assert np.all(batch.x[b, :, d:] == 0)
        assert np.all(batch.y[b, :, m:] == 0)
        assert batch.preference[b, :m].sum() == pytest.approx(1.0, abs=1e-5)
        assert batch.traj_mask[b].sum() == n


def test_single_objective_target_is_negated_observation():
    prior = PriorConfig(limits=PriorLimits(max_features=1, max_objectives=1, sample_length=4))
    batch = generate_training_batch(np.random.default_rng(3), prior, batch_size=8)
    np.testing.assert_allclose(batch.preference[:, 0], 1.0)
    np.testing.assert_allclose(batch.target, -batch.y[:, :, 0], atol=1e-6)


def test_sample_prior_targets_count(rng):
    prior = PriorConfig(limits=PriorLimits(max_features=2, max_objectives=2, sample_length=8))
    targets = sample_prior_targets(rng, prior, 500, batch_size=16)
    assert targets.shape == (500,)
    assert np.all(np.isfinite(targets))


def test_training_batch_dump_and_load(tmp_path, rng):
    prior = PriorConfig(limits=PriorLimits(max_features=2, max_objectives=2, sample_length=8))
    batches = [generate_training_batch(rng, prior, batch_size=4) for _ in range(3)]
    path = str(tmp_path / "batches.bin")
    assert dump_training_batches(path, batches) == 3
    loaded = list(load_training_batches(path))
    assert len(loaded) == 3
    np.testing.assert_array_equal(loaded[1].target, batches[1].target)
    np.testing.assert_array_equal(loaded[2].traj_mask, batches[2].traj_mask)
    np.testing.assert_array_equal(loaded[0].n, batches[0].n)


def test_generate_training_batch_is_reproducible():
    prior = PriorConfig(limits=PriorLimits(max_features=3, max_objectives=3, sample_length=12))
    a = generate_training_batch(np.random.default_rng(42), prior, batch_size=8)
    b = generate_training_batch(np.random.default_rng(42), prior, batch_size=8)
    for name in ("x", "y", "preference", "target", "traj_mask", "n", "d", "m"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_sample_task_gives_up_after_the_resample_cap(rng, monkeypatch):
    attempts = []

    def always_singular(X, hyper, rng, *args, **kwargs):
        attempts.append(X.shape)
        raise FactorizationError("singular")

    monkeypatch.setattr(prior_sampler, "sample_gp_function_values", always_singular)
    prior = PriorConfig(limits=PriorLimits(max_features=2, max_objectives=1, sample_length=6))
    with pytest.raises(FactorizationError):
        sample_task(rng, prior, shape=TaskShape(d=2, m=1, n=3, N=6))
    assert len(attempts) == prior.max_resample == 8
