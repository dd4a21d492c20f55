"""
Scaled-down end-to-end comparisons against the baselines (run with `pytest -m slow`)
"""
import logging
import numpy as np
import pytest

from core.schemas.schemas import TrainRunConfig
from core.services.benchmarks import get_problem
from core.services.pfn_model import load_checkpoint
from core.services.services import OptimizationService, anytime_metrics
from core.services.trainer import train

pytestmark = pytest.mark.slow

logger = logging.getLogger(__name__)

BUDGET = 40
SEEDS = 5


@pytest.fixture(scope="module")
def trained_service(tmp_path_factory):
    """Toy checkpoint wide enough for ZDT1 at its default dimension plus 40 evaluations"""
    config = TrainRunConfig.model_validate({
        "schema": 1,
        "model": {"embed_dim": 128, "ff_hidden_dim": 256, "n_heads": 4, "n_layers": 4, "n_bins": 256,
                  "max_features": 8, "max_objectives": 2, "max_sample_length": 64},
        "train": {"batch_size": 64, "steps_per_epoch": 256, "epochs": 50, "warmup_epochs": 2, "peak_lr": 1e-4,
                  "eval_interval": 10, "heldout_tasks": 256, "prefetch": 4,
                  "prior": {"limits": {"max_features": 8, "max_objectives": 2, "sample_length": 64}}},
    })
    out = tmp_path_factory.mktemp("e2e")
    result = train(config, str(out), progress=False)
    return OptimizationService(load_checkpoint(result.checkpoint_path).model)


def final_igd_plus(service, problem, algo, seed):
    records = list(service.run_records(problem, algo, BUDGET, seed))
    reference = problem.true_front(1000)
    return anytime_metrics(records, reference, "igdplus")[-1][1], records


@pytest.fixture(scope="module")
def comparison(trained_service):
    results = {}
    for name in ("zdt1", "omnitest"):
        problem = get_problem(name)
        for algo in ("fomemo-ucb", "sobol", "gp-parego"):
            runs = [final_igd_plus(trained_service, problem, algo, seed) for seed in range(SEEDS)]
            results[(name, algo)] = runs
    return results


def test_in_context_ucb_beats_random_search(comparison):
    close_to_gp = []
    for name in ("zdt1", "omnitest"):
        ucb = np.mean([value for value, _ in comparison[(name, "fomemo-ucb")]])
        sobol = np.mean([value for value, _ in comparison[(name, "sobol")]])
        parego = np.mean([value for value, _ in comparison[(name, "gp-parego")]])
        logger.info(f"{name}: IGD+ fomemo-ucb {ucb:.4f}, sobol {sobol:.4f}, gp-parego {parego:.4f}")
        assert ucb < sobol
        close_to_gp.append(ucb <= 2.0 * parego)
    assert any(close_to_gp)


def test_candidate_generation_is_faster_than_gp_parego(comparison):
    def late_iteration_ms(records):
        n_init = sum(1 for r in records if r.phase == "init")
        per_iter = {}
        for r in records:
            if r.phase == "opt" and n_init + r.iter - 1 >= 50:
                per_iter[r.iter] = r.wall_ms
        return list(per_iter.values())

    fomemo = [ms for _, records in comparison[("zdt1", "fomemo-ucb")] for ms in late_iteration_ms(records)]
    parego = [ms for _, records in comparison[("zdt1", "gp-parego")] for ms in late_iteration_ms(records)]
    assert fomemo and parego
    ratio = np.mean(parego) / max(np.mean(fomemo), 1e-9)
    logger.info(f"GP-ParEGO / in-context candidate time at trajectory length >= 50: {ratio:.2f}")
    assert np.mean(fomemo) < np.mean(parego)
