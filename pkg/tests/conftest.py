"""
Pytest fixtures for fomemo tests
"""
import os
import sys
import textwrap
import numpy as np
import pytest

# Add the parent directory to the path so we can import from the root
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from core.schemas.schemas import ModelConfig, TrainRunConfig
from core.services.pfn_model import build_riemann_support, init_model, save_checkpoint


@pytest.fixture
def rng():
    """Seeded generator"""
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model_config():
    """Smallest model that still exercises every code path"""
    return ModelConfig(
        embed_dim=16,
        ff_hidden_dim=32,
        n_heads=2,
        n_layers=2,
        n_bins=16,
        max_features=3,
        max_objectives=3,
        max_sample_length=64,
    )


@pytest.fixture
def tiny_support():
    samples = np.random.default_rng(1).normal(size=20_000)
    return build_riemann_support(samples, 16)


@pytest.fixture
def tiny_model(tiny_model_config, tiny_support):
    """Untrained model; predictions are meaningless but well-formed"""
    return init_model(tiny_model_config, tiny_support, seed=0)


@pytest.fixture
def tiny_checkpoint(tmp_path, tiny_model):
    path = tmp_path / "tiny.fomemo"
    save_checkpoint(str(path), tiny_model, header={"schema": 1, "step": 0})
    return str(path)


@pytest.fixture
def tiny_train_payload():
    """Training config dict for a two-epoch run of a few steps"""
    return {
        "schema": 1,
        "model": {
            "embed_dim": 16,
            "ff_hidden_dim": 32,
            "n_heads": 2,
            "n_layers": 1,
            "n_bins": 16,
            "max_features": 2,
            "max_objectives": 2,
            "max_sample_length": 16,
        },
        "train": {
            "batch_size": 4,
            "steps_per_epoch": 2,
            "epochs": 2,
            "warmup_epochs": 1,
            "peak_lr": 1e-3,
            "seed": 0,
            "eval_interval": 1,
            "heldout_tasks": 4,
            "support_samples": 2000,
            "prefetch": 0,
            "prior": {"limits": {"max_features": 2, "max_objectives": 2, "sample_length": 16}},
        },
    }


@pytest.fixture
def tiny_train_config(tiny_train_payload):
    return TrainRunConfig.model_validate(tiny_train_payload)


@pytest.fixture
def loopback_command(tmp_path):
    """
    Command of an external problem child answering y = (sum x, sum (1 - x))

    Sending {"x": [-1, ...]} makes the child print garbage; {"x": [-2, ...]}
    makes it exit.
    """
    script = tmp_path / "loopback.py"
    script.write_text(textwrap.dedent(
        """
        import json
        import sys

        for line in sys.stdin:
            x = json.loads(line)["x"]
            if x[0] == -1:
                print("not json", flush=True)
            elif x[0] == -2:
                sys.exit(3)
            else:
                print(json.dumps({"y": [sum(x), sum(1 - v for v in x)]}), flush=True)
        """
    ), encoding="utf-8")
    return f"{sys.executable} {script}"
