from typing import Any, Dict

import numpy as np
import pytest
import torch

from app.buffers import ReplayBuffer, Transition
from app.config import AgentConfig, validate_config
from app.database import reset_engine
from app.nn import gradient
from app.settings import get_settings

# Small networks and budgets; every section stays valid under the real schema.
TINY: Dict[str, Dict[str, Any]] = {
    "run": {"environment": "point", "online_steps": 12, "seeds": [0], "eval_steps": 5, "model_error_probes": 32},
    "model": {
        "ensemble_size": 2,
        "hidden_sizes": [16, 16],
        "batch_size": 16,
        "train_every": 10,
        "train_steps": 5,
        "pretrain_max_steps": 20,
        "eval_every": 10,
    },
    "skills": {
        "policy_hidden": [16, 16],
        "discriminator_hidden": [16, 16],
        "batch_size": 16,
        "rollouts": 16,
        "generated_buffer_size": 64,
        "prior_samples": 4,
        "discriminator_steps": 1,
        "policy_steps": 1,
        "practice_steps": 1,
    },
    "planner": {"population": 8, "horizon": 6, "repeat": 3, "iterations": 2, "particles": 2},
    "loop": {"replay_size": 1000, "sac_warmup": 16, "collect_episode_length": 50},
}


@pytest.fixture(autouse=True)
def isolated_registry(tmp_path, monkeypatch):
    monkeypatch.setenv("LISP_DATABASE_URL", f"sqlite:///{tmp_path / 'registry.db'}")
    monkeypatch.setenv("LISP_THREADS", "1")
    get_settings.cache_clear()
    reset_engine()
    yield
    reset_engine()
    get_settings.cache_clear()


@pytest.fixture
def make_config():
    def build(**overrides: Dict[str, Any]) -> AgentConfig:
        data = AgentConfig().model_dump()
        for section, values in TINY.items():
            data[section].update(values)
        for section, values in overrides.items():
            data[section].update(values)
        return validate_config(data)

    return build


def point_buffer(count: int, seed: int = 0, low: float = -1.0, high: float = 1.0, capacity: int = 0) -> ReplayBuffer:
    """Transitions of the linear point mass, s' = s + 0.1 a."""
    rng = np.random.default_rng(seed)
    buffer = ReplayBuffer(capacity or count, 2, 2)
    for _ in range(count):
        state = rng.uniform(low, high, 2)
        action = rng.uniform(-1.0, 1.0, 2)
        buffer.add(Transition(state=state, action=action, reward=0.0, next_state=state + 0.1 * action))
    return buffer


@pytest.fixture
def point_data():
    return point_buffer


def finite_difference_check(net, loss_fn, samples=20, h=1e-5, seed=0):
    """Compare `gradient` against central differences on random parameter entries."""
    grads = gradient(net, loss_fn)
    params = dict(net.named_parameters())
    rng = np.random.default_rng(seed)
    names = list(params)
    for _ in range(samples):
        name = names[rng.integers(len(names))]
        p = params[name]
        index = tuple(int(rng.integers(n)) for n in p.shape)
        with torch.no_grad():
            original = p[index].item()
            p[index] = original + h
            plus = loss_fn(net).item()
            p[index] = original - h
            minus = loss_fn(net).item()
            p[index] = original
        numeric = (plus - minus) / (2 * h)
        analytic = grads[name][index].item()
        assert abs(numeric - analytic) <= 1e-4 * max(abs(numeric), abs(analytic)) + 1e-8, (name, index)


@pytest.fixture
def check_gradient():
    return finite_difference_check
