import math

import numpy as np
import pytest
import torch

from app.agent import (
    ActionMpcAgent,
    LispAgent,
    SacAgent,
    eval_offline_multitask,
    lifelong_run,
    make_agent,
    offline_pretrain,
    seed_streams,
)
from app.buffers import ReplayBuffer
from app.environments import make_env
from app.errors import DatasetError
from app.nn import parameter_digest, save_checkpoint


def digest(agent) -> str:
    modules = [m for m in agent.entries().values() if isinstance(m, torch.nn.Module)]
    return parameter_digest(*modules)


def test_seed_streams_are_reproducible_and_distinct():
    rng_a, gen_a = seed_streams(3)
    rng_b, gen_b = seed_streams(3)
    assert rng_a.integers(1 << 30) == rng_b.integers(1 << 30)
    assert torch.equal(torch.rand(4, generator=gen_a), torch.rand(4, generator=gen_b))
    assert seed_streams(3)[0].integers(1 << 30) != seed_streams(4)[0].integers(1 << 30)


@pytest.mark.parametrize(
    "algorithm, cls",
    [("lisp", LispAgent), ("lisp-frozen", LispAgent), ("mpc-action-long", ActionMpcAgent), ("sac", SacAgent)],
)
def test_make_agent_picks_the_algorithm(make_config, algorithm, cls):
    agent = make_agent(make_config(run={"algorithm": algorithm}), 2, 2, seed=0)
    assert isinstance(agent, cls)
    assert agent.step_count == 0


def test_network_init_depends_only_on_seed(make_config):
    config = make_config()
    first = make_agent(config, 2, 2, seed=5)
    torch.rand(100)
    second = make_agent(config, 2, 2, seed=5)
    assert digest(first) == digest(second)
    assert digest(make_agent(config, 2, 2, seed=6)) != digest(first)


def test_lifelong_run_adds_one_transition_per_step(make_config):
    config = make_config()
    env = make_env(config, seed=0)
    agent = make_agent(config, env.state_dim, env.action_dim, seed=0)
    outputs = list(lifelong_run(env, agent, 12))

    assert len(agent.replay) == 12
    assert env.t == 12
    assert agent.retrain_steps == [10]
    assert agent.bundle.policy.step_count > 0
    assert [o.record.t for o in outputs] == list(range(12))
    last = outputs[-1].metrics
    for key in ("reward", "performance", "stuck", "segment", "disagreement", "best_return", "intrinsic_mean"):
        assert key in last
    assert "plan_seconds" in outputs[-1].timing
    assert "plan_seconds" not in last


def test_frozen_run_takes_no_optimizer_steps(make_config):
    config = make_config(loop={"updates_enabled": False})
    env = make_env(config, seed=0)
    agent = make_agent(config, env.state_dim, env.action_dim, seed=0)
    before = digest(agent)
    for _ in lifelong_run(env, agent, 8):
        pass
    assert agent.step_count == 0
    assert digest(agent) == before
    assert len(agent.replay) == 8


def test_action_planner_acts_in_action_space(make_config):
    config = make_config(run={"algorithm": "mpc-action-long"})
    env = make_env(config, seed=0)
    agent = make_agent(config, env.state_dim, env.action_dim, seed=0)
    for output in lifelong_run(env, agent, 3):
        assert np.all(np.abs(output.record.action) <= 1.0)
    assert agent.plan.mean.shape == (2, env.action_dim)


def test_sac_waits_for_warmup(make_config):
    config = make_config(run={"algorithm": "sac"})
    env = make_env(config, seed=0)
    agent = make_agent(config, env.state_dim, env.action_dim, seed=0)
    for _ in lifelong_run(env, agent, 12):
        pass
    assert agent.step_count == 0

    config = make_config(run={"algorithm": "sac"}, loop={"sac_warmup": 0})
    env = make_env(config, seed=0)
    agent = make_agent(config, env.state_dim, env.action_dim, seed=0)
    for _ in lifelong_run(env, agent, 12):
        pass
    # first step has no data; three optimizers per update afterwards
    assert agent.step_count == 3 * 11


def test_offline_pretrain_rejects_empty_dataset(make_config):
    agent = make_agent(make_config(), 2, 2)
    with pytest.raises(DatasetError):
        offline_pretrain(agent, ReplayBuffer(10, 2, 2))


def test_offline_pretrain_uses_dataset_fraction(make_config, point_data):
    config = make_config(run={"dataset_fraction": 0.5, "pretrain_iterations": 2})
    agent = offline_pretrain(make_agent(config, 2, 2), point_data(40))
    assert len(agent.replay) == 20
    assert agent.model_trained
    assert agent.model.optimizer.step_count == config.model.pretrain_max_steps
    assert agent.bundle.policy.step_count > 0


def test_save_load_restores_every_network(make_config, point_data, tmp_path):
    config = make_config(run={"pretrain_iterations": 1})
    trained = offline_pretrain(make_agent(config, 2, 2, seed=0), point_data(40))
    path = tmp_path / "agent.lisp"
    trained.save(path)

    fresh = make_agent(config, 2, 2, seed=1)
    assert digest(fresh) != digest(trained)
    fresh.load(path)
    assert digest(fresh) == digest(trained)
    assert fresh.model_trained


def test_load_reports_missing_records(make_config, tmp_path):
    path = tmp_path / "partial.lisp"
    agent = make_agent(make_config(), 2, 2)
    save_checkpoint(path, {"discriminator": agent.bundle.discriminator})
    with pytest.raises(DatasetError, match="no record"):
        agent.load(path)


def test_eval_offline_multitask(make_config, tmp_path):
    config = make_config(run={"environment": "locomotion"})
    env = make_env(config, seed=0)
    path = tmp_path / "agent.lisp"
    make_agent(config, env.state_dim, env.action_dim, seed=0).save(path)

    results = eval_offline_multitask(path, config, tasks=[1.0, -0.5], seeds=[0, 1], steps=4)
    assert [r.target_velocity for r in results] == [1.0, -0.5]
    for result in results:
        assert result.seeds == 2
        assert math.isfinite(result.performance_mean)
        assert 0.0 <= result.disagreement_exceedance <= 1.0
