# app/collect.py - offline dataset collection
import logging

import numpy as np
import torch

from app.agent import seed_streams
from app.buffers import ReplayBuffer, Transition
from app.config import AgentConfig
from app.environments import make_env
from app.minecraft import Minecraft
from app.sac import SoftActorCritic

logger = logging.getLogger(__name__)

# tiles visited by the scripted crafting demonstration, in order
MINECRAFT_ROUTE = ("wood", "table", "wood", "table", "stone", "wood", "table", "iron")


def _episode_env(config: AgentConfig, rng: np.random.Generator, length: int):
    return make_env(config, int(rng.integers(2**31)), lifetime=length)


def collect_sac(config: AgentConfig, budget: int, seed: int) -> ReplayBuffer:
    """Episodic SAC on fresh environment instances; every executed transition is kept."""
    rng, generator = seed_streams(seed)
    length = config.loop.collect_episode_length
    env = _episode_env(config, rng, length)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        s = config.skills
        sac = SoftActorCritic(env.state_dim, env.action_dim, s.policy_hidden, s.learning_rate, s.gamma, s.tau)
    dataset = ReplayBuffer(max(budget, 1), env.state_dim, env.action_dim)
    warmup = max(config.loop.sac_warmup, s.batch_size)

    episode_return, episodes = 0.0, 0
    for step in range(budget):
        if env.t >= length:
            logger.info(f"Collection episode {episodes}: return {episode_return:.2f}")
            env, episode_return, episodes = _episode_env(config, rng, length), 0.0, episodes + 1
        state = env.state.copy()
        if len(dataset) < warmup:
            action = rng.uniform(-1.0, 1.0, env.action_dim)
        else:
            obs = torch.as_tensor(state, dtype=torch.float32).unsqueeze(0)
            action = sac.act(obs, generator)[0][0].numpy().astype(np.float64)
            action = np.clip(action + config.loop.collect_noise * rng.standard_normal(env.action_dim), -1.0, 1.0)
        result = env.step(action)
        dataset.add(Transition(state=state, action=action, reward=result.reward, next_state=result.state))
        episode_return += result.reward
        if len(dataset) >= warmup:
            batch = dataset.sample(s.batch_size, rng)
            sac.update(batch["states"], batch["actions"], batch["rewards"], batch["next_states"], generator)
    return dataset


def collect_minecraft(config: AgentConfig, budget: int, seed: int) -> ReplayBuffer:
    """Noisy scripted demonstrations walking the crafting route, restarted in fresh worlds."""
    rng = np.random.default_rng(seed)
    length = config.loop.collect_episode_length
    env: Minecraft = _episode_env(config, rng, length)
    dataset = ReplayBuffer(max(budget, 1), env.state_dim, env.action_dim)
    waypoint = 0

    for _ in range(budget):
        if env.t >= length or waypoint == len(MINECRAFT_ROUTE):
            env, waypoint = _episode_env(config, rng, length), 0
        state = env.state.copy()
        target = env.blocks[MINECRAFT_ROUTE[waypoint]]
        action = np.clip((target - state[:2]) / env.step_scale, -1.0, 1.0)
        action = np.clip(action + config.loop.collect_noise * rng.standard_normal(env.action_dim), -1.0, 1.0)
        result = env.step(action)
        dataset.add(Transition(state=state, action=action, reward=result.reward, next_state=result.state))
        if env.tile_at(result.state) == MINECRAFT_ROUTE[waypoint]:
            waypoint += 1
    return dataset


def collect_random(config: AgentConfig, budget: int, seed: int) -> ReplayBuffer:
    rng = np.random.default_rng(seed)
    length = config.loop.collect_episode_length
    env = _episode_env(config, rng, length)
    dataset = ReplayBuffer(max(budget, 1), env.state_dim, env.action_dim)
    for _ in range(budget):
        if env.t >= length:
            env = _episode_env(config, rng, length)
        state = env.state.copy()
        action = rng.uniform(-1.0, 1.0, env.action_dim)
        result = env.step(action)
        dataset.add(Transition(state=state, action=action, reward=result.reward, next_state=result.state))
    return dataset


def collect_dataset(config: AgentConfig, budget: int, seed: int) -> ReplayBuffer:
    """Exactly `budget` transitions from the configured environment."""
    environment = config.run.environment
    logger.info(f"Collecting {budget} transitions on {environment} (seed {seed})")
    if environment == "minecraft":
        return collect_minecraft(config, budget, seed)
    if environment == "point":
        return collect_random(config, budget, seed)
    return collect_sac(config, budget, seed)
