# app/agent.py - LiSP and baseline agents, the reset-free online loop and offline pretraining
import logging
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel
from torch import Tensor, nn

from app.buffers import ReplayBuffer, Transition
from app.config import AgentConfig
from app.dynamics import EnsembleDynamics, disagreement, train_model, train_until_plateau
from app.environments import make_env
from app.errors import DatasetError, PreconditionError
from app.nn import load_checkpoint, restore, save_checkpoint
from app.planner import PlanDistribution, get_action, identity_act
from app.sac import SacLosses, SoftActorCritic
from app.schedule import LifelongEnv, StepRecord
from app.skills import PolicyDiagnostics, SkillBundle, update_policy

logger = logging.getLogger(__name__)


def seed_streams(seed: int) -> Tuple[np.random.Generator, torch.Generator]:
    """Independent numpy and torch random streams derived from one seed."""
    numpy_seed, torch_seed = np.random.SeedSequence(seed).spawn(2)
    generator = torch.Generator().manual_seed(int(torch_seed.generate_state(1, dtype=np.uint64)[0] >> 1))
    return np.random.default_rng(numpy_seed), generator


class Agent(ABC):
    """Owns the real replay buffer and the learned components of one algorithm."""

    def __init__(self, config: AgentConfig, state_dim: int, action_dim: int, seed: int = 0):
        self.config = config
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.rng, self.generator = seed_streams(seed)
        self.replay = ReplayBuffer(config.loop.replay_size, state_dim, action_dim, config.skill_dim)

    @abstractmethod
    def act(self, env: LifelongEnv) -> Tuple[np.ndarray, Dict[str, Any], Dict[str, float]]:
        """Action for the current state, deterministic metrics and wall-clock timings."""

    @abstractmethod
    def learn(self, t: int) -> Dict[str, Any]:
        """Gradient updates scheduled before acting at step t."""

    @abstractmethod
    def pretrain(self) -> None:
        """Offline training on the contents of the replay buffer."""

    @abstractmethod
    def entries(self) -> Dict[str, Union[nn.Module, Tensor]]:
        ...

    @property
    @abstractmethod
    def step_count(self) -> int:
        """Optimizer steps taken so far by every learned component."""

    def metric_columns(self) -> List[str]:
        return []

    def observe(self, state: np.ndarray, action: np.ndarray, reward: float, next_state: np.ndarray) -> None:
        self.replay.add(Transition(state=state, action=action, reward=reward, next_state=next_state))

    def save(self, path: Union[str, Path]) -> None:
        save_checkpoint(path, self.entries())

    def load(self, path: Union[str, Path]) -> None:
        records = load_checkpoint(path)
        for name, target in self.entries().items():
            if name not in records:
                raise DatasetError(f"Checkpoint {path} has no record {name}")
            restore(target, records[name])
        self.on_load()
        logger.info(f"Agent restored from {path}")

    def on_load(self) -> None:
        pass


class ModelBasedAgent(Agent):
    """Agent planning with the ensemble; retrains it on the real buffer every `train_every` steps."""

    def __init__(self, config: AgentConfig, state_dim: int, action_dim: int, seed: int = 0):
        super().__init__(config, state_dim, action_dim, seed)
        self.model = EnsembleDynamics.from_config(state_dim, action_dim, config.model)
        self.model_trained = False
        self.retrain_steps: List[int] = []
        self.plan = self.initial_plan()

    @abstractmethod
    def initial_plan(self) -> PlanDistribution:
        ...

    @abstractmethod
    def act_fn(self):
        ...

    def retrain_model(self, t: int) -> Optional[float]:
        if t % self.config.model.train_every != 0 or len(self.replay) == 0:
            return None
        m = self.config.model
        losses = train_model(self.model, self.replay, m.train_steps, self.rng, m.batch_size, m.learning_rate)
        self.model_trained = True
        self.retrain_steps.append(t)
        return losses[-1] if losses else None

    def learn(self, t: int) -> Dict[str, Any]:
        return {"model_nll": self.retrain_model(t)}

    def pretrain(self) -> None:
        train_until_plateau(self.model, self.replay, self.config.model, self.rng)
        self.model_trained = True

    def act(self, env: LifelongEnv) -> Tuple[np.ndarray, Dict[str, Any], Dict[str, float]]:
        action, self.plan, plan_info = get_action(
            env.state, self.model, self.act_fn(), self.plan, env.reward_fn(), self.config.planner, self.generator
        )
        with torch.no_grad():
            dis = disagreement(
                self.model,
                torch.as_tensor(env.state, dtype=torch.float32).unsqueeze(0),
                torch.as_tensor(action, dtype=torch.float32).unsqueeze(0),
            )
        info = {
            "best_return": plan_info.best_return,
            "weight_entropy": plan_info.weight_entropy,
            "disagreement": float(dis[0]),
        }
        return action, info, {"plan_seconds": plan_info.seconds}

    def metric_columns(self) -> List[str]:
        return ["best_return", "weight_entropy", "disagreement", "model_nll"]

    def entries(self) -> Dict[str, Union[nn.Module, Tensor]]:
        return self.model.entries()

    def on_load(self) -> None:
        self.model_trained = True

    @property
    def step_count(self) -> int:
        return self.model.optimizer.step_count if self.model.optimizer else 0


class LispAgent(ModelBasedAgent):
    def __init__(self, config: AgentConfig, state_dim: int, action_dim: int, seed: int = 0):
        self.bundle = SkillBundle.from_config(state_dim, action_dim, config)
        super().__init__(config, state_dim, action_dim, seed)

    def initial_plan(self) -> PlanDistribution:
        p = self.config.planner
        return PlanDistribution.initial(p.horizon, p.repeat, self.config.skill_dim, p.noise_std)

    def act_fn(self):
        return self.bundle.act_fn()

    def learn(self, t: int) -> Dict[str, Any]:
        info = super().learn(t)
        if not self.model_trained:
            return info
        diagnostics = None
        for _ in range(self.config.loop.policy_iterations_per_step):
            diagnostics = update_policy(self.bundle, self.replay, self.model, self.config, self.rng, self.generator)
        if diagnostics is not None:
            info.update(diagnostics.model_dump(exclude={"rollouts"}))
        return info

    def pretrain(self) -> None:
        super().pretrain()
        iterations = self.config.run.pretrain_iterations
        for i in range(iterations):
            diagnostics = update_policy(self.bundle, self.replay, self.model, self.config, self.rng, self.generator)
            if (i + 1) % 100 == 0 or i + 1 == iterations:
                logger.info(
                    f"Skill pretraining {i + 1}/{iterations}: intrinsic {diagnostics.intrinsic_mean}, "
                    f"penalized {diagnostics.penalized_fraction}"
                )

    def metric_columns(self) -> List[str]:
        return super().metric_columns() + [f for f in PolicyDiagnostics.model_fields if f != "rollouts"]

    def entries(self) -> Dict[str, Union[nn.Module, Tensor]]:
        return {**super().entries(), **self.bundle.entries()}

    @property
    def step_count(self) -> int:
        return super().step_count + self.bundle.step_count


class ActionMpcAgent(ModelBasedAgent):
    """Planning directly over action sequences with the same ensemble and MPPI machinery."""

    def initial_plan(self) -> PlanDistribution:
        p = self.config.planner
        return PlanDistribution.initial(p.horizon, p.repeat, self.action_dim, p.noise_std)

    def act_fn(self):
        return identity_act


class SacAgent(Agent):
    """Model-free baseline trained on real transitions only."""

    def __init__(self, config: AgentConfig, state_dim: int, action_dim: int, seed: int = 0):
        super().__init__(config, state_dim, action_dim, seed)
        s = config.skills
        self.sac = SoftActorCritic(state_dim, action_dim, s.policy_hidden, s.learning_rate, s.gamma, s.tau)

    def act(self, env: LifelongEnv) -> Tuple[np.ndarray, Dict[str, Any], Dict[str, float]]:
        state = torch.as_tensor(env.state, dtype=torch.float32).unsqueeze(0)
        action, _ = self.sac.act(state, self.generator)
        return action[0].numpy().astype(np.float64), {}, {}

    def sac_steps(self, count: int) -> Dict[str, Any]:
        losses = None
        for _ in range(count):
            batch = self.replay.sample(self.config.skills.batch_size, self.rng)
            losses = self.sac.update(
                batch["states"], batch["actions"], batch["rewards"], batch["next_states"], self.generator
            )
        return losses.model_dump() if losses else {}

    def learn(self, t: int) -> Dict[str, Any]:
        if len(self.replay) < max(self.config.loop.sac_warmup, 1):
            return {}
        return self.sac_steps(self.config.loop.sac_updates_per_step)

    def pretrain(self) -> None:
        self.sac_steps(self.config.run.pretrain_iterations)

    def metric_columns(self) -> List[str]:
        return list(SacLosses.model_fields)

    def entries(self) -> Dict[str, Union[nn.Module, Tensor]]:
        return self.sac.entries("sac")

    @property
    def step_count(self) -> int:
        return self.sac.step_count


def make_agent(config: AgentConfig, state_dim: int, action_dim: int, seed: int = 0) -> Agent:
    algorithm = config.run.algorithm
    # network initialization draws from the global torch stream; isolate it per seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if algorithm.startswith("lisp"):
            return LispAgent(config, state_dim, action_dim, seed)
        if algorithm.startswith("mpc-action"):
            return ActionMpcAgent(config, state_dim, action_dim, seed)
        return SacAgent(config, state_dim, action_dim, seed)


def offline_pretrain(agent: Agent, dataset: ReplayBuffer) -> Agent:
    """Load the dataset into the agent's buffer and train until the pretraining criteria are met."""
    if len(dataset) == 0:
        raise DatasetError("Offline dataset is empty")
    fraction = agent.config.run.dataset_fraction
    if fraction < 1.0:
        dataset = dataset.truncated(fraction)
    agent.replay.extend(dataset)
    logger.info(f"Pretraining {agent.config.run.algorithm} on {len(agent.replay)} transitions")
    agent.pretrain()
    return agent


@dataclass
class StepOutput:
    record: StepRecord
    metrics: Dict[str, Any]
    timing: Dict[str, float]


def lifelong_run(env: LifelongEnv, agent: Agent, steps: int) -> Iterator[StepOutput]:
    """
    The online loop. Never resets the environment; every step adds exactly one real
    transition to the agent's buffer.
    """
    config = agent.config
    window = config.env.performance_window
    states: deque = deque(maxlen=window)
    rewards: deque = deque(maxlen=window)
    frozen_steps = agent.step_count

    for t in range(steps):
        info: Dict[str, Any] = {}
        if config.loop.updates_enabled:
            info.update(agent.learn(t))
        action, act_info, timing = agent.act(env)
        state = env.state.copy()
        result = env.step(action)
        agent.observe(state, action, result.reward, result.state)

        states.append(result.state)
        rewards.append(result.reward)
        record = StepRecord(
            t=t,
            state=result.state,
            action=action,
            reward=result.reward,
            stuck=result.stuck,
            segment=env.segment_index,
            segment_changed=result.segment_changed,
        )
        if result.stuck and result.segment_changed:
            logger.warning(f"{env.name}: stuck at the segment boundary at t={t}")
        metrics = {
            "t": t,
            "reward": result.reward,
            "performance": env.performance(list(states), list(rewards)),
            "stuck": int(result.stuck),
            "segment": env.segment_index,
            **env.metrics(result.state),
            **act_info,
            **info,
        }
        yield StepOutput(record=record, metrics=metrics, timing={"t": t, **timing})

    if not config.loop.updates_enabled and agent.step_count != frozen_steps:
        raise PreconditionError(
            f"Frozen run took {agent.step_count - frozen_steps} optimizer steps"
        )


class TaskResult(BaseModel):
    target_velocity: float
    performance_mean: float
    performance_std: float
    disagreement_exceedance: float
    seeds: int


def eval_offline_multitask(
    checkpoint: Union[str, Path],
    config: AgentConfig,
    tasks: Sequence[float],
    seeds: Sequence[int],
    steps: Optional[int] = None,
) -> List[TaskResult]:
    """Run the planner from a checkpoint on each target-velocity task without gradient updates."""
    steps = steps or config.run.eval_steps
    config = config.update("loop", updates_enabled=False)
    results = []
    for task in tasks:
        scores, exceedances = [], []
        for seed in seeds:
            env = make_env(config, seed, lifetime=steps, target_velocity=task)
            agent = make_agent(config, env.state_dim, env.action_dim, seed)
            agent.load(checkpoint)
            last: Dict[str, Any] = {}
            exceeded = 0
            for output in lifelong_run(env, agent, steps):
                last = output.metrics
                exceeded += int(output.metrics.get("disagreement", 0.0) > config.disagreement_threshold)
            scores.append(last.get("performance", 0.0))
            exceedances.append(exceeded / steps)
        results.append(TaskResult(
            target_velocity=task,
            performance_mean=float(np.mean(scores)),
            performance_std=float(np.std(scores)),
            disagreement_exceedance=float(np.mean(exceedances)),
            seeds=len(seeds),
        ))
        logger.info(f"Task {task}: performance {results[-1].performance_mean:.3f} +/- {results[-1].performance_std:.3f}")
    return results
