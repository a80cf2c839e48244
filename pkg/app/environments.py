# app/environments.py - environment construction from config
import logging
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from app.config import AgentConfig
from app.locomotion import ANT_SCHEDULE, HOPPER_SCHEDULE, Locomotion
from app.minecraft import Minecraft
from app.schedule import LifelongEnv, MdpSchedule, RewardFn
from app.volcano import Volcano

logger = logging.getLogger(__name__)

DEFAULT_SEGMENT_LENGTH = {"locomotion": 1000, "volcano": 100}
NAMED_SCHEDULES = {"hopper": HOPPER_SCHEDULE, "ant": ANT_SCHEDULE}

POINT_STEP = 0.1
POINT_BOUND = 10.0


class PointMass(LifelongEnv):
    """Linear 2D point: s' = s + 0.1 a (clamped far away); reward is -distance to the segment goal."""

    name = "point"
    state_dim = 2
    action_dim = 2

    def initial_state(self) -> np.ndarray:
        return np.zeros(2)

    @property
    def goal(self) -> np.ndarray:
        return np.array([self.segment.reward.get("goal_x", 0.0), self.segment.reward.get("goal_y", 0.0)])

    def transition(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        return np.clip(state + POINT_STEP * np.clip(action, -1.0, 1.0), -POINT_BOUND, POINT_BOUND)

    def reward(self, state: np.ndarray, action: np.ndarray, next_state: np.ndarray) -> float:
        return -float(np.linalg.norm(next_state - self.goal))

    def reward_fn(self) -> RewardFn:
        goal = torch.as_tensor(self.goal, dtype=torch.float32)

        def reward(states: Tensor, actions: Tensor, next_states: Tensor) -> Tensor:
            return -torch.linalg.vector_norm(next_states - goal.to(next_states.dtype), dim=-1)

        return reward


def build_schedule(config: AgentConfig, lifetime: int, target_velocity: Optional[float] = None) -> MdpSchedule:
    env = config.run.environment
    lifetime = max(lifetime, 1)
    length = config.env.segment_length or DEFAULT_SEGMENT_LENGTH.get(env, lifetime)
    if env == "locomotion":
        velocities = NAMED_SCHEDULES[config.env.named_schedule] if config.env.named_schedule else config.env.schedule
        if target_velocity is not None:
            velocities = [target_velocity]
        return MdpSchedule.target_velocities(velocities, length, lifetime)
    if env == "volcano":
        return MdpSchedule.rearranging(length, lifetime)
    return MdpSchedule.constant(max(length, lifetime))


def make_env(
    config: AgentConfig, seed: int, lifetime: Optional[int] = None, target_velocity: Optional[float] = None
) -> LifelongEnv:
    lifetime = config.run.online_steps if lifetime is None else lifetime
    schedule = build_schedule(config, lifetime, target_velocity)
    schedule.check_lifetime(lifetime)
    env = config.run.environment
    if env == "locomotion":
        return Locomotion(schedule, seed)
    if env == "volcano":
        return Volcano(
            schedule,
            seed,
            size=config.env.arena_size,
            step_scale=config.env.step_scale,
            pitfalls=config.env.pitfalls,
            lava_penalty=config.env.lava_penalty,
        )
    if env == "minecraft":
        return Minecraft(schedule, seed, size=config.env.arena_size, step_scale=config.env.step_scale)
    return PointMass(schedule, seed)
