# app/locomotion.py - point-mass locomotion proxy with a sink region
import logging
from typing import Dict, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict
from torch import Tensor

from app.errors import PreconditionError
from app.schedule import LifelongEnv, RewardFn

logger = logging.getLogger(__name__)

DT = 0.05
GRAVITY = 9.8
THRUST_X = 5.0
THRUST_Z = 20.0
DRAG = 1.0
HEIGHT_SETPOINT = 1.3
DISABLE_HEIGHT = 0.3

HOPPER_SCHEDULE = (0.0, 1.0, -1.0, 2.0, -1.0)
ANT_SCHEDULE = (1.0, -1.0, 1.0)


def locomotion_reward(state: np.ndarray, target_velocity: float) -> float:
    """-5 (z - z*)^2 - |x_vel - target| + |target| on state (x, z, x_vel, z_vel)."""
    z, x_vel = float(state[1]), float(state[2])
    return -5.0 * (z - HEIGHT_SETPOINT) ** 2 - abs(x_vel - target_velocity) + abs(target_velocity)


class PerformanceSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    target_velocity: float
    height_setpoint: float = HEIGHT_SETPOINT
    height_weight: float = 0.8
    velocity_weight: float = 0.2
    height_normalizer: float = HEIGHT_SETPOINT ** 2
    velocity_normalizer: float = 4.0


def performance(spec: PerformanceSpec, trajectory: Sequence[np.ndarray]) -> float:
    """Normalized score of a window of states; 1 for the ideal averages."""
    states = np.asarray(trajectory, dtype=np.float64)
    if states.size == 0:
        raise PreconditionError("Performance of an empty trajectory")
    states = states.reshape(len(states), -1)
    z_avg = float(np.mean(states[:, 1]))
    x_vel = float(np.mean(states[:, 2]))
    return (
        1.0
        - spec.height_weight / spec.height_normalizer * (z_avg - spec.height_setpoint) ** 2
        - spec.velocity_weight / spec.velocity_normalizer * abs(x_vel - spec.target_velocity)
    )


class Locomotion(LifelongEnv):
    """
    State (x, z, x_vel, z_vel), action (horizontal thrust, vertical thrust).
    Below DISABLE_HEIGHT both thrusters lose authority for good and the body settles on the floor.
    """

    name = "locomotion"
    state_dim = 4
    action_dim = 2

    def initial_state(self) -> np.ndarray:
        return np.array([0.0, HEIGHT_SETPOINT, 0.0, 0.0])

    @property
    def target_velocity(self) -> float:
        return float(self.segment.reward.get("target_velocity", 0.0))

    def is_sunk(self, state: np.ndarray) -> bool:
        return bool(state[1] < DISABLE_HEIGHT)

    def transition(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        x, z, x_vel, z_vel = (float(v) for v in state)
        ax, az = np.clip(action, -1.0, 1.0)
        sunk = self.is_sunk(state)
        authority = 0.0 if sunk else 1.0
        x_vel = x_vel + DT * (THRUST_X * ax * authority - DRAG * x_vel)
        z_vel = z_vel + DT * (THRUST_Z * az * authority - GRAVITY - DRAG * z_vel)
        if sunk:
            z_vel = min(z_vel, 0.0)
        x = x + DT * x_vel
        z = z + DT * z_vel
        if z <= 0.0:
            z, z_vel = 0.0, 0.0
        return np.array([x, z, x_vel, z_vel])

    def reward(self, state: np.ndarray, action: np.ndarray, next_state: np.ndarray) -> float:
        return locomotion_reward(next_state, self.target_velocity)

    def reward_fn(self) -> RewardFn:
        target = self.target_velocity

        def reward(states: Tensor, actions: Tensor, next_states: Tensor) -> Tensor:
            z, x_vel = next_states[..., 1], next_states[..., 2]
            return -5.0 * (z - HEIGHT_SETPOINT) ** 2 - torch.abs(x_vel - target) + abs(target)

        return reward

    def on_segment_change(self) -> None:
        logger.info(f"Locomotion target velocity now {self.target_velocity} at t={self.t}")

    def is_stuck(self, state: np.ndarray) -> bool:
        return self.is_sunk(state)

    def performance(self, states: Sequence[np.ndarray], rewards: Sequence[float]) -> float:
        return performance(PerformanceSpec(target_velocity=self.target_velocity), states)

    def metrics(self, state: np.ndarray) -> Dict[str, float]:
        return {"height": float(state[1]), "x_velocity": float(state[2])}
