# app/volcano.py - continuous volcano arena with lava and trapping pitfalls
import logging
from typing import List, Set, Tuple

import numpy as np
import torch
from torch import Tensor

from app.schedule import LifelongEnv, MdpSchedule, RewardFn

logger = logging.getLogger(__name__)

# Fixed lava tiles (x, y) of the 8x8 layout; scaled layouts keep the same pattern.
LAVA_TILES_8 = {(3, 1), (4, 1), (3, 2), (4, 2), (3, 5), (4, 5), (3, 6), (4, 6)}


def lava_tiles(size: int) -> Set[Tuple[int, int]]:
    if size == 8:
        return set(LAVA_TILES_8)
    return {(x * size // 8, y * size // 8) for x, y in LAVA_TILES_8}


class Volcano(LifelongEnv):
    """
    State: agent (x, y), one (x, y) per pitfall, goal (x, y).
    An agent whose tile holds a pitfall cannot move until the layout rearranges.
    """

    name = "volcano"

    def __init__(
        self,
        schedule: MdpSchedule,
        seed: int = 0,
        size: int = 8,
        step_scale: float = 0.5,
        pitfalls: int = 1,
        lava_penalty: float = 1.0,
    ):
        self.size = size
        self.step_scale = step_scale
        self.pitfalls = pitfalls
        self.lava_penalty = lava_penalty
        self.lava = lava_tiles(size)
        self.free_tiles: List[Tuple[int, int]] = [
            (x, y) for x in range(size) for y in range(size) if (x, y) not in self.lava
        ]
        grid = torch.zeros(size, size, dtype=torch.bool)
        for x, y in self.lava:
            grid[x, y] = True
        self._lava_grid = grid
        self.state_dim = 2 + 2 * pitfalls + 2
        self.action_dim = 2
        super().__init__(schedule, seed)

    def tile(self, position: np.ndarray) -> Tuple[int, int]:
        ix, iy = np.clip(np.floor(position[:2]).astype(int), 0, self.size - 1)
        return int(ix), int(iy)

    def _sample_layout(self, agent: np.ndarray) -> np.ndarray:
        agent_tile = self.tile(agent)
        candidates = [t for t in self.free_tiles if t != agent_tile]
        picks = self.rng.choice(len(candidates), size=self.pitfalls + 1, replace=False)
        centers = [np.array(candidates[i], dtype=np.float64) + 0.5 for i in picks]
        return np.concatenate(centers)

    def initial_state(self) -> np.ndarray:
        agent = np.array([0.5, 0.5])
        return np.concatenate([agent, self._sample_layout(agent)])

    def pitfall_tiles(self, state: np.ndarray) -> List[Tuple[int, int]]:
        return [self.tile(state[2 + 2 * i: 4 + 2 * i]) for i in range(self.pitfalls)]

    def is_stuck(self, state: np.ndarray) -> bool:
        return self.tile(state[:2]) in self.pitfall_tiles(state)

    def in_lava(self, position: np.ndarray) -> bool:
        return self.tile(position) in self.lava

    def transition(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        next_state = np.array(state, dtype=np.float64)
        if self.is_stuck(state):
            return next_state
        step = self.step_scale * np.clip(action, -1.0, 1.0)
        next_state[:2] = np.clip(state[:2] + step, 0.0, float(self.size))
        return next_state

    def reward(self, state: np.ndarray, action: np.ndarray, next_state: np.ndarray) -> float:
        distance = float(np.linalg.norm(next_state[:2] - next_state[-2:]))
        return -distance - self.lava_penalty * float(self.in_lava(next_state[:2]))

    def reward_fn(self) -> RewardFn:
        grid, size, penalty = self._lava_grid, self.size, self.lava_penalty

        def reward(states: Tensor, actions: Tensor, next_states: Tensor) -> Tensor:
            position, goal = next_states[..., :2], next_states[..., -2:]
            distance = torch.linalg.vector_norm(position - goal, dim=-1)
            index = torch.floor(position).clamp(0, size - 1).long()
            lava = grid[index[..., 0], index[..., 1]].to(next_states.dtype)
            return -distance - penalty * lava

        return reward

    def on_segment_change(self) -> None:
        if self.segment.dynamics.get("rearrange", 0.0):
            was_stuck = self.is_stuck(self.state)
            self.state = np.concatenate([self.state[:2], self._sample_layout(self.state[:2])])
            logger.debug(f"Volcano rearranged at t={self.t} (agent was stuck: {was_stuck})")
