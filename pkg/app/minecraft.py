# app/minecraft.py - 2D crafting world with a six-tier item hierarchy
import logging
from typing import Dict, Optional, Tuple

import numpy as np
import torch
from torch import Tensor

from app.schedule import LifelongEnv, MdpSchedule, RewardFn

logger = logging.getLogger(__name__)

ITEMS = ("wood", "stick", "wooden_pickaxe", "stone", "stone_pickaxe", "iron")
TIER = {item: k + 1 for k, item in enumerate(ITEMS)}
ITEM_REWARD = np.array([2.0 ** (TIER[item] - 1) for item in ITEMS])

TILES = ("table", "wood", "stone", "iron")

# Recipes at the crafting table, highest tier first: product -> consumed inputs.
RECIPES = (
    ("stone_pickaxe", ("stone", "stick")),
    ("wooden_pickaxe", ("wood", "stick")),
    ("stick", ("wood",)),
)


def _index(item: str) -> int:
    return ITEMS.index(item)


def minecraft_resolve(inventory: np.ndarray, tile: str) -> Tuple[np.ndarray, float]:
    """
    Interaction of an agent holding `inventory` (0/1 per item) with a tile.
    Returns the inventory delta and the reward for every item obtained, including
    intermediates crafted and consumed within the same visit.
    Unmet prerequisites are a no-op with zero reward.
    """
    inv = np.asarray(inventory, dtype=np.float64).copy()
    before = inv.copy()
    has = lambda item: inv[_index(item)] > 0.5
    reward = 0.0

    def obtain(item: str, consumed: Tuple[str, ...] = ()) -> None:
        nonlocal reward
        for i in consumed:
            inv[_index(i)] = 0.0
        inv[_index(item)] = 1.0
        reward += float(ITEM_REWARD[_index(item)])

    if tile == "wood":
        if not has("wood"):
            obtain("wood")
    elif tile == "stone":
        if has("wooden_pickaxe") and not has("stone"):
            obtain("stone", ("wooden_pickaxe",))
    elif tile == "iron":
        if has("stone_pickaxe") and not has("iron"):
            obtain("iron", ("stone_pickaxe",))
    elif tile == "table":
        crafted = True
        while crafted:
            crafted = False
            for product, inputs in RECIPES:
                if not has(product) and all(has(i) for i in inputs):
                    obtain(product, inputs)
                    crafted = True
                    break
    else:
        raise ValueError(f"Unknown tile {tile}")

    return inv - before, reward


def best_tier(inventories: np.ndarray) -> int:
    """Highest item tier held in any of the given inventory rows (0 if none)."""
    held = np.asarray(inventories).reshape(-1, len(ITEMS)) > 0.5
    tiers = [TIER[item] for k, item in enumerate(ITEMS) if held[:, k].any()]
    return max(tiers, default=0)


class Minecraft(LifelongEnv):
    """
    State: agent (x, y), the (x, y) of table, wood, stone and iron tiles,
    then the 0/1 inventory in ITEMS order.
    """

    name = "minecraft"
    action_dim = 2

    def __init__(self, schedule: MdpSchedule, seed: int = 0, size: int = 8, step_scale: float = 0.5):
        self.size = size
        self.step_scale = step_scale
        far = size - 0.5
        self.blocks: Dict[str, np.ndarray] = {
            "table": np.array([far, 0.5]),
            "wood": np.array([0.5, 0.5]),
            "stone": np.array([0.5, far]),
            "iron": np.array([far, far]),
        }
        self.state_dim = 2 + 2 * len(TILES) + len(ITEMS)
        super().__init__(schedule, seed)

    @property
    def inventory_slice(self) -> slice:
        start = 2 + 2 * len(TILES)
        return slice(start, start + len(ITEMS))

    def initial_state(self) -> np.ndarray:
        agent = np.array([self.size / 2.0, self.size / 2.0])
        blocks = np.concatenate([self.blocks[t] for t in TILES])
        return np.concatenate([agent, blocks, np.zeros(len(ITEMS))])

    def tile_at(self, state: np.ndarray) -> Optional[str]:
        agent = np.clip(np.floor(state[:2]), 0, self.size - 1)
        for k, tile in enumerate(TILES):
            block = np.clip(np.floor(state[2 + 2 * k: 4 + 2 * k]), 0, self.size - 1)
            if np.array_equal(agent, block):
                return tile
        return None

    def transition(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        next_state = np.array(state, dtype=np.float64)
        next_state[:2] = np.clip(state[:2] + self.step_scale * np.clip(action, -1.0, 1.0), 0.0, float(self.size))
        tile = self.tile_at(next_state)
        if tile is not None:
            delta, _ = minecraft_resolve(next_state[self.inventory_slice], tile)
            next_state[self.inventory_slice] += delta
        return next_state

    def reward(self, state: np.ndarray, action: np.ndarray, next_state: np.ndarray) -> float:
        tile = self.tile_at(next_state)
        if tile is None:
            return 0.0
        return minecraft_resolve(state[self.inventory_slice], tile)[1]

    def metrics(self, state: np.ndarray) -> Dict[str, float]:
        return {"tier": float(best_tier(state[self.inventory_slice]))}

    def reward_fn(self) -> RewardFn:
        weights = torch.as_tensor(ITEM_REWARD, dtype=torch.float32)
        inv = self.inventory_slice
        wood, stone_pickaxe = _index("wood"), _index("stone_pickaxe")
        stick_reward = float(ITEM_REWARD[_index("stick")])

        def reward(states: Tensor, actions: Tensor, next_states: Tensor) -> Tensor:
            change = next_states[..., inv] - states[..., inv]
            gained = (change.clamp(min=0.0) * weights.to(states.dtype)).sum(-1)
            # a stick crafted for a stone pickaxe in the same visit only shows up as lost wood
            hidden_stick = (change[..., stone_pickaxe] > 0.5) & (change[..., wood] < -0.5)
            return gained + stick_reward * hidden_stick.to(states.dtype)

        return reward
