# app/buffers.py - real (D) and model-generated (D-hat) replay buffers
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch
from torch import Tensor

from app.errors import DatasetError, PreconditionError

logger = logging.getLogger(__name__)

BUFFER_MAGIC = b"LRBF"
BUFFER_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    skill: Optional[np.ndarray] = None


class ReplayBuffer:
    """FIFO ring of real transitions (s, a, z, r, s') with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, skill_dim: int = 0):
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.skill_dim = skill_dim

        self.states = np.zeros((capacity, state_dim), dtype=np.float32)
        self.actions = np.zeros((capacity, action_dim), dtype=np.float32)
        self.skills = np.zeros((capacity, skill_dim), dtype=np.float32)
        self.rewards = np.zeros((capacity,), dtype=np.float32)
        self.next_states = np.zeros((capacity, state_dim), dtype=np.float32)

        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, transition: Transition) -> None:
        idx = self.pos % self.capacity
        self.states[idx] = transition.state
        self.actions[idx] = transition.action
        self.skills[idx] = 0.0 if transition.skill is None else transition.skill
        self.rewards[idx] = transition.reward
        self.next_states[idx] = transition.next_state
        self.pos += 1
        self.size = min(self.size + 1, self.capacity)

    def extend(self, other: "ReplayBuffer") -> None:
        """Append every transition of `other` in its insertion order; skills are dropped on a width mismatch."""
        if (other.state_dim, other.action_dim) != (self.state_dim, self.action_dim):
            raise DatasetError(
                f"Dataset dims (state {other.state_dim}, action {other.action_dim}) do not match "
                f"(state {self.state_dim}, action {self.action_dim})"
            )
        keep_skills = other.skill_dim == self.skill_dim
        for i in other._chronological():
            transition = other._transition(i)
            if not keep_skills:
                transition.skill = None
            self.add(transition)

    def _chronological(self) -> np.ndarray:
        if self.size < self.capacity:
            return np.arange(self.size)
        start = self.pos % self.capacity
        return (np.arange(self.size) + start) % self.capacity

    def _check_nonempty(self) -> None:
        if self.size == 0:
            raise PreconditionError("Cannot sample from an empty replay buffer")

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        self._check_nonempty()
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Dict[str, Tensor]:
        idx = self.sample_indices(batch_size, rng)
        return {
            "states": torch.from_numpy(self.states[idx]),
            "actions": torch.from_numpy(self.actions[idx]),
            "skills": torch.from_numpy(self.skills[idx]),
            "rewards": torch.from_numpy(self.rewards[idx]),
            "next_states": torch.from_numpy(self.next_states[idx]),
        }

    def sample_states(self, count: int, rng: np.random.Generator) -> Tensor:
        return torch.from_numpy(self.states[self.sample_indices(count, rng)])

    def all(self) -> Dict[str, Tensor]:
        idx = self._chronological()
        return {
            "states": torch.from_numpy(self.states[idx]),
            "actions": torch.from_numpy(self.actions[idx]),
            "skills": torch.from_numpy(self.skills[idx]),
            "rewards": torch.from_numpy(self.rewards[idx]),
            "next_states": torch.from_numpy(self.next_states[idx]),
        }

    def truncated(self, fraction: float) -> "ReplayBuffer":
        """Copy holding only the oldest `fraction` of the transitions."""
        keep = int(round(self.size * fraction))
        if fraction < 1.0:
            logger.info(f"Truncating dataset to first {keep} of {self.size} transitions")
        buffer = ReplayBuffer(max(self.capacity, 1), self.state_dim, self.action_dim, self.skill_dim)
        for i in self._chronological()[:keep]:
            buffer.add(self._transition(i))
        return buffer

    def _transition(self, i: int) -> Transition:
        return Transition(
            state=self.states[i], action=self.actions[i], reward=float(self.rewards[i]),
            next_state=self.next_states[i], skill=self.skills[i],
        )

    @property
    def row_width(self) -> int:
        return 2 * self.state_dim + self.action_dim + self.skill_dim + 1

    def save(self, path: Union[str, Path]) -> None:
        idx = self._chronological()
        rows = np.concatenate(
            [
                self.states[idx],
                self.actions[idx],
                self.skills[idx],
                self.rewards[idx, None],
                self.next_states[idx],
            ],
            axis=1,
        ).astype("<f4")
        header = _HEADER.pack(BUFFER_MAGIC, BUFFER_VERSION, self.state_dim, self.action_dim, self.skill_dim, self.size)
        Path(path).write_bytes(header + rows.tobytes())
        logger.info(f"Replay buffer written: {path} ({self.size} transitions)")

    @classmethod
    def load(cls, path: Union[str, Path], capacity: Optional[int] = None) -> "ReplayBuffer":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise DatasetError(f"Truncated header in {path}", offset=len(data))
        magic, version, state_dim, action_dim, skill_dim, count = _HEADER.unpack_from(data)
        if magic != BUFFER_MAGIC:
            raise DatasetError(f"Bad replay buffer magic {magic!r} in {path}", offset=0)
        if version != BUFFER_VERSION:
            raise DatasetError(f"Unsupported replay buffer version {version} in {path}", offset=4)

        buffer = cls(max(capacity or count, 1), state_dim, action_dim, skill_dim)
        row_bytes = 4 * buffer.row_width
        expected = _HEADER.size + count * row_bytes
        if len(data) < expected:
            complete = (len(data) - _HEADER.size) // row_bytes
            raise DatasetError(
                f"Replay buffer {path} declares {count} transitions but holds {complete}",
                offset=_HEADER.size + complete * row_bytes,
            )
        if len(data) > expected:
            raise DatasetError(f"Trailing bytes in replay buffer {path}", offset=expected)

        rows = np.frombuffer(data, dtype="<f4", count=count * buffer.row_width, offset=_HEADER.size)
        rows = rows.reshape(count, buffer.row_width).astype(np.float32)
        bad = np.flatnonzero(~np.isfinite(rows.ravel()))
        if bad.size:
            raise DatasetError(f"Non-finite value in replay buffer {path}", offset=_HEADER.size + 4 * int(bad[0]))

        s, a, z = state_dim, action_dim, skill_dim
        for row in rows:
            buffer.add(Transition(
                state=row[:s],
                action=row[s:s + a],
                skill=row[s + a:s + a + z],
                reward=float(row[s + a + z]),
                next_state=row[s + a + z + 1:],
            ))
        logger.info(f"Replay buffer loaded: {path} ({count} transitions)")
        return buffer


class GeneratedBuffer:
    """FIFO ring of model-generated transitions (s, z, a, s'). Rewards are computed when sampled."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, skill_dim: int):
        self.capacity = capacity
        self.states = torch.zeros(capacity, state_dim)
        self.skills = torch.zeros(capacity, skill_dim)
        self.actions = torch.zeros(capacity, action_dim)
        self.next_states = torch.zeros(capacity, state_dim)
        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add_batch(self, states: Tensor, skills: Tensor, actions: Tensor, next_states: Tensor) -> None:
        for i in range(states.shape[0]):
            idx = self.pos % self.capacity
            self.states[idx] = states[i]
            self.skills[idx] = skills[i]
            self.actions[idx] = actions[i]
            self.next_states[idx] = next_states[i]
            self.pos += 1
        self.size = min(self.size + states.shape[0], self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Dict[str, Tensor]:
        if self.size == 0:
            raise PreconditionError("Cannot sample from an empty generated buffer")
        idx = torch.from_numpy(rng.integers(0, self.size, size=batch_size))
        return {
            "states": self.states[idx],
            "skills": self.skills[idx],
            "actions": self.actions[idx],
            "next_states": self.next_states[idx],
        }
