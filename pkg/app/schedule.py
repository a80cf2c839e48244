# app/schedule.py - lifelong MDP schedule, shared environment contract and run logs
import csv
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, IO, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor

from app.errors import PreconditionError

logger = logging.getLogger(__name__)

RewardFn = Callable[[Tensor, Tensor, Tensor], Tensor]


class Segment(BaseModel):
    model_config = ConfigDict(frozen=True)

    reward: Dict[str, float] = Field(default_factory=dict)
    dynamics: Dict[str, float] = Field(default_factory=dict)
    duration: int = Field(gt=0)


class MdpSchedule(BaseModel):
    """Ordered concatenation of MDP segments (r_i, P_i, T_i)."""

    model_config = ConfigDict(frozen=True)

    segments: List[Segment]

    @classmethod
    def constant(cls, duration: int, reward: Optional[Dict[str, float]] = None) -> "MdpSchedule":
        return cls(segments=[Segment(reward=reward or {}, duration=duration)])

    @classmethod
    def target_velocities(cls, velocities: Sequence[float], duration: int, lifetime: int = 0) -> "MdpSchedule":
        """Cycle through target velocities, one segment of `duration` each, until lifetime is covered."""
        if not velocities:
            raise PreconditionError("Empty velocity schedule")
        count = max(len(velocities), -(-lifetime // duration))
        return cls(segments=[
            Segment(reward={"target_velocity": float(velocities[i % len(velocities)])}, duration=duration)
            for i in range(count)
        ])

    @classmethod
    def rearranging(cls, duration: int, lifetime: int) -> "MdpSchedule":
        count = max(1, -(-lifetime // duration))
        return cls(segments=[Segment(dynamics={"rearrange": 1.0}, duration=duration) for _ in range(count)])

    @property
    def total_duration(self) -> int:
        return sum(s.duration for s in self.segments)

    @property
    def boundaries(self) -> List[int]:
        return list(np.cumsum([s.duration for s in self.segments])[:-1].tolist())

    def check_lifetime(self, lifetime: int) -> None:
        if self.total_duration < lifetime:
            raise PreconditionError(f"Schedule covers {self.total_duration} steps, lifetime is {lifetime}")

    def segment_at(self, t: int) -> Tuple[int, Segment]:
        end = 0
        for i, segment in enumerate(self.segments):
            end += segment.duration
            if t < end:
                return i, segment
        return len(self.segments) - 1, self.segments[-1]


@dataclass
class StepResult:
    state: np.ndarray
    reward: float
    stuck: bool = False
    segment_changed: bool = False


class LifelongEnv(ABC):
    """Reset-free environment: after construction the only mutation is step()."""

    state_dim: int
    action_dim: int
    name: str

    def __init__(self, schedule: MdpSchedule, seed: int = 0):
        self.schedule = schedule
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.segment_index, self.segment = schedule.segment_at(0)
        self.state = self.initial_state()

    @abstractmethod
    def initial_state(self) -> np.ndarray:
        ...

    @abstractmethod
    def transition(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        """Ground-truth next state; pure in (state, action)."""

    @abstractmethod
    def reward(self, state: np.ndarray, action: np.ndarray, next_state: np.ndarray) -> float:
        ...

    @abstractmethod
    def reward_fn(self) -> RewardFn:
        """Batched torch reward of the active segment, r(s, a, s')."""

    def is_stuck(self, state: np.ndarray) -> bool:
        return False

    def on_segment_change(self) -> None:
        """Apply the dynamics change of the newly active segment."""

    def performance(self, states: Sequence[np.ndarray], rewards: Sequence[float]) -> float:
        """Task score of a window of steps; the mean reward unless overridden."""
        return float(np.mean(rewards)) if len(rewards) else 0.0

    def metrics(self, state: np.ndarray) -> Dict[str, float]:
        return {}

    def step(self, action: np.ndarray) -> StepResult:
        action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        next_state = self.transition(self.state, action)
        reward = self.reward(self.state, action, next_state)
        stuck = self.is_stuck(next_state)
        self.state = next_state
        self.t += 1
        index, segment = self.schedule.segment_at(self.t)
        changed = index != self.segment_index
        if changed:
            self.segment_index, self.segment = index, segment
            self.on_segment_change()
            logger.debug(f"{self.name}: segment {index} active at t={self.t}")
        return StepResult(state=self.state.copy(), reward=float(reward), stuck=stuck, segment_changed=changed)


# Run logs

@dataclass
class StepRecord:
    t: int
    state: np.ndarray
    action: np.ndarray
    reward: float
    stuck: bool
    segment: int
    segment_changed: bool


def run_log_columns(state_dim: int, action_dim: int) -> List[str]:
    return (
        ["t"]
        + [f"s{i}" for i in range(state_dim)]
        + [f"a{i}" for i in range(action_dim)]
        + ["reward", "stuck", "segment", "segment_changed"]
    )


class RunLogWriter:
    def __init__(self, stream: IO[str], state_dim: int, action_dim: int):
        self.writer = csv.writer(stream)
        self.writer.writerow(run_log_columns(state_dim, action_dim))

    def write(self, record: StepRecord) -> None:
        self.writer.writerow(
            [record.t]
            + [repr(float(v)) for v in record.state]
            + [repr(float(v)) for v in record.action]
            + [repr(float(record.reward)), int(record.stuck), record.segment, int(record.segment_changed)]
        )


def read_run_log(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def stuck_count(records: Iterable[Union[StepRecord, Dict[str, str]]]) -> int:
    """Number of segment boundaries at which the agent was stuck at the boundary step."""
    count = 0
    for record in records:
        if isinstance(record, dict):
            stuck, changed = int(record["stuck"]) == 1, int(record["segment_changed"]) == 1
        else:
            stuck, changed = record.stuck, record.segment_changed
        if stuck and changed:
            count += 1
    return count
