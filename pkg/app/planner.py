# app/planner.py - MPPI over skill sequences with warm-started plans
import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel
from torch import Tensor

from app.config import PlannerSection
from app.dynamics import ActFn, DynamicsModel, trajectory_sample_returns
from app.errors import PreconditionError
from app.schedule import RewardFn

logger = logging.getLogger(__name__)


@dataclass
class PlanDistribution:
    """Mean and std per decision slot, shape [horizon / repeat, dim]. `phase` counts steps into slot 0."""

    mean: Tensor
    std: Tensor
    repeat: int = 1
    phase: int = 0
    iteration: int = 0

    @classmethod
    def initial(cls, horizon: int, repeat: int, dim: int, noise_std: float = 1.0) -> "PlanDistribution":
        if horizon % repeat != 0:
            raise PreconditionError(f"horizon {horizon} is not divisible by repeat {repeat}")
        slots = horizon // repeat
        return cls(torch.zeros(slots, dim), torch.full((slots, dim), noise_std), repeat)

    @property
    def slots(self) -> int:
        return self.mean.shape[0]

    @property
    def horizon(self) -> int:
        return self.slots * self.repeat

    def slot_index(self) -> Tensor:
        """Decision slot used at each of the horizon's timesteps."""
        steps = torch.arange(self.horizon)
        return ((steps + self.phase) // self.repeat).clamp(max=self.slots - 1)

    def first_skill(self) -> Tensor:
        return self.mean[0]


class PlanDiagnostics(BaseModel):
    best_return: Optional[float] = None
    weight_entropy: Optional[float] = None
    seconds: float = 0.0


def sample_sequences(
    plan: PlanDistribution, population: int, generator: Optional[torch.Generator] = None
) -> Tuple[Tensor, Tensor]:
    """Candidate decisions [S, slots, dim] clamped to [-1, 1] and their per-timestep expansion [S, H, dim]."""
    noise = torch.randn((population, *plan.mean.shape), generator=generator)
    decisions = (plan.mean + plan.std * noise).clamp(-1.0, 1.0)
    return decisions, decisions[:, plan.slot_index()]


def mppi_weights(returns: Tensor, temperature: float) -> Tensor:
    r = returns.to(torch.float64)
    return torch.softmax((r - r.max()) / temperature, dim=0)


def mppi_update(
    decisions: Tensor, returns: Tensor, plan: PlanDistribution, temperature: float, std_min: float = 0.1
) -> PlanDistribution:
    if decisions.shape[0] < 1:
        raise PreconditionError("MPPI update needs at least one sample")
    w = mppi_weights(returns, temperature).view(-1, 1, 1)
    z = decisions.to(torch.float64)
    mean = (w * z).sum(0)
    std = ((w * (z - mean) ** 2).sum(0)).sqrt().clamp(min=std_min)
    return replace(
        plan,
        mean=mean.clamp(-1.0, 1.0).to(plan.mean.dtype),
        std=std.to(plan.std.dtype),
        iteration=plan.iteration + 1,
    )


def shift_plan(plan: PlanDistribution, noise_std: float = 1.0) -> PlanDistribution:
    """Advance one environment step; at a repeat boundary slots move left and the tail resets to the prior."""
    phase = plan.phase + 1
    if phase < plan.repeat:
        return replace(plan, phase=phase, iteration=0)
    dim = plan.mean.shape[-1]
    mean = torch.cat([plan.mean[1:], torch.zeros(1, dim, dtype=plan.mean.dtype)])
    std = torch.cat([plan.std[1:], torch.full((1, dim), noise_std, dtype=plan.std.dtype)])
    return replace(plan, mean=mean, std=std, phase=0, iteration=0)


def identity_act(states: Tensor, skills: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
    """Action-space planning: the planned vector is the action."""
    return skills


def get_action(
    state: np.ndarray,
    model: DynamicsModel,
    act_fn: ActFn,
    plan: PlanDistribution,
    reward_fn: RewardFn,
    config: PlannerSection,
    generator: Optional[torch.Generator] = None,
) -> Tuple[np.ndarray, PlanDistribution, PlanDiagnostics]:
    """Refine the plan for `iterations` MPPI rounds, emit a ~ pi(.|s, z0), then shift the plan."""
    started = time.perf_counter()
    s0 = torch.as_tensor(state, dtype=torch.float32)
    diagnostics = PlanDiagnostics()
    elite: Optional[Tensor] = None
    best = -math.inf

    for _ in range(config.iterations):
        decisions, sequences = sample_sequences(plan, config.population, generator)
        if elite is not None and config.population >= 2:
            decisions[0] = elite
            sequences = decisions[:, plan.slot_index()]
        returns = trajectory_sample_returns(
            model, sequences, act_fn, s0, reward_fn, config.gamma, config.particles, generator
        )
        top = int(torch.argmax(returns))
        if float(returns[top]) >= best:
            best, elite = float(returns[top]), decisions[top].clone()
        weights = mppi_weights(returns, config.temperature)
        diagnostics.weight_entropy = float(-(weights * torch.log(weights.clamp(min=1e-300))).sum())
        plan = mppi_update(decisions, returns, plan, config.temperature, config.std_min)

    if elite is not None:
        diagnostics.best_return = best
    with torch.no_grad():
        action = act_fn(s0.unsqueeze(0), plan.first_skill().unsqueeze(0), generator)[0]
    diagnostics.seconds = time.perf_counter() - started
    return action.numpy().astype(np.float64), shift_plan(plan, config.noise_std), diagnostics
