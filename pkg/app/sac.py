# app/sac.py - entropy-regularized actor-critic with twin critics and automatic temperature
import copy
import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from pydantic import BaseModel
from torch import Tensor, nn

from app.nn import GaussianHead, Mlp, OptimizerState, make_optimizer, optimize, squashed_sample

logger = logging.getLogger(__name__)


class SacLosses(BaseModel):
    critic_loss: float
    actor_loss: float
    alpha_loss: float
    alpha: float
    entropy: float


class SoftActorCritic:
    """
    Squashed-Gaussian actor over [-1, 1]^action_dim, twin Q critics with Polyak-averaged
    targets and a learned entropy temperature. There are no terminal states.
    """

    def __init__(
        self,
        obs_dim: int,
        action_dim: int,
        hidden_sizes: Sequence[int] = (256, 256),
        learning_rate: float = 3e-4,
        gamma: float = 0.99,
        tau: float = 0.005,
        target_entropy: Optional[float] = None,
        name: str = "sac",
    ):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.gamma = gamma
        self.tau = tau
        self.name = name
        self.target_entropy = -float(action_dim) if target_entropy is None else target_entropy

        self.actor = Mlp([obs_dim, *hidden_sizes, 2 * action_dim], "relu")
        self.q1 = Mlp([obs_dim + action_dim, *hidden_sizes, 1], "relu")
        self.q2 = Mlp([obs_dim + action_dim, *hidden_sizes, 1], "relu")
        self.q1_target = copy.deepcopy(self.q1)
        self.q2_target = copy.deepcopy(self.q2)
        for p in list(self.q1_target.parameters()) + list(self.q2_target.parameters()):
            p.requires_grad_(False)
        self.log_alpha = torch.zeros(1, requires_grad=True)

        self.actor_optimizer = make_optimizer(self.actor.parameters(), learning_rate)
        self.critic_optimizer = make_optimizer(list(self.q1.parameters()) + list(self.q2.parameters()), learning_rate)
        self.alpha_optimizer = make_optimizer([self.log_alpha], learning_rate)

    @property
    def alpha(self) -> Tensor:
        return self.log_alpha.exp()

    @property
    def optimizers(self) -> List[OptimizerState]:
        return [self.actor_optimizer, self.critic_optimizer, self.alpha_optimizer]

    @property
    def step_count(self) -> int:
        return sum(o.step_count for o in self.optimizers)

    def modules(self) -> List[nn.Module]:
        return [self.actor, self.q1, self.q2, self.q1_target, self.q2_target]

    def policy(self, obs: Tensor) -> GaussianHead:
        return GaussianHead.from_output(self.actor(obs))

    def act(
        self, obs: Tensor, generator: Optional[torch.Generator] = None, deterministic: bool = False
    ) -> Tuple[Tensor, Tensor]:
        with torch.no_grad():
            return squashed_sample(self.policy(obs), generator, deterministic)

    def q_values(self, obs: Tensor, actions: Tensor, target: bool = False) -> Tuple[Tensor, Tensor]:
        x = torch.cat([obs, actions], dim=-1)
        if target:
            return self.q1_target(x).squeeze(-1), self.q2_target(x).squeeze(-1)
        return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)

    def update(
        self,
        obs: Tensor,
        actions: Tensor,
        rewards: Tensor,
        next_obs: Tensor,
        generator: Optional[torch.Generator] = None,
    ) -> SacLosses:
        """One critic, actor and temperature step followed by the target update."""
        with torch.no_grad():
            next_actions, next_log_prob = squashed_sample(self.policy(next_obs), generator)
            next_q = torch.min(*self.q_values(next_obs, next_actions, target=True))
            target = rewards + self.gamma * (next_q - self.alpha * next_log_prob)

        q1, q2 = self.q_values(obs, actions)
        critic_loss = F.mse_loss(q1, target) + F.mse_loss(q2, target)
        critic_value = optimize(self.critic_optimizer, critic_loss, f"{self.name} critic")

        sampled, log_prob = squashed_sample(self.policy(obs), generator)
        q = torch.min(*self.q_values(obs, sampled))
        alpha = self.alpha.detach()
        actor_loss = (alpha * log_prob - q).mean()
        actor_value = optimize(self.actor_optimizer, actor_loss, f"{self.name} actor")

        alpha_loss = -(self.log_alpha * (log_prob.detach() + self.target_entropy)).mean()
        alpha_value = optimize(self.alpha_optimizer, alpha_loss, f"{self.name} temperature")

        self.soft_update()
        return SacLosses(
            critic_loss=critic_value,
            actor_loss=actor_value,
            alpha_loss=alpha_value,
            alpha=float(self.alpha.item()),
            entropy=float(-log_prob.detach().mean()),
        )

    def soft_update(self) -> None:
        with torch.no_grad():
            for live, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
                for p, p_target in zip(live.parameters(), target.parameters()):
                    p_target.mul_(1.0 - self.tau).add_(self.tau * p)

    def entries(self, prefix: str) -> Dict[str, Union[nn.Module, Tensor]]:
        return {
            f"{prefix}.actor": self.actor,
            f"{prefix}.q1": self.q1,
            f"{prefix}.q2": self.q2,
            f"{prefix}.q1_target": self.q1_target,
            f"{prefix}.q2_target": self.q2_target,
            f"{prefix}.log_alpha": self.log_alpha,
        }
