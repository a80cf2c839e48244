# app/skills.py - model-based skill discovery: rollouts, intrinsic reward, discriminator and SAC updates
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel
from torch import Tensor, nn

from app.buffers import GeneratedBuffer, ReplayBuffer
from app.config import AgentConfig
from app.dynamics import ActFn, DynamicsModel, disagreement
from app.environments import make_env
from app.errors import PreconditionError
from app.nn import GaussianHead, Mlp, make_optimizer, optimize
from app.sac import SacLosses, SoftActorCritic

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-30
LOG_DENSITY_FLOOR = math.log(DENSITY_FLOOR)

LogDensity = Callable[[Tensor, Tensor, Tensor], Tensor]


def uniform_skills(count: int, skill_dim: int, generator: Optional[torch.Generator] = None) -> Tensor:
    return torch.rand(count, skill_dim, generator=generator) * 2.0 - 1.0


def gaussian_log_density(head: GaussianHead, x: Tensor) -> Tensor:
    z = (x - head.mean) / head.std
    return (-0.5 * z ** 2 - head.log_std - 0.5 * math.log(2 * math.pi)).sum(-1)


class SkillBundle:
    """Skill policy pi(a|s,z), skill-practice p(z|s) and the discriminator q(s'|s,z)."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        skill_dim: int,
        policy_hidden: Sequence[int] = (256, 256),
        discriminator_hidden: Sequence[int] = (512, 512),
        learning_rate: float = 3e-4,
        gamma: float = 0.99,
        tau: float = 0.005,
        generated_buffer_size: int = 5000,
        discriminator_dims: Sequence[int] = (),
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.skill_dim = skill_dim
        self.dims = list(discriminator_dims) or list(range(state_dim))

        self.policy = SoftActorCritic(
            state_dim + skill_dim, action_dim, policy_hidden, learning_rate, gamma, tau, name="skill policy"
        )
        self.practice = SoftActorCritic(
            state_dim, skill_dim, policy_hidden, learning_rate, gamma, tau, name="skill practice"
        )
        self.discriminator = Mlp([len(self.dims) + skill_dim, *discriminator_hidden, 2 * len(self.dims)], "relu")
        self.discriminator_optimizer = make_optimizer(self.discriminator.parameters(), learning_rate)
        self.generated = GeneratedBuffer(generated_buffer_size, state_dim, action_dim, skill_dim)

    @classmethod
    def from_config(cls, state_dim: int, action_dim: int, config: AgentConfig) -> "SkillBundle":
        s = config.skills
        return cls(
            state_dim,
            action_dim,
            config.skill_dim,
            s.policy_hidden,
            s.discriminator_hidden,
            s.learning_rate,
            s.gamma,
            s.tau,
            s.generated_buffer_size,
            s.discriminator_dims,
        )

    @property
    def step_count(self) -> int:
        return self.policy.step_count + self.practice.step_count + self.discriminator_optimizer.step_count

    def modules(self) -> List[nn.Module]:
        return [*self.policy.modules(), *self.practice.modules(), self.discriminator]

    def discriminator_log_density(self, states: Tensor, skills: Tensor, next_states: Tensor) -> Tensor:
        """log q(s'|s,z) over the next-state delta of the discriminated coordinates, floored."""
        x = states[..., self.dims]
        delta = next_states[..., self.dims] - x
        head = GaussianHead.from_output(self.discriminator(torch.cat([x, skills], dim=-1)))
        return gaussian_log_density(head, delta).clamp(min=LOG_DENSITY_FLOOR)

    def act_fn(self) -> ActFn:
        def act(states: Tensor, skills: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
            return self.policy.act(torch.cat([states, skills], dim=-1), generator)[0]

        return act

    def sample_skills(self, states: Tensor, generator: Optional[torch.Generator], use_practice: bool) -> Tensor:
        if use_practice:
            return self.practice.act(states, generator)[0]
        return uniform_skills(states.shape[0], self.skill_dim, generator)

    def entries(self) -> Dict[str, Union[nn.Module, Tensor]]:
        return {
            **self.policy.entries("policy"),
            **self.practice.entries("practice"),
            "discriminator": self.discriminator,
        }


class PolicyDiagnostics(BaseModel):
    rollouts: int = 0
    intrinsic_mean: Optional[float] = None
    penalized_fraction: Optional[float] = None
    discriminator_loss: Optional[float] = None
    policy_critic_loss: Optional[float] = None
    policy_actor_loss: Optional[float] = None
    practice_critic_loss: Optional[float] = None
    practice_actor_loss: Optional[float] = None
    practice_entropy: Optional[float] = None


def intrinsic_reward(
    log_density: LogDensity,
    states: Tensor,
    skills: Tensor,
    next_states: Tensor,
    prior_samples: int,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    """
    log q(s'|s,z) - log (1/L) sum_i q(s'|s,z_i) with z_i drawn from the uniform prior,
    evaluated with log-sum-exp.
    """
    numerator = log_density(states, skills, next_states)
    batch, skill_dim = skills.shape
    prior = uniform_skills(prior_samples * batch, skill_dim, generator).view(prior_samples, batch, skill_dim)
    expanded = lambda x: x.unsqueeze(0).expand(prior_samples, *x.shape)
    denominator = log_density(expanded(states), prior, expanded(next_states))
    return numerator - (torch.logsumexp(denominator, dim=0) - math.log(prior_samples))


def adjusted_reward(reward: Tensor, dis: Tensor, threshold: float, penalty: float) -> Tensor:
    """The reward where disagreement is within the threshold (inclusive), -penalty elsewhere."""
    return torch.where(dis <= threshold, reward, torch.full_like(reward, -penalty))


def generate_rollouts(
    bundle: SkillBundle,
    replay: ReplayBuffer,
    model: DynamicsModel,
    count: int,
    rng: np.random.Generator,
    generator: Optional[torch.Generator] = None,
    use_practice: bool = True,
) -> Tuple[Dict[str, Tensor], np.ndarray]:
    """One-step model rollouts from states of the replay buffer, appended to the generated buffer."""
    if len(replay) == 0:
        raise PreconditionError("Cannot generate rollouts from an empty replay buffer")
    members = rng.integers(0, model.ensemble_size, size=count)
    if count == 0:
        return {}, members
    with torch.no_grad():
        states = replay.sample_states(count, rng)
        skills = bundle.sample_skills(states, generator, use_practice)
        actions = bundle.act_fn()(states, skills, generator)
        next_states = torch.empty_like(states)
        for member in np.unique(members):
            mask = torch.from_numpy(members == member)
            next_states[mask] = model.predict(int(member), states[mask], actions[mask], generator)
    bundle.generated.add_batch(states, skills, actions, next_states)
    batch = {"states": states, "skills": skills, "actions": actions, "next_states": next_states}
    return batch, members


def update_discriminator(bundle: SkillBundle, batch: Dict[str, Tensor]) -> float:
    log_density = bundle.discriminator_log_density(batch["states"], batch["skills"], batch["next_states"])
    return optimize(bundle.discriminator_optimizer, -log_density.mean(), "discriminator")


def compute_rewards(
    bundle: SkillBundle,
    model: DynamicsModel,
    batch: Dict[str, Tensor],
    config: AgentConfig,
    generator: Optional[torch.Generator] = None,
) -> Tuple[Tensor, Tensor, Tensor]:
    """Scaled intrinsic reward, its disagreement-adjusted value, and the penalized mask."""
    s = config.skills
    with torch.no_grad():
        intrinsic = s.reward_scale * intrinsic_reward(
            bundle.discriminator_log_density,
            batch["states"],
            batch["skills"],
            batch["next_states"],
            s.prior_samples,
            generator,
        )
        if not s.use_disagreement_penalty:
            return intrinsic, intrinsic, torch.zeros_like(intrinsic, dtype=torch.bool)
        dis = disagreement(model, batch["states"], batch["actions"], config.model.exact_disagreement, generator)
        adjusted = adjusted_reward(intrinsic, dis, config.disagreement_threshold, s.disagreement_penalty)
    return intrinsic, adjusted, dis > config.disagreement_threshold


def update_policy(
    bundle: SkillBundle,
    replay: ReplayBuffer,
    model: DynamicsModel,
    config: AgentConfig,
    rng: np.random.Generator,
    generator: Optional[torch.Generator] = None,
) -> PolicyDiagnostics:
    """
    One skill-learning iteration: fresh model rollouts, discriminator steps on them,
    then skill-policy and skill-practice SAC steps on the generated buffer with
    rewards recomputed under the updated discriminator.
    """
    s = config.skills
    diagnostics = PolicyDiagnostics(rollouts=s.rollouts)
    fresh, _ = generate_rollouts(bundle, replay, model, s.rollouts, rng, generator, s.use_practice)

    if s.discriminator_steps and not fresh and len(bundle.generated):
        fresh = bundle.generated.sample(s.batch_size, rng)
    if fresh:
        for _ in range(s.discriminator_steps):
            diagnostics.discriminator_loss = update_discriminator(bundle, fresh)

    if not len(bundle.generated):
        return diagnostics

    intrinsic_means, penalized = [], []
    policy_losses: Optional[SacLosses] = None
    for _ in range(s.policy_steps):
        batch = bundle.generated.sample(s.batch_size, rng)
        intrinsic, rewards, mask = compute_rewards(bundle, model, batch, config, generator)
        intrinsic_means.append(float(intrinsic.mean()))
        penalized.append(float(mask.float().mean()))
        policy_losses = bundle.policy.update(
            torch.cat([batch["states"], batch["skills"]], dim=-1),
            batch["actions"],
            rewards,
            torch.cat([batch["next_states"], batch["skills"]], dim=-1),
            generator,
        )
    if policy_losses is not None:
        diagnostics.policy_critic_loss = policy_losses.critic_loss
        diagnostics.policy_actor_loss = policy_losses.actor_loss
        diagnostics.intrinsic_mean = float(np.mean(intrinsic_means))
        diagnostics.penalized_fraction = float(np.mean(penalized))

    if s.use_practice:
        practice_losses: Optional[SacLosses] = None
        for _ in range(s.practice_steps):
            batch = bundle.generated.sample(s.batch_size, rng)
            _, rewards, _ = compute_rewards(bundle, model, batch, config, generator)
            practice_losses = bundle.practice.update(
                batch["states"], batch["skills"], rewards, batch["next_states"], generator
            )
        if practice_losses is not None:
            diagnostics.practice_critic_loss = practice_losses.critic_loss
            diagnostics.practice_actor_loss = practice_losses.actor_loss
            diagnostics.practice_entropy = practice_losses.entropy

    return diagnostics


def skill_height_score(
    bundle: SkillBundle,
    config: AgentConfig,
    seed: int = 0,
    episodes: int = 5,
    length: int = 200,
) -> float:
    """
    Episodic skill quality on the locomotion proxy: each episode runs a fresh environment
    under one uniformly drawn skill and records the average body height.
    """
    if config.run.environment != "locomotion":
        raise PreconditionError(f"Skill height score needs the locomotion environment, got {config.run.environment}")
    reference = make_env(config, seed, lifetime=1)
    expected = (reference.state_dim, reference.action_dim, config.skill_dim)
    if (bundle.state_dim, bundle.action_dim, bundle.skill_dim) != expected:
        raise PreconditionError(
            f"Skill bundle (state, action, skill) dims {(bundle.state_dim, bundle.action_dim, bundle.skill_dim)} "
            f"do not match locomotion {expected}"
        )
    rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(seed)
    act = bundle.act_fn()
    heights = []
    for episode in range(episodes):
        env = make_env(config, int(rng.integers(2**31)), lifetime=length)
        skill = uniform_skills(1, bundle.skill_dim, generator)
        for _ in range(length):
            state = torch.as_tensor(env.state, dtype=torch.float32).unsqueeze(0)
            action = act(state, skill, generator)[0].numpy()
            heights.append(env.step(action).state[1])
    score = float(np.mean(heights)) if heights else 0.0
    logger.info(f"Skill height score over {episodes} episodes: {score:.3f}")
    return score
