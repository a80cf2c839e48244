# app/dynamics.py - probabilistic ensemble dynamics model
import logging
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from app.buffers import ReplayBuffer
from app.config import ModelSection
from app.errors import NumericalAbort, PreconditionError
from app.nn import Mlp, OptimizerState, make_optimizer, optimize
from app.schedule import RewardFn

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e3
DIVERGED_RETURN = -1e3
LOGVAR_BOUND_WEIGHT = 0.01
MIN_STD = 1e-6

ActFn = Callable[[Tensor, Tensor, Optional[torch.Generator]], Tensor]


class DynamicsModel(Protocol):
    ensemble_size: int

    def predict(
        self,
        member: int,
        states: Tensor,
        actions: Tensor,
        generator: Optional[torch.Generator] = None,
        deterministic: bool = False,
    ) -> Tensor:
        ...

    def member_means(self, states: Tensor, actions: Tensor) -> Tensor:
        ...


class EnsembleDynamics(nn.Module):
    """
    N Gaussian MLPs over the next-state delta. Inputs (s, a) and targets s' - s are
    whitened with statistics refreshed from the replay buffer before every training round.
    """

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        ensemble_size: int = 4,
        hidden_sizes: Sequence[int] = (256, 256, 256),
        activation: str = "tanh",
    ):
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.ensemble_size = ensemble_size
        widths = [state_dim + action_dim, *hidden_sizes, 2 * state_dim]
        self.members = nn.ModuleList(Mlp(widths, activation) for _ in range(ensemble_size))

        self.max_logvar = nn.Parameter(torch.full((state_dim,), 0.5))
        self.min_logvar = nn.Parameter(torch.full((state_dim,), -10.0))

        self.register_buffer("input_mean", torch.zeros(state_dim + action_dim))
        self.register_buffer("input_std", torch.ones(state_dim + action_dim))
        self.register_buffer("delta_mean", torch.zeros(state_dim))
        self.register_buffer("delta_std", torch.ones(state_dim))

        self.optimizer: Optional[OptimizerState] = None

    @classmethod
    def from_config(cls, state_dim: int, action_dim: int, config: ModelSection) -> "EnsembleDynamics":
        return cls(state_dim, action_dim, config.ensemble_size, config.hidden_sizes, config.activation)

    def fit_normalizers(self, states: Tensor, actions: Tensor, next_states: Tensor) -> None:
        inputs = torch.cat([states, actions], dim=-1)
        deltas = next_states - states

        def std(x: Tensor) -> Tensor:
            s = x.std(dim=0, unbiased=False) if len(x) > 1 else torch.ones(x.shape[-1])
            return torch.where(s < MIN_STD, torch.ones_like(s), s)

        with torch.no_grad():
            self.input_mean.copy_(inputs.mean(0))
            self.input_std.copy_(std(inputs))
            self.delta_mean.copy_(deltas.mean(0))
            self.delta_std.copy_(std(deltas))

    def normalized_output(self, member: int, states: Tensor, actions: Tensor):
        """Whitened delta mean and bounded log-variance of one member."""
        x = (torch.cat([states, actions], dim=-1) - self.input_mean) / self.input_std
        mean, logvar = self.members[member](x).chunk(2, dim=-1)
        logvar = self.max_logvar - F.softplus(self.max_logvar - logvar)
        logvar = self.min_logvar + F.softplus(logvar - self.min_logvar)
        return mean, logvar

    def delta_distribution(self, member: int, states: Tensor, actions: Tensor):
        mean, logvar = self.normalized_output(member, states, actions)
        delta_mean = mean * self.delta_std + self.delta_mean
        delta_std = (0.5 * logvar).exp() * self.delta_std
        return delta_mean, delta_std

    def predict(
        self,
        member: int,
        states: Tensor,
        actions: Tensor,
        generator: Optional[torch.Generator] = None,
        deterministic: bool = False,
    ) -> Tensor:
        if not 0 <= member < self.ensemble_size:
            raise PreconditionError(f"Member index {member} outside ensemble of {self.ensemble_size}")
        mean, std = self.delta_distribution(member, states, actions)
        if deterministic:
            return states + mean
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return states + mean + std * eps

    def member_means(self, states: Tensor, actions: Tensor) -> Tensor:
        """Predicted next-state means of every member, shape [N, ..., state_dim]."""
        return torch.stack(
            [states + self.delta_distribution(i, states, actions)[0] for i in range(self.ensemble_size)]
        )

    def mean_prediction(self, states: Tensor, actions: Tensor) -> Tensor:
        return self.member_means(states, actions).mean(0)

    def nll(self, member: int, states: Tensor, actions: Tensor, next_states: Tensor) -> Tensor:
        mean, logvar = self.normalized_output(member, states, actions)
        target = (next_states - states - self.delta_mean) / self.delta_std
        return ((mean - target) ** 2 * torch.exp(-logvar) + logvar).mean()

    def logvar_bound_penalty(self) -> Tensor:
        return LOGVAR_BOUND_WEIGHT * (self.max_logvar.sum() - self.min_logvar.sum())

    def entries(self) -> Dict[str, Union[nn.Module, Tensor]]:
        """Named records for a checkpoint."""
        entries: Dict[str, Union[nn.Module, Tensor]] = {f"dynamics.member{i}": m for i, m in enumerate(self.members)}
        for name in ("max_logvar", "min_logvar", "input_mean", "input_std", "delta_mean", "delta_std"):
            entries[f"dynamics.{name}"] = getattr(self, name)
        return entries


def pairwise_disagreement(means: Tensor) -> Tensor:
    """Mean squared L2 distance over all ordered member pairs i != j; means is [N, ..., d]."""
    n = means.shape[0]
    if n < 2:
        return torch.zeros(means.shape[1:-1], dtype=means.dtype)
    diff = means.unsqueeze(0) - means.unsqueeze(1)
    squared = (diff ** 2).sum(-1)
    return squared.sum(dim=(0, 1)) / (n * (n - 1))


def sampled_disagreement(means: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
    """One random ordered pair i != j per input instead of the full average."""
    n = means.shape[0]
    if n < 2:
        return torch.zeros(means.shape[1:-1], dtype=means.dtype)
    batch_shape = means.shape[1:-1]
    i = torch.randint(0, n, batch_shape, generator=generator)
    j = (i + torch.randint(1, n, batch_shape, generator=generator)) % n
    flat = means.reshape(n, -1, means.shape[-1])
    rows = torch.arange(flat.shape[1])
    diff = flat[i.reshape(-1), rows] - flat[j.reshape(-1), rows]
    return (diff ** 2).sum(-1).reshape(batch_shape)


def disagreement(
    model: DynamicsModel,
    states: Tensor,
    actions: Tensor,
    exact: bool = True,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    with torch.no_grad():
        means = model.member_means(states, actions)
    return pairwise_disagreement(means) if exact else sampled_disagreement(means, generator)


def _train_steps(
    model: EnsembleDynamics,
    data: Dict[str, Tensor],
    pool: np.ndarray,
    steps: int,
    batch_size: int,
    rng: np.random.Generator,
) -> List[float]:
    losses = []
    for _ in range(steps):
        total = model.logvar_bound_penalty()
        member_losses = []
        for member in range(model.ensemble_size):
            idx = torch.from_numpy(pool[rng.integers(0, len(pool), size=batch_size)])
            loss = model.nll(member, data["states"][idx], data["actions"][idx], data["next_states"][idx])
            member_losses.append(loss)
            total = total + loss
        try:
            optimize(model.optimizer, total, "dynamics")
        except NumericalAbort as e:
            raise NumericalAbort(f"{e.detail} (member losses {[float(l) for l in member_losses]})")
        losses.append(float(torch.stack(member_losses).detach().mean()))
    return losses


def _prepare(model: EnsembleDynamics, buffer: ReplayBuffer, learning_rate: float) -> Dict[str, Tensor]:
    if len(buffer) == 0:
        raise PreconditionError("Cannot train the dynamics model on an empty replay buffer")
    data = buffer.all()
    model.fit_normalizers(data["states"], data["actions"], data["next_states"])
    if model.optimizer is None:
        model.optimizer = make_optimizer(model.parameters(), learning_rate)
    return data


def train_model(
    model: EnsembleDynamics,
    buffer: ReplayBuffer,
    steps: int,
    rng: np.random.Generator,
    batch_size: int = 256,
    learning_rate: float = 1e-3,
) -> List[float]:
    """Refresh normalizers from the buffer, then `steps` NLL steps with an independent minibatch per member."""
    data = _prepare(model, buffer, learning_rate)
    losses = _train_steps(model, data, np.arange(len(buffer)), steps, batch_size, rng)
    if losses:
        logger.info(f"Dynamics trained for {steps} steps on {len(buffer)} transitions, final NLL {losses[-1]:.4f}")
    return losses


def holdout_nll(model: EnsembleDynamics, states: Tensor, actions: Tensor, next_states: Tensor) -> float:
    with torch.no_grad():
        return float(
            torch.stack([model.nll(i, states, actions, next_states) for i in range(model.ensemble_size)]).mean()
        )


def plateaued(history: Sequence[float], window: int, tolerance: float) -> bool:
    """Relative improvement over the last `window` evaluations fell below `tolerance`."""
    if len(history) <= window:
        return False
    before, now = history[-window - 1], history[-1]
    return (before - now) / max(abs(before), 1e-12) < tolerance


def train_until_plateau(
    model: EnsembleDynamics, buffer: ReplayBuffer, config: ModelSection, rng: np.random.Generator
) -> List[float]:
    """Train on a random split of the buffer until the holdout NLL stops improving or the step cap is hit."""
    data = _prepare(model, buffer, config.learning_rate)
    order = rng.permutation(len(buffer))
    n_holdout = int(len(order) * config.holdout_fraction)
    if n_holdout == 0 or n_holdout == len(order):
        holdout, pool = order, order
    else:
        holdout, pool = order[:n_holdout], order[n_holdout:]
    held = {k: v[torch.from_numpy(holdout)] for k, v in data.items()}

    history: List[float] = []
    steps = 0
    while steps < config.pretrain_max_steps:
        chunk = min(config.eval_every, config.pretrain_max_steps - steps)
        _train_steps(model, data, pool, chunk, config.batch_size, rng)
        steps += chunk
        history.append(holdout_nll(model, held["states"], held["actions"], held["next_states"]))
        if plateaued(history, config.plateau_window, config.plateau_tolerance):
            logger.info(f"Dynamics holdout NLL plateaued at {history[-1]:.4f} after {steps} steps")
            break
    else:
        logger.info(f"Dynamics pretraining hit the step cap of {config.pretrain_max_steps}")
    return history


def trajectory_sample_returns(
    model: DynamicsModel,
    skills: Tensor,
    act_fn: ActFn,
    initial_state: Tensor,
    reward_fn: RewardFn,
    gamma: float,
    particles: int = 1,
    generator: Optional[torch.Generator] = None,
    deterministic: bool = False,
) -> Tensor:
    """
    Discounted return of each candidate skill sequence (skills is [C, H, dim_z]).
    Every member rolls out `particles` copies of every candidate on its own; returns
    are averaged over particles, then over members. Accumulation is in float64.
    """
    candidates, horizon, _ = skills.shape
    if horizon < 1:
        raise PreconditionError("Trajectory sampling needs a horizon of at least 1")
    per_member = []
    with torch.no_grad():
        for member in range(model.ensemble_size):
            states = initial_state.expand(candidates * particles, -1).clone()
            returns = torch.zeros(candidates * particles, dtype=torch.float64)
            alive = torch.ones(candidates * particles, dtype=torch.bool)
            discount = 1.0
            for t in range(horizon):
                z = skills[:, t].repeat_interleave(particles, dim=0)
                actions = act_fn(states, z, generator)
                next_states = model.predict(member, states, actions, generator, deterministic)
                rewards = reward_fn(states, actions, next_states).to(torch.float64)

                diverged = alive & (
                    ~torch.isfinite(next_states).all(-1)
                    | (next_states.abs().amax(-1) > DIVERGENCE_LIMIT)
                    | ~torch.isfinite(rewards)
                )
                returns = torch.where(alive & ~diverged, returns + discount * rewards, returns)
                returns = torch.where(diverged, torch.full_like(returns, DIVERGED_RETURN), returns)
                alive = alive & ~diverged
                states = torch.where(alive.unsqueeze(-1), next_states, torch.zeros_like(next_states))
                discount *= gamma
            if not alive.all():
                logger.debug(f"Member {member}: {int((~alive).sum())} particles diverged")
            per_member.append(returns.view(candidates, particles).mean(1))
    return torch.stack(per_member).mean(0)
