import torch
import torch.nn.functional as F

from app.nn import GaussianHead, Mlp, parameter_digest, squashed_sample
from app.sac import SacLosses, SoftActorCritic


def test_critic_gradient_matches_finite_differences(check_gradient):
    torch.manual_seed(0)
    critic = Mlp([5, 8, 8, 1], "relu").double()
    x = torch.randn(16, 5, dtype=torch.float64)
    y = torch.randn(16, dtype=torch.float64)
    check_gradient(critic, lambda net: F.mse_loss(net(x).squeeze(-1), y))


def test_actor_gradient_matches_finite_differences(check_gradient):
    torch.manual_seed(1)
    actor = Mlp([3, 8, 4], "relu").double()
    obs = torch.randn(16, 3, dtype=torch.float64)

    def loss(net):
        sample, log_prob = squashed_sample(GaussianHead.from_output(net(obs)), torch.Generator().manual_seed(0))
        return (0.2 * log_prob - (sample ** 2).sum(-1)).mean()

    check_gradient(actor, loss)


def test_polyak_with_unit_tau_copies():
    sac = SoftActorCritic(3, 2, (8, 8), tau=1.0)
    with torch.no_grad():
        for p in sac.q1.parameters():
            p.add_(1.0)
    sac.soft_update()
    assert parameter_digest(sac.q1_target) == parameter_digest(sac.q1)
    assert parameter_digest(sac.q2_target) == parameter_digest(sac.q2)


def test_targets_move_slowly():
    sac = SoftActorCritic(3, 2, (8, 8), tau=0.005)
    before = [p.clone() for p in sac.q1_target.parameters()]
    with torch.no_grad():
        for p in sac.q1.parameters():
            p.add_(1.0)
    sac.soft_update()
    for old, new in zip(before, sac.q1_target.parameters()):
        assert torch.allclose(new - old, torch.full_like(old, 0.005), atol=1e-6)


def test_act_is_bounded_and_reproducible():
    sac = SoftActorCritic(3, 2, (8, 8))
    obs = torch.randn(50, 3)
    a1, log_prob = sac.act(obs, torch.Generator().manual_seed(0))
    a2, _ = sac.act(obs, torch.Generator().manual_seed(0))
    assert a1.abs().max() < 1.0
    assert torch.equal(a1, a2)
    assert log_prob.shape == (50,)
    assert torch.equal(sac.act(obs, deterministic=True)[0], sac.act(obs, deterministic=True)[0])


def test_update_steps_every_optimizer():
    sac = SoftActorCritic(3, 2, (8, 8))
    generator = torch.Generator().manual_seed(0)
    losses = sac.update(torch.randn(32, 3), torch.rand(32, 2) * 2 - 1, torch.randn(32), torch.randn(32, 3), generator)
    assert isinstance(losses, SacLosses)
    assert sac.step_count == 3
    assert losses.alpha < 1.0
    assert set(sac.entries("sac")) == {
        "sac.actor", "sac.q1", "sac.q2", "sac.q1_target", "sac.q2_target", "sac.log_alpha",
    }


def test_learns_one_step_bandit():
    torch.manual_seed(0)
    sac = SoftActorCritic(1, 1, (32, 32), learning_rate=3e-3, gamma=0.0)
    generator = torch.Generator().manual_seed(0)
    obs = torch.zeros(64, 1)
    for _ in range(1500):
        actions = torch.rand(64, 1, generator=generator) * 2 - 1
        rewards = -5.0 * (actions[:, 0] - 0.5) ** 2
        sac.update(obs, actions, rewards, obs, generator)
    action, _ = sac.act(torch.zeros(1, 1), deterministic=True)
    assert abs(action.item() - 0.5) < 0.3
