"""Proximal policy optimization for the discrete trading environment."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .trading_env import TradingEnv

log = logging.getLogger(__name__)


@dataclass
class PolicyParams:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs: int = 10
    minibatch: int = 64
    lr: float = 3e-4
    hidden: int = 64
    max_grad_norm: float = 0.5
    episodes_per_update: int = 4
    iterations: int = 50

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.clip <= 0:
            raise ConfigError("clip ratio must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("GAE lambda must lie in [0, 1]")
        if self.epochs < 1 or self.minibatch < 1 or self.episodes_per_update < 1:
            raise ConfigError("epochs, minibatch and episodes_per_update must be positive")


class ActorCritic(nn.Module):
    """Separate two-layer tanh MLPs for the policy logits and the state value."""

    def __init__(self, obs_dim: int, n_actions: int = 3, hidden: int = 64):
        super().__init__()
        self.obs_dim = obs_dim
        self.policy = nn.Sequential(
            nn.Linear(obs_dim, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh(), nn.Linear(hidden, n_actions)
        )
        self.value = nn.Sequential(
            nn.Linear(obs_dim, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh(), nn.Linear(hidden, 1)
        )
        with torch.no_grad():
            self.policy[-1].weight.mul_(0.01)
            self.policy[-1].bias.zero_()

    def dist(self, obs: torch.Tensor) -> torch.distributions.Categorical:
        return torch.distributions.Categorical(logits=self.policy(obs))

    def forward(self, obs: torch.Tensor):
        return self.dist(obs), self.value(obs)[..., 0]


@dataclass
class Trajectory:
    obs: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T,)
    logp: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    values: np.ndarray  # (T,)
    dones: np.ndarray  # (T,) 1 where the step ended the episode
    final_value: float  # account value at episode end


def gae(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0):
    """Generalized advantage estimates and value targets for one rollout.

    ``dones[t] = 1`` cuts the bootstrap after step ``t``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = rewards.size
    adv = np.zeros(T)
    running = 0.0
    for t in reversed(range(T)):
        next_v = last_value if t == T - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv, adv + values


def clipped_surrogate(logp_new: torch.Tensor, logp_old: torch.Tensor, adv: torch.Tensor, clip: float) -> torch.Tensor:
    """Negative clipped surrogate objective (to be minimized)."""
    ratio = (logp_new - logp_old).exp()
    unclipped = ratio * adv
    clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv
    return -torch.minimum(unclipped, clipped).mean()


def rollout(env: TradingEnv, net: ActorCritic, generator: torch.Generator, greedy: bool = False) -> Trajectory:
    obs = env.reset()
    buf = {k: [] for k in ("obs", "actions", "logp", "rewards", "values", "dones")}
    done = False
    while not done:
        o = torch.as_tensor(obs, dtype=torch.float32)
        with torch.no_grad():
            dist, v = net(o)
            if greedy:
                a = int(dist.probs.argmax())
            else:
                a = int(torch.multinomial(dist.probs, 1, generator=generator))
            lp = float(dist.log_prob(torch.tensor(a)))
        nxt, r, done, _ = env.step(a)
        for k, val in zip(buf, (obs, a, lp, r, float(v), float(done))):
            buf[k].append(val)
        obs = nxt
    arrays = {k: np.asarray(v) for k, v in buf.items()}
    return Trajectory(**arrays, final_value=float(env.state.value))


def ppo_update(
    net: ActorCritic,
    optimizer: torch.optim.Optimizer,
    trajectories: list[Trajectory],
    params: PolicyParams,
    generator: torch.Generator,
) -> dict[str, float]:
    """Several epochs of minibatch PPO over a batch of complete trajectories."""
    if not trajectories:
        raise ConfigError("ppo_update needs at least one trajectory")
    advs, rets = zip(*(gae(tr.rewards, tr.values, tr.dones, params.gamma, params.lam) for tr in trajectories))
    obs = torch.as_tensor(np.concatenate([t.obs for t in trajectories]), dtype=torch.float32)
    act = torch.as_tensor(np.concatenate([t.actions for t in trajectories]), dtype=torch.long)
    old = torch.as_tensor(np.concatenate([t.logp for t in trajectories]), dtype=torch.float32)
    adv = torch.as_tensor(np.concatenate(advs), dtype=torch.float32)
    ret = torch.as_tensor(np.concatenate(rets), dtype=torch.float32)
    if adv.numel() > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    stats = {"policy": 0.0, "value": 0.0, "entropy": 0.0}
    n_mb = 0
    for _ in range(params.epochs):
        perm = torch.randperm(obs.shape[0], generator=generator)
        for idx in perm.split(params.minibatch):
            dist, v = net(obs[idx])
            pol = clipped_surrogate(dist.log_prob(act[idx]), old[idx], adv[idx], params.clip)
            val = ((v - ret[idx]) ** 2).mean()
            ent = dist.entropy().mean()
            loss = pol + params.value_coef * val - params.entropy_coef * ent
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), params.max_grad_norm)
            optimizer.step()
            stats["policy"] += pol.item()
            stats["value"] += val.item()
            stats["entropy"] += ent.item()
            n_mb += 1
    return {k: v / n_mb for k, v in stats.items()}


@dataclass
class PPOResult:
    net: ActorCritic
    params: PolicyParams
    seed: int
    history: list[dict]


def train_ppo(
    env_factory: Callable[[], TradingEnv], params: PolicyParams | None = None, seed: int = 0,
) -> PPOResult:
    """Train a fresh actor-critic; every random draw comes from ``seed``."""
    params = params or PolicyParams()
    env = env_factory()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ActorCritic(env.obs_dim, hidden=params.hidden)
    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=params.lr)
    history = []
    for it in range(params.iterations):
        trajs = [rollout(env, net, gen) for _ in range(params.episodes_per_update)]
        stats = ppo_update(net, opt, trajs, params, gen)
        stats.update(iteration=it, mean_final_value=float(np.mean([t.final_value for t in trajs])))
        history.append(stats)
        log.debug("ppo iter %d value %.1f", it, stats["mean_final_value"])
    return PPOResult(net, params, seed, history)


def evaluate_policy(net: ActorCritic, env: TradingEnv, greedy: bool = True, seed: int = 0) -> Trajectory:
    return rollout(env, net, torch.Generator().manual_seed(seed), greedy=greedy)


def save_policy(result: PPOResult, out_dir: str | Path, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(result.net.state_dict(), out / "policy.pt")
    manifest = {"obs_dim": result.net.obs_dim, "seed": result.seed, "params": asdict(result.params),
                "history_tail": result.history[-10:], **(extra or {})}
    (out / "policy.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_policy(out_dir: str | Path) -> ActorCritic:
    out = Path(out_dir)
    manifest = json.loads((out / "policy.json").read_text(encoding="utf-8"))
    net = ActorCritic(manifest["obs_dim"], hidden=manifest["params"]["hidden"])
    net.load_state_dict(torch.load(out / "policy.pt", weights_only=True))
    return net
