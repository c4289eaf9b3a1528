"""Actor-critic agent trained with the clipped-surrogate policy objective.

Both networks are two-layer tanh MLPs over the environment observation,
kept in float64 with hand-written analytic gradients: the numeric core
stays dependency-free and the gradients are checkable against finite
differences. Optimization is plain gradient descent with fixed rates.

Collection freezes behavior log-probabilities and values inside the
trajectories; updates importance-weight against them, clipping the
probability ratio to [1 - eps, 1 + eps]. Rewards are episodic, so the
terminal reward is broadcast to every step and advantages are reward
minus the behavior value, with no discounting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AllMasked, InvalidConfig, NonFiniteLogits, NonFiniteLoss, ShapeMismatch
from .params import Checkpoint, ParamGroup
from .seeding import derive_seed

Grads = tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]


@dataclass(frozen=True)
class TwoLayerNet:
    """tanh(x W1^T + b1) W2^T + b2, all float64."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def obs_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def hidden(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w1.T + self.b1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.hidden(x) @ self.w2.T + self.b2

    def stepped(self, grads: Grads, lr: float) -> TwoLayerNet:
        dw1, db1, dw2, db2 = grads
        return type(self)(
            self.w1 - lr * dw1, self.b1 - lr * db1, self.w2 - lr * dw2, self.b2 - lr * db2
        )


class PolicyNet(TwoLayerNet):
    """Actor: one output logit per action."""


class ValueNet(TwoLayerNet):
    """Critic: scalar state value."""


@dataclass(frozen=True)
class Agent:
    policy: PolicyNet
    value: ValueNet


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    epochs_per_batch: int = 4
    episodes_per_batch: int = 8
    lr_actor: float = 3e-3
    lr_critic: float = 1e-2
    entropy_coef: float = 0.01
    hidden_dim: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.clip_eps <= 0:
            raise InvalidConfig(f"clip_eps must be positive, got {self.clip_eps}")
        if min(self.epochs_per_batch, self.episodes_per_batch, self.hidden_dim) < 1:
            raise InvalidConfig("epochs_per_batch, episodes_per_batch, hidden_dim must be >= 1")
        if self.lr_actor <= 0 or self.lr_critic <= 0 or self.entropy_coef < 0:
            raise InvalidConfig("bad learning rates or entropy coefficient")


@dataclass(frozen=True)
class TrajStep:
    """One decision with its behavior-policy bookkeeping frozen."""

    obs: np.ndarray
    action: int
    log_prob: float
    value: float
    mask: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[TrajStep, ...]
    terminal_reward: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise InvalidConfig("trajectory must be non-empty")


def _init_net(cls, rng: np.random.Generator, obs_dim: int, hidden: int, out: int) -> TwoLayerNet:
    return cls(
        w1=rng.normal(0.0, 1.0 / np.sqrt(obs_dim), size=(hidden, obs_dim)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(out, hidden)),
        b2=np.zeros(out),
    )


def init_agent(obs_dim: int, n_actions: int, cfg: PpoConfig) -> Agent:
    rng = np.random.default_rng(derive_seed(cfg.seed, "agent-init"))
    policy = _init_net(PolicyNet, rng, obs_dim, cfg.hidden_dim, n_actions)
    value = _init_net(ValueNet, rng, obs_dim, cfg.hidden_dim, 1)
    return Agent(policy, value)


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(log-probs, probs) with illegal entries at -inf / exactly 0."""
    if not np.isfinite(logits[mask]).all():
        raise NonFiniteLogits("policy produced non-finite logits")
    if not mask.any(axis=-1).all():
        raise AllMasked("no legal action")
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    expz = np.where(mask, np.exp(z - zmax), 0.0)
    total = expz.sum(axis=-1, keepdims=True)
    probs = expz / total
    with np.errstate(divide="ignore"):
        log_probs = np.where(mask, z - zmax - np.log(total), -np.inf)
    return log_probs, probs


def act(
    policy: PolicyNet,
    obs: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    greedy: bool = False,
) -> tuple[int, float, np.ndarray]:
    """Pick an action from the masked softmax; greedy takes the argmax.

    Exact probability ties in greedy mode resolve to the lowest index.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (policy.obs_dim,):
        raise ShapeMismatch(f"observation shape {obs.shape}, expected ({policy.obs_dim},)")
    logits = policy.forward(obs[None, :])[0]
    log_probs, probs = masked_log_softmax(logits, np.asarray(mask, dtype=bool))
    if greedy:
        action = int(np.argmax(probs))
    else:
        cdf = np.cumsum(probs)
        cdf[-1] = 1.0
        action = int(np.searchsorted(cdf, rng.random(), side="right"))
    return action, float(log_probs[action]), probs


def state_value(value: ValueNet, obs: np.ndarray) -> float:
    return float(value.forward(np.asarray(obs, dtype=np.float64)[None, :])[0, 0])


def advantage(traj: Trajectory) -> np.ndarray:
    """Terminal reward minus the behavior value, per step."""
    return np.asarray([traj.terminal_reward - s.value for s in traj.steps])


@dataclass
class _FlatBatch:
    obs: np.ndarray        # (S, obs_dim)
    actions: np.ndarray    # (S,)
    behavior_lp: np.ndarray
    masks: np.ndarray      # (S, A) bool
    advantages: np.ndarray
    rewards: np.ndarray    # terminal reward per step
    sizes: list[int] = field(default_factory=list)


def _flatten(batch: list[Trajectory]) -> _FlatBatch:
    if not batch:
        raise InvalidConfig("empty trajectory batch")
    obs, actions, lps, masks, advs, rewards, sizes = [], [], [], [], [], [], []
    for traj in batch:
        adv = advantage(traj)
        for s, a in zip(traj.steps, adv):
            obs.append(np.asarray(s.obs, dtype=np.float64))
            actions.append(s.action)
            lps.append(s.log_prob)
            masks.append(np.asarray(s.mask, dtype=bool))
            advs.append(a)
            rewards.append(traj.terminal_reward)
        sizes.append(len(traj.steps))
    return _FlatBatch(
        np.stack(obs), np.asarray(actions), np.asarray(lps),
        np.stack(masks), np.asarray(advs), np.asarray(rewards), sizes,
    )


def _policy_loss_grads(policy: PolicyNet, flat: _FlatBatch, cfg: PpoConfig) -> tuple[float, Grads]:
    x = flat.obs
    h = policy.hidden(x)
    logits = h @ policy.w2.T + policy.b2
    log_probs, probs = masked_log_softmax(logits, flat.masks)
    idx = np.arange(len(flat.actions))
    lp_a = log_probs[idx, flat.actions]

    ratio = np.exp(lp_a - flat.behavior_lp)
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    surr1 = ratio * flat.advantages
    surr2 = clipped * flat.advantages
    surrogate = np.minimum(surr1, surr2)

    # entropy over legal actions only; 0 * log 0 := 0
    plogp = np.where(probs > 0.0, probs * np.where(flat.masks, log_probs, 0.0), 0.0)
    entropy = -plogp.sum(axis=1)

    loss = float(-surrogate.sum() - cfg.entropy_coef * entropy.sum())
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"policy loss is {loss}")

    # d(-surrogate)/dlogits: gradient flows only through the active min
    # branch; the clipped branch is constant in the parameters.
    g_ratio = np.where(surr1 <= surr2, flat.advantages, 0.0)
    coef = -(g_ratio * ratio)  # d loss / d lp_a
    one_hot = np.zeros_like(probs)
    one_hot[idx, flat.actions] = 1.0
    dlogits = coef[:, None] * (one_hot - probs)
    # d(-c * H)/dlogits = c * p * (log p + H)
    ent_term = np.where(
        probs > 0.0,
        probs * (np.where(flat.masks, log_probs, 0.0) + entropy[:, None]),
        0.0,
    )
    dlogits += cfg.entropy_coef * ent_term

    dw2 = dlogits.T @ h
    db2 = dlogits.sum(axis=0)
    dh = (dlogits @ policy.w2) * (1.0 - h**2)
    dw1 = dh.T @ x
    db1 = dh.sum(axis=0)
    return loss, (dw1, db1, dw2, db2)


def ppo_loss(policy: PolicyNet, batch: list[Trajectory], cfg: PpoConfig) -> tuple[float, Grads]:
    """Clipped-surrogate loss (negated objective) and its analytic gradients."""
    return _policy_loss_grads(policy, _flatten(batch), cfg)


def critic_loss(value: ValueNet, batch: list[Trajectory]) -> tuple[float, Grads]:
    """Mean squared error of V(s) against the terminal reward, with gradients."""
    flat = _flatten(batch)
    x = flat.obs
    h = value.hidden(x)
    v = (h @ value.w2.T + value.b2)[:, 0]
    err = v - flat.rewards
    loss = float(np.mean(err**2))
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"critic loss is {loss}")
    dv = (2.0 / len(err)) * err
    dw2 = dv[None, :] @ h
    db2 = np.asarray([dv.sum()])
    dh = np.outer(dv, value.w2[0]) * (1.0 - h**2)
    dw1 = dh.T @ x
    db1 = dh.sum(axis=0)
    return loss, (dw1, db1, dw2, db2)


def update(agent: Agent, batch: list[Trajectory], cfg: PpoConfig) -> tuple[Agent, dict]:
    """epochs_per_batch alternating actor/critic descent steps on one batch."""
    policy, value = agent.policy, agent.value
    actor_losses, critic_losses = [], []
    for _ in range(cfg.epochs_per_batch):
        a_loss, a_grads = ppo_loss(policy, batch, cfg)
        policy = policy.stepped(a_grads, cfg.lr_actor)
        c_loss, c_grads = critic_loss(value, batch)
        value = value.stepped(c_grads, cfg.lr_critic)
        actor_losses.append(a_loss)
        critic_losses.append(c_loss)
    return Agent(policy, value), {"actor_loss": actor_losses, "critic_loss": critic_losses}


# --- agent checkpointing (reuses the model checkpoint format) ----------------

def _net_groups(prefix: str, net: TwoLayerNet) -> list[ParamGroup]:
    l1 = np.concatenate([net.w1, net.b1[:, None]], axis=1)
    l2 = np.concatenate([net.w2, net.b2[:, None]], axis=1)
    return [
        ParamGroup(f"{prefix}_l1", l1.shape, l1.astype(np.float32).reshape(-1)),
        ParamGroup(f"{prefix}_l2", l2.shape, l2.astype(np.float32).reshape(-1)),
    ]


def save_agent(agent: Agent, path: str | Path) -> None:
    """Store actor and critic as named groups (float32 on disk)."""
    from .params import save_checkpoint

    arch_id = f"ppo-agent/o{agent.policy.obs_dim}a{agent.policy.out_dim}h{agent.policy.w1.shape[0]}"
    groups = _net_groups("actor", agent.policy) + _net_groups("critic", agent.value)
    save_checkpoint(Checkpoint(arch_id, tuple(groups)), path)


def load_agent(path: str | Path) -> Agent:
    from .params import load_checkpoint

    ckpt = load_checkpoint(path)
    by_name = {g.name: g.as_matrix().astype(np.float64) for g in ckpt.groups}
    try:
        nets = {}
        for prefix, cls in (("actor", PolicyNet), ("critic", ValueNet)):
            l1, l2 = by_name[f"{prefix}_l1"], by_name[f"{prefix}_l2"]
            nets[prefix] = cls(l1[:, :-1], l1[:, -1], l2[:, :-1], l2[:, -1])
    except KeyError as exc:
        raise ShapeMismatch(f"{path}: not an agent checkpoint, missing {exc}") from exc
    return Agent(nets["actor"], nets["critic"])
