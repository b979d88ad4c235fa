"""DDPG actor-critic trained on masked states, with state-selector ablations.

The selector zeroes the dimensions it excludes (rather than dropping them) so
every mode uses networks of the same shape. Both the current and the next state
are masked before they enter the replay buffer.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_states
from .env import CausalRecEnv, ctr
from .exceptions import ConfigError, DegenerateMaskWarning
from .nn import Adam, DenseNet, init_mlp, load_checkpoint, save_checkpoint, soft_update
from .structures import StructureMasks, compose_cids_mask

__all__ = [
    "MODES",
    "PolicyConfig",
    "StateSelector",
    "ReplayBuffer",
    "PolicyBundle",
    "aia_vector",
    "compose_cids_mask",
    "select_state",
    "act",
    "ddpg_update",
    "train_policy",
    "evaluate",
    "CURVE_COLUMNS",
    "curve_csv",
    "save_policy",
    "load_policy",
    "DDPGRecommender",
]

MODES = ("FULL", "DAIS", "AIA", "CIDS")
CURVE_COLUMNS = ("episode", "return", "ctr", "critic_loss", "selector_mode", "seed")


@dataclass
class PolicyConfig:
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    gamma: float = 0.95
    tau: float = 0.001
    hidden: int = 128
    hidden_layers: int = 2
    buffer_capacity: int = 1_000_000
    batch_size: int = 64
    exploration_noise_sigma: float = 0.1
    warmup_steps: int = 1000
    episodes: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")
        if self.buffer_capacity < 1 or self.batch_size < 1 or self.episodes < 1:
            raise ConfigError("buffer_capacity, batch_size and episodes must be positive")
        if self.exploration_noise_sigma < 0 or self.warmup_steps < 0:
            raise ConfigError("exploration_noise_sigma and warmup_steps must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# -- state selection --------------------------------------------------------------


def aia_vector(masks: StructureMasks) -> np.ndarray:
    """Dims with an off-diagonal edge into some action-influenced dim."""
    ss = masks.m_s_to_s.copy()
    np.fill_diagonal(ss, 0)
    return (ss @ masks.m_a_to_s > 0).astype(np.int64)


@dataclass(frozen=True, eq=False)
class StateSelector:
    """Binary mask over state dims tagged with the ablation mode that produced it."""

    mode: str
    mask: np.ndarray

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown selector mode {self.mode!r}; expected one of {MODES}")
        m = np.array(self.mask, dtype=np.int64).reshape(-1)
        if not np.isin(m, (0, 1)).all():
            raise ConfigError("selector mask entries must be 0 or 1")
        if self.mode == "FULL" and not m.all():
            raise ConfigError("FULL selector must keep every dim")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def d(self) -> int:
        return self.mask.shape[0]

    @classmethod
    def full(cls, d: int) -> "StateSelector":
        return cls("FULL", np.ones(d, dtype=np.int64))

    @classmethod
    def from_masks(cls, mode: str, masks: StructureMasks) -> "StateSelector":
        """FULL keeps all dims, DAIS the action-influenced dims, AIA only their
        non-DAIS parents, CIDS the union of DAIS and AIA."""
        mode = mode.upper()
        if mode == "FULL":
            return cls.full(masks.d)
        if mode == "DAIS":
            return cls(mode, masks.m_a_to_s)
        if mode == "AIA":
            return cls(mode, aia_vector(masks) * (1 - masks.m_a_to_s))
        if mode == "CIDS":
            return cls(mode, compose_cids_mask(masks))
        raise ConfigError(f"unknown selector mode {mode!r}; expected one of {MODES}")

    def is_degenerate(self) -> bool:
        return not self.mask.any()

    def __eq__(self, other):
        if not isinstance(other, StateSelector):
            return NotImplemented
        return self.mode == other.mode and np.array_equal(self.mask, other.mask)

    def __repr__(self):
        return f"StateSelector(mode={self.mode!r}, mask={self.mask.tolist()})"


def select_state(s, selector: StateSelector) -> np.ndarray:
    """Elementwise product of ``s`` (a vector or a batch of rows) with the selector mask."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != selector.d:
        raise ValueError(f"state has {s.shape[-1]} dims, selector expects {selector.d}")
    return s * selector.mask


# -- replay buffer -----------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity FIFO ring buffer of (s, a, r, s', done) rows.

    Storage grows geometrically up to ``capacity`` so a large nominal capacity
    does not allocate memory that is never used.
    """

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.size = 0
        self.cursor = 0
        self._alloc(min(self.capacity, 1024))

    def _alloc(self, n: int) -> None:
        old = getattr(self, "states", None)
        new = {
            "states": np.zeros((n, self.state_dim)),
            "actions": np.zeros((n, self.action_dim)),
            "rewards": np.zeros(n),
            "next_states": np.zeros((n, self.state_dim)),
            "dones": np.zeros(n, dtype=bool),
        }
        if old is not None:
            for name, arr in new.items():
                arr[: self.size] = getattr(self, name)[: self.size]
        for name, arr in new.items():
            setattr(self, name, arr)

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s1, done) -> None:
        if self.size == len(self.states) and self.size < self.capacity:
            self._alloc(min(2 * self.size, self.capacity))
        i = self.cursor
        self.states[i] = s
        self.actions[i] = a
        self.rewards[i] = r
        self.next_states[i] = s1
        self.dones[i] = done
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform sample without replacement within the batch."""
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} rows from a buffer of {self.size}")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.dones[idx]


# -- networks ---------------------------------------------------------------------


@dataclass
class PolicyBundle:
    actor: DenseNet
    critic: DenseNet
    actor_target: DenseNet
    critic_target: DenseNet
    buffer: ReplayBuffer
    selector: StateSelector
    config: PolicyConfig
    actor_opt: Adam = field(repr=False, default=None)
    critic_opt: Adam = field(repr=False, default=None)

    @classmethod
    def init(cls, selector: StateSelector, action_dim: int, config: PolicyConfig) -> "PolicyBundle":
        seeds = np.random.SeedSequence(config.seed).generate_state(2)
        d = selector.d
        actor = init_mlp(d, action_dim, config.hidden, config.hidden_layers, seed=int(seeds[0]))
        critic = init_mlp(d + action_dim, 1, config.hidden, config.hidden_layers, seed=int(seeds[1]))
        return cls(
            actor,
            critic,
            actor.copy(),
            critic.copy(),
            ReplayBuffer(config.buffer_capacity, d, action_dim),
            selector,
            config,
            Adam(actor.params, config.actor_lr),
            Adam(critic.params, config.critic_lr),
        )


def _policy(actor: DenseNet, x: np.ndarray) -> np.ndarray:
    return np.tanh(actor.forward(x))


def act(actor: DenseNet, masked_state, noise_sigma: float = 0.0, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Squashed actor output plus Gaussian exploration noise, clipped to ``[-1, 1]``."""
    x = np.asarray(masked_state, dtype=np.float64)
    a = _policy(actor, x[None, :] if x.ndim == 1 else x)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("exploration noise needs an rng")
        a = a + rng.normal(0.0, noise_sigma, size=a.shape)
    a = np.clip(a, -1.0, 1.0)
    return a[0] if x.ndim == 1 else a


def ddpg_update(bundle: PolicyBundle, batch, config: Optional[PolicyConfig] = None):
    """One critic step, one actor step, then soft target updates.

    ``batch`` is ``(s, a, r, s', done)`` with already-masked states. The TD target
    bootstraps through episode ends because they are time limits, not terminal
    states. Returns ``(critic_loss, actor_objective)`` measured before the step.
    """
    config = bundle.config if config is None else config
    s, a, r, s1, _ = batch
    n = len(r)

    a1 = _policy(bundle.actor_target, s1)
    q1 = bundle.critic_target.forward(np.concatenate([s1, a1], axis=1))[:, 0]
    y = r + config.gamma * q1

    q = bundle.critic.forward(np.concatenate([s, a], axis=1))[:, 0]
    err = q - y
    critic_loss = float(np.mean(err**2))
    grads, _ = bundle.critic.backward((2.0 * err / n)[:, None])
    bundle.critic_opt.step(grads)

    pre = bundle.actor.forward(s)
    pi = np.tanh(pre)
    q_pi = bundle.critic.forward(np.concatenate([s, pi], axis=1))
    actor_objective = float(q_pi.mean())
    _, dx = bundle.critic.backward(np.full((n, 1), -1.0 / n))
    d_pre = dx[:, s.shape[1] :] * (1.0 - pi**2)
    grads, _ = bundle.actor.backward(d_pre)
    bundle.actor_opt.step(grads)

    soft_update(bundle.critic_target, bundle.critic, config.tau)
    soft_update(bundle.actor_target, bundle.actor, config.tau)
    return critic_loss, actor_objective


# -- training and evaluation ------------------------------------------------------


def train_policy(
    env: CausalRecEnv,
    selector: StateSelector,
    config: PolicyConfig,
    callback: Optional[Callable] = None,
):
    """Train a DDPG policy on ``selector``-masked states.

    The environment is reseeded from ``config.seed`` so that runs with different
    selectors but the same seed see the same initial states and noise stream
    until their actions diverge. Returns ``(bundle, curve)`` where ``curve`` holds
    one record per episode.
    """
    if selector.d != env.d:
        raise ValueError(f"selector covers {selector.d} dims, env has {env.d}")
    if selector.is_degenerate():
        raise ConfigError("selector keeps no state dims; fall back to the FULL selector first")
    env.reseed(config.seed)
    rng = np.random.default_rng([config.seed, 0x5eed])
    bundle = PolicyBundle.init(selector, env.action_dim, config)
    curve: List[dict] = []
    steps = 0
    for episode in range(config.episodes):
        s = select_state(env.reset(), selector)
        ep_return = 0.0
        losses = []
        done = False
        while not done:
            if steps < config.warmup_steps:
                a = rng.uniform(-1.0, 1.0, size=env.action_dim)
            else:
                a = act(bundle.actor, s, config.exploration_noise_sigma, rng)
            s1_raw, r, done = env.step(a)
            s1 = select_state(s1_raw, selector)
            bundle.buffer.add(s, a, r, s1, done)
            ep_return += r
            steps += 1
            if steps >= config.warmup_steps and len(bundle.buffer) >= config.batch_size:
                loss, _ = ddpg_update(bundle, bundle.buffer.sample(config.batch_size, rng), config)
                losses.append(loss)
            s = s1
        record = {
            "episode": episode,
            "return": ep_return,
            "ctr": ctr(ep_return, env.episode_length, env.max_reward),
            "critic_loss": float(np.mean(losses)) if losses else float("nan"),
            "selector_mode": selector.mode,
            "seed": config.seed,
        }
        curve.append(record)
        if callback is not None:
            callback(record, bundle)
    return bundle, curve


def evaluate(env: CausalRecEnv, actor: DenseNet, selector: StateSelector, episodes: int = 20, seed: int = 0) -> dict:
    """Greedy rollouts on a reseeded copy of ``env``; mean/std of return and CTR."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = copy.deepcopy(env)
    env.reseed(seed)
    returns = np.zeros(episodes)
    for e in range(episodes):
        s = env.reset()
        done = False
        while not done:
            s, r, done = env.step(act(actor, select_state(s, selector)))
            returns[e] += r
    ctrs = np.array([ctr(x, env.episode_length, env.max_reward) for x in returns])
    return {
        "return_mean": float(returns.mean()),
        "return_std": float(returns.std()),
        "ctr_mean": float(ctrs.mean()),
        "ctr_std": float(ctrs.std()),
        "episodes": episodes,
    }


def curve_csv(curve: List[dict]) -> str:
    lines = [",".join(CURVE_COLUMNS)]
    for rec in curve:
        lines.append(
            f"{rec['episode']},{rec['return']!r},{rec['ctr']!r},{rec['critic_loss']!r},{rec['selector_mode']},{rec['seed']}"
        )
    return "\n".join(lines) + "\n"


def save_policy(path, bundle: PolicyBundle) -> None:
    """Write actor, critic and their targets as a ``cids-ckpt v1`` checkpoint."""
    save_checkpoint(
        path,
        {
            "actor": bundle.actor,
            "critic": bundle.critic,
            "actor_target": bundle.actor_target,
            "critic_target": bundle.critic_target,
        },
    )


def load_policy(path) -> dict:
    nets = load_checkpoint(path)
    missing = {"actor", "critic"} - set(nets)
    if missing:
        raise ValueError(f"checkpoint lacks networks {sorted(missing)}")
    return nets


# -- estimator ----------------------------------------------------------------------


class DDPGRecommender(BaseEstimator):
    """Estimator wrapper: ``fit(env, masks=...)`` trains, ``predict(states)`` acts greedily.

    Parameters mirror :class:`PolicyConfig` plus the selector ``mode``. When a
    structured mode is requested but the resulting mask is empty, the estimator
    falls back to the full state and emits a :class:`DegenerateMaskWarning`.
    """

    def __init__(
        self,
        mode="CIDS",
        actor_lr=1e-4,
        critic_lr=1e-3,
        gamma=0.95,
        tau=0.001,
        hidden=128,
        hidden_layers=2,
        buffer_capacity=1_000_000,
        batch_size=64,
        exploration_noise_sigma=0.1,
        warmup_steps=1000,
        episodes=500,
        seed=0,
    ):
        self.mode = mode
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.gamma = gamma
        self.tau = tau
        self.hidden = hidden
        self.hidden_layers = hidden_layers
        self.buffer_capacity = buffer_capacity
        self.batch_size = batch_size
        self.exploration_noise_sigma = exploration_noise_sigma
        self.warmup_steps = warmup_steps
        self.episodes = episodes
        self.seed = seed

    def _config(self) -> PolicyConfig:
        params = self.get_params()
        params.pop("mode")
        return PolicyConfig(**params)

    def fit(self, env: CausalRecEnv, y=None, masks: Optional[StructureMasks] = None):
        if self.mode == "FULL":
            selector = StateSelector.full(env.d)
        else:
            if masks is None:
                raise ValueError(f"mode {self.mode!r} needs structure masks")
            selector = StateSelector.from_masks(self.mode, masks)
            if selector.is_degenerate():
                warnings.warn(
                    f"{self.mode} selector is empty; falling back to the full state", DegenerateMaskWarning, stacklevel=2
                )
                selector = StateSelector.full(env.d)
        self.bundle_, self.curve_ = train_policy(env, selector, self._config())
        self.selector_ = selector
        self.n_features_in_ = env.d
        return self

    def predict(self, X) -> np.ndarray:
        X = check_states(X, self.n_features_in_)
        return act(self.bundle_.actor, select_state(X, self.selector_))

    def score(self, env: CausalRecEnv, y=None, episodes: int = 20) -> float:
        """Mean greedy CTR."""
        return evaluate(env, self.bundle_.actor, self.selector_, episodes, seed=self.seed)["ctr_mean"]
