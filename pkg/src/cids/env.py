"""Synthetic factored recommender MDP with known causal structure.

Each next-state dimension follows

    s^j_{t+1} = tanh(sum_i W_s[i, j] M_ss[i, j] s^i_t + sum_k W_a[k, j] M_as[j] a^k_t) + eps_j

with ``eps_j ~ N(0, noise_sigma^2)``. The reward is a clipped linear read-out of
the next state restricted to the action-influenced dims. Also here: trajectory
logging, the line-oriented log format, exact tabular SCMs for
conditional-independence checks, and the CTR metric.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import re
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .causal_graph import JointTable, NodeRef, build_temporal_dag, cmi_from_joint, d_separated
from .exceptions import ConfigError, DataError, FingerprintMismatchWarning, LogParseError, StructuralAssumptionError
from .structures import StructureMasks

LOG_MAGIC = "cids-log v1"
CONFIG_KEYS = (
    "d",
    "action_dim",
    "masks",
    "weights_s",
    "weights_a",
    "noise_sigma",
    "reward_weights",
    "episode_length",
    "max_reward",
    "seed",
)


@dataclass(eq=False)
class EnvConfig:
    d: int
    action_dim: int
    masks: StructureMasks
    weights_s: np.ndarray
    weights_a: np.ndarray
    noise_sigma: float
    reward_weights: np.ndarray
    episode_length: int
    max_reward: float
    seed: int = 0

    def __post_init__(self):
        try:
            if not isinstance(self.masks, StructureMasks):
                self.masks = StructureMasks.from_dict(self.masks)
        except StructuralAssumptionError as exc:
            raise ConfigError(str(exc)) from exc
        self.weights_s = np.asarray(self.weights_s, dtype=np.float64)
        self.weights_a = np.asarray(self.weights_a, dtype=np.float64).reshape(self.action_dim, -1)
        self.reward_weights = np.asarray(self.reward_weights, dtype=np.float64).reshape(-1)
        self.validate()

    def validate(self) -> None:
        d, k = self.d, self.action_dim
        if d < 1 or k < 1:
            raise ConfigError("d and action_dim must be >= 1")
        if self.masks.d != d:
            raise ConfigError(f"masks are {self.masks.d}-dimensional, config says d={d}")
        if self.weights_s.shape != (d, d) or self.weights_a.shape != (k, d) or self.reward_weights.shape != (d,):
            raise ConfigError("weight shapes do not match d/action_dim")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be positive")
        if not self.max_reward > 0:
            raise ConfigError("max_reward must be positive")
        if self.episode_length < 1:
            raise ConfigError("episode_length must be >= 1")
        off_dais = (self.reward_weights != 0) & (self.masks.m_a_to_s == 0)
        if off_dais.any():
            raise ConfigError(f"reward weights on non-DAIS dims {np.flatnonzero(off_dais).tolist()}")
        for name in ("weights_s", "weights_a", "reward_weights"):
            if not np.isfinite(getattr(self, name)).all():
                raise ConfigError(f"{name} has non-finite entries")

    def to_dict(self) -> dict:
        return {
            "d": int(self.d),
            "action_dim": int(self.action_dim),
            "masks": self.masks.to_dict(),
            "weights_s": self.weights_s.tolist(),
            "weights_a": self.weights_a.tolist(),
            "noise_sigma": float(self.noise_sigma),
            "reward_weights": self.reward_weights.tolist(),
            "episode_length": int(self.episode_length),
            "max_reward": float(self.max_reward),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        keys = set(data)
        if keys != set(CONFIG_KEYS):
            missing = sorted(set(CONFIG_KEYS) - keys)
            extra = sorted(keys - set(CONFIG_KEYS))
            raise ConfigError(f"env config keys mismatch: missing {missing}, unexpected {extra}")
        return cls(**data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, EnvConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def save_config(path, config: EnvConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config.dumps())


def load_config(path) -> EnvConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not a valid env config ({exc})") from exc
    return EnvConfig.from_dict(data)


class CausalRecEnv:
    """Stateful simulator for one ``EnvConfig``; owns its RNG."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        ss = config.masks.m_s_to_s
        self._ws = config.weights_s * ss
        self._wa = config.weights_a * config.masks.m_a_to_s[None, :]
        self.state: Optional[np.ndarray] = None
        self.t = 0

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def action_dim(self) -> int:
        return self.config.action_dim

    @property
    def max_reward(self) -> float:
        return self.config.max_reward

    @property
    def episode_length(self) -> int:
        return self.config.episode_length

    def ground_truth_masks(self) -> StructureMasks:
        return self.config.masks

    def reseed(self, seed: int) -> None:
        self._rng = np.random.default_rng(seed)

    def reset(self) -> np.ndarray:
        self.state = self._rng.uniform(-1.0, 1.0, size=self.d)
        self.t = 0
        return self.state.copy()

    def mean_next_state(self, state, action) -> np.ndarray:
        return np.tanh(state @ self._ws + action @ self._wa)

    def reward(self, next_state) -> float:
        r = float(next_state @ self.config.reward_weights)
        return float(np.clip(r, -self.max_reward, self.max_reward))

    def step(self, action):
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        if self.t >= self.episode_length:
            raise RuntimeError("episode has terminated; call reset()")
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape[0] != self.action_dim:
            raise ValueError(f"action has {action.shape[0]} dims, env expects {self.action_dim}")
        noise = self._rng.normal(0.0, self.config.noise_sigma, size=self.d)
        nxt = self.mean_next_state(self.state, action) + noise
        r = self.reward(nxt)
        self.state = nxt
        self.t += 1
        return nxt.copy(), r, self.t >= self.episode_length


def make_env(config: EnvConfig) -> CausalRecEnv:
    config.validate()
    return CausalRecEnv(config)


# -- trajectory logs --------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    s_t: np.ndarray
    a_t: np.ndarray
    s_next: np.ndarray
    r_t: float
    done: bool


@dataclass(eq=False)
class TrajectoryLog:
    """Column-stored transitions; ``episode``/``t`` mark episode boundaries."""

    d: int
    action_dim: int
    fingerprint: str
    episode: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    states: Optional[np.ndarray] = None
    actions: Optional[np.ndarray] = None
    next_states: Optional[np.ndarray] = None
    rewards: np.ndarray = field(default_factory=lambda: np.zeros(0))
    done: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        n = len(self.episode)
        if self.states is None:
            self.states = np.zeros((n, self.d))
        if self.actions is None:
            self.actions = np.zeros((n, self.action_dim))
        if self.next_states is None:
            self.next_states = np.zeros((n, self.d))

    def __len__(self):
        return len(self.episode)

    def __iter__(self):
        for i in range(len(self)):
            yield Transition(self.states[i], self.actions[i], self.next_states[i], float(self.rewards[i]), bool(self.done[i]))

    def __eq__(self, other):
        if not isinstance(other, TrajectoryLog):
            return NotImplemented
        return (
            (self.d, self.action_dim, self.fingerprint) == (other.d, other.action_dim, other.fingerprint)
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("episode", "t", "states", "actions", "next_states", "rewards", "done")
            )
        )

    @property
    def n_episodes(self) -> int:
        return len(np.unique(self.episode))

    def episode_returns(self) -> np.ndarray:
        eps = np.unique(self.episode)
        return np.array([self.rewards[self.episode == e].sum() for e in eps])

    def consecutive_pairs(self) -> np.ndarray:
        """Indices ``i`` such that transitions ``i`` and ``i + 1`` are consecutive in one episode."""
        same = (self.episode[1:] == self.episode[:-1]) & (self.t[1:] == self.t[:-1] + 1)
        return np.flatnonzero(same)


def collect(
    env: CausalRecEnv,
    behavior_policy: Optional[Callable] = None,
    episodes: int = 1,
    epsilon: float = 0.3,
    seed: Optional[int] = None,
) -> TrajectoryLog:
    """Roll out ``episodes`` episodes and log every transition.

    Without a ``behavior_policy`` actions are uniform on ``[-1, 1]^k``. With one,
    each step takes a uniform action with probability ``epsilon`` and
    ``behavior_policy(state, rng)`` otherwise.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(env.config.seed + 1_000_003 if seed is None else seed)
    n = episodes * env.episode_length
    d, k = env.d, env.action_dim
    ep = np.zeros(n, dtype=np.int64)
    tt = np.zeros(n, dtype=np.int64)
    S = np.zeros((n, d))
    A = np.zeros((n, k))
    S1 = np.zeros((n, d))
    R = np.zeros(n)
    D = np.zeros(n, dtype=bool)
    i = 0
    for e in range(episodes):
        s = env.reset()
        done = False
        step = 0
        while not done:
            if behavior_policy is None or rng.random() < epsilon:
                a = rng.uniform(-1.0, 1.0, size=k)
            else:
                a = np.asarray(behavior_policy(s, rng), dtype=np.float64).reshape(k)
            s1, r, done = env.step(a)
            ep[i], tt[i], S[i], A[i], S1[i], R[i], D[i] = e, step, s, a, s1, r, done
            s = s1
            step += 1
            i += 1
    return TrajectoryLog(d, k, env.config.fingerprint(), ep, tt, S, A, S1, R, D)


def uniform_policy(k: int):
    return lambda s, rng: rng.uniform(-1.0, 1.0, size=k)


def binary_policy(k: int):
    """Actions drawn uniformly from ``{-1, +1}^k``."""
    return lambda s, rng: rng.choice([-1.0, 1.0], size=k)


def merge_logs(logs: Sequence[TrajectoryLog]) -> TrajectoryLog:
    """Concatenate worker logs in the given order, renumbering episodes."""
    if not logs:
        raise ValueError("nothing to merge")
    first = logs[0]
    parts, offset = [], 0
    for log in logs:
        if (log.d, log.action_dim, log.fingerprint) != (first.d, first.action_dim, first.fingerprint):
            raise DataError("cannot merge logs from different environments")
        parts.append(log.episode + offset)
        offset = parts[-1].max() + 1 if len(log) else offset
    cat = lambda f: np.concatenate([getattr(l, f) for l in logs])
    return TrajectoryLog(
        first.d,
        first.action_dim,
        first.fingerprint,
        np.concatenate(parts),
        cat("t"),
        cat("states"),
        cat("actions"),
        cat("next_states"),
        cat("rewards"),
        cat("done"),
    )


def _vec(values) -> str:
    return "[" + ",".join("%.17g" % v for v in values) + "]"


def dumps_log(log: TrajectoryLog) -> str:
    out = [f"# {LOG_MAGIC} d={log.d} adim={log.action_dim} fingerprint={log.fingerprint}"]
    for i in range(len(log)):
        out.append(
            f"ep={log.episode[i]} t={log.t[i]} s={_vec(log.states[i])} a={_vec(log.actions[i])} "
            f"s1={_vec(log.next_states[i])} r={'%.17g' % log.rewards[i]} done={int(log.done[i])}"
        )
    return "\n".join(out) + "\n"


def write_log(path, log: TrajectoryLog) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_log(log))


_HEADER_RE = re.compile(r"^# cids-log v1 d=(\d+) adim=(\d+) fingerprint=([0-9a-f]+)$")
_RECORD_RE = re.compile(
    r"^ep=(\d+) t=(\d+) s=\[([^\]]*)\] a=\[([^\]]*)\] s1=\[([^\]]*)\] r=(\S+) done=([01])$"
)


def _floats(text: str, n: int) -> List[float]:
    vals = [float(x) for x in text.split(",")] if text else []
    if len(vals) != n:
        raise ValueError(f"expected {n} values, got {len(vals)}")
    return vals


def loads_log(text: str, config: Optional[EnvConfig] = None) -> TrajectoryLog:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise LogParseError("empty log", line=1, last_good_line=0)
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise LogParseError(f"line 1: bad header {lines[0]!r}", line=1, last_good_line=0)
    d, k, fp = int(m.group(1)), int(m.group(2)), m.group(3)
    n = len(lines) - 1
    ep = np.zeros(n, dtype=np.int64)
    tt = np.zeros(n, dtype=np.int64)
    S, A, S1 = np.zeros((n, d)), np.zeros((n, k)), np.zeros((n, d))
    R = np.zeros(n)
    D = np.zeros(n, dtype=bool)
    for i, ln in enumerate(lines[1:]):
        lineno = i + 2
        rec = _RECORD_RE.match(ln)
        try:
            if not rec:
                raise ValueError("record does not match 'ep= t= s=[] a=[] s1=[] r= done='")
            ep[i], tt[i] = int(rec.group(1)), int(rec.group(2))
            S[i] = _floats(rec.group(3), d)
            A[i] = _floats(rec.group(4), k)
            S1[i] = _floats(rec.group(5), d)
            R[i] = float(rec.group(6))
            D[i] = rec.group(7) == "1"
        except ValueError as exc:
            raise LogParseError(
                f"line {lineno}: {exc} (last good line {lineno - 1})", line=lineno, last_good_line=lineno - 1
            ) from exc
    if config is not None and config.fingerprint() != fp:
        warnings.warn(
            f"log fingerprint {fp} does not match env config fingerprint {config.fingerprint()}",
            FingerprintMismatchWarning,
            stacklevel=3,
        )
    return TrajectoryLog(d, k, fp, ep, tt, S, A, S1, R, D)


def read_log(path, config: Optional[EnvConfig] = None) -> TrajectoryLog:
    with open(path, encoding="utf-8") as fh:
        return loads_log(fh.read(), config)


# -- metrics ----------------------------------------------------------------------


def ctr(episode_return: float, episode_length: int, max_reward: float) -> float:
    """Episode return normalized by the best achievable return."""
    if not max_reward > 0:
        raise ValueError("max_reward must be positive")
    if episode_length < 1:
        raise ValueError("episode_length must be >= 1")
    return episode_return / (episode_length * max_reward)


# -- exact tabular SCMs -------------------------------------------------------------


def tabular_variables(d: int):
    """Axis labels of ``tabular_scm`` tables: ``s_0`` dims, ``a_0``, then ``s_1`` dims."""
    return (
        tuple(NodeRef.state(j, 0) for j in range(d))
        + (NodeRef.action(0),)
        + tuple(NodeRef.state(j, 1) for j in range(d))
    )


def _draw_joint(d: int, masks: StructureMasks, arity: int, rng: np.random.Generator) -> np.ndarray:
    n_vars = 2 * d + 1
    joint = np.ones((arity,) * n_vars)
    # independent roots: s_0 dims and a_0
    for axis in range(d + 1):
        p = rng.dirichlet(np.ones(arity))
        shape = [1] * n_vars
        shape[axis] = arity
        joint = joint * p.reshape(shape)
    for j in range(d):
        parents = [i for i in range(d) if masks.m_s_to_s[i, j]]
        if masks.m_a_to_s[j]:
            parents.append(d)
        cpt = rng.dirichlet(np.ones(arity), size=(arity,) * len(parents))
        shape = [1] * n_vars
        for pa in parents:
            shape[pa] = arity
        shape[d + 1 + j] = arity
        joint = joint * cpt.reshape(shape)
    return joint


def ci_triples(n_vars: int):
    """All ``(x, y, Z)`` with ``x < y`` and ``Z`` a subset of the other variables."""
    for x, y in itertools.combinations(range(n_vars), 2):
        rest = [v for v in range(n_vars) if v not in (x, y)]
        for r in range(len(rest) + 1):
            for z in itertools.combinations(rest, r):
                yield x, y, z


def tabular_scm(d: int, masks: StructureMasks, arity: int = 2, seed=0, tol: float = 1e-9, max_tries: int = 100) -> JointTable:
    """Exact joint over ``(s_t, a_t, s_{t+1})`` for random CPTs consistent with ``masks``.

    Parameters are redrawn until every d-connected pair of variables has
    conditional mutual information of at least ``tol`` (faithfulness guard).
    """
    if d > 3 or arity > 3:
        raise ConfigError("tabular SCMs support d <= 3 and arity <= 3")
    if d < 1 or arity < 2:
        raise ConfigError("need d >= 1 and arity >= 2")
    if arity ** (2 * d + 1) > 10**6:
        raise ConfigError("joint table would exceed 1e6 entries")
    if masks.d != d:
        raise ConfigError("masks dimension differs from d")
    rng = np.random.default_rng(seed)
    labels = tabular_variables(d)
    g = build_temporal_dag(masks, 2)
    connected = [
        (x, y, z)
        for x, y, z in ci_triples(len(labels))
        if not d_separated(g, {labels[x]}, {labels[y]}, {labels[v] for v in z})
    ]
    for _ in range(max_tries):
        joint = _draw_joint(d, masks, arity, rng)
        joint = joint / joint.sum()
        table = JointTable(joint, labels)
        if all(cmi_from_joint(table, [x], [y], z) >= tol for x, y, z in connected):
            return table
    raise DataError(f"no faithful parameterization found in {max_tries} draws")


def generate_config(
    d: int = 8,
    n_dais: int = 3,
    n_aia_edges: int = 2,
    action_dim: int = 2,
    noise_sigma: float = 0.1,
    episode_length: int = 20,
    seed: int = 0,
) -> EnvConfig:
    """Random environment with ``n_dais`` action-influenced dims and ``n_aia_edges``
    cross edges, each from a distinct non-DAIS dim into a DAIS dim.

    DAIS dims receive action weights of alternating sign so the best action
    depends on the state; the reward sums the DAIS dims with positive weights.
    """
    if not 0 <= n_dais <= d:
        raise ConfigError(f"cannot place {n_dais} DAIS dims in d={d}")
    if n_aia_edges > d - n_dais:
        raise ConfigError(f"need {n_aia_edges} non-DAIS source dims, only {d - n_dais} available")
    if n_aia_edges > 0 and n_dais == 0:
        raise ConfigError("AIA edges need at least one DAIS dim to point into")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(d)
    dais = np.sort(perm[:n_dais])
    others = perm[n_dais:]
    sources = np.sort(others[:n_aia_edges])
    m_a = np.zeros(d, dtype=np.int64)
    m_a[dais] = 1
    m_s = np.eye(d, dtype=np.int64)
    weights_s = np.diag(rng.uniform(0.3, 0.8, size=d) * rng.choice([-1.0, 1.0], size=d))
    for n, src in enumerate(sources):
        dst = dais[n % n_dais]
        m_s[src, dst] = 1
        weights_s[src, dst] = rng.uniform(0.8, 1.2) * rng.choice([-1.0, 1.0])
    weights_a = np.zeros((action_dim, d))
    for n, j in enumerate(dais):
        sign = 1.0 if n % 2 == 0 else -1.0
        weights_a[:, j] = sign * rng.uniform(0.6, 1.2, size=action_dim)
    reward_weights = np.zeros(d)
    reward_weights[dais] = rng.uniform(0.5, 1.5, size=n_dais)
    max_reward = float(max(reward_weights.sum(), 1.0))
    return EnvConfig(
        d=d,
        action_dim=action_dim,
        masks=StructureMasks(m_s, m_a),
        weights_s=weights_s,
        weights_a=weights_a,
        noise_sigma=noise_sigma,
        reward_weights=reward_weights,
        episode_length=episode_length,
        max_reward=max_reward,
        seed=seed,
    )


def copy_config(
    d: int = 2,
    gain: float = 3.0,
    noise_sigma: float = 0.05,
    effect: bool = True,
    episode_length: int = 20,
    seed: int = 0,
) -> EnvConfig:
    """Calibration env: dim 0 copies a scalar action, ``s^0' = tanh(gain * a) + eps``.

    Under a uniform binary action ``a in {-1, +1}`` the two outcomes are far apart
    relative to the noise, so ``I(s^0'; a | s) = ln 2``. With ``effect=False`` the
    action edge is removed and every dim is pure self-driven noise (true CMI 0).
    The remaining dims are decoys with weak self-dynamics.
    """
    if d < 1:
        raise ConfigError("d must be >= 1")
    m_a = np.zeros(d, dtype=np.int64)
    weights_a = np.zeros((1, d))
    reward_weights = np.zeros(d)
    if effect:
        m_a[0] = 1
        weights_a[0, 0] = gain
        reward_weights[0] = 1.0
    weights_s = np.diag(np.r_[0.0, np.full(d - 1, 0.5)])
    return EnvConfig(
        d=d,
        action_dim=1,
        masks=StructureMasks(np.eye(d, dtype=np.int64), m_a),
        weights_s=weights_s,
        weights_a=weights_a,
        noise_sigma=noise_sigma,
        reward_weights=reward_weights,
        episode_length=episode_length,
        max_reward=1.0,
        seed=seed,
    )
