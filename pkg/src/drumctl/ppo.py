"""Proximal policy optimisation with a Gaussian MLP policy, written on numpy.

The actor and critic are separate two-hidden-layer tanh networks; the
policy's log standard deviation is a free, state-independent parameter.
Gradients are derived by hand (see :func:`loss_and_grad`) and applied with
Adam after a global norm clip.

Training follows the usual loop: collect ``n_steps`` transitions from every
stream of a vectorised environment, compute GAE advantages, run ``epochs``
passes of shuffled minibatch updates on the clipped surrogate, then score
the rollout and keep the parameters of the best-scoring rollout so far.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from drumctl.env import DrumControlEnv, EnvConfig, Observation
from drumctl.reactor import MAX_DRUM_SPEED

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CURVE_HEADER = ("rollout_index", "mean_reward", "mean_episode_length")
MODES = ("single-RL", "multi-RL", "symmetric-RL")
SYMMETRIC_K = 1.0
LOG_2PI = math.log(2.0 * math.pi)
POWER_SCALE = 100.0
ANGLE_SCALE = 180.0
ERROR_SCALE = 5.0  # SPU, the training termination band
OBS_FEATURES = ("tracking", "plain")


class TrainingError(RuntimeError):
    """The optimiser produced a non-finite loss or gradient."""


class CheckpointError(ValueError):
    """A checkpoint file is missing, malformed or incompatible."""


# ---------------------------------------------------------------- networks


def encode_obs(obs: Observation, features: str = "tracking") -> np.ndarray:
    """Network input: powers / 100 and angles / 180.

    With ``features="tracking"`` two differences are appended, the tracking
    error ``p_star_next - p_t`` and the last power increment ``p_t - p_prev``,
    both divided by 5 SPU. At a scale of 1/100 a one-SPU error moves the
    plain inputs by only 0.01, which a tanh network needs very large
    first-layer weights to resolve.
    """
    x = [obs.p_t / POWER_SCALE, obs.p_star_next / POWER_SCALE, obs.p_prev / POWER_SCALE]
    x += [th / ANGLE_SCALE for th in obs.theta_view]
    if features == "tracking":
        x += [(obs.p_star_next - obs.p_t) / ERROR_SCALE, (obs.p_t - obs.p_prev) / ERROR_SCALE]
    elif features != "plain":
        raise ValueError(f"obs features must be one of {OBS_FEATURES}, got {features!r}")
    return np.array(x)


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return gain * w[:n_in, :n_out]


Layers = list  # list of [W, b] pairs


@dataclass
class PolicyParams:
    actor: Layers
    critic: Layers
    log_std: np.ndarray
    action_scale: float = 1.0  # network output units -> deg/s
    obs_features: str = "tracking"

    @property
    def obs_dim(self) -> int:
        return self.actor[0][0].shape[0]

    @property
    def act_dim(self) -> int:
        return self.log_std.size

    def arrays(self) -> list[np.ndarray]:
        out = [a for layer in self.actor for a in layer]
        out += [a for layer in self.critic for a in layer]
        out.append(self.log_std)
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec: np.ndarray) -> "PolicyParams":
        """A copy of these params with values taken from ``vec``."""
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vec.size}")
        pieces, pos = [], 0
        for a in self.arrays():
            pieces.append(vec[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        na = 2 * len(self.actor)
        nc = 2 * len(self.critic)
        actor = [pieces[i : i + 2] for i in range(0, na, 2)]
        critic = [pieces[na + i : na + i + 2] for i in range(0, nc, 2)]
        return PolicyParams(actor, critic, pieces[-1], self.action_scale, self.obs_features)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "PolicyParams":
        return self.unflatten(self.flatten())

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.flatten())):
            raise ValueError("policy parameters contain non-finite values")


def init_params(
    obs_dim: int,
    act_dim: int,
    hidden: Sequence[int] = (64, 64),
    log_std_init: float = 0.0,
    action_scale: float = 1.0,
    rng: np.random.Generator | None = None,
    obs_features: str = "tracking",
) -> PolicyParams:
    """Orthogonal initialisation: gain sqrt(2) on hidden layers, 0.01 on the
    policy head and 1 on the value head."""
    rng = rng if rng is not None else np.random.default_rng(0)
    sizes = [obs_dim, *hidden]

    def mlp(n_out: int, head_gain: float) -> Layers:
        layers = [
            [_orthogonal(rng, a, b, math.sqrt(2.0)), np.zeros(b)]
            for a, b in zip(sizes[:-1], sizes[1:])
        ]
        layers.append([_orthogonal(rng, sizes[-1], n_out, head_gain), np.zeros(n_out)])
        return layers

    actor = mlp(act_dim, 0.01)
    critic = mlp(1, 1.0)
    return PolicyParams(
        actor, critic, np.full(act_dim, float(log_std_init)), action_scale, obs_features
    )


def _mlp_forward(layers: Layers, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    acts = [x]
    h = x
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
        acts.append(h)
    W, b = layers[-1]
    return h @ W + b, acts


def _mlp_backward(layers: Layers, acts: list[np.ndarray], dout: np.ndarray) -> list[np.ndarray]:
    grads: list[np.ndarray] = []
    d = dout
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        a_in = acts[k]
        grads[:0] = [a_in.T @ d, d.sum(axis=0)]
        if k > 0:
            d = (d @ W.T) * (1.0 - a_in**2)
    return grads


def policy_forward(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Action mean, log std and value for a (batch of) normalised observation(s)."""
    params.check_finite()
    x = np.atleast_2d(np.asarray(obs, dtype=float))
    mean, _ = _mlp_forward(params.actor, x)
    value, _ = _mlp_forward(params.critic, x)
    if np.ndim(obs) == 1:
        return mean[0], params.log_std.copy(), value[0, 0]
    return mean, params.log_std.copy(), value[:, 0]


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z**2 - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))


def to_speeds(params: PolicyParams, raw: np.ndarray) -> np.ndarray:
    """Map raw policy outputs to clamped drum speeds in deg/s."""
    return np.clip(params.action_scale * np.asarray(raw), -MAX_DRUM_SPEED, MAX_DRUM_SPEED)


def act_deterministic(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    """Clamped action mean; no sampling."""
    x = np.atleast_2d(np.asarray(obs, dtype=float))
    mean, _ = _mlp_forward(params.actor, x)
    speeds = to_speeds(params, mean)
    return speeds[0] if np.ndim(obs) == 1 else speeds


# ------------------------------------------------------------ config, GAE


@dataclass(frozen=True)
class PpoConfig:
    n_envs: int = 10
    n_steps: int = 2048
    minibatch_size: int = 64
    epochs: int = 10
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    learning_rate: float = 3e-4
    max_grad_norm: float = 0.5
    adam_eps: float = 1e-5
    total_timesteps: int = 200_000
    hidden: tuple[int, ...] = (64, 64)
    log_std_init: float = 0.0
    action_scale: float = 1.0
    obs_features: str = "tracking"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for name in ("n_envs", "n_steps", "minibatch_size", "epochs", "total_timesteps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_range <= 0:
            raise ValueError("clip_range must be > 0")
        if self.learning_rate <= 0 or self.action_scale <= 0:
            raise ValueError("learning_rate and action_scale must be > 0")
        if self.obs_features not in OBS_FEATURES:
            raise ValueError(f"obs_features must be one of {OBS_FEATURES}")

    def check_batch(self, n_streams: int) -> None:
        if (n_streams * self.n_steps) % self.minibatch_size:
            raise ValueError(
                f"rollout size {n_streams}*{self.n_steps} is not divisible by "
                f"minibatch size {self.minibatch_size}"
            )

    def with_(self, **changes) -> "PpoConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def gae(rewards, values, dones, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and returns.

    ``rewards`` and ``dones`` have shape (T, ...) and ``values`` has one more
    leading row holding the bootstrap value after the last step. A done flag
    at step t means the episode ended with that transition.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    if r.shape != d.shape or v.shape != (r.shape[0] + 1, *r.shape[1:]):
        raise ValueError(
            f"gae: rewards {r.shape}, dones {d.shape} and values {v.shape} do not align"
        )
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    for t in range(r.shape[0] - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * v[t + 1] * live - v[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + v[:-1]


@dataclass
class RolloutBuffer:
    """Transitions for ``n_streams`` parallel streams over ``n_steps`` steps."""

    n_steps: int
    n_streams: int
    obs_dim: int
    act_dim: int
    obs: np.ndarray = field(init=False)
    actions: np.ndarray = field(init=False)
    log_probs: np.ndarray = field(init=False)
    rewards: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)
    dones: np.ndarray = field(init=False)
    advantages: np.ndarray | None = field(init=False, default=None)
    returns: np.ndarray | None = field(init=False, default=None)
    pos: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        T, N = self.n_steps, self.n_streams
        self.obs = np.zeros((T, N, self.obs_dim))
        self.actions = np.zeros((T, N, self.act_dim))
        self.log_probs = np.zeros((T, N))
        self.rewards = np.zeros((T, N))
        self.values = np.zeros((T, N))
        self.dones = np.zeros((T, N))

    @property
    def full(self) -> bool:
        return self.pos == self.n_steps

    def add(self, obs, actions, log_probs, rewards, values, dones) -> None:
        if self.full:
            raise RuntimeError("rollout buffer is full")
        t = self.pos
        self.obs[t], self.actions[t], self.log_probs[t] = obs, actions, log_probs
        self.rewards[t], self.values[t], self.dones[t] = rewards, values, dones
        self.pos += 1

    def finish(self, last_values: np.ndarray, gamma: float, lam: float) -> None:
        if not self.full:
            raise RuntimeError("advantages need a full buffer")
        values = np.concatenate([self.values, np.asarray(last_values)[None, :]])
        self.advantages, self.returns = gae(self.rewards, values, self.dones, gamma, lam)

    def flat(self) -> dict[str, np.ndarray]:
        if self.advantages is None:
            raise RuntimeError("call finish() before reading samples")
        n = self.n_steps * self.n_streams
        return {
            "obs": self.obs.reshape(n, self.obs_dim),
            "actions": self.actions.reshape(n, self.act_dim),
            "log_probs": self.log_probs.reshape(n),
            "advantages": self.advantages.reshape(n),
            "returns": self.returns.reshape(n),
        }


# ------------------------------------------------------------ loss, update


@dataclass(frozen=True)
class LossTerms:
    total: float
    policy: float
    value: float
    entropy: float
    clip_fraction: float
    approx_kl: float


def loss_and_grad(
    params: PolicyParams,
    batch: dict[str, np.ndarray],
    config: PpoConfig,
    terms: tuple[str, ...] = ("policy", "value", "entropy"),
    normalize_advantages: bool = True,
) -> tuple[LossTerms, np.ndarray]:
    """Minimised PPO loss ``-L_clip + c1 * L_value - c2 * H`` and its gradient.

    ``terms`` restricts which pieces enter the returned total and gradient,
    which is how the pieces are checked separately against finite
    differences. The gradient is flat, in :meth:`PolicyParams.flatten` order.
    """
    x, a = batch["obs"], batch["actions"]
    adv = batch["advantages"]
    if normalize_advantages and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = x.shape[0]
    eps = config.clip_range

    mean, a_acts = _mlp_forward(params.actor, x)
    value, c_acts = _mlp_forward(params.critic, x)
    value = value[:, 0]
    log_std = params.log_std
    inv_var = np.exp(-2.0 * log_std)
    diff = a - mean
    logp = np.sum(-0.5 * diff**2 * inv_var - log_std - 0.5 * LOG_2PI, axis=1)
    log_ratio = logp - batch["log_probs"]
    ratio = np.exp(log_ratio)
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    surr = np.minimum(ratio * adv, clipped * adv)
    policy_loss = -float(surr.mean())
    value_loss = float(np.mean((value - batch["returns"]) ** 2))
    entropy = gaussian_entropy(log_std)

    g_actor = [np.zeros_like(p) for layer in params.actor for p in layer]
    g_critic = [np.zeros_like(p) for layer in params.critic for p in layer]
    g_log_std = np.zeros_like(log_std)
    total = 0.0

    if "policy" in terms:
        total += policy_loss
        # d(-mean surr)/d logp: the unclipped branch is active where it is the minimum
        active = ratio * adv <= clipped * adv
        dlogp = np.where(active, -ratio * adv, 0.0) / n
        dmean = dlogp[:, None] * diff * inv_var
        g_actor = _mlp_backward(params.actor, a_acts, dmean)
        g_log_std += np.sum(dlogp[:, None] * (diff**2 * inv_var - 1.0), axis=0)
    if "value" in terms:
        total += config.value_coef * value_loss
        dv = config.value_coef * 2.0 * (value - batch["returns"]) / n
        g_critic = _mlp_backward(params.critic, c_acts, dv[:, None])
    if "entropy" in terms:
        total -= config.entropy_coef * entropy
        g_log_std -= config.entropy_coef

    grad = np.concatenate([g.ravel() for g in (*g_actor, *g_critic, g_log_std)])
    info = LossTerms(
        total=total,
        policy=policy_loss,
        value=value_loss,
        entropy=entropy,
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > eps)),
        approx_kl=float(np.mean((ratio - 1.0) - log_ratio)),
    )
    return info, grad


class Adam:
    def __init__(self, size: int, lr: float, eps: float = 1e-8, betas=(0.9, 0.999)):
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / (norm + 1e-6)) if norm > max_norm else grad


def ppo_update(
    params: PolicyParams,
    buffer: RolloutBuffer,
    config: PpoConfig,
    rng: np.random.Generator,
    optimizer: Adam | None = None,
) -> tuple[PolicyParams, dict[str, float]]:
    """Run ``config.epochs`` shuffled minibatch passes over a finished buffer.

    A non-finite loss or gradient leaves the incoming params untouched and
    raises :class:`TrainingError`.
    """
    data = buffer.flat()
    n = data["obs"].shape[0]
    if n % config.minibatch_size:
        raise ValueError(f"{n} samples do not split into minibatches of {config.minibatch_size}")
    optimizer = optimizer if optimizer is not None else Adam(params.size, config.learning_rate, config.adam_eps)
    theta = params.flatten()
    current = params
    stats: list[LossTerms] = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start : start + config.minibatch_size]
            batch = {k: v[idx] for k, v in data.items()}
            with np.errstate(invalid="ignore", over="ignore"):
                terms, grad = loss_and_grad(current, batch, config)
            if not (np.isfinite(terms.total) and np.all(np.isfinite(grad))):
                raise TrainingError("non-finite PPO loss; update aborted")
            theta = optimizer.step(theta, clip_grad_norm(grad, config.max_grad_norm))
            current = params.unflatten(theta)
            stats.append(terms)
    diag = {
        key: float(np.mean([getattr(s, key) for s in stats]))
        for key in ("policy", "value", "entropy", "clip_fraction", "approx_kl")
    }
    return current, diag


# ---------------------------------------------------- vectorised rollouts


@dataclass
class VecStep:
    obs: np.ndarray  # (n_streams, obs_dim), already reset where an episode ended
    rewards: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    final_obs: np.ndarray  # observation that ended the episode (valid where done)
    episode_returns: list[float]
    episode_lengths: list[int]


class SingleAgentVecEnv:
    """One experience stream per environment instance, with auto-reset."""

    streams_per_env = 1

    def __init__(self, envs: Sequence[DrumControlEnv], features: str = "tracking"):
        if not envs:
            raise ValueError("need at least one environment")
        self.envs = list(envs)
        self.features = features
        self.n_envs = len(self.envs)
        self.n_streams = self.n_envs
        self.act_dim = self.envs[0].action_dim
        self._ret = np.zeros(self.n_envs)
        self._len = np.zeros(self.n_envs, dtype=int)
        self._episodes = np.zeros(self.n_envs, dtype=int)

    def _reset_env(self, i: int) -> np.ndarray:
        env = self.envs[i]
        # distinct noise streams per instance and per episode
        seed = env.config.seed + 7919 * i + int(self._episodes[i])
        return encode_obs(env.reset(seed=seed), self.features)

    def reset(self) -> np.ndarray:
        self._episodes[:] = 0
        self._ret[:] = 0
        self._len[:] = 0
        return np.stack([self._reset_env(i) for i in range(self.n_envs)])

    def step(self, speeds: np.ndarray) -> VecStep:
        out_obs, final = [], []
        rew = np.zeros(self.n_envs)
        term = np.zeros(self.n_envs, dtype=bool)
        trunc = np.zeros(self.n_envs, dtype=bool)
        rets, lens = [], []
        for i, env in enumerate(self.envs):
            o = env.step(speeds[i])
            rew[i], term[i], trunc[i] = o.reward, o.terminated, o.truncated
            self._ret[i] += o.reward
            self._len[i] += 1
            x = encode_obs(o.obs, self.features)
            final.append(x)
            if o.terminated or o.truncated:
                rets.append(float(self._ret[i]))
                lens.append(int(self._len[i]))
                self._ret[i], self._len[i] = 0.0, 0
                self._episodes[i] += 1
                x = self._reset_env(i)
            out_obs.append(x)
        return VecStep(np.stack(out_obs), rew, term, trunc, np.stack(final), rets, lens)


# ---------------------------------------------------------------- training


@dataclass
class CurvePoint:
    rollout_index: int
    mean_reward: float
    mean_episode_length: float


@dataclass
class TrainResult:
    params: PolicyParams
    best_mean_reward: float
    best_rollout: int
    curve: list[CurvePoint]
    timesteps: int
    simulator_steps: int
    aborted: bool = False
    wall_time: float = 0.0

    def write_curve(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_HEADER)
            for p in self.curve:
                w.writerow([p.rollout_index, repr(p.mean_reward), repr(p.mean_episode_length)])


def n_rollouts(config: PpoConfig, n_streams: int) -> int:
    """Rollout/update cycles scheduled for ``config.total_timesteps``."""
    return config.total_timesteps // (n_streams * config.n_steps)


def train_vec(
    vec_env,
    config: PpoConfig,
    callback: Callable[[CurvePoint, dict], None] | None = None,
) -> TrainResult:
    """Train on any vectorised environment exposing ``reset``/``step``.

    Each rollout is scored by the mean return of episodes that finished
    during it; the parameters in force for the best-scoring rollout are the
    ones returned.
    """
    t0 = time.perf_counter()
    if vec_env.features != config.obs_features:
        raise ValueError("vectorised env and config disagree on observation features")
    rng = np.random.default_rng(config.seed)
    obs = vec_env.reset()
    N = vec_env.n_streams
    config.check_batch(N)
    params = init_params(
        obs.shape[1],
        vec_env.act_dim,
        config.hidden,
        config.log_std_init,
        config.action_scale,
        rng,
        config.obs_features,
    )
    optimizer = Adam(params.size, config.learning_rate, config.adam_eps)
    best, best_reward, best_idx = params.copy(), -np.inf, -1
    curve: list[CurvePoint] = []
    timesteps = 0
    aborted = False

    for k in range(n_rollouts(config, N)):
        buf = RolloutBuffer(config.n_steps, N, obs.shape[1], vec_env.act_dim)
        returns, lengths = [], []
        for _ in range(config.n_steps):
            mean, value = _actor_critic(params, obs)
            raw = mean + np.exp(params.log_std) * rng.standard_normal(mean.shape)
            logp = gaussian_log_prob(raw, mean, params.log_std)
            st = vec_env.step(to_speeds(params, raw))
            rewards = st.rewards.copy()
            # a profile-end cut is not a real terminal state: bootstrap through it
            cut = st.truncated & ~st.terminated
            if cut.any():
                _, v_final = _actor_critic(params, st.final_obs[cut])
                rewards[cut] += config.gamma * v_final
            buf.add(obs, raw, logp, rewards, value, st.terminated | st.truncated)
            returns += st.episode_returns
            lengths += st.episode_lengths
            obs = st.obs
        timesteps += N * config.n_steps
        _, last_v = _actor_critic(params, obs)
        buf.finish(last_v, config.gamma, config.gae_lambda)

        point = CurvePoint(
            k,
            float(np.mean(returns)) if returns else float("nan"),
            float(np.mean(lengths)) if lengths else float("nan"),
        )
        curve.append(point)
        if point.mean_reward > best_reward:
            best, best_reward, best_idx = params.copy(), point.mean_reward, k

        try:
            params, diag = ppo_update(params, buf, config, rng, optimizer)
        except TrainingError:
            logger.error("update %d produced a non-finite loss; stopping", k)
            aborted = True
            break
        logger.info(
            "rollout %d: mean return %.2f, mean length %.1f, kl %.4f",
            k, point.mean_reward, point.mean_episode_length, diag["approx_kl"],
        )
        if callback is not None:
            callback(point, diag)

    if best_idx < 0:
        best = params
    steps_per_env = vec_env.streams_per_env
    return TrainResult(
        best,
        float(best_reward),
        best_idx,
        curve,
        timesteps,
        timesteps // steps_per_env,
        aborted,
        time.perf_counter() - t0,
    )


def _actor_critic(params: PolicyParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean, _ = _mlp_forward(params.actor, x)
    value, _ = _mlp_forward(params.critic, x)
    return mean, value[:, 0]


def mode_env_config(mode: str, base: EnvConfig) -> EnvConfig:
    """Environment settings implied by a training mode."""
    if mode == "single-RL":
        return base.with_(mode="single-action", symmetry_penalty_k=0.0, training=True)
    if mode == "multi-RL":
        return base.with_(mode="multi-action", symmetry_penalty_k=0.0, training=True)
    if mode == "symmetric-RL":
        return base.with_(mode="multi-action", symmetry_penalty_k=SYMMETRIC_K, training=True)
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def make_env_factory(mode: str, base: EnvConfig | None = None) -> Callable[[int], DrumControlEnv]:
    cfg = mode_env_config(mode, base if base is not None else EnvConfig())

    def factory(i: int) -> DrumControlEnv:
        return DrumControlEnv(cfg.with_(seed=cfg.seed + i))

    return factory


def train(
    env_factory: Callable[[int], DrumControlEnv],
    config: PpoConfig,
    mode: str = "single-RL",
    callback: Callable[[CurvePoint, dict], None] | None = None,
) -> TrainResult:
    """Train a single-agent policy on ``config.n_envs`` environments."""
    envs = [env_factory(i) for i in range(config.n_envs)]
    expected = mode_env_config(mode, envs[0].config)
    for env in envs:
        c = env.config
        if (c.mode, c.symmetry_penalty_k, c.training) != (
            expected.mode,
            expected.symmetry_penalty_k,
            expected.training,
        ):
            raise ValueError(
                f"{mode} needs {expected.mode} training environments with "
                f"k={expected.symmetry_penalty_k}; got {c.mode}, k={c.symmetry_penalty_k}, "
                f"training={c.training}"
            )
    return train_vec(SingleAgentVecEnv(envs, config.obs_features), config, callback)


# ------------------------------------------------------------ checkpoints


def save_checkpoint(
    path: str | Path,
    params: PolicyParams,
    config: PpoConfig,
    mode: str,
    best_mean_reward: float | None = None,
) -> None:
    payload = {
        "format": "drumctl-policy",
        "version": CHECKPOINT_VERSION,
        "mode": mode,
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "best_mean_reward": best_mean_reward,
        "obs_dim": params.obs_dim,
        "act_dim": params.act_dim,
        "action_scale": params.action_scale,
        "obs_features": params.obs_features,
        "actor": [[W.tolist(), b.tolist()] for W, b in params.actor],
        "critic": [[W.tolist(), b.tolist()] for W, b in params.critic],
        "log_std": params.log_std.tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, PpoConfig, str]:
    """Read a checkpoint; returns (params, config, mode)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        raw = json.loads(path.read_text())
        if raw.get("format") != "drumctl-policy" or raw.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: not a version {CHECKPOINT_VERSION} policy checkpoint")
        config = PpoConfig(**raw["config"])
        if config.digest() != raw["config_hash"]:
            raise CheckpointError(f"{path}: config hash mismatch")
        layers = lambda key: [[np.array(W, dtype=float), np.array(b, dtype=float)] for W, b in raw[key]]
        params = PolicyParams(
            layers("actor"), layers("critic"), np.array(raw["log_std"], dtype=float),
            float(raw["action_scale"]),
            raw["obs_features"],
        )
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    params.check_finite()
    return params, config, raw["mode"]


class PolicyController:
    """Deterministic deployment of a single-agent policy."""

    def __init__(self, params: PolicyParams):
        self.params = params

    def reset(self) -> None:
        pass

    def act(self, obs: Observation) -> np.ndarray:
        return act_deterministic(self.params, encode_obs(obs, self.params.obs_features))
