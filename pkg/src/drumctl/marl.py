"""Shared-policy multi-agent training over one eight-drum simulator.

Each drum is an agent. An environment in ``marl-view`` mode is presented to
the PPO trainer as eight experience streams: every agent sees the global
powers and its own drum angle, samples its own speed from the shared
policy, and all eight speeds are applied together in a single simulator
step. The global reward is copied to every agent, and GAE runs per stream.
One simulator step therefore counts as eight trainer timesteps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from drumctl.env import DrumControlEnv, EnvConfig, EnvUsageError, Observation, marl_merge, marl_split
from drumctl.ppo import (
    PolicyParams,
    PpoConfig,
    TrainResult,
    VecStep,
    act_deterministic,
    encode_obs,
    train_vec,
)

N_AGENTS = 8


class MarlError(RuntimeError):
    """The agent streams and the simulator disagree on arity."""


@dataclass(frozen=True)
class MarlBatch:
    observations: tuple[Observation, ...]
    actions: tuple[float, ...]
    reward: float
    done: bool


def simulator_steps(agent_timesteps: int, n_agents: int = N_AGENTS) -> int:
    """Simulator steps behind a budget of trainer-visible timesteps."""
    if agent_timesteps % n_agents:
        raise ValueError(f"{agent_timesteps} agent timesteps is not a multiple of {n_agents}")
    return agent_timesteps // n_agents


def agent_observations(obs: Observation, others_mean: bool = False) -> list[Observation]:
    """Per-drum views. With ``others_mean`` each view also carries the mean
    angle of the other drums (an ablation; off by default)."""
    views = marl_split(obs)
    if not others_mean:
        return views
    theta = np.asarray(obs.theta_view)
    rest = (theta.sum() - theta) / (theta.size - 1)
    return [
        Observation(v.p_t, v.p_star_next, v.p_prev, (v.theta_view[0], float(m)))
        for v, m in zip(views, rest)
    ]


def marl_step(env: DrumControlEnv, obs: Observation, actions: Sequence[float]) -> tuple[MarlBatch, object]:
    """Apply eight agent actions in one simulator step.

    Returns the per-agent batch for the transition and the raw outcome.
    """
    if len(actions) != env.n_drums:
        raise MarlError(f"expected {env.n_drums} agent actions, got {len(actions)}")
    out = env.step(marl_merge(actions, env.config.mask))
    batch = MarlBatch(
        tuple(marl_split(obs)), tuple(float(a) for a in actions), out.reward, out.terminated or out.truncated
    )
    return batch, out


class MarlVecEnv:
    """Eight streams per simulator, laid out env-major (env 0 agents 0..7, ...)."""

    def __init__(
        self,
        envs: Sequence[DrumControlEnv],
        features: str = "tracking",
        others_mean: bool = False,
    ):
        if not envs:
            raise ValueError("need at least one environment")
        for env in envs:
            if env.config.mode != "marl-view":
                raise MarlError(f"MARL needs marl-view environments, got {env.config.mode}")
            if env.n_drums != N_AGENTS:
                raise MarlError(f"MARL needs {N_AGENTS}-drum environments, got {env.n_drums}")
        self.envs = list(envs)
        self.features = features
        self.others_mean = others_mean
        self.n_envs = len(self.envs)
        self.streams_per_env = N_AGENTS
        self.n_streams = self.n_envs * N_AGENTS
        self.act_dim = 1
        self._ret = np.zeros(self.n_envs)
        self._len = np.zeros(self.n_envs, dtype=int)
        self._episodes = np.zeros(self.n_envs, dtype=int)
        self.simulator_steps = 0

    def _encode(self, obs: Observation) -> np.ndarray:
        views = agent_observations(obs, self.others_mean)
        return np.stack([encode_obs(v, self.features) for v in views])

    def _reset_env(self, i: int) -> np.ndarray:
        env = self.envs[i]
        return self._encode(env.reset(seed=env.config.seed + 7919 * i + int(self._episodes[i])))

    def reset(self) -> np.ndarray:
        self._episodes[:] = 0
        self._ret[:] = 0
        self._len[:] = 0
        return np.concatenate([self._reset_env(i) for i in range(self.n_envs)])

    def step(self, speeds: np.ndarray) -> VecStep:
        speeds = np.asarray(speeds, dtype=float)
        if speeds.shape[0] != self.n_streams:
            raise MarlError(f"expected {self.n_streams} agent actions, got {speeds.shape[0]}")
        per_env = speeds.reshape(self.n_envs, N_AGENTS)
        obs_out, final = [], []
        rew = np.zeros(self.n_streams)
        term = np.zeros(self.n_streams, dtype=bool)
        trunc = np.zeros(self.n_streams, dtype=bool)
        rets, lens = [], []
        for i, env in enumerate(self.envs):
            o = env.step(marl_merge(per_env[i], env.config.mask))
            self.simulator_steps += 1
            sl = slice(i * N_AGENTS, (i + 1) * N_AGENTS)
            rew[sl], term[sl], trunc[sl] = o.reward, o.terminated, o.truncated
            self._ret[i] += o.reward
            self._len[i] += 1
            x = self._encode(o.obs)
            final.append(x)
            if o.terminated or o.truncated:
                # one record per simulator episode; the eight streams share it
                rets.append(float(self._ret[i]))
                lens.append(int(self._len[i]))
                self._ret[i], self._len[i] = 0.0, 0
                self._episodes[i] += 1
                x = self._reset_env(i)
            obs_out.append(x)
        return VecStep(np.concatenate(obs_out), rew, term, trunc, np.concatenate(final), rets, lens)


def marl_env_config(base: EnvConfig) -> EnvConfig:
    return base.with_(mode="marl-view", symmetry_penalty_k=0.0, training=True)


def make_marl_env_factory(base: EnvConfig | None = None) -> Callable[[int], DrumControlEnv]:
    cfg = marl_env_config(base if base is not None else EnvConfig())
    return lambda i: DrumControlEnv(cfg.with_(seed=cfg.seed + i))


def train_marl(
    env_factory: Callable[[int], DrumControlEnv],
    config: PpoConfig,
    others_mean: bool = False,
    callback=None,
) -> TrainResult:
    """Train one policy shared by all drums.

    ``config.n_envs`` simulators are built; ``config.total_timesteps`` counts
    trainer timesteps, eight per simulator step.
    """
    envs = [env_factory(i) for i in range(config.n_envs)]
    for env in envs:
        if not env.config.training:
            raise ValueError("MARL training environments must have training=True")
    vec = MarlVecEnv(envs, config.obs_features, others_mean)
    result = train_vec(vec, config, callback)
    if result.simulator_steps != vec.simulator_steps or result.timesteps != N_AGENTS * vec.simulator_steps:
        raise MarlError("timestep accounting drifted from the simulator step count")
    return result


class MarlController:
    """Deterministic deployment: each enabled drum queries the shared policy
    with its own view. Drums are evaluated one row at a time so equal views
    give bit-identical speeds."""

    def __init__(self, params: PolicyParams, others_mean: bool = False):
        self.params = params
        self.others_mean = others_mean

    def reset(self) -> None:
        pass

    def act(self, obs: Observation):
        if len(obs.theta_view) != N_AGENTS:
            raise EnvUsageError("MarlController needs the eight-drum observation")
        views = agent_observations(obs, self.others_mean)
        speeds = [
            float(act_deterministic(self.params, encode_obs(v, self.params.obs_features))[0])
            for v in views
        ]
        return marl_merge(speeds)
