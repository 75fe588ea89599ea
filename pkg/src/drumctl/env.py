"""Episodic load-following environment around the reactor model.

One call to :meth:`DrumControlEnv.step` is one 1 s control interval. The
controller sees measured powers (true power plus optional Gaussian noise),
the next setpoint, and drum angle(s); it returns drum speeds in deg/s.

Three action layouts are supported:

``single-action``
    one speed broadcast to every enabled drum; one angle observed.
``multi-action``
    eight speeds; eight angles observed. ``symmetry_penalty_k`` applies here.
``marl-view``
    eight speeds from eight agents; use :func:`marl_split` to hand each
    agent its own drum angle and :func:`marl_merge` to combine the actions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from drumctl.profiles import LoadProfile, builtin_profiles
from drumctl.reactor import (
    N_DRUMS,
    THETA_MAX,
    THETA_MIN,
    DrumCommand,
    FeedbackReference,
    ReactorParams,
    ReactorState,
    Tolerance,
    equilibrium_state,
    integrate_step,
    xenon_reactivity_pcm,
)

MODES = ("single-action", "multi-action", "marl-view")
BASE_REWARD = 2.0
ERROR_LIMIT = 5.0  # SPU, training only
POWER_LIMIT = 110.0  # SPU, always
START_POWER = 100.0


class ConfigError(ValueError):
    """Invalid environment configuration."""


class EnvUsageError(RuntimeError):
    """The environment was driven out of protocol (e.g. step after done)."""


@dataclass(frozen=True)
class Observation:
    p_t: float
    p_star_next: float
    p_prev: float
    theta_view: tuple[float, ...]


@dataclass(frozen=True)
class StepOutcome:
    obs: Observation
    reward: float
    terminated: bool
    truncated: bool
    info: dict


@dataclass(frozen=True)
class EnvConfig:
    profile: LoadProfile = field(default_factory=lambda: builtin_profiles()["train"])
    mode: str = "single-action"
    training: bool = False
    symmetry_penalty_k: float = 0.0
    noise_sigma: float = 0.0
    disabled_drums: frozenset[int] = frozenset()
    seed: int = 0
    theta_0: float = 90.0
    params: ReactorParams = field(default_factory=ReactorParams)
    tol: Tolerance = field(default_factory=Tolerance)

    def __post_init__(self) -> None:
        object.__setattr__(self, "disabled_drums", frozenset(int(i) for i in self.disabled_drums))
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.symmetry_penalty_k < 0:
            raise ConfigError("symmetry_penalty_k must be >= 0")
        if self.symmetry_penalty_k > 0 and self.mode != "multi-action":
            raise ConfigError("the symmetry penalty only applies in multi-action mode")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        n = self.params.n_drums
        if any(not 0 <= i < n for i in self.disabled_drums):
            raise ConfigError(f"disabled drum indices must lie in [0, {n})")
        if len(self.disabled_drums) == n:
            raise ConfigError("at least one drum must stay enabled")
        if not THETA_MIN < self.theta_0 < THETA_MAX:
            raise ConfigError("theta_0 must lie strictly inside (0, 180)")
        if not isinstance(self.profile, LoadProfile):
            raise ConfigError("profile must be a LoadProfile")

    def with_(self, **changes) -> "EnvConfig":
        return replace(self, **changes)

    @property
    def mask(self) -> tuple[bool, ...]:
        return tuple(i not in self.disabled_drums for i in range(self.params.n_drums))


def inject_noise(true_power: float, sigma: float, rng: np.random.Generator) -> float:
    """Measured power: ``true_power`` plus one N(0, sigma^2) draw.

    ``sigma == 0`` returns the input unchanged and consumes no randomness.
    """
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return float(true_power)
    return float(true_power + rng.normal(0.0, sigma))


def marl_split(obs: Observation) -> list[Observation]:
    """One observation per drum, each carrying only that drum's angle."""
    if len(obs.theta_view) < 2:
        raise EnvUsageError("marl_split needs a multi-drum observation")
    return [
        Observation(obs.p_t, obs.p_star_next, obs.p_prev, (th,)) for th in obs.theta_view
    ]


def marl_merge(actions: Sequence[float], mask: Sequence[bool] | None = None) -> DrumCommand:
    """Combine per-agent speeds into one simultaneous drum command."""
    actions = [float(np.asarray(a).reshape(-1)[0]) for a in actions]
    mask = tuple(mask) if mask is not None else (True,) * N_DRUMS
    if len(actions) != len(mask):
        raise EnvUsageError(f"expected {len(mask)} agent actions, got {len(actions)}")
    return DrumCommand(tuple(actions), mask)


def step_reward(power: float, setpoint: float, speeds: Sequence[float] = (), k: float = 0.0) -> float:
    """``2 - |power - setpoint|``, less ``k`` times the spread of ``speeds``."""
    reward = BASE_REWARD - abs(power - setpoint)
    if k > 0 and len(speeds):
        reward -= k * (max(speeds) - min(speeds))
    return reward


def termination(
    true_power: float,
    scored_power: float,
    setpoint: float,
    enabled_angles: Sequence[float],
    training: bool,
) -> bool:
    """Episode-ending conditions.

    The 110 SPU limit on true power always applies. Training additionally
    stops when the scored power leaves the 5 SPU band around the setpoint
    or an enabled drum reaches 0 or 180 degrees.
    """
    if true_power > POWER_LIMIT:
        return True
    if not training:
        return False
    if abs(scored_power - setpoint) > ERROR_LIMIT:
        return True
    return any(th <= THETA_MIN or th >= THETA_MAX for th in enabled_angles)


class DrumControlEnv:
    """Gym-style environment; see module docstring for the action layouts."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.params = config.params
        self._mask = config.mask
        self._enabled = [i for i, m in enumerate(self._mask) if m]
        self._rng = np.random.default_rng(config.seed)
        self.state: ReactorState | None = None
        self.ref: FeedbackReference | None = None
        self._done = True
        self._step = 0
        self._measured = START_POWER

    @property
    def n_drums(self) -> int:
        return self.params.n_drums

    @property
    def action_dim(self) -> int:
        return 1 if self.config.mode == "single-action" else self.n_drums

    @property
    def profile(self) -> LoadProfile:
        return self.config.profile

    @property
    def true_power(self) -> float:
        return self.state.power_spu

    def reset(self, seed: int | None = None) -> Observation:
        self._rng = np.random.default_rng(self.config.seed if seed is None else seed)
        self.state = equilibrium_state(START_POWER / 100.0, self.config.theta_0, self.params)
        self.ref = FeedbackReference.from_state(self.state)
        self._step = 0
        self._done = False
        self._measured = inject_noise(self.true_power, self.config.noise_sigma, self._rng)
        return self._observe(self._measured)

    def _observe(self, p_prev: float) -> Observation:
        t_next = min(self._step + 1, self.profile.n_steps)
        if self.config.mode == "single-action":
            view = (self.state.theta[self._enabled[0]],)
        else:
            view = tuple(self.state.theta)
        return Observation(self._measured, self.profile.setpoint(t_next), p_prev, view)

    def command_for(self, action) -> DrumCommand:
        a = np.asarray(action, dtype=float).reshape(-1)
        if not np.all(np.isfinite(a)):
            raise EnvUsageError(f"non-finite action {a}")
        if a.size != self.action_dim:
            raise EnvUsageError(
                f"{self.config.mode} expects {self.action_dim} speed(s), got {a.size}"
            )
        if a.size == 1:
            a = np.repeat(a, self.n_drums)
        return DrumCommand(tuple(a), self._mask)

    def step(self, action) -> StepOutcome:
        if self.state is None or self._done:
            raise EnvUsageError("step() called on a finished episode; call reset() first")
        if isinstance(action, DrumCommand):
            mask = tuple(m and e for m, e in zip(action.mask, self._mask))
            command = DrumCommand(action.speeds, mask)
        else:
            command = self.command_for(action)
        cfg = self.config

        self.state = integrate_step(self.state, command, 1.0, self.ref, self.params, cfg.tol)
        self._step += 1
        p_prev = self._measured
        true_p = self.true_power
        self._measured = inject_noise(true_p, cfg.noise_sigma, self._rng)
        setpoint = self.profile.setpoint(self._step)

        scored = self._measured if cfg.training else true_p
        applied = command.speeds
        on = [applied[i] for i in self._enabled]
        reward = step_reward(scored, setpoint, on, cfg.symmetry_penalty_k)
        terminated = termination(
            true_p, scored, setpoint, [self.state.theta[i] for i in self._enabled], cfg.training
        )
        truncated = (not terminated) and self._step >= self.profile.n_steps
        self._done = terminated or truncated

        s = self.state
        info = {
            "t": float(self._step),
            "true_power": true_p,
            "measured_power": self._measured,
            "setpoint": setpoint,
            "error": true_p - setpoint,
            "T_f": s.T_f,
            "T_m": s.T_m,
            "T_c": s.T_c,
            "conc_I": s.conc_I,
            "conc_X": s.conc_X,
            "xenon_pcm": xenon_reactivity_pcm(s.conc_X - self.ref.conc_X, self.params),
            "theta": s.theta,
            "applied_speeds": tuple(float(u) for u in applied),
        }
        return StepOutcome(self._observe(p_prev), float(reward), terminated, truncated, info)
