"""Discrete PID drum-speed controller and a CAE-minimising gain tuner."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import differential_evolution, minimize

from drumctl.env import DrumControlEnv, EnvConfig, Observation
from drumctl.reactor import MAX_DRUM_SPEED

logger = logging.getLogger(__name__)

DT = 1.0
INTEGRAL_LIMIT = 100.0  # SPU*s
PUBLISHED_GAINS = (0.078, 0.0, 0.3)


@dataclass(frozen=True)
class PidGains:
    kp: float
    ki: float
    kd: float

    def __post_init__(self) -> None:
        if not all(np.isfinite([self.kp, self.ki, self.kd])):
            raise ValueError("PID gains must be finite")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.kp, self.ki, self.kd)

    def save(self, path: str | Path, train_cae: float | None = None) -> None:
        Path(path).write_text(json.dumps({**asdict(self), "train_cae": train_cae}, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "PidGains":
        raw = json.loads(Path(path).read_text())
        return cls(float(raw["kp"]), float(raw["ki"]), float(raw["kd"]))


@dataclass
class PidState:
    integral: float = 0.0
    prev_error: float = 0.0
    initialized: bool = False


def pid_step(
    gains: PidGains, setpoint: float, measured: float, state: PidState
) -> tuple[float, PidState]:
    """One control interval. Returns the clamped drum speed and the new state.

    The error is signed (setpoint minus measured) so a positive error drives
    the drums outward and raises power. The derivative term acts on the error
    and is zero on the first call.
    """
    e = setpoint - measured
    integral = float(np.clip(state.integral + e * DT, -INTEGRAL_LIMIT, INTEGRAL_LIMIT))
    de = (e - state.prev_error) / DT if state.initialized else 0.0
    u = gains.kp * e + gains.ki * integral + gains.kd * de
    u = float(np.clip(u, -MAX_DRUM_SPEED, MAX_DRUM_SPEED))
    return u, PidState(integral=integral, prev_error=e, initialized=True)


class PidController:
    """Adapter exposing :func:`pid_step` through the controller protocol."""

    def __init__(self, gains: PidGains):
        self.gains = gains
        self.state = PidState()

    def reset(self) -> None:
        self.state = PidState()

    def act(self, obs: Observation) -> float:
        u, self.state = pid_step(self.gains, obs.p_star_next, obs.p_t, self.state)
        return u


def episode_cae(gains, config: EnvConfig) -> tuple[float, bool]:
    """Run one episode under PID control; return (CAE on true power, terminated)."""
    env = DrumControlEnv(config)
    ctrl = PidController(PidGains(*gains))
    obs = env.reset()
    cae = 0.0
    while True:
        out = env.step(ctrl.act(obs))
        cae += abs(out.info["error"])
        obs = out.obs
        if out.terminated or out.truncated:
            return cae, out.terminated


@dataclass
class TuneResult:
    gains: PidGains
    train_cae: float
    published_cae: float
    evaluations: int
    budget_exhausted: bool
    history: list[float] = field(default_factory=list)


def _objective_factory(config: EnvConfig) -> Callable[[np.ndarray], float]:
    steps = config.profile.n_steps

    def objective(x: np.ndarray) -> float:
        cae, terminated = episode_cae(tuple(float(v) for v in x), config)
        # an early stop truncates the CAE sum; make it lose to every full episode
        return cae + (1e6 if terminated else 0.0) if np.isfinite(cae) else 1e9 * steps

    return objective


def tune_pid(
    config: EnvConfig,
    bounds=((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)),
    popsize: int = 20,
    maxiter: int = 200,
    seed: int = 0,
    polish: bool = True,
    workers: int = 1,
) -> TuneResult:
    """Find gains minimising the noiseless CAE of ``config.profile``.

    Differential evolution over ``bounds`` (``popsize`` candidates per
    generation, at most ``maxiter`` generations) followed by a bounded
    Nelder-Mead polish from the best member. The environment runs with
    training terminations on, so gains that lose the setpoint by more than
    5 SPU are rejected.
    """
    config = config.with_(noise_sigma=0.0, training=True)
    objective = _objective_factory(config)
    history: list[float] = []

    # scipy's popsize is a multiplier on the dimension count
    mult = max(1, int(np.ceil(popsize / len(bounds))))
    result = differential_evolution(
        objective,
        bounds,
        popsize=mult,
        maxiter=maxiter,
        seed=seed,
        polish=False,
        tol=1e-8,
        updating="deferred" if workers != 1 else "immediate",
        workers=workers,
        callback=lambda intermediate_result: history.append(float(intermediate_result.fun)),
    )
    best_x, best_f, nfev = result.x, float(result.fun), int(result.nfev)
    budget_exhausted = not result.success and result.nit >= maxiter
    if polish:
        local = minimize(
            objective,
            best_x,
            method="Nelder-Mead",
            bounds=bounds,
            options={"xatol": 1e-5, "fatol": 1e-6, "maxiter": 400},
        )
        nfev += int(local.nfev)
        if local.fun < best_f:
            best_x, best_f = local.x, float(local.fun)
    if budget_exhausted:
        logger.warning("PID tuner hit its generation budget; returning best-so-far")

    published_cae = objective(np.asarray(PUBLISHED_GAINS))
    gains = PidGains(*(float(v) for v in best_x))
    return TuneResult(gains, best_f, published_cae, nfev, budget_exhausted, history)
