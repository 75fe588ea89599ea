"""Evaluation episodes, trace files and the measurement-noise sweep."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from drumctl.env import DrumControlEnv, EnvConfig, Observation
from drumctl.metrics import EpisodeMetrics, compute_metrics

logger = logging.getLogger(__name__)

SIGMA_GRID = tuple(0.5 * i for i in range(11))  # 0, 0.5, ..., 5 SPU


class Controller(Protocol):
    def reset(self) -> None: ...

    def act(self, obs: Observation): ...


def trace_header(n_drums: int = 8) -> list[str]:
    return (
        ["t", "true_power", "measured_power", "setpoint", "reward"]
        + [f"theta_{i + 1}" for i in range(n_drums)]
        + [f"u_{i + 1}" for i in range(n_drums)]
        + ["T_f", "T_m", "T_c", "I", "X"]
    )


@dataclass
class Trace:
    """One row per control step (t = 1 .. T)."""

    n_drums: int
    rows: list[list[float]] = field(default_factory=list)

    def append(self, info: dict, reward: float) -> None:
        self.rows.append(
            [info["t"], info["true_power"], info["measured_power"], info["setpoint"], reward]
            + list(info["theta"])
            + list(info["applied_speeds"])
            + [info["T_f"], info["T_m"], info["T_c"], info["conc_I"], info["conc_X"]]
        )

    def column(self, name: str) -> np.ndarray:
        j = trace_header(self.n_drums).index(name)
        return np.array([r[j] for r in self.rows])

    @property
    def theta(self) -> np.ndarray:
        return np.array([r[5 : 5 + self.n_drums] for r in self.rows])

    @property
    def speeds(self) -> np.ndarray:
        return np.array([r[5 + self.n_drums : 5 + 2 * self.n_drums] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(trace_header(self.n_drums))
        for r in self.rows:
            w.writerow([repr(float(v)) for v in r])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), newline="")

    @classmethod
    def read_csv(cls, path: str | Path) -> "Trace":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        n_drums = sum(1 for c in rows[0] if c.startswith("theta_"))
        return cls(n_drums, [[float(v) for v in r] for r in rows[1:]])

    def metrics(self) -> EpisodeMetrics:
        return compute_metrics(self.column("true_power"), self.column("setpoint"), self.speeds)


@dataclass
class EpisodeResult:
    trace: Trace
    metrics: EpisodeMetrics
    terminated: bool

    def write(self, out_dir: str | Path, stem: str = "episode") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace_path, metrics_path = out / f"{stem}_trace.csv", out / f"{stem}_metrics.json"
        self.trace.write_csv(trace_path)
        metrics_path.write_text(self.metrics.to_json(self.terminated) + "\n")
        return trace_path, metrics_path


def run_episode(config: EnvConfig, controller: Controller) -> EpisodeResult:
    """One evaluation episode. Training terminations are switched off, so
    only the 110 SPU hard stop can end it early."""
    env = DrumControlEnv(config.with_(training=False))
    controller.reset()
    obs = env.reset()
    trace = Trace(env.n_drums)
    while True:
        out = env.step(controller.act(obs))
        trace.append(out.info, out.reward)
        obs = out.obs
        if out.terminated or out.truncated:
            return EpisodeResult(trace, trace.metrics(), out.terminated)


def replay_true_power(config: EnvConfig, actions: Sequence) -> np.ndarray:
    """True power after each step of a fixed action sequence."""
    env = DrumControlEnv(config.with_(training=False))
    env.reset()
    out = []
    for a in actions:
        step = env.step(a)
        out.append(step.info["true_power"])
        if step.terminated or step.truncated:
            break
    return np.array(out)


@dataclass(frozen=True)
class SweepPoint:
    controller: str
    sigma: float
    cae_mean: float
    cae_std: float
    effort_mean: float
    effort_std: float
    reps: int
    failures: int  # episodes that hit the hard stop or raised
    seeds: tuple[int, ...]


@dataclass
class NoiseSweepReport:
    profile: str
    reps: int
    points: list[SweepPoint]

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "reps": self.reps,
            "points": [
                {**{k: getattr(p, k) for k in SweepPoint.__dataclass_fields__ if k != "seeds"},
                 "seeds": list(p.seeds)}
                for p in self.points
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["controller", "sigma", "cae_mean", "cae_std", "effort_mean", "effort_std", "reps", "failures"])
        for p in self.points:
            w.writerow([p.controller, p.sigma, repr(p.cae_mean), repr(p.cae_std),
                        repr(p.effort_mean), repr(p.effort_std), p.reps, p.failures])
        return buf.getvalue()

    def lookup(self, controller: str, sigma: float) -> SweepPoint:
        for p in self.points:
            if p.controller == controller and p.sigma == sigma:
                return p
        raise KeyError((controller, sigma))


def sweep_seed(base_seed: int, sigma_index: int, rep: int, reps: int) -> int:
    # controllers at the same (sigma, rep) see the same noise stream
    return base_seed + sigma_index * reps + rep


def noise_sweep(
    controllers: dict[str, Callable[[], Controller]],
    base_config: EnvConfig,
    sigmas: Sequence[float] = SIGMA_GRID,
    reps: int = 50,
    base_seed: int = 0,
) -> NoiseSweepReport:
    """Mean and spread of CAE and control effort over seeded noisy episodes.

    A failed episode (hard stop or exception) is counted and left out of
    the statistics; it does not abort the sweep.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    points = []
    for name, make in controllers.items():
        for si, sigma in enumerate(sigmas):
            caes, efforts, seeds, failures = [], [], [], 0
            for rep in range(reps):
                seed = sweep_seed(base_seed, si, rep, reps)
                seeds.append(seed)
                try:
                    res = run_episode(base_config.with_(noise_sigma=float(sigma), seed=seed), make())
                except Exception as exc:  # recorded, not fatal
                    logger.warning("%s sigma=%g seed=%d failed: %s", name, sigma, seed, exc)
                    failures += 1
                    continue
                if res.terminated:
                    failures += 1
                    continue
                caes.append(res.metrics.cae)
                efforts.append(res.metrics.control_effort)
            stat = lambda xs, f: float(f(xs)) if xs else float("nan")
            points.append(
                SweepPoint(name, float(sigma), stat(caes, np.mean), stat(caes, np.std),
                           stat(efforts, np.mean), stat(efforts, np.std), reps, failures, tuple(seeds))
            )
    return NoiseSweepReport(base_config.profile.name, reps, points)


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
