"""Episode-level tracking metrics: MAE, CAE and control effort."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

DT = 1.0


@dataclass(frozen=True)
class EpisodeMetrics:
    mae: float  # SPU
    cae: float  # SPU*s
    control_effort: float  # deg, summed over drums
    episode_length: int  # control steps

    def to_dict(self, terminated_early: bool = False) -> dict:
        out = asdict(self)
        out["terminated_early"] = bool(terminated_early)
        return out

    def to_json(self, terminated_early: bool = False) -> str:
        return json.dumps(self.to_dict(terminated_early), indent=2)


def compute_metrics(true_power, setpoints, actions) -> EpisodeMetrics:
    """Score one episode sampled at 1 s.

    ``actions`` holds the drum speeds actually applied at each step, shape
    ``(T,)`` or ``(T, n_drums)``; disabled drums contribute zeros.
    """
    p = np.asarray(true_power, dtype=float)
    s = np.asarray(setpoints, dtype=float)
    u = np.asarray(actions, dtype=float)
    if p.size == 0:
        raise ValueError("cannot score an empty episode")
    if p.shape != s.shape or u.shape[0] != p.shape[0]:
        raise ValueError(
            f"series lengths differ: power {p.shape}, setpoint {s.shape}, actions {u.shape}"
        )
    T = p.size
    cae = float(np.sum(np.abs(p - s)) * DT)
    return EpisodeMetrics(
        mae=cae / (T * DT),
        cae=cae,
        control_effort=float(np.sum(np.abs(u)) * DT),
        episode_length=T,
    )
