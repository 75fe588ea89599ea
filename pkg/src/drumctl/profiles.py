"""Piecewise-linear load profiles (power setpoint in SPU versus time in s)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

HEADER = ("time_s", "setpoint_spu")
BUILTIN_NAMES = ("train", "test", "low-power", "long-test")
MAX_SETPOINT = 110.0


class ProfileError(ValueError):
    """A load profile violates its structural constraints."""


@dataclass(frozen=True)
class LoadProfile:
    name: str
    points: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        pts = tuple((float(t), float(p)) for t, p in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise ProfileError(f"{self.name}: need at least two knots")
        times = [t for t, _ in pts]
        if times[0] != 0.0:
            raise ProfileError(f"{self.name}: first knot must be at t=0, got {times[0]}")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ProfileError(f"{self.name}: knot times must be strictly increasing")
        for t, p in pts:
            if not 0.0 < p <= MAX_SETPOINT:
                raise ProfileError(f"{self.name}: setpoint {p} at t={t} outside (0, 110]")
        if pts[0][1] != 100.0:
            raise ProfileError(f"{self.name}: profiles start at 100 SPU, got {pts[0][1]}")
        object.__setattr__(self, "_t", np.array(times))
        object.__setattr__(self, "_p", np.array([p for _, p in pts]))

    @property
    def duration(self) -> float:
        return self.points[-1][0]

    @property
    def n_steps(self) -> int:
        """Number of 1 s control intervals in an episode."""
        return int(round(self.duration))

    def setpoint(self, t: float) -> float:
        """Setpoint at ``t``; clamps to the end values outside the profile."""
        return float(np.interp(t, self._t, self._p))

    def series(self, times) -> np.ndarray:
        return np.interp(np.asarray(times, dtype=float), self._t, self._p)

    @property
    def minimum(self) -> float:
        return float(self._p.min())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for t, p in self.points:
            w.writerow([_fmt(t), _fmt(p)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), newline="")

    @classmethod
    def from_csv(cls, text: str, name: str = "custom") -> "LoadProfile":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(c.strip() for c in rows[0]) != HEADER:
            raise ProfileError(f"{name}: expected header {','.join(HEADER)}")
        points = []
        for lineno, row in enumerate(rows[1:], 2):
            if not row:
                continue
            try:
                points.append((float(row[0]), float(row[1])))
            except (IndexError, ValueError) as exc:
                raise ProfileError(f"{name}: line {lineno}: {exc}") from None
        return cls(name, tuple(points))

    @classmethod
    def read_csv(cls, path: str | Path) -> "LoadProfile":
        path = Path(path)
        return cls.from_csv(path.read_text(), name=path.stem)


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def builtin_profiles() -> dict[str, LoadProfile]:
    """The four shipped profiles, keyed by name."""
    data = resources.files("drumctl") / "data" / "profiles"
    return {
        name: LoadProfile.from_csv((data / f"{name}.csv").read_text(), name=name)
        for name in BUILTIN_NAMES
    }


def get_profile(name_or_path: str | Path) -> LoadProfile:
    """Resolve a builtin profile name or a CSV path."""
    if str(name_or_path) in BUILTIN_NAMES:
        return builtin_profiles()[str(name_or_path)]
    path = Path(name_or_path)
    if not path.exists():
        raise ProfileError(
            f"{name_or_path!s} is neither a builtin profile ({', '.join(BUILTIN_NAMES)}) nor a file"
        )
    return LoadProfile.read_csv(path)
