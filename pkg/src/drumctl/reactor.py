"""Point-kinetics microreactor with thermal and xenon feedback.

Six delayed-neutron groups, a three-node (fuel / moderator / coolant) lumped
heat balance, iodine-xenon dynamics, and eight cosine-worth control drums.
Reactivity is bookkept as a deviation from a reference (equilibrium) state:
drum worth relative to the reference angles, temperature feedback relative to
the reference temperatures, and xenon poisoning relative to the reference
xenon inventory.

Internal reactivity is absolute (dk/k); anything labelled ``pcm`` is converted
at 1e-5. Iodine and xenon are tracked in cm^-3: the thermal speed and the
reference neutron density are given in SI and converted with ``cm_per_m``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from drumctl import _kernels as K

PCM = 1e-5
N_DRUMS = 8
MAX_DRUM_SPEED = 0.5  # deg/s
THETA_MIN = 0.0
THETA_MAX = 180.0


class DomainError(ValueError):
    """An argument lies outside the domain of a physics function."""


class IntegrationError(RuntimeError):
    """The adaptive integrator could not complete a control interval.

    ``last_state`` is the last accepted state before the failure.
    """

    def __init__(self, message: str, last_state: "ReactorState"):
        super().__init__(message)
        self.last_state = last_state


@dataclass(frozen=True)
class ReactorParams:
    """Physical constants of the drum-controlled microreactor.

    Defaults are the HolosGen point-kinetics values. Reactivities are in pcm,
    temperatures in K, masses in kg, heat capacities in J/kg/K, heat-transfer
    coefficients in W/K, power in W.
    """

    beta: tuple[float, ...] = (14.20, 92.40, 78.00, 206.60, 67.10, 21.80)
    beta_total: float = 480.10
    lambdas: tuple[float, ...] = (0.01272, 0.03174, 0.11600, 0.31100, 1.40000, 3.87000)
    Lambda_gen: float = 0.00168
    alpha_f: float = -2.875
    alpha_m: float = -3.696
    alpha_c: float = 0.0
    m_f: float = 2002.0
    m_m: float = 11573.0
    m_c: float = 500.0
    c_f: float = 977.0
    c_m: float = 1697.0
    c_c: float = 5188.6
    K_fm: float = 1.17e6
    K_mc: float = 2.16e5
    mdot_c: float = 17.5
    T_in: float = 795.0
    P_r: float = 22.0e6
    q_frac: float = 0.96
    Sigma_f: float = 0.1117  # 1/cm
    gamma_I: float = 0.061
    gamma_X: float = 0.002
    lambda_I: float = 2.87e-5
    lambda_X: float = 2.09e-5
    v_th: float = 2.19e3  # m/s
    sigma_X: float = 2.65e-22  # cm^2
    rho_d_max: float = 511.0
    n_0: float = 2.25e13  # 1/m^3
    # tabulated steady temperatures; metadata only, the steady state is solved
    T_f0: float = 832.4
    T_m0: float = 830.22
    # modelling switches
    n_drums: int = N_DRUMS
    rho_d_max_is_total: bool = False
    cm_per_m: float = 100.0
    xenon_worth_scale: float = 1.0

    def __post_init__(self) -> None:
        if len(self.beta) != 6 or len(self.lambdas) != 6:
            raise ValueError("beta and lambdas need exactly six delayed groups")
        if abs(sum(self.beta) - self.beta_total) > 0.5:
            raise ValueError(
                f"delayed group fractions sum to {sum(self.beta):.3f} pcm, "
                f"beta_total is {self.beta_total}"
            )
        positive = {
            "Lambda_gen": self.Lambda_gen,
            "m_f": self.m_f,
            "m_m": self.m_m,
            "m_c": self.m_c,
            "c_f": self.c_f,
            "c_m": self.c_m,
            "c_c": self.c_c,
            "K_fm": self.K_fm,
            "K_mc": self.K_mc,
            "mdot_c": self.mdot_c,
            "P_r": self.P_r,
            "rho_d_max": self.rho_d_max,
            "cm_per_m": self.cm_per_m,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be strictly positive, got {value}")
        if any(not lam > 0 for lam in self.lambdas):
            raise ValueError("precursor decay constants must be strictly positive")
        if not 0.0 <= self.q_frac <= 1.0:
            raise ValueError(f"q_frac must lie in [0, 1], got {self.q_frac}")
        if self.n_drums < 1:
            raise ValueError("need at least one drum")

    @property
    def drum_worth_each(self) -> float:
        """Full-rotation worth of a single drum (pcm)."""
        if self.rho_d_max_is_total:
            return self.rho_d_max / self.n_drums
        return self.rho_d_max

    @property
    def flux_ref(self) -> float:
        """Thermal flux at rated power, v * n_0, in 1/cm^2/s."""
        return self.v_th * self.cm_per_m * self.n_0 / self.cm_per_m**3

    @property
    def xenon_worth(self) -> float:
        """Absolute reactivity per unit xenon concentration (sigma_X * v)."""
        return self.sigma_X * self.v_th * self.cm_per_m * self.xenon_worth_scale

    @cached_property
    def packed(self) -> np.ndarray:
        p = np.zeros(K.N_PACKED)
        p[K.P_BETA : K.P_BETA + 6] = np.asarray(self.beta) * PCM
        p[K.P_LAMBDA : K.P_LAMBDA + 6] = self.lambdas
        p[K.P_GEN_TIME] = self.Lambda_gen
        p[K.P_ALPHA_F] = self.alpha_f * PCM
        p[K.P_ALPHA_M] = self.alpha_m * PCM
        p[K.P_ALPHA_C] = self.alpha_c * PCM
        p[K.P_MCF] = self.m_f * self.c_f
        p[K.P_MCM] = self.m_m * self.c_m
        p[K.P_MCC] = self.m_c * self.c_c
        p[K.P_KFM] = self.K_fm
        p[K.P_KMC] = self.K_mc
        p[K.P_MDOT_CC] = self.mdot_c * self.c_c
        p[K.P_T_IN] = self.T_in
        p[K.P_POWER] = self.P_r
        p[K.P_Q] = self.q_frac
        p[K.P_FISSION_RATE] = self.Sigma_f * self.flux_ref
        p[K.P_GAMMA_I] = self.gamma_I
        p[K.P_GAMMA_X] = self.gamma_X
        p[K.P_LAMBDA_I] = self.lambda_I
        p[K.P_LAMBDA_X] = self.lambda_X
        p[K.P_BURNUP_RATE] = self.sigma_X * self.flux_ref
        p[K.P_XE_WORTH] = self.xenon_worth
        p[K.P_DRUM_HALF_WORTH] = 0.5 * self.drum_worth_each * PCM
        p.setflags(write=False)
        return p

    @classmethod
    def from_file(cls, path: str | Path) -> "ReactorParams":
        """Read ``key = value`` lines; unspecified keys keep their defaults.

        Delayed groups are given as ``beta_1`` .. ``beta_6`` and
        ``lambda_1`` .. ``lambda_6``. ``#`` starts a comment.
        """
        values: dict[str, str] = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict[str, object]) -> "ReactorParams":
        defaults = cls()
        beta = list(defaults.beta)
        lambdas = list(defaults.lambdas)
        kwargs: dict[str, object] = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, value in values.items():
            if key.startswith("beta_") and key[5:].isdigit():
                beta[int(key[5:]) - 1] = float(value)
            elif key.startswith("lambda_") and key[7:].isdigit():
                lambdas[int(key[7:]) - 1] = float(value)
            elif key in types and key not in ("beta", "lambdas"):
                kind = types[key]
                if kind == "bool":
                    kwargs[key] = str(value).strip().lower() in ("1", "true", "yes")
                elif kind == "int":
                    kwargs[key] = int(value)
                else:
                    kwargs[key] = float(value)
            else:
                raise ValueError(f"unknown reactor parameter {key!r}")
        if "beta_total" not in kwargs:
            kwargs["beta_total"] = sum(beta)
        return cls(beta=tuple(beta), lambdas=tuple(lambdas), **kwargs)

    def to_lines(self) -> str:
        out = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "beta":
                out += [f"beta_{i + 1} = {b!r}" for i, b in enumerate(value)]
            elif f.name == "lambdas":
                out += [f"lambda_{i + 1} = {b!r}" for i, b in enumerate(value)]
            else:
                out.append(f"{f.name} = {value!r}")
        return "\n".join(out) + "\n"


@dataclass(frozen=True)
class ReactorState:
    """Snapshot of the reactor. ``n_bar`` = 1 is rated power."""

    n_bar: float
    c_bar: tuple[float, ...]
    T_f: float
    T_m: float
    T_c: float
    conc_I: float
    conc_X: float
    theta: tuple[float, ...]
    t: float = 0.0

    def __post_init__(self) -> None:
        if len(self.c_bar) != 6:
            raise ValueError("c_bar needs six entries")
        if any(not THETA_MIN <= th <= THETA_MAX for th in self.theta):
            raise DomainError(f"drum angles must lie in [0, 180], got {self.theta}")

    @property
    def power_spu(self) -> float:
        return 100.0 * self.n_bar

    def vector(self) -> np.ndarray:
        return np.array(
            [self.n_bar, *self.c_bar, self.T_f, self.T_m, self.T_c, self.conc_I, self.conc_X]
        )

    @classmethod
    def from_vector(cls, y: Sequence[float], theta: Iterable[float], t: float) -> "ReactorState":
        y = [float(v) for v in y]
        return cls(
            n_bar=y[K.IDX_N],
            c_bar=tuple(y[K.IDX_C : K.IDX_C + 6]),
            T_f=y[K.IDX_TF],
            T_m=y[K.IDX_TM],
            T_c=y[K.IDX_TC],
            conc_I=y[K.IDX_I],
            conc_X=y[K.IDX_X],
            theta=tuple(float(th) for th in theta),
            t=float(t),
        )

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "ReactorState":
        raw = json.loads(text)
        raw["c_bar"] = tuple(raw["c_bar"])
        raw["theta"] = tuple(raw["theta"])
        return cls(**raw)


@dataclass(frozen=True)
class StateDerivative:
    """d/dt of each :class:`ReactorState` field (``theta`` in deg/s, ``t`` is 1)."""

    n_bar: float
    c_bar: tuple[float, ...]
    T_f: float
    T_m: float
    T_c: float
    conc_I: float
    conc_X: float
    theta: tuple[float, ...]
    t: float = 1.0

    def vector(self) -> np.ndarray:
        return np.array(
            [self.n_bar, *self.c_bar, self.T_f, self.T_m, self.T_c, self.conc_I, self.conc_X]
        )


@dataclass(frozen=True)
class FeedbackReference:
    """Operating point that all reactivity deviations are measured from."""

    theta: tuple[float, ...]
    T_f: float
    T_m: float
    T_c: float
    conc_X: float

    @classmethod
    def from_state(cls, state: ReactorState) -> "FeedbackReference":
        return cls(state.theta, state.T_f, state.T_m, state.T_c, state.conc_X)

    def packed(self, external_pcm: float = 0.0) -> np.ndarray:
        r = np.empty(len(self.theta) + 5)
        n = len(self.theta)
        r[:n] = self.theta
        r[n:] = (self.T_f, self.T_m, self.T_c, self.conc_X, external_pcm * PCM)
        return r


@dataclass(frozen=True)
class DrumCommand:
    """Per-drum rotation rates in deg/s. Disabled drums hold position."""

    speeds: tuple[float, ...]
    mask: tuple[bool, ...] = field(default=(True,) * N_DRUMS)

    def __post_init__(self) -> None:
        if len(self.speeds) != len(self.mask):
            raise ValueError("speeds and mask must have the same length")
        clamped = tuple(
            float(np.clip(s, -MAX_DRUM_SPEED, MAX_DRUM_SPEED)) if m else 0.0
            for s, m in zip(self.speeds, self.mask)
        )
        object.__setattr__(self, "speeds", clamped)
        object.__setattr__(self, "mask", tuple(bool(m) for m in self.mask))

    @classmethod
    def hold(cls, n_drums: int = N_DRUMS) -> "DrumCommand":
        return cls((0.0,) * n_drums, (True,) * n_drums)

    @classmethod
    def broadcast(cls, speed: float, mask: Sequence[bool] | None = None) -> "DrumCommand":
        mask = tuple(mask) if mask is not None else (True,) * N_DRUMS
        return cls((float(speed),) * len(mask), mask)


@dataclass(frozen=True)
class Tolerance:
    rtol: float = 1e-6
    atol: float = 1e-9
    max_substeps: int = 10_000

    def __post_init__(self) -> None:
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")


def _check_angle(theta: float) -> None:
    if not THETA_MIN <= theta <= THETA_MAX:
        raise DomainError(f"drum angle {theta} deg outside [0, 180]")


def drum_worth(theta: float, params: ReactorParams = ReactorParams()) -> float:
    """Cosine drum worth (pcm) at ``theta`` degrees, over the full ``rho_d_max``."""
    _check_angle(theta)
    return 0.5 * params.rho_d_max * (1.0 - math.cos(math.radians(theta)))


def diff_drum_worth(theta: float, params: ReactorParams = ReactorParams()) -> float:
    """Derivative of :func:`drum_worth` with respect to angle, in pcm/rad."""
    _check_angle(theta)
    return 0.5 * params.rho_d_max * math.sin(math.radians(theta))


def xenon_reactivity_pcm(conc_X: float, params: ReactorParams = ReactorParams()) -> float:
    """Poisoning worth sigma_X * v * X of a xenon inventory, as a positive pcm value."""
    return params.xenon_worth * conc_X / PCM


def total_reactivity(
    state: ReactorState,
    ref: FeedbackReference,
    params: ReactorParams = ReactorParams(),
    external_pcm: float = 0.0,
) -> float:
    """Net reactivity (absolute dk/k) of ``state`` relative to ``ref``."""
    y = state.vector()
    theta = np.asarray(state.theta, dtype=float)
    return float(
        K.reactivity(y, theta, np.zeros_like(theta), 0.0, ref.packed(external_pcm), params.packed)
    )


def derivatives(
    state: ReactorState,
    command: DrumCommand,
    ref: FeedbackReference,
    params: ReactorParams = ReactorParams(),
    external_pcm: float = 0.0,
) -> "StateDerivative":
    """Time derivative of every state variable.

    Angle rates are zero for masked drums and for drums pinned at a limit.
    """
    y = state.vector()
    theta = np.asarray(state.theta, dtype=float)
    speed = np.asarray(command.speeds, dtype=float)
    out = np.empty(K.N_STATE)
    K.rhs(0.0, y, theta, speed, ref.packed(external_pcm), params.packed, out)
    rates = tuple(
        0.0 if (th >= THETA_MAX and u > 0) or (th <= THETA_MIN and u < 0) else float(u)
        for th, u in zip(theta, speed)
    )
    v = [float(x) for x in out]
    return StateDerivative(
        n_bar=v[K.IDX_N],
        c_bar=tuple(v[K.IDX_C : K.IDX_C + 6]),
        T_f=v[K.IDX_TF],
        T_m=v[K.IDX_TM],
        T_c=v[K.IDX_TC],
        conc_I=v[K.IDX_I],
        conc_X=v[K.IDX_X],
        theta=rates,
    )


def equilibrium_state(
    power_fraction: float = 1.0,
    theta_0: float | Sequence[float] = 90.0,
    params: ReactorParams = ReactorParams(),
) -> ReactorState:
    """Steady state at ``power_fraction`` of rated power with drums at ``theta_0``.

    Temperatures come from the steady heat balances (not the tabulated
    ``T_f0``/``T_m0``), iodine and xenon from their algebraic equilibria.
    The result is a fixed point of :func:`derivatives` when used as its own
    :class:`FeedbackReference`.
    """
    if not power_fraction > 0:
        raise DomainError(f"power fraction must be positive, got {power_fraction}")
    if np.isscalar(theta_0):
        theta = (float(theta_0),) * params.n_drums
    else:
        theta = tuple(float(th) for th in theta_0)
    for th in theta:
        if not THETA_MIN < th < THETA_MAX:
            raise DomainError(f"initial drum angle must lie in (0, 180), got {th}")

    n = float(power_fraction)
    heat = params.P_r * n
    T_c = params.T_in + heat / (params.mdot_c * params.c_c)
    T_m = T_c + heat / params.K_mc
    T_f = T_m + params.q_frac * heat / params.K_fm
    fission = params.Sigma_f * params.flux_ref * n
    conc_I = params.gamma_I * fission / params.lambda_I
    conc_X = (params.gamma_I + params.gamma_X) * fission / (
        params.lambda_X + params.sigma_X * params.flux_ref * n
    )
    return ReactorState(
        n_bar=n,
        c_bar=(n,) * 6,
        T_f=T_f,
        T_m=T_m,
        T_c=T_c,
        conc_I=conc_I,
        conc_X=conc_X,
        theta=theta,
        t=0.0,
    )


def _limit_crossings(theta: np.ndarray, speed: np.ndarray, dt: float) -> list[float]:
    times = set()
    for th, u in zip(theta, speed):
        if u > 0:
            tau = (THETA_MAX - th) / u
        elif u < 0:
            tau = (th - THETA_MIN) / -u
        else:
            continue
        if 0.0 < tau < dt:
            times.add(tau)
    return sorted(times)


def integrate_step(
    state: ReactorState,
    command: DrumCommand,
    dt: float,
    ref: FeedbackReference,
    params: ReactorParams = ReactorParams(),
    tol: Tolerance = Tolerance(),
    external_pcm: float = 0.0,
) -> ReactorState:
    """Advance ``state`` by ``dt`` seconds under a constant drum command.

    Drums rotate linearly at their commanded rate and stop at 0 or 180 deg.
    The interval is split wherever a drum reaches a limit so the integrator
    never steps across the kink in the drum-worth history.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    theta = np.asarray(state.theta, dtype=float)
    speed = np.asarray(command.speeds, dtype=float)
    if speed.shape != theta.shape:
        raise ValueError(f"command has {speed.size} drums, state has {theta.size}")
    refv = ref.packed(external_pcm)
    p = params.packed
    y = state.vector()
    t0 = 0.0
    for t1 in [*_limit_crossings(theta, speed, dt), dt]:
        y_new, status, _, _ = K.dopri5(
            t0, t1, y, theta, speed, refv, p, tol.rtol, tol.atol, tol.max_substeps, 0.0
        )
        if status != 0:
            angles = np.clip(theta + speed * t0, THETA_MIN, THETA_MAX)
            last = ReactorState.from_vector(y_new, angles, state.t + t0)
            reason = "step size underflow" if status == 1 else "sub-step budget exhausted"
            raise IntegrationError(f"integration failed at t={state.t + t0:.6g} s: {reason}", last)
        y, t0 = y_new, t1
    angles = np.clip(theta + speed * dt, THETA_MIN, THETA_MAX)
    return ReactorState.from_vector(y, angles, state.t + dt)
