"""``drumctl`` command-line front end.

Every command writes its artifacts plus a ``manifest.json`` into
``--out-dir``. Options can also be set through environment variables named
``DRUMCTL_<OPTION>`` (for example ``DRUMCTL_SEED=3``); explicit flags win.

Exit codes: 0 success, 2 configuration error, 3 runtime error,
4 evaluation episode stopped early at the 110 SPU limit.
"""

from __future__ import annotations

import argparse
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from drumctl import __version__
from drumctl.env import ConfigError, EnvConfig
from drumctl.evaluate import SIGMA_GRID, NoiseSweepReport, noise_sweep, run_episode, write_json
from drumctl.marl import MarlController, make_marl_env_factory, train_marl
from drumctl.pid import PUBLISHED_GAINS, PidController, PidGains, tune_pid
from drumctl.ppo import (
    CheckpointError,
    PolicyController,
    PpoConfig,
    load_checkpoint,
    make_env_factory,
    save_checkpoint,
    train,
)
from drumctl.profiles import BUILTIN_NAMES, ProfileError, builtin_profiles, get_profile

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_TERMINATED = 4

TRAIN_MODES = {"single": "single-RL", "multi": "multi-RL", "symmetric": "symmetric-RL", "marl": "marl"}
CONTROLLERS = ("pid", "single-rl", "multi-rl", "symmetric-rl", "marl")
ENV_PREFIX = "DRUMCTL_"

logger = logging.getLogger("drumctl")


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str
    outputs: list[str] = field(default_factory=list)
    duration_s: float = 0.0

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        write_json(path, asdict(self))
        return path


def version_stamp() -> str:
    try:
        rev = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --------------------------------------------------------------- parsing


def _env_default(dest: str, fallback, conv=str):
    raw = os.environ.get(ENV_PREFIX + dest.upper())
    if raw is None:
        return fallback
    try:
        return conv(raw)
    except ValueError:
        raise UsageError(f"{ENV_PREFIX}{dest.upper()}={raw!r} is not a valid {conv.__name__}") from None


def _sigma_list(text: str) -> list[float]:
    vals = [float(v) for v in text.split(",") if v.strip()]
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("sigmas must be a comma-separated list of values >= 0")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drumctl", description="Drum-controlled microreactor load-following lab.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, profile_default: str):
        sp.add_argument("--out-dir", default=_env_default("out_dir", "runs"), type=Path)
        sp.add_argument("--seed", type=int, default=_env_default("seed", 0, int))
        sp.add_argument("--profile", default=_env_default("profile", profile_default),
                        help=f"builtin name ({', '.join(BUILTIN_NAMES)}) or CSV path")

    sp = sub.add_parser("profiles", help="export the builtin load profiles as CSV")
    sp.add_argument("--out-dir", default=_env_default("out_dir", "runs"), type=Path)

    sp = sub.add_parser("tune-pid", help="tune PID gains on a profile by minimising CAE")
    common(sp, "train")
    sp.add_argument("--popsize", type=int, default=_env_default("popsize", 20, int))
    sp.add_argument("--maxiter", type=int, default=_env_default("maxiter", 200, int))

    sp = sub.add_parser("train", help="train an RL or MARL controller")
    common(sp, "train")
    sp.add_argument("--mode", choices=sorted(TRAIN_MODES), default=_env_default("mode", "single"))
    sp.add_argument("--timesteps", type=int, default=_env_default("timesteps", None, int),
                    help="trainer timesteps; for marl, eight per simulator step (default 200000 "
                    "simulator steps' worth)")
    sp.add_argument("--n-envs", type=int, default=_env_default("n_envs", 10, int))
    sp.add_argument("--n-steps", type=int, default=_env_default("n_steps", 2048, int))
    sp.add_argument("--obs-features", choices=("tracking", "plain"),
                    default=_env_default("obs_features", "tracking"))

    sp = sub.add_parser("simulate", help="run one evaluation episode and write its trace")
    common(sp, "test")
    _controller_args(sp)
    sp.add_argument("--noise-sigma", type=float, default=_env_default("noise_sigma", 0.0, float))
    sp.add_argument("--disable-drum", type=int, action="append", default=None,
                    help="1-based drum index to park; may repeat")

    sp = sub.add_parser("noise-sweep", help="CAE and effort versus measurement noise")
    common(sp, "test")
    sp.add_argument("--controller", action="append", default=None, metavar="KIND[=FILE]",
                    help="pid[=gains.json] or single-rl|multi-rl|symmetric-rl|marl=checkpoint; may repeat")
    sp.add_argument("--sigmas", type=_sigma_list, default=list(SIGMA_GRID))
    sp.add_argument("--reps", type=int, default=_env_default("reps", 50, int))
    return p


def _controller_args(sp) -> None:
    sp.add_argument("--controller", choices=CONTROLLERS, default=_env_default("controller", "pid"))
    sp.add_argument("--checkpoint", type=Path, default=_env_default("checkpoint", None, Path))
    sp.add_argument("--gains", type=Path, default=_env_default("gains", None, Path),
                    help="PID gains JSON (default: the published gains)")


# ----------------------------------------------------------- controllers


def make_controller(kind: str, path: Path | None):
    """(factory of fresh controllers, env overrides) for a controller kind."""
    if kind == "pid":
        gains = PidGains.load(path) if path is not None else PidGains(*PUBLISHED_GAINS)
        return (lambda: PidController(gains)), {"mode": "single-action"}
    if path is None:
        raise UsageError(f"--controller {kind} needs a checkpoint")
    params, _, mode = load_checkpoint(path)
    expected = {"single-rl": "single-RL", "multi-rl": "multi-RL", "symmetric-rl": "symmetric-RL", "marl": "marl"}[kind]
    if mode != expected:
        raise UsageError(f"checkpoint {path} holds a {mode} policy, not {expected}")
    if kind == "marl":
        return (lambda: MarlController(params)), {"mode": "marl-view"}
    if kind == "single-rl":
        return (lambda: PolicyController(params)), {"mode": "single-action"}
    k = 1.0 if kind == "symmetric-rl" else 0.0
    return (lambda: PolicyController(params)), {"mode": "multi-action", "symmetry_penalty_k": k}


def _disabled(indices) -> frozenset[int]:
    out = set()
    for i in indices or ():
        if not 1 <= i <= 8:
            raise UsageError(f"--disable-drum takes 1..8, got {i}")
        out.add(i - 1)
    return frozenset(out)


# --------------------------------------------------------------- commands


def cmd_profiles(args, manifest: RunManifest) -> int:
    for name, prof in builtin_profiles().items():
        path = args.out_dir / f"{name}.csv"
        prof.write_csv(path)
        manifest.outputs.append(str(path))
        print(f"{name}: {prof.duration:g} s, {len(prof.points)} knots, min {prof.minimum:g} SPU -> {path}")
    return EXIT_OK


def cmd_tune_pid(args, manifest: RunManifest) -> int:
    cfg = EnvConfig(profile=get_profile(args.profile))
    res = tune_pid(cfg, popsize=args.popsize, maxiter=args.maxiter, seed=args.seed)
    path = args.out_dir / "pid_gains.json"
    res.gains.save(path, res.train_cae)
    manifest.outputs.append(str(path))
    g = res.gains
    print(f"kp={g.kp:.6g} ki={g.ki:.6g} kd={g.kd:.6g}  CAE {res.train_cae:.4f} "
          f"(published gains: {res.published_cae:.4f}; {res.evaluations} evaluations)")
    if res.budget_exhausted:
        print("warning: generation budget exhausted; gains are best-so-far", file=sys.stderr)
    return EXIT_OK


def fit_rollout(config: PpoConfig, n_streams: int) -> PpoConfig:
    """Shorten ``n_steps`` when the budget is smaller than one rollout."""
    if config.total_timesteps >= n_streams * config.n_steps:
        return config
    n = config.total_timesteps // n_streams
    while n > 0 and (n * n_streams) % config.minibatch_size:
        n -= 1
    if n == 0:
        raise UsageError(
            f"--timesteps {config.total_timesteps} is too small for {n_streams} streams "
            f"and minibatches of {config.minibatch_size}"
        )
    logger.info("n_steps reduced to %d so one rollout fits the budget", n)
    return config.with_(n_steps=n)


def cmd_train(args, manifest: RunManifest) -> int:
    mode = TRAIN_MODES[args.mode]
    marl = mode == "marl"
    streams_per_env = 8 if marl else 1
    timesteps = args.timesteps if args.timesteps is not None else 200_000 * streams_per_env
    config = PpoConfig(
        n_envs=args.n_envs,
        n_steps=args.n_steps,
        total_timesteps=timesteps,
        obs_features=args.obs_features,
        seed=args.seed,
    )
    config = fit_rollout(config, args.n_envs * streams_per_env)
    manifest.config["ppo"] = config.to_dict()
    base = EnvConfig(profile=get_profile(args.profile), seed=args.seed)
    if marl:
        res = train_marl(make_marl_env_factory(base), config)
    else:
        res = train(make_env_factory(mode, base), config, mode)
    ckpt, curve = args.out_dir / "checkpoint.json", args.out_dir / "curve.csv"
    save_checkpoint(ckpt, res.params, config, mode, res.best_mean_reward)
    res.write_curve(curve)
    manifest.outputs += [str(ckpt), str(curve)]
    print(f"{mode}: {res.timesteps} agent timesteps = {res.simulator_steps} simulator steps, "
          f"{len(res.curve)} rollouts, best mean return {res.best_mean_reward:.3f} "
          f"(rollout {res.best_rollout})")
    if res.aborted:
        print("training aborted on a non-finite loss; checkpoint holds the best params so far", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_simulate(args, manifest: RunManifest) -> int:
    factory, env_kw = make_controller(args.controller, args.gains if args.controller == "pid" else args.checkpoint)
    cfg = EnvConfig(
        profile=get_profile(args.profile),
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        disabled_drums=_disabled(args.disable_drum),
        **env_kw,
    )
    res = run_episode(cfg, factory())
    paths = res.write(args.out_dir, f"{args.controller}_{cfg.profile.name}")
    manifest.outputs += [str(p) for p in paths]
    m = res.metrics
    print(f"{args.controller} on {cfg.profile.name}: MAE {m.mae:.4f} SPU, CAE {m.cae:.3f}, "
          f"effort {m.control_effort:.3f} deg, {m.episode_length} steps")
    if res.terminated:
        print("episode stopped early: true power exceeded 110 SPU", file=sys.stderr)
        return EXIT_TERMINATED
    return EXIT_OK


def cmd_noise_sweep(args, manifest: RunManifest) -> int:
    specs = args.controller or ["pid"]
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    factories, env_kw = {}, {}
    for spec in specs:
        kind, _, path = spec.partition("=")
        if kind not in CONTROLLERS:
            raise UsageError(f"unknown controller {kind!r}; choose from {', '.join(CONTROLLERS)}")
        factory, kw = make_controller(kind, Path(path) if path else None)
        factories[kind], env_kw[kind] = factory, kw
    profile = get_profile(args.profile)
    points = []
    for kind, factory in factories.items():
        cfg = EnvConfig(profile=profile, **env_kw[kind])
        points += noise_sweep({kind: factory}, cfg, args.sigmas, args.reps, args.seed).points
    report = NoiseSweepReport(profile.name, args.reps, points)
    js, cs = args.out_dir / "noise_sweep.json", args.out_dir / "noise_sweep.csv"
    write_json(js, report.to_dict())
    cs.write_text(report.to_csv(), newline="")
    manifest.outputs += [str(js), str(cs)]
    for p in report.points:
        print(f"{p.controller:13s} sigma={p.sigma:<4g} CAE {p.cae_mean:9.2f} +- {p.cae_std:7.2f}  "
              f"effort {p.effort_mean:8.2f} +- {p.effort_std:6.2f}  failures {p.failures}")
    return EXIT_OK


COMMANDS = {
    "profiles": cmd_profiles,
    "tune-pid": cmd_tune_pid,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "noise-sweep": cmd_noise_sweep,
}


def main(argv: list[str] | None = None) -> int:
    try:
        parser = build_parser()
    except UsageError as exc:
        print(f"drumctl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    snapshot = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    manifest = RunManifest(args.command, snapshot, getattr(args, "seed", 0), version_stamp())
    t0 = time.perf_counter()
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args, manifest)
    except (UsageError, ConfigError, ProfileError, CheckpointError, ValueError) as exc:
        print(f"drumctl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"drumctl: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest.duration_s = time.perf_counter() - t0
    manifest.write(args.out_dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
