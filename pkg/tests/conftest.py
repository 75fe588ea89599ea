import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the verdict of an acceptance criterion for the end-of-run summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def desk_single():
    """Single-RL policy from a 200k-step run on the train profile (default PPO settings)."""
    from drumctl.env import EnvConfig
    from drumctl.ppo import PpoConfig, make_env_factory, train

    return train(make_env_factory("single-RL", EnvConfig()), PpoConfig(total_timesteps=200_000), "single-RL")


@pytest.fixture(scope="session")
def desk_marl():
    """Shared MARL policy from 200k simulator steps (1.6M agent timesteps) on the train profile."""
    from drumctl.env import EnvConfig
    from drumctl.marl import make_marl_env_factory, train_marl
    from drumctl.ppo import PpoConfig

    cfg = PpoConfig(n_steps=256, total_timesteps=1_600_000)
    return train_marl(make_marl_env_factory(EnvConfig()), cfg)
