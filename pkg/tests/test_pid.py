import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from drumctl.env import DrumControlEnv, EnvConfig
from drumctl.pid import (
    INTEGRAL_LIMIT,
    PUBLISHED_GAINS,
    PidController,
    PidGains,
    PidState,
    episode_cae,
    pid_step,
    tune_pid,
)

PUBLISHED = PidGains(*PUBLISHED_GAINS)
gains_st = st.builds(PidGains, st.floats(0, 5), st.floats(0, 5), st.floats(0, 5))
err_st = st.floats(-200, 200)


def test_error_step_example():
    _, s = pid_step(PUBLISHED, 100.0, 100.0, PidState())
    u, _ = pid_step(PUBLISHED, 101.0, 100.0, s)
    assert u == pytest.approx(0.078 + 0.3, abs=1e-15)


def test_zero_error_gives_zero_forever():
    s = PidState()
    for _ in range(50):
        u, s = pid_step(PidGains(0.5, 0.5, 0.5), 80.0, 80.0, s)
        assert u == 0.0


def test_constant_large_error_clamps():
    s = PidState()
    for _ in range(5):
        u, s = pid_step(PUBLISHED, 110.0, 100.0, s)
        assert u == 0.5


def test_first_step_has_no_derivative_kick():
    u, _ = pid_step(PidGains(0.0, 0.0, 1.0), 101.0, 100.0, PidState())
    assert u == 0.0


def test_integral_clamped():
    s = PidState()
    for _ in range(300):
        _, s = pid_step(PidGains(0.0, 1e-4, 0.0), 101.0, 100.0, s)
    assert s.integral == INTEGRAL_LIMIT


@given(gains_st, err_st, err_st, st.floats(-1000, 1000))
def test_output_clamp(g, e, prev, integral):
    u, _ = pid_step(g, 100.0 + e, 100.0, PidState(integral, prev, True))
    assert -0.5 <= u <= 0.5


@given(st.floats(0, 1), st.floats(-0.3, 0.3))
def test_linear_below_clamp(kp, e):
    g = PidGains(kp, 0.0, 0.0)
    u1, _ = pid_step(g, 100.0 + e, 100.0, PidState())
    u2, _ = pid_step(g, 100.0 + 2 * e, 100.0, PidState())
    assert u2 == pytest.approx(2 * u1, abs=1e-12)


@given(st.floats(0.001, 1), err_st)
def test_proportional_sign(kp, e):
    u, _ = pid_step(PidGains(kp, 0.0, 0.0), 100.0 + e, 100.0, PidState())
    assert u == 0.0 or (u > 0) == (e > 0)


def test_gains_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        PidGains(float("nan"), 0, 0)
    path = tmp_path / "g.json"
    PUBLISHED.save(path, train_cae=12.5)
    assert json.loads(path.read_text()) == {"kp": 0.078, "ki": 0.0, "kd": 0.3, "train_cae": 12.5}
    assert PidGains.load(path) == PUBLISHED


def test_controller_reset_clears_state():
    c = PidController(PUBLISHED)
    obs = DrumControlEnv(EnvConfig()).reset()
    first = c.act(obs)
    c.act(obs)
    c.reset()
    assert c.act(obs) == first


def test_published_gains_feasible_on_train():
    cae, terminated = episode_cae(PUBLISHED_GAINS, EnvConfig(training=True))
    assert not terminated and 0 < cae < 200


def test_tuner_small_budget_is_deterministic_and_flags_budget():
    cfg = EnvConfig()
    a = tune_pid(cfg, popsize=6, maxiter=2, seed=4, polish=False)
    b = tune_pid(cfg, popsize=6, maxiter=2, seed=4, polish=False)
    assert a.gains == b.gains and a.train_cae == b.train_cae
    assert a.budget_exhausted
    assert a.train_cae == pytest.approx(episode_cae(a.gains.as_tuple(), cfg.with_(training=True))[0])
