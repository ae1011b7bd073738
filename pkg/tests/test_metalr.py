from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metanas.metalr import (
    ALPHA_MAX,
    EsConfig,
    FixedLr,
    LiveLr,
    LrSchedule,
    MetaLrParams,
    MetaLrState,
    NonFiniteLossError,
    QuadraticBowlTask,
    ReplayLr,
    fixed_lr_loss,
    init_params,
    param_count,
    pretrain_controller,
    read_params_json,
    read_schedule_csv,
    replay_schedule,
    rollout,
    sgd_step,
    step_controller,
    write_params_json,
    write_schedule_csv,
)


def test_param_count_of_gru_controller():
    # three gates with 2 inputs and h hidden units, plus input scales and a scalar head
    h = 20
    assert param_count(h) == 3 * (h * 2 + h * h + h) + 2 + h + 1


def test_first_alpha_is_near_initial_rate(rng):
    alpha, _ = step_controller(init_params(rng), MetaLrState.fresh(), 2.3)
    assert alpha == pytest.approx(1e-3, rel=0.1)


@given(st.integers(0, 2**32 - 1), st.lists(st.floats(0, 1e6), min_size=1, max_size=30))
def test_alphas_stay_in_open_interval(seed, losses):
    params = init_params(np.random.default_rng(seed))
    params = params.with_phi(params.phi * 50)  # push towards saturation
    state = MetaLrState.fresh()
    for loss in losses:
        alpha, state = step_controller(params, state, loss)
        assert 0 < alpha < ALPHA_MAX


def test_controller_rejects_bad_loss(rng):
    for bad in (math.nan, math.inf, -1.0):
        with pytest.raises(NonFiniteLossError):
            step_controller(init_params(rng), MetaLrState.fresh(), bad)


def test_params_validation(rng):
    with pytest.raises(ValueError):
        MetaLrParams(phi=np.zeros(3))
    phi = init_params(rng).phi.copy()
    phi[0] = np.nan
    with pytest.raises(ValueError):
        MetaLrParams(phi=phi)


def test_sgd_step_with_decay():
    mu = np.array([1.0, -2.0])
    out = sgd_step(mu, np.array([0.5, 0.5]), 0.1, weight_decay=0.5)
    assert out == pytest.approx(np.array([0.95, -2.05]) * (1 - 0.05))
    with pytest.raises(ValueError):
        sgd_step(mu, mu, 0.0)


def test_replay_schedule_clamps():
    s = LrSchedule(steps=(0, 5, 10), alphas=(0.1, 0.05, 0.01))
    assert [replay_schedule(s, t) for t in (-1, 0, 4, 5, 99)] == [0.1, 0.1, 0.1, 0.05, 0.01]
    with pytest.raises(ValueError):
        LrSchedule(steps=(0, 0), alphas=(0.1, 0.1))


def test_lr_sources(rng):
    assert FixedLr(0.2).start().next_alpha(1.0) == 0.2
    run = ReplayLr(LrSchedule(steps=(0, 1), alphas=(0.3, 0.4))).start()
    assert [run.next_alpha(1.0) for _ in range(3)] == [0.3, 0.4, 0.4]
    params = init_params(rng)
    live = LiveLr(params).start()
    assert live.next_alpha(2.0) == step_controller(params, MetaLrState.fresh(), 2.0)[0]


def test_schedule_and_params_files_round_trip(tmp_path, rng):
    s = LrSchedule(steps=(0, 1, 2), alphas=(0.001, 0.0123456789, 0.05))
    write_schedule_csv(tmp_path / "s.csv", s)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "step,alpha"
    assert read_schedule_csv(tmp_path / "s.csv") == s
    p = init_params(rng)
    write_params_json(tmp_path / "p.json", p)
    back = read_params_json(tmp_path / "p.json")
    assert np.array_equal(back.phi, p.phi) and back.h_dim == p.h_dim


def test_schedule_file_rejects_bad_header(tmp_path):
    (tmp_path / "s.csv").write_text("t,lr\n0,0.1\n")
    with pytest.raises(ValueError):
        read_schedule_csv(tmp_path / "s.csv")


def test_quadratic_task_gradient():
    task = QuadraticBowlTask(dim=4)
    mu = np.array([1.0, 2.0, -1.0, 0.5])
    loss, grad = task.loss_and_grad(mu, 0)
    eps = 1e-6
    num = [(task.loss_and_grad(mu + eps * e, 0)[0] - task.loss_and_grad(mu - eps * e, 0)[0])
           / (2 * eps) for e in np.eye(4)]
    assert grad == pytest.approx(num, rel=1e-6)
    assert loss == pytest.approx(0.5 * float(task.curvatures @ mu ** 2))


def test_pretraining_never_worse_than_start(rng):
    task = QuadraticBowlTask(dim=5)
    logs = []
    result = pretrain_controller(task, EsConfig(population=4, meta_steps=2, inner_steps=20), rng,
                                 log=logs.append)
    assert len(logs) == 2
    assert result.score <= result.initial_score
    assert len(result.schedule) == 20
    assert rollout(result.params, task, 20).score == pytest.approx(result.score)


def test_es_config_validation():
    with pytest.raises(ValueError):
        EsConfig(population=3)
    with pytest.raises(ValueError):
        EsConfig(inner_steps=0)


def test_fixed_lr_loss_decreases_with_reasonable_rate():
    task = QuadraticBowlTask()
    assert fixed_lr_loss(task, 0.05, 50) < task.validation_loss(task.reset())
