import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from operon.datagen import AUTONOMOUS, NON_AUTONOMOUS, build_quartets, fit_normalizer, make_rng
from operon.dynamics import TimeGrid, Trajectory
from operon.evaluate import (DegenerateReferenceError, EnsembleModel, EvalReport, NeuralModel,
                             OracleModel, RolloutDivergence, batch_evaluate, extrapolation_study,
                             l2_relative_error, parse_range, picp, read_columns, rollout,
                             rollout_evaluate, stepsize_study, write_band, write_curve)
from operon.experiments import (lorenz_rhs_default, lorenz_trajectories,
                                pendulum_rhs_default, pendulum_trajectories)
from operon.model import (ARCHITECTURES, DEEPONET, LSTM_MIONET, VANILLA_LSTM, config_for,
                          init_parameters, model_forward)
from operon.training import Ensemble, PredictionBand, ReSGLDConfig

SMALL = dict(p=4, branch_hidden=(6,), lift_hidden=(5,), lstm_hidden=5, decoder_hidden=(6,),
             trunk_hidden=(6,))


# ---------------------------------------------------------------------------
# L2

def test_l2_identical_is_zero():
    x = np.random.default_rng(0).normal(size=(50, 2))
    assert l2_relative_error(x, x) == 0.0


def test_l2_scaled_prediction():
    x = np.random.default_rng(1).normal(size=(50, 2)) + 3
    assert l2_relative_error(1.01 * x, x) == pytest.approx(0.01, abs=1e-14)


def test_l2_matches_two_pass():
    r = np.random.default_rng(2)
    for _ in range(50):
        n = r.integers(2, 40)
        p, t = r.normal(size=n), r.normal(size=n)
        num = np.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)))
        den = np.sqrt(sum(b ** 2 for b in t))
        assert abs(l2_relative_error(p, t) - num / den) < 1e-12


def test_l2_channel_selection():
    t = np.column_stack([np.ones(10), 2 * np.ones(10)])
    p = t.copy()
    p[:, 1] *= 1.1
    assert l2_relative_error(p, t, channel=0) == 0.0
    assert l2_relative_error(p, t, channel=1) == pytest.approx(0.1)
    grid = TimeGrid(0.0, 0.1, 10)
    assert l2_relative_error(Trajectory(grid, p), Trajectory(grid, t), 1) == pytest.approx(0.1)


def test_l2_degenerate_reference():
    with pytest.raises(DegenerateReferenceError):
        l2_relative_error(np.ones(5), np.zeros(5))


@given(st.floats(-10, 10, allow_nan=False), st.integers(0, 2 ** 31))
def test_l2_homogeneous_in_residual(c, seed):
    r = np.random.default_rng(seed)
    t = r.normal(size=20) + 1
    e = r.normal(size=20)
    base = l2_relative_error(t + e, t)
    assert l2_relative_error(t + c * e, t) == pytest.approx(abs(c) * base, rel=1e-10, abs=1e-14)


# ---------------------------------------------------------------------------
# PICP

def test_picp_infinite_band():
    band = PredictionBand(np.zeros(10), np.full(10, np.inf))
    assert picp(band, np.random.default_rng(0).normal(size=10)) == 1.0


def test_picp_zero_band_misses():
    band = PredictionBand(np.zeros(10), np.zeros(10))
    assert picp(band, np.ones(10)) == 0.0


def test_picp_counting():
    truth = np.zeros(20)
    mean = np.zeros(20)
    mean[7] = 5.0
    band = PredictionBand(mean, np.full(20, 0.1))
    assert picp(band, truth) == 0.95


def test_picp_multichannel():
    truth = np.zeros((4, 2))
    mean = np.array([[0, 0], [0, 9], [0, 9], [9, 9]], dtype=float)
    band = PredictionBand(mean, np.full((4, 2), 0.1))
    assert picp(band, truth, 0) == 0.75
    assert picp(band, truth, 1) == 0.25


@given(st.integers(0, 2 ** 31), st.floats(0, 3))
def test_picp_bounded_and_monotone(seed, widen):
    r = np.random.default_rng(seed)
    t = r.normal(size=30)
    std = r.uniform(0, 1, 30)
    narrow = picp(PredictionBand(r.normal(size=30) * 0.0 + 0.1, std), t)
    wide = picp(PredictionBand(np.full(30, 0.1), std + widen), t)
    assert 0.0 <= narrow <= 1.0
    assert wide >= narrow


# ---------------------------------------------------------------------------
# models and rollout

def _pendulum(n=3, T=1.0, seed=0):
    return pendulum_trajectories(n, make_rng(seed), T=T)


def _neural(arch=LSTM_MIONET, kind=NON_AUTONOMOUS, seed=0):
    trs = _pendulum() if kind == NON_AUTONOMOUS else lorenz_trajectories(3, make_rng(0), T=1.0)
    from operon.datagen import concat
    ds = concat([build_quartets(t, 5, 0.02, make_rng(i), kind) for i, t in enumerate(trs)])
    cfg = config_for(ds, architecture=arch, **SMALL)
    norm = fit_normalizer(ds, "increment")
    return NeuralModel(cfg, norm, init_parameters(cfg, make_rng(seed))), trs


def test_oracle_rollout_reproduces_pendulum():
    trs = _pendulum()
    x0 = np.stack([t.states[0] for t in trs])
    inputs = np.stack([t.inputs for t in trs])
    res = rollout(OracleModel(NON_AUTONOMOUS, pendulum_rhs_default), x0, trs[0].grid, inputs=inputs)
    for pred, truth in zip(res.trajectories, trs):
        np.testing.assert_array_equal(pred.states, truth.states)


def test_oracle_rollout_reproduces_lorenz():
    trs = lorenz_trajectories(2, make_rng(1), T=2.0)
    x0 = np.stack([t.states[0] for t in trs])
    res = rollout(OracleModel(AUTONOMOUS, lorenz_rhs_default), x0, trs[0].grid)
    for pred, truth in zip(res.trajectories, trs):
        np.testing.assert_array_equal(pred.states, truth.states)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_first_rollout_step_matches_model_forward(arch):
    model, trs = _neural(arch)
    tr = trs[0]
    res = rollout(model, tr.states[0], tr.grid, inputs=tr.inputs)
    nxt = tr.inputs[1] if arch == DEEPONET else None
    expect = model_forward(model.theta, model.cfg, model.normalizer, tr.states[0],
                           tr.inputs[:1], 1, tr.grid.dt, nxt)
    np.testing.assert_allclose(res.trajectory.states[1], expect, rtol=0, atol=1e-12)


@pytest.mark.parametrize("arch", [LSTM_MIONET, VANILLA_LSTM])
def test_autonomous_closed_loop_matches_repeated_forward(arch):
    model, trs = _neural(arch, AUTONOMOUS)
    grid = TimeGrid(0.0, 0.01, 6)
    res = rollout(model, trs[0].states[0], grid)
    states = [trs[0].states[0]]
    for k in range(5):
        hist = np.array(states)
        states.append(model_forward(model.theta, model.cfg, model.normalizer, states[-1], hist,
                                    len(states), 0.01))
    np.testing.assert_allclose(res.trajectory.states, np.array(states), rtol=0, atol=1e-11)


def test_grid_of_two_points_is_one_call():
    calls = []

    class Counting(OracleModel):
        def rollout_states(self, x0, n_steps, *a, **k):
            calls.append(n_steps)
            return super().rollout_states(x0, n_steps, *a, **k)
    m = Counting(AUTONOMOUS, lorenz_rhs_default)
    res = rollout(m, np.array([1.0, 1.0, 1.0]), TimeGrid(0.0, 0.01, 2))
    assert calls == [1]
    assert res.trajectory.grid.n_points == 2


def test_rollout_stride_and_validation():
    trs = _pendulum(1, T=1.0)
    tr = trs[0]
    res = rollout(OracleModel(NON_AUTONOMOUS, pendulum_rhs_default), tr.states[0], tr.grid, h=0.05,
                  inputs=tr.inputs)
    assert res.trajectory.grid.dt == 0.05
    assert res.trajectory.grid.n_points == 21
    with pytest.raises(ValueError):
        rollout(OracleModel(NON_AUTONOMOUS, pendulum_rhs_default), tr.states[0], tr.grid, h=0.015,
                inputs=tr.inputs)
    with pytest.raises(ValueError):
        rollout(OracleModel(NON_AUTONOMOUS, pendulum_rhs_default), tr.states[0], tr.grid)
    with pytest.raises(ValueError):
        rollout(OracleModel(NON_AUTONOMOUS, pendulum_rhs_default), tr.states[0], tr.grid,
                inputs=tr.inputs, mode="teacher")


def test_teacher_mode_uses_true_states():
    model, trs = _neural()
    tr = trs[0]
    res = rollout(model, tr.states[0], tr.grid, inputs=tr.inputs, teacher=tr.states, mode="teacher")
    k = 7
    expect = model_forward(model.theta, model.cfg, model.normalizer, tr.states[k],
                           tr.inputs[:k + 1], k + 1, tr.grid.dt)
    np.testing.assert_allclose(res.trajectory.states[k + 1], expect, rtol=0, atol=1e-12)


def test_rollout_divergence_names_step():
    model, trs = _neural()
    theta = model.theta.clone()
    theta[:] = 1e200
    bad = NeuralModel(model.cfg, model.normalizer, theta.numpy())
    with np.errstate(all="ignore"), pytest.raises(RolloutDivergence, match="step 1"):
        rollout(bad, trs[0].states[0], trs[0].grid, inputs=trs[0].inputs)


def test_ensemble_rollout_band():
    model, trs = _neural()
    members = np.stack([model.theta.numpy(),
                        init_parameters(model.cfg, make_rng(9)).values])
    ens = Ensemble(members, init_parameters(model.cfg, make_rng(0)).layout, ReSGLDConfig())
    em = EnsembleModel(model.cfg, model.normalizer, ens)
    tr = trs[0]
    res = rollout(em, tr.states[0], tr.grid, inputs=tr.inputs)
    assert res.band is not None
    assert res.band.mean.shape == tr.states.shape
    np.testing.assert_array_equal(res.band.std[0], 0.0)
    assert np.all(res.band.std[1:].max(axis=0) > 0)


# ---------------------------------------------------------------------------
# batch evaluation

def test_batch_evaluate_oracle_is_zero():
    trs = _pendulum(4)
    rep = batch_evaluate(OracleModel(NON_AUTONOMOUS), trs, 20, 0.01, make_rng(0))
    np.testing.assert_array_equal(rep.errors, 0.0)
    assert rep.errors.shape == (4, 2)


def test_batch_evaluate_report_length_100():
    trs = lorenz_trajectories(100, make_rng(3), T=0.5)
    rep = batch_evaluate(OracleModel(AUTONOMOUS), trs, 200, 0.01, make_rng(0))
    assert rep.errors.shape == (100, 3)


def test_report_stats_recomputed():
    r = np.random.default_rng(0)
    rep = EvalReport(r.uniform(size=(37, 2)))
    for j in range(2):
        col = rep.errors[:, j]
        m = sum(col) / col.size
        s = np.sqrt(sum((c - m) ** 2 for c in col) / col.size)
        assert abs(rep.mean[j] - m) < 1e-12
        assert abs(rep.std[j] - s) < 1e-12


def test_batch_evaluate_ordering_invariant():
    model, _ = _neural()
    trs = _pendulum(4, seed=5)
    # each trajectory's records depend only on its own rng stream
    def run(order):
        rows = {}
        for i in order:
            rep = batch_evaluate(model, [trs[i]], 10, 0.01, make_rng(100 + i))
            rows[i] = rep.errors[0]
        return rows
    a, b = run([0, 1, 2, 3]), run([3, 1, 0, 2])
    for i in range(4):
        np.testing.assert_array_equal(a[i], b[i])
    full = batch_evaluate(model, trs, 10, 0.01, make_rng(0))
    perm = [2, 0, 3, 1]
    errs = [batch_evaluate(model, [trs[i]], 10, 0.01, make_rng(0)).errors[0] for i in perm]
    assert full.errors.shape[0] == 4
    assert np.isfinite(np.array(errs)).all()


def test_batch_evaluate_empty():
    with pytest.raises(ValueError):
        batch_evaluate(OracleModel(AUTONOMOUS), [], 5, 0.01, make_rng(0))


def test_report_json(tmp_path):
    rep = EvalReport(np.array([[0.1, 0.2], [0.3, 0.4]]), picp=[0.9, 1.0], metadata=dict(h=0.01))
    rep.save(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["mean"] == pytest.approx([0.2, 0.3])
    assert d["picp"] == [0.9, 1.0]
    assert d["metadata"]["h"] == 0.01


# ---------------------------------------------------------------------------
# studies

def test_extrapolation_curve_shape_and_base_case():
    trs = _pendulum(2, T=2.0)
    oracle = OracleModel(NON_AUTONOMOUS, pendulum_rhs_default)
    curve, reps = extrapolation_study(oracle, trs, [1.0, 1.5, 2.0])
    assert curve.shape == (3, 2)
    np.testing.assert_array_equal(curve[:, 0], [1.0, 1.5, 2.0])
    np.testing.assert_array_equal(curve[:, 1], 0.0)
    with pytest.raises(ValueError):
        extrapolation_study(oracle, trs, [3.0])


def test_extrapolation_at_training_horizon_matches_rollout_error():
    model, trs = _neural()
    curve, _ = extrapolation_study(model, trs, [1.0])
    _, reps = rollout_evaluate(model, trs, None, [1.0])
    assert curve[0, 1] == reps[0].mean[0]


def test_stepsize_study_curve():
    trs = _pendulum(3, T=2.0)
    hs = [0.02, 0.06, 0.1]
    out = stepsize_study(OracleModel(NON_AUTONOMOUS), trs, hs, 5, make_rng(0))
    assert out["curve"].shape == (3, 2)
    np.testing.assert_array_equal(out["curve"][:, 0], hs)


def test_stepsize_study_linear_error_model():
    # a model whose one-step error grows linearly with h gives a perfect fit
    trs = _pendulum(3, T=2.0)

    class Biased(OracleModel):
        def predict(self, ds):
            return ds.target + 0.1 * ds.step[:, None] * np.abs(ds.target).mean()
    out = stepsize_study(Biased(NON_AUTONOMOUS), trs, parse_range("0.02:0.5:0.04"), 20, make_rng(0))
    assert out["pearson"] > 0.9
    assert out["slope"] > 0


def test_parse_range():
    vals = parse_range("0.02:0.5:0.02")
    assert len(vals) == 25
    assert vals[0] == 0.02 and vals[-1] == 0.5
    assert parse_range("0.02:0.5:0.04") == pytest.approx([0.02 + 0.04 * i for i in range(13)])
    assert parse_range("10,12,14") == [10.0, 12.0, 14.0]
    with pytest.raises(ValueError):
        parse_range("0:1:0")


def test_curve_and_band_files(tmp_path):
    t = np.linspace(0, 1, 5)
    write_curve(t, t ** 2, tmp_path / "c.txt")
    write_band(t, t - 1, t + 1, tmp_path / "b.txt")
    c = read_columns(tmp_path / "c.txt")
    b = read_columns(tmp_path / "b.txt")
    assert c.shape == (5, 2) and b.shape == (5, 3)
    np.testing.assert_array_equal(c[:, 1], t ** 2)
    np.testing.assert_array_equal(b[:, 2], t + 1)
