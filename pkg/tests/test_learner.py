import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lyaplearn.controller import ControllerParams, MlpParams, SaturationConfig
from lyaplearn.diffgraph import Graph
from lyaplearn.dynamics import PlantModel, Variant
from lyaplearn.experiments import example_config, run_episode
from lyaplearn.learner import (
    Adagrad,
    LossBreakdown,
    OnlineLearner,
    PenaltyConfig,
    StepContext,
    StepRecord,
    constraint_value,
    constraint_value_on,
    penalty,
    penalty_on,
    smooth_l1,
    smooth_l1_on,
    step_loss,
    step_loss_gradient_error,
    step_loss_value,
)

CFG = PenaltyConfig()
SAT = SaturationConfig()
LIN = PlantModel(Variant.LINEAR2, 9.0, 6.0, 6.0)
NL = PlantModel(Variant.NONLINEAR2, 9.0, 6.0, 6.0)


def zero_params(n_f=10):
    return ControllerParams(MlpParams.zeros(3, 16), MlpParams.zeros(n_f, 16))


def random_ctx(rng, n_f=10, dt=0.01):
    def feats():
        return rng.uniform(-1, 1, 3) * [1, 0.5, 5], rng.uniform(-2, 2, n_f)

    return StepContext(rng.uniform(-2, 2, 2), feats(), feats(), rng.uniform(-2, 2), rng.uniform(-2, 2), dt)


# -- smooth L1 ---------------------------------------------------------------------
@pytest.mark.parametrize("x, y", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
def test_smooth_l1_values(x, y):
    assert smooth_l1(x) == y
    assert smooth_l1_on(Graph(), x).value == y


@pytest.mark.parametrize("side", [1.0, -1.0])
def test_smooth_l1_continuous_with_continuous_slope(side):
    eps = 1e-6
    a, b = side * (1 + eps), side * (1 - eps)
    assert abs(smooth_l1(a) - smooth_l1(b)) < 1e-5

    def slope(x):
        g = Graph()
        p = g.param(x)
        return g.backward(smooth_l1_on(g, p))[p]

    assert abs(slope(a) - slope(b)) < 1e-5


# -- penalty ----------------------------------------------------------------------
def test_penalty_examples():
    assert penalty(-10.0, CFG) == pytest.approx(math.log1p(math.exp(-9.9)), rel=1e-12)
    assert penalty(-10.0, CFG) == pytest.approx(5.017e-5, rel=1e-3)
    assert abs(penalty(-0.1, CFG) - math.log(2)) < 1e-9
    assert penalty(10.0, CFG) == pytest.approx(10.10004, abs=1e-5)


def test_penalty_graph_matches_numeric():
    for c in (-12.0, -0.1, 0.0, 3.0, 40.0):
        for cfg in (CFG, PenaltyConfig(0.3, 2.0, 0.5)):
            assert penalty_on(Graph(), c, cfg).value == pytest.approx(penalty(c, cfg), rel=1e-14)


@settings(max_examples=300, deadline=None)
@given(a=st.floats(-50, 50), b=st.floats(-50, 50))
def test_penalty_monotone_and_positive(a, b):
    lo, hi = min(a, b), max(a, b)
    assert 0 < penalty(lo, CFG) <= penalty(hi, CFG)


@settings(max_examples=100, deadline=None)
@given(c=st.floats(-1e3, -10.0))
def test_penalty_vanishes_far_inside(c):
    assert penalty(c, CFG) < 1e-4


@pytest.mark.parametrize("name", ["beta_b", "alpha_rho", "lam"])
@pytest.mark.parametrize("bad", [0.0, -1.0, math.nan])
def test_penalty_config_must_be_positive(name, bad):
    with pytest.raises(ValueError, match=name):
        PenaltyConfig(**{name: bad})


# -- constraint value -------------------------------------------------------------
def test_constraint_reduced_form_example():
    assert constraint_value(LIN, [0.0, 1.0], 1.0, 0.0) == -2.0


@pytest.mark.parametrize("yd", [-1.5, 0.0, 2.0])
def test_constraint_zero_without_velocity(yd):
    assert constraint_value(NL, [0.3, 0.0], yd, 7.0) == 0.0


def test_constraint_zero_at_perfect_tracking():
    assert constraint_value(LIN, [0.8, 3.0], 0.8, -4.0) == 0.0


def test_constraint_rejects_non_finite_state():
    with pytest.raises(ValueError):
        constraint_value(LIN, [math.nan, 0.0], 0.0, 0.0)


def test_constraint_graph_matches_numeric():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x, yd, u = rng.normal(size=2), rng.normal(), rng.normal()
        for m in (LIN, NL):
            got = constraint_value_on(Graph(), m, (x[0], x[1]), yd, u).value
            assert got == pytest.approx(constraint_value(m, x, yd, u), rel=1e-13, abs=1e-14)


# -- step loss -----------------------------------------------------------------------
def test_loss_breakdown_total():
    b = LossBreakdown(0.25, 0.5, -1.0, 0.1, lam=2.0)
    assert b.total == 1.25


def test_zero_network_first_step_hand_composition():
    cfg = example_config(1)
    ref = cfg.reference
    dt = cfg.dt
    zero_feats = (np.zeros(3), np.zeros(10))
    ctx = StepContext(np.zeros(2), zero_feats, zero_feats, ref(dt), ref(2 * dt), dt)
    g = Graph()
    params = zero_params()
    nodes = [g.param(a) for a in params.arrays()]
    root, parts = step_loss(g, nodes, params, LIN, ctx, SAT, CFG)
    # with u = 0 from x = 0 the state never moves, so c = 0 and y stays 0
    assert parts.constraint_value == 0.0
    assert parts.tracking_term == smooth_l1(ref(2 * dt))
    assert parts.penalty_term == penalty(0.0, CFG)
    assert root.value == pytest.approx(smooth_l1(ref(2 * dt)) + CFG.lam * penalty(0.0, CFG), rel=1e-15)
    assert parts.lyapunov_value == pytest.approx(ref(dt) ** 2)


def test_loss_vanishes_with_exact_tracking_and_strong_decrease():
    # no spring or damping and zero control: the velocity -v is held, so the
    # rollout is exact and the reference can be placed on it
    model = PlantModel(Variant.LINEAR2, 0.0, 0.0, 6.0)
    v, dt = 10.0, 0.01
    zero = (np.zeros(3), np.zeros(10))
    x1_now = -v * dt
    ctx = StepContext(np.array([0.0, -v]), zero, zero, x1_now - 1.0, -2 * v * dt, dt)
    g = Graph()
    params = zero_params()
    root, parts = step_loss(g, [g.param(a) for a in params.arrays()], params, model, ctx, SAT, CFG)
    assert parts.tracking_term == pytest.approx(0.0, abs=1e-30)
    assert parts.constraint_value == pytest.approx(-2 * v)
    assert root.value < 1e-8


def test_graph_loss_equals_numeric_loss():
    rng = np.random.default_rng(8)
    params = ControllerParams.initialize(rng, 16, 16, 10, "sigmoid", "sigmoid")
    for _ in range(10):
        ctx = random_ctx(rng)
        for m in (LIN, NL):
            g = Graph()
            root, _ = step_loss(g, [g.param(a) for a in params.arrays()], params, m, ctx, SAT, CFG)
            assert root.value == pytest.approx(step_loss_value(params, m, ctx, SAT, CFG), rel=1e-12)


@pytest.mark.parametrize("model", [LIN, NL], ids=["linear", "nonlinear"])
@pytest.mark.parametrize("act_f", ["sigmoid", "relu"])
def test_step_loss_gradient_matches_finite_differences(model, act_f):
    rng = np.random.default_rng(12)
    for _ in range(3):
        params = ControllerParams.initialize(rng, 8, 8, 10, "sigmoid", act_f)
        params = params.with_flat(params.flat() + rng.normal(0, 0.3, params.size()))
        assert step_loss_gradient_error(params, model, random_ctx(rng), SAT, CFG) < 1e-4


def test_gradient_check_rejects_zero_step():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="step"):
        step_loss_gradient_error(zero_params(), LIN, random_ctx(rng), h=0.0)


def test_loss_depends_on_weights():
    # the rollout makes the tracking term sensitive to every layer
    rng = np.random.default_rng(2)
    params = ControllerParams.initialize(rng, 16, 16, 10, "sigmoid", "sigmoid")
    g = Graph()
    nodes = [g.param(a) for a in params.arrays()]
    root, _ = step_loss(g, nodes, params, LIN, random_ctx(rng), SAT, CFG)
    grads = g.backward(root)
    assert all(np.any(grads[n] != 0) for n in nodes)


# -- Adagrad -----------------------------------------------------------------------
def test_adagrad_hand_step():
    theta = [np.zeros(1)]
    opt = Adagrad([(1,)], eta=0.36)
    assert opt.step(theta, [np.ones(1)])
    assert theta[0][0] == pytest.approx(-0.36 / (1 + 1e-10), rel=1e-15)
    assert opt.accumulators[0][0] == 1.0


def test_adagrad_zero_gradient_changes_nothing():
    theta = [np.array([0.5, -0.25])]
    opt = Adagrad([(2,)])
    opt.step(theta, [np.zeros(2)])
    np.testing.assert_array_equal(theta[0], [0.5, -0.25])
    assert not opt.accumulators[0].any()


def test_adagrad_steps_shrink_as_inverse_sqrt():
    theta = [np.zeros(1)]
    opt = Adagrad([(1,)], eta=0.36)
    prev = 0.0
    for k in range(1, 50):
        opt.step(theta, [np.ones(1)])
        assert prev - theta[0][0] == pytest.approx(0.36 / math.sqrt(k), rel=1e-9)
        prev = theta[0][0]


def test_adagrad_accumulators_nondecreasing():
    rng = np.random.default_rng(0)
    theta = [np.zeros((2, 3))]
    opt = Adagrad([(2, 3)])
    last = opt.accumulators[0].copy()
    for _ in range(20):
        opt.step(theta, [rng.normal(size=(2, 3))])
        assert np.all(opt.accumulators[0] >= last)
        last = opt.accumulators[0].copy()


def test_adagrad_skips_non_finite(caplog):
    theta = [np.ones(2)]
    opt = Adagrad([(2,)])
    assert not opt.step(theta, [np.array([1.0, math.nan])])
    assert opt.skipped == 1
    np.testing.assert_array_equal(theta[0], [1.0, 1.0])
    assert "skipped" in caplog.text


def test_adagrad_shape_checks():
    opt = Adagrad([(2,)])
    with pytest.raises(ValueError):
        opt.step([np.zeros(2)], [np.zeros(3)])
    with pytest.raises(ValueError):
        Adagrad([(2,)], eta=0.0)


# -- learning loop ---------------------------------------------------------------------
def test_test_mode_never_changes_weights():
    cfg = example_config(1, seed=1, duration=1.0)
    params = run_episode(cfg).params
    before = params.flat().tobytes()
    res = run_episode(example_config(1, mode="test", seed=1, duration=1.0), params)
    assert res.params.flat().tobytes() == before
    assert params.flat().tobytes() == before


def test_learner_update_moves_weights_only_when_learning():
    rng = np.random.default_rng(3)
    params = ControllerParams.initialize(rng, 8, 8, 10, "sigmoid", "sigmoid")
    ctx = random_ctx(rng)
    frozen = OnlineLearner(params.copy(), LIN, learn=False)
    frozen.update(ctx)
    assert frozen.params.flat().tobytes() == params.flat().tobytes()
    live = OnlineLearner(params.copy(), LIN)
    live.update(ctx)
    assert live.params.flat().tobytes() != params.flat().tobytes()


def test_step_record_columns():
    assert StepRecord.columns() == [
        "k", "t", "y_d", "y_true", "y_meas", "e", "u_raw", "u_sat", "d", "n",
        "loss_track", "loss_penalty", "c_k", "V",
    ]


def test_records_follow_update_then_act():
    res = run_episode(example_config(1, seed=0, duration=0.5))
    recs = res.records
    assert [r.k for r in recs] == list(range(len(recs)))
    assert math.isnan(recs[0].loss_track) and math.isfinite(recs[1].loss_track)
    for r in recs:
        assert abs(r.u_sat) < 50
        assert r.V >= 0
        assert r.e == r.y_d - r.y_true
