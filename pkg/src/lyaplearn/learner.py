"""Penalized tracking loss and the single-step online Adagrad learner.

Each control period builds a fresh :class:`~lyaplearn.diffgraph.Graph` that
rolls the plant model forward from the previous state under the controller's
current weights, scores the rollout with a SmoothL1 tracking term plus a
softplus penalty on the Lyapunov derivative ``dV/dx . F``, and takes one
Adagrad step on the result.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .controller import (
    ControllerParams,
    FeedforwardWindow,
    PidFeatureState,
    SaturationConfig,
    controller_output,
    controller_output_on,
    saturate,
    saturate_on,
)
from .diffgraph import Graph, Node, softplus_value
from .dynamics import PlantModel

__all__ = [
    "PenaltyConfig",
    "LossBreakdown",
    "Adagrad",
    "smooth_l1",
    "smooth_l1_on",
    "penalty",
    "penalty_on",
    "constraint_value",
    "constraint_value_on",
    "step_loss",
    "step_loss_value",
    "step_loss_gradient_error",
    "StepContext",
    "StepRecord",
    "EpisodeState",
    "OnlineLearner",
    "start_episode",
    "learning_step",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PenaltyConfig:
    beta_b: float = 0.1
    alpha_rho: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        for name in ("beta_b", "alpha_rho", "lam"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    tracking_term: float
    penalty_term: float
    constraint_value: float
    lyapunov_value: float
    lam: float = 1.0

    @property
    def total(self) -> float:
        return self.tracking_term + self.lam * self.penalty_term


# -- scalar building blocks ---------------------------------------------------
def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def smooth_l1_on(g: Graph, x) -> Node:
    x = g.lift(x)
    if abs(x.value) < 1.0:
        return g.mul(0.5, g.mul(x, x))
    return g.sub(g.abs(x), 0.5)


def penalty(c: float, cfg: PenaltyConfig) -> float:
    return float(softplus_value(c + cfg.beta_b)) ** cfg.alpha_rho


def penalty_on(g: Graph, c, cfg: PenaltyConfig) -> Node:
    return g.pow(g.softplus(g.add(c, cfg.beta_b)), cfg.alpha_rho)


def constraint_value(model: PlantModel, x, yd: float, u: float) -> float:
    """Directional derivative of ``V = (yd - y)^2`` along ``F(x, u)``, no disturbance."""
    if not np.all(np.isfinite(np.asarray(x, dtype=float))):
        raise ValueError(f"non-finite state {list(x)}")
    grad_v = -2.0 * (yd - model.output(x)) * model.output_gradient()
    return float(grad_v @ model.derivative(x, u, 0.0))


def constraint_value_on(g: Graph, model: PlantModel, x, yd: float, u) -> Node:
    f1, f2 = model.derivative_on(g, x, u)
    h = model.output_gradient()
    weight = g.mul(-2.0, g.sub(yd, model.output_on(g, x)))
    along = g.add(g.mul(h[0], f1), g.mul(h[1], f2))
    return g.mul(weight, along)


# -- the per-period objective -----------------------------------------------------
@dataclass(frozen=True)
class StepContext:
    """What the learner knows at period k about periods k-1 and k."""

    x_prev: np.ndarray  # plant state at k-1
    feat_prev: tuple[np.ndarray, np.ndarray]  # (x_p, x_f) used at k-1
    feat_now: tuple[np.ndarray, np.ndarray]  # (x_p, x_f) at k
    yd_now: float  # reference at k
    yd_next: float  # reference at k+1
    dt: float


def step_loss(
    g: Graph,
    nodes: list[Node],
    params: ControllerParams,
    model: PlantModel,
    ctx: StepContext,
    sat: SaturationConfig,
    cfg: PenaltyConfig,
) -> tuple[Node, LossBreakdown]:
    """Build the penalized loss on ``g``; ``nodes`` are the weight nodes.

    The state at k is re-derived from the state at k-1 with the control the
    current weights would have produced there.  Because ``u`` only enters the
    velocity equation, the output first responds one step later, so the
    tracking term scores the predicted output at k+1 against the reference
    at k+1.  The Lyapunov derivative is evaluated at the re-derived state
    with the control the weights produce from the features at k.
    """
    u_prev = saturate_on(g, controller_output_on(g, nodes, params, *ctx.feat_prev), sat)
    x_now = model.euler_step_on(g, (ctx.x_prev[0], ctx.x_prev[1]), u_prev, ctx.dt)
    u_now = saturate_on(g, controller_output_on(g, nodes, params, *ctx.feat_now), sat)

    c = constraint_value_on(g, model, x_now, ctx.yd_now, u_now)
    x_next = model.euler_step_on(g, x_now, u_now, ctx.dt)
    y_next = model.output_on(g, x_next)
    tracking = smooth_l1_on(g, g.sub(ctx.yd_next, y_next))
    pen = penalty_on(g, c, cfg)
    total = g.add(tracking, g.mul(cfg.lam, pen))

    err_now = ctx.yd_now - float(model.output_on(g, x_now).value)
    breakdown = LossBreakdown(
        tracking_term=float(tracking.value),
        penalty_term=float(pen.value),
        constraint_value=float(c.value),
        lyapunov_value=float(err_now * err_now),
        lam=cfg.lam,
    )
    return total, breakdown


def step_loss_value(
    params: ControllerParams,
    model: PlantModel,
    ctx: StepContext,
    sat: SaturationConfig,
    cfg: PenaltyConfig,
) -> float:
    """Plain numpy evaluation of the same objective :func:`step_loss` records."""
    u_prev = saturate(controller_output(params, *ctx.feat_prev), sat)
    x_now = np.asarray(ctx.x_prev, dtype=float) + model.derivative(ctx.x_prev, u_prev) * ctx.dt
    u_now = saturate(controller_output(params, *ctx.feat_now), sat)
    c = constraint_value(model, x_now, ctx.yd_now, u_now)
    x_next = x_now + model.derivative(x_now, u_now) * ctx.dt
    tracking = smooth_l1(ctx.yd_next - model.output(x_next))
    return tracking + cfg.lam * penalty(c, cfg)


def step_loss_gradient_error(
    params: ControllerParams,
    model: PlantModel,
    ctx: StepContext,
    sat: SaturationConfig | None = None,
    cfg: PenaltyConfig | None = None,
    h: float = 1e-6,
) -> float:
    """Largest ``|ad - fd| / max(1, |fd|)`` over all weights of the step loss.

    ``ad`` comes from the recorded graph, ``fd`` from central differences of
    :func:`step_loss_value`, which shares no code with the graph path.
    """
    if not h > 0:
        raise ValueError(f"invalid step h={h!r}: must be positive")
    sat = sat or SaturationConfig()
    cfg = cfg or PenaltyConfig()
    g = Graph()
    nodes = [g.param(a) for a in params.arrays()]
    root, _ = step_loss(g, nodes, params, model, ctx, sat, cfg)
    grads = g.backward(root)
    ad = np.concatenate([np.ravel(grads[n]) for n in nodes])

    theta = params.flat()
    worst = 0.0
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        fd = (
            step_loss_value(params.with_flat(up), model, ctx, sat, cfg)
            - step_loss_value(params.with_flat(dn), model, ctx, sat, cfg)
        ) / (2.0 * h)
        worst = max(worst, abs(ad[i] - fd) / max(1.0, abs(fd)))
    return worst


# -- optimizer ------------------------------------------------------------------
class Adagrad:
    """``G += g**2; theta -= eta * g / (sqrt(G) + eps)`` per parameter."""

    def __init__(self, shapes, eta: float = 0.36, epsilon: float = 1e-10):
        if not eta > 0:
            raise ValueError("eta must be positive")
        self.eta = float(eta)
        self.epsilon = float(epsilon)
        self.accumulators = [np.zeros(s) for s in shapes]
        self.skipped = 0

    @classmethod
    def for_params(cls, params: ControllerParams, **kwargs) -> "Adagrad":
        return cls([a.shape for a in params.arrays()], **kwargs)

    def step(self, arrays: list[np.ndarray], grads: list) -> bool:
        """Update ``arrays`` in place; returns False if the step was skipped."""
        if len(arrays) != len(grads) or len(arrays) != len(self.accumulators):
            raise ValueError("parameter/gradient count mismatch")
        grads = [np.asarray(gr, dtype=float) for gr in grads]
        for a, gr in zip(arrays, grads):
            if a.shape != gr.shape:
                raise ValueError(f"gradient shape {gr.shape} does not match parameter {a.shape}")
        if not all(np.all(np.isfinite(gr)) for gr in grads):
            self.skipped += 1
            log.warning("non-finite gradient; update skipped (%d so far)", self.skipped)
            return False
        for a, gr, acc in zip(arrays, grads, self.accumulators):
            acc += gr * gr
            a -= self.eta * gr / (np.sqrt(acc) + self.epsilon)
        return True


# -- one control period -----------------------------------------------------------
@dataclass(frozen=True)
class StepRecord:
    k: int
    t: float
    y_d: float
    y_true: float
    y_meas: float
    e: float
    u_raw: float
    u_sat: float
    d: float
    n: float
    loss_track: float
    loss_penalty: float
    c_k: float
    V: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, c) for c in self.columns())


class OnlineLearner:
    """Controller weights plus the optimizer and loss settings that adapt them."""

    def __init__(
        self,
        params: ControllerParams,
        model: PlantModel,
        sat: SaturationConfig | None = None,
        penalty_cfg: PenaltyConfig | None = None,
        eta: float = 0.36,
        epsilon: float = 1e-10,
        learn: bool = True,
    ):
        self.params = params
        self.model = model
        self.sat = sat or SaturationConfig()
        self.penalty_cfg = penalty_cfg or PenaltyConfig()
        self.optimizer = Adagrad.for_params(params, eta=eta, epsilon=epsilon)
        self.learn = learn

    def control(self, x_p, x_f) -> tuple[float, float]:
        u = controller_output(self.params, x_p, x_f)
        return u, saturate(u, self.sat)

    def build_loss(self, ctx: StepContext) -> tuple[Graph, list[Node], Node, LossBreakdown]:
        g = Graph()
        nodes = [g.param(a) for a in self.params.arrays()]
        root, parts = step_loss(g, nodes, self.params, self.model, ctx, self.sat, self.penalty_cfg)
        return g, nodes, root, parts

    def update(self, ctx: StepContext) -> LossBreakdown:
        """Score period k and, when learning, take one optimizer step."""
        g, nodes, root, parts = self.build_loss(ctx)
        if self.learn:
            g.backward(root)
            self.optimizer.step(self.params.arrays(), [n.adjoint for n in nodes])
        return parts


@dataclass
class EpisodeState:
    """Mutable per-episode state owned by a single run."""

    model: PlantModel
    reference: Callable[[float], float]
    dt: float
    x: np.ndarray
    pid: PidFeatureState
    window: FeedforwardWindow
    draw_noise: Callable[[], float] = lambda: 0.0
    draw_disturbance: Callable[[], float] = lambda: 0.0
    # with a reference rate the derivative feature is rate(t) - x2, read from
    # the velocity state, instead of the difference quotient of noisy errors
    reference_rate: Callable[[float], float] | None = None
    x_prev: np.ndarray | None = None
    feat_prev: tuple | None = None
    k: int = 0
    records: list = field(default_factory=list)

    def observe(self, t: float):
        """Sample the sensor at time t; returns reference, noise, measurement, features."""
        yd = self.reference(t)
        n = self.draw_noise()
        y_meas = self.model.measure(self.x, n)
        x_p = self.pid.update(yd - y_meas, self.dt, self.error_rate(t))
        x_f = self.window.push(yd)
        return yd, n, y_meas, (x_p, x_f)

    def error_rate(self, t: float) -> float | None:
        if self.reference_rate is None:
            return None
        return self.reference_rate(t) - float(self.x[1])

    def advance(self, u: float, feats) -> float:
        d = self.draw_disturbance()
        nxt = self.model.euler_step(self.x, u, d, self.dt, step=self.k)
        self.x_prev, self.feat_prev = self.x, feats
        self.x = nxt
        return d


def start_episode(learner: OnlineLearner, ep: EpisodeState) -> StepRecord:
    """Period 0: nothing to learn from yet, just act on the initial state."""
    ep.k = 0
    ep.pid.reset()
    ep.window.reset(ep.reference(0.0))
    yd = ep.reference(0.0)
    n = ep.draw_noise()
    y_meas = ep.model.measure(ep.x, n)
    feats = (ep.pid.update(yd - y_meas, ep.dt, ep.error_rate(0.0)), ep.window.values())
    u_raw, u_sat = learner.control(*feats)
    y_true = ep.model.output(ep.x)
    c = constraint_value(ep.model, ep.x, yd, u_sat)
    d = ep.advance(u_sat, feats)
    rec = StepRecord(0, 0.0, yd, y_true, y_meas, yd - y_true, u_raw, u_sat, d, n,
                     math.nan, math.nan, c, (yd - y_true) ** 2)
    ep.records.append(rec)
    return rec


def learning_step(learner: OnlineLearner, ep: EpisodeState) -> StepRecord:
    """Run period ``ep.k + 1``: observe, update the weights, act, advance the plant."""
    k = ep.k + 1
    t = k * ep.dt
    yd, n, y_meas, feats = ep.observe(t)
    ctx = StepContext(ep.x_prev, ep.feat_prev, feats, yd, ep.reference(t + ep.dt), ep.dt)
    parts = learner.update(ctx)
    u_raw, u_sat = learner.control(*feats)
    y_true = ep.model.output(ep.x)
    ep.k = k
    d = ep.advance(u_sat, feats)
    rec = StepRecord(k, t, yd, y_true, y_meas, yd - y_true, u_raw, u_sat, d, n,
                     parts.tracking_term, parts.penalty_term, parts.constraint_value,
                     parts.lyapunov_value)
    ep.records.append(rec)
    return rec
