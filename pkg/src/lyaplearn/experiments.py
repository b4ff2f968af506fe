"""Episode driver, case-study presets, metrics and CSV logs."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .controller import ControllerParams, FeedforwardWindow, PidFeatureState, SaturationConfig
from .dynamics import IntegrationError, PlantModel, Variant
from .learner import (
    EpisodeState,
    OnlineLearner,
    PenaltyConfig,
    StepRecord,
    learning_step,
    start_episode,
)

__all__ = [
    "ReferenceSignal",
    "DERIVATIVE_SOURCES",
    "ControllerConfig",
    "LearnerConfig",
    "EpisodeConfig",
    "MetricsReport",
    "EpisodeResult",
    "sample_uniform",
    "sample_disturbance",
    "sample_noise",
    "example_config",
    "init_params",
    "run_episode",
    "compute_metrics",
    "write_csv",
    "read_csv",
]


@dataclass(frozen=True)
class ReferenceSignal:
    """``amplitude * sin(angular_frequency * t)``."""

    amplitude: float = 2.0
    angular_frequency: float = 3.0

    def at(self, t: float) -> float:
        if t < 0:
            raise ValueError(f"reference queried at negative time {t}")
        return self.amplitude * math.sin(self.angular_frequency * t)

    __call__ = at

    def rate(self, t: float) -> float:
        """Time derivative of the reference at ``t``."""
        return self.amplitude * self.angular_frequency * math.cos(self.angular_frequency * t)


def sample_uniform(rng: np.random.Generator, bound: float) -> float:
    """One draw from U[-bound, bound]; a zero bound returns 0 without drawing."""
    if bound < 0:
        raise ValueError(f"bound must be >= 0, got {bound}")
    if bound == 0:
        return 0.0
    return float(rng.uniform(-bound, bound))


sample_disturbance = sample_uniform
sample_noise = sample_uniform


DERIVATIVE_SOURCES = ("difference", "state")


@dataclass(frozen=True)
class ControllerConfig:
    hidden_p: int = 16
    hidden_f: int = 16
    n_f: int = 10
    activation_p: str = "sigmoid"
    activation_f: str = "sigmoid"
    v_max: float = 50.0
    v_min: float = -50.0
    # "difference": quotient of successive measured errors; "state": reference
    # rate minus the velocity state, which ignores output noise
    derivative_source: str = "difference"

    def __post_init__(self):
        if self.derivative_source not in DERIVATIVE_SOURCES:
            raise ValueError(
                f"derivative_source must be one of {DERIVATIVE_SOURCES}, got {self.derivative_source!r}"
            )
        for name in ("hidden_p", "hidden_f", "n_f"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        self.saturation()  # validates the bounds

    def saturation(self) -> SaturationConfig:
        return SaturationConfig(self.v_max, self.v_min)


@dataclass(frozen=True)
class LearnerConfig:
    lam: float = 1.0
    beta_b: float = 0.1
    alpha_rho: float = 1.0
    eta: float = 0.36
    epsilon: float = 1e-10

    def __post_init__(self):
        self.penalty()  # validates lam, beta_b and alpha_rho
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise ValueError(f"eta must be a positive finite number, got {self.eta}")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError(f"epsilon must be a non-negative finite number, got {self.epsilon}")

    def penalty(self) -> PenaltyConfig:
        return PenaltyConfig(self.beta_b, self.alpha_rho, self.lam)


@dataclass(frozen=True)
class EpisodeConfig:
    plant: PlantModel = field(default_factory=PlantModel)
    reference: ReferenceSignal = field(default_factory=ReferenceSignal)
    dt: float = 0.01
    duration: float = 30.0
    mode: str = "learn"
    seed: int = 0
    x0: tuple[float, float] = (0.0, 0.0)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    settle_threshold: float = 0.05
    tail_window: float = 5.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.duration >= self.dt:
            raise ValueError(f"duration ({self.duration}) must be at least dt ({self.dt})")
        if self.mode not in ("learn", "test"):
            raise ValueError(f"mode must be 'learn' or 'test', got {self.mode!r}")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")

    @property
    def n_steps(self) -> int:
        # round first so 30 / 0.01 does not become 3001
        return math.ceil(round(self.duration / self.dt, 9))


def example_config(number: int, mode: str = "learn", seed: int = 0, **overrides) -> EpisodeConfig:
    """The three case studies; keyword arguments replace preset fields.

    1: linear plant (9, 6, 6), reference 2 sin 3t.
    2: nonlinear plant (9, 6, 6), same reference.
    3: example 2 with disturbance +-60 and sensor noise +-0.2 while learning;
       the test phase swaps in plant (8, 6, 3) and reference 1.5 sin 6t.
       The derivative feature is taken from the velocity state because a
       difference quotient of the noisy output amplifies the noise 100-fold.
    """
    ref = ReferenceSignal(2.0, 3.0)
    if number == 1:
        plant = PlantModel(Variant.LINEAR2, 9.0, 6.0, 6.0)
    elif number == 2:
        plant = PlantModel(Variant.NONLINEAR2, 9.0, 6.0, 6.0)
    elif number == 3:
        if mode == "test":
            plant = PlantModel(Variant.NONLINEAR2, 8.0, 6.0, 3.0, 60.0, 0.2)
            ref = ReferenceSignal(1.5, 6.0)
        else:
            plant = PlantModel(Variant.NONLINEAR2, 9.0, 6.0, 6.0, 60.0, 0.2)
    else:
        raise ValueError(f"unknown example {number}; expected 1, 2 or 3")
    controller = ControllerConfig(derivative_source="state" if number == 3 else "difference")
    base = EpisodeConfig(plant=plant, reference=ref, mode=mode, seed=seed, controller=controller)
    return replace(base, **overrides) if overrides else base


def _streams(seed: int):
    init, noise, dist = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(noise), np.random.default_rng(dist))


def init_params(cfg: EpisodeConfig) -> ControllerParams:
    c = cfg.controller
    return ControllerParams.initialize(
        _streams(cfg.seed)[0], c.hidden_p, c.hidden_f, c.n_f, c.activation_p, c.activation_f
    )


@dataclass(frozen=True)
class MetricsReport:
    settle_time_s: float
    rmse_tail: float
    max_abs_error_tail: float
    max_abs_u: float
    mean_abs_delta_u: float
    constraint_satisfaction_rate: float
    p90_abs_error: float
    penalty_head_mean: float
    penalty_tail_mean: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpisodeResult:
    params: ControllerParams
    records: list[StepRecord]
    metrics: MetricsReport
    aborted: str | None = None
    skipped_updates: int = 0

    @property
    def ok(self) -> bool:
        return self.aborted is None


def run_episode(cfg: EpisodeConfig, params: ControllerParams | None = None) -> EpisodeResult:
    """Simulate one episode; learning mode adapts a copy of ``params``.

    Without ``params`` a fresh controller is drawn from the episode seed.  A
    non-finite plant state stops the run early; the partial log is kept and
    the cause is reported in ``aborted``.
    """
    if params is None:
        if cfg.mode == "test":
            raise ValueError("test mode needs trained parameters")
        params = init_params(cfg)
    params = params.copy()
    if params.n_f != cfg.controller.n_f:
        raise ValueError(f"parameters expect n_f={params.n_f}, config says {cfg.controller.n_f}")

    _, noise_rng, dist_rng = _streams(cfg.seed)
    plant = cfg.plant
    learner = OnlineLearner(
        params,
        plant,
        cfg.controller.saturation(),
        cfg.learner.penalty(),
        eta=cfg.learner.eta,
        epsilon=cfg.learner.epsilon,
        learn=cfg.mode == "learn",
    )
    ep = EpisodeState(
        model=plant,
        reference=cfg.reference,
        dt=cfg.dt,
        x=np.array(cfg.x0, dtype=float),
        pid=PidFeatureState(),
        window=FeedforwardWindow(cfg.controller.n_f),
        draw_noise=lambda: sample_noise(noise_rng, plant.noise_bound),
        draw_disturbance=lambda: sample_disturbance(dist_rng, plant.disturbance_bound),
        reference_rate=cfg.reference.rate if cfg.controller.derivative_source == "state" else None,
    )
    aborted = None
    try:
        # overflow anywhere in the loss graph aborts the run instead of
        # feeding inf/nan into the weights
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            start_episode(learner, ep)
            for _ in range(cfg.n_steps):
                learning_step(learner, ep)
    except (IntegrationError, FloatingPointError, ValueError) as exc:
        aborted = f"{type(exc).__name__} at k={ep.k}: {exc}"
    metrics = compute_metrics(ep.records, cfg.settle_threshold, cfg.tail_window)
    return EpisodeResult(learner.params, ep.records, metrics, aborted, learner.optimizer.skipped)


def compute_metrics(records, settle_threshold: float = 0.05, tail_window: float = 5.0) -> MetricsReport:
    """Summary statistics of a log; every error metric uses the true output."""
    if not records:
        raise ValueError("cannot compute metrics of an empty log")
    t = np.array([r.t for r in records], dtype=float)
    err = np.abs(np.array([r.e for r in records], dtype=float))
    u = np.array([r.u_sat for r in records], dtype=float)
    c = np.array([r.c_k for r in records], dtype=float)
    pen = np.array([r.loss_penalty for r in records], dtype=float)

    above = np.nonzero(~(err < settle_threshold))[0]
    if above.size == 0:
        settle = float(t[0])
    elif above[-1] == len(err) - 1:
        settle = float(t[-1])
    else:
        settle = float(t[above[-1] + 1])

    tail = err[t > t[-1] - tail_window]
    if tail.size == 0:
        tail = err[-1:]
    finite_c = c[np.isfinite(c)]
    pen = pen[np.isfinite(pen)]
    n10 = max(1, pen.size // 10)
    return MetricsReport(
        settle_time_s=settle,
        rmse_tail=float(np.sqrt(np.mean(tail * tail))),
        max_abs_error_tail=float(np.max(tail)),
        max_abs_u=float(np.max(np.abs(u))),
        mean_abs_delta_u=float(np.mean(np.abs(np.diff(u)))) if u.size > 1 else 0.0,
        constraint_satisfaction_rate=float(np.mean(finite_c < 0)) if finite_c.size else math.nan,
        p90_abs_error=float(np.percentile(err, 90)),
        penalty_head_mean=float(np.mean(pen[:n10])) if pen.size else math.nan,
        penalty_tail_mean=float(np.mean(pen[-n10:])) if pen.size else math.nan,
    )


# -- CSV log ------------------------------------------------------------------------
def _cell(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(StepRecord.columns())
        for r in records:
            w.writerow([_cell(v) for v in r.as_tuple()])


def read_csv(path) -> list[StepRecord]:
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if header != StepRecord.columns():
            raise ValueError(f"{path}: unexpected columns {header}")
        return [StepRecord(int(row[0]), *(float(v) for v in row[1:])) for row in rows]


def with_mode(cfg: EpisodeConfig, mode: str) -> EpisodeConfig:
    return replace(cfg, mode=mode)
