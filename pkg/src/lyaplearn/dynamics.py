"""Second-order plant models and forward-Euler integration."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .diffgraph import Graph, Node

__all__ = ["IntegrationError", "Variant", "PlantModel", "as_state", "simulate"]


class IntegrationError(FloatingPointError):
    """The plant state left the finite reals."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class Variant(str, enum.Enum):
    LINEAR2 = "linear2"
    NONLINEAR2 = "nonlinear2"


def as_state(x) -> np.ndarray:
    """Copy ``x`` into a float state vector, rejecting non-finite entries."""
    x = np.array(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise IntegrationError(f"non-finite state {x.tolist()}")
    return x


@dataclass(frozen=True)
class PlantModel:
    """``x1' = x2``, ``x2' = accel(x) + C*u + d`` with output ``y = x1``.

    ``LINEAR2`` uses ``accel = -A*x2 - B*x1``; ``NONLINEAR2`` uses
    ``accel = -A*cos(x2) - B*sin(x1)``.  The bounds describe the amplitude of
    the uniform actuator disturbance and output noise the episode driver
    samples; zero bounds give the clean plant.
    """

    variant: Variant = Variant.LINEAR2
    A: float = 9.0
    B: float = 6.0
    C: float = 6.0
    disturbance_bound: float = 0.0
    noise_bound: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        for name in ("A", "B", "C", "disturbance_bound", "noise_bound"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.disturbance_bound < 0 or self.noise_bound < 0:
            raise ValueError("disturbance_bound and noise_bound must be >= 0")

    state_dim = 2

    def derivative(self, x, u: float, d: float = 0.0) -> np.ndarray:
        x1, x2 = float(x[0]), float(x[1])
        if not (math.isfinite(x1) and math.isfinite(x2) and math.isfinite(u) and math.isfinite(d)):
            raise IntegrationError(f"non-finite input x={[x1, x2]}, u={u}, d={d}")
        if self.variant is Variant.LINEAR2:
            accel = -self.A * x2 - self.B * x1
        else:
            accel = -self.A * math.cos(x2) - self.B * math.sin(x1)
        return np.array([x2, accel + self.C * u + d])

    def output(self, x) -> float:
        return float(x[0])

    def output_gradient(self) -> np.ndarray:
        """Gradient of the output map, constant because ``y = x1``."""
        return np.array([1.0, 0.0])

    def measure(self, x, n: float = 0.0) -> float:
        """Output as seen by the controller: true output plus sensor noise."""
        return self.output(x) + n

    def euler_step(self, x, u: float, d: float = 0.0, dt: float = 0.01, step: int | None = None) -> np.ndarray:
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        try:
            nxt = np.asarray(x, dtype=float) + self.derivative(x, u, d) * dt
        except IntegrationError as exc:
            raise IntegrationError(str(exc), step) from None
        if not np.all(np.isfinite(nxt)):
            raise IntegrationError(f"state diverged to {nxt.tolist()}", step)
        return nxt

    # -- graph versions: state is a pair of scalars (nodes or floats) --------
    def derivative_on(self, g: Graph, x, u) -> tuple[Node, Node]:
        x1, x2 = x
        if self.variant is Variant.LINEAR2:
            accel = g.sub(g.mul(-self.A, x2), g.mul(self.B, x1))
        else:
            accel = g.sub(g.mul(-self.A, g.cos(x2)), g.mul(self.B, g.sin(x1)))
        return g.lift(x2), g.add(accel, g.mul(self.C, u))

    def output_on(self, g: Graph, x) -> Node:
        return g.lift(x[0])

    def euler_step_on(self, g: Graph, x, u, dt: float) -> tuple[Node, Node]:
        f1, f2 = self.derivative_on(g, x, u)
        return g.add(x[0], g.mul(f1, dt)), g.add(x[1], g.mul(f2, dt))


def simulate(model: PlantModel, x0, controls, dt: float, disturbances=None) -> np.ndarray:
    """Integrate an open-loop control sequence; returns states ``x_0 .. x_N``."""
    x = as_state(x0)
    out = [x]
    for k, u in enumerate(controls):
        d = 0.0 if disturbances is None else float(disturbances[k])
        x = model.euler_step(x, float(u), d, dt, step=k)
        out.append(x)
    return np.array(out)
