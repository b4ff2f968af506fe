"""Neural PID + feedforward controller with smooth actuator saturation.

The applied control is ``saturate(u_p(x_p) + u_f(x_f))`` where ``u_p`` is an
MLP on the PID feature triple (error, running integral, difference quotient)
and ``u_f`` is an MLP on the most recent ``n_f`` reference samples.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffgraph import Graph, Node, sigmoid_value

__all__ = [
    "ACTIVATIONS",
    "MlpParams",
    "ControllerParams",
    "PidFeatureState",
    "FeedforwardWindow",
    "SaturationConfig",
    "mlp_forward",
    "mlp_forward_on",
    "controller_output",
    "controller_output_on",
    "saturate",
    "saturate_on",
    "save_params",
    "load_params",
    "format_params",
    "parse_params",
]

ACTIVATIONS = ("sigmoid", "relu")

_NUMPY_ACT = {
    "sigmoid": sigmoid_value,
    "relu": lambda z: np.maximum(z, 0.0),
}


@dataclass
class MlpParams:
    """Weights of an ``n_in -> hidden -> 1`` network with a linear output."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        self.W1 = np.array(self.W1, dtype=float).reshape(np.shape(self.W1))
        self.b1 = np.array(self.b1, dtype=float).reshape(-1)
        self.W2 = np.array(self.W2, dtype=float).reshape(1, -1)
        self.b2 = np.array(self.b2, dtype=float).reshape(1)
        h = self.W1.shape[0]
        if self.W1.ndim != 2 or self.b1.shape != (h,) or self.W2.shape != (1, h):
            raise ValueError(
                f"layer shapes do not chain: W1{self.W1.shape} b1{self.b1.shape} W2{self.W2.shape}"
            )
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise ValueError("network weights must be finite")

    @classmethod
    def initialize(cls, n_in: int, hidden: int, activation: str, rng: np.random.Generator) -> "MlpParams":
        """Glorot-uniform weights, zero biases."""
        if n_in < 1 or hidden < 1:
            raise ValueError("layer widths must be positive")
        lim1 = math.sqrt(6.0 / (n_in + hidden))
        lim2 = math.sqrt(6.0 / (hidden + 1))
        W1 = rng.uniform(-lim1, lim1, size=(hidden, n_in))
        W2 = rng.uniform(-lim2, lim2, size=(1, hidden))
        return cls(W1, np.zeros(hidden), W2, np.zeros(1), activation)

    @classmethod
    def zeros(cls, n_in: int, hidden: int, activation: str = "sigmoid") -> "MlpParams":
        return cls(np.zeros((hidden, n_in)), np.zeros(hidden), np.zeros((1, hidden)), np.zeros(1), activation)

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "MlpParams":
        return MlpParams(*(a.copy() for a in self.arrays()), activation=self.activation)


@dataclass
class ControllerParams:
    """All learnable weights: the feedback (PID) net and the feedforward net."""

    feedback: MlpParams
    feedforward: MlpParams

    @classmethod
    def initialize(
        cls,
        rng: np.random.Generator,
        hidden_p: int = 16,
        hidden_f: int = 16,
        n_f: int = 10,
        activation_p: str = "sigmoid",
        activation_f: str = "relu",
    ) -> "ControllerParams":
        return cls(
            MlpParams.initialize(3, hidden_p, activation_p, rng),
            MlpParams.initialize(n_f, hidden_f, activation_f, rng),
        )

    @property
    def n_f(self) -> int:
        return self.feedforward.n_in

    def arrays(self) -> list[np.ndarray]:
        return self.feedback.arrays() + self.feedforward.arrays()

    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, theta) -> "ControllerParams":
        """A copy whose weights are taken, in :meth:`arrays` order, from ``theta``."""
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.size():
            raise ValueError(f"expected {self.size()} parameters, got {theta.size}")
        out, i = [], 0
        for a in self.arrays():
            out.append(theta[i : i + a.size].reshape(a.shape))
            i += a.size
        return ControllerParams(
            MlpParams(*out[:4], activation=self.feedback.activation),
            MlpParams(*out[4:], activation=self.feedforward.activation),
        )

    def copy(self) -> "ControllerParams":
        return ControllerParams(self.feedback.copy(), self.feedforward.copy())


@dataclass(frozen=True)
class SaturationConfig:
    v_max: float = 50.0
    v_min: float = -50.0

    def __post_init__(self):
        if not self.v_max > self.v_min:
            raise ValueError(f"v_max ({self.v_max}) must exceed v_min ({self.v_min})")

    @property
    def span(self) -> float:
        return self.v_max - self.v_min

    @property
    def mid(self) -> float:
        return 0.5 * (self.v_max + self.v_min)


@dataclass
class PidFeatureState:
    integral_accum: float = 0.0
    prev_error: float = 0.0
    initialized: bool = False

    def reset(self):
        self.integral_accum = 0.0
        self.prev_error = 0.0
        self.initialized = False

    def update(self, e: float, dt: float, derivative: float | None = None) -> np.ndarray:
        """Advance with error ``e`` and return ``[e, integral, derivative]``.

        The derivative is the difference quotient of successive errors unless
        an externally computed ``derivative`` is passed in.  The first call
        after a reset reports a zero difference quotient.
        """
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        if not self.initialized:
            self.prev_error = e
            self.initialized = True
        self.integral_accum += e * dt
        deriv = (e - self.prev_error) / dt if derivative is None else float(derivative)
        self.prev_error = e
        return np.array([e, self.integral_accum, deriv])


@dataclass
class FeedforwardWindow:
    """The last ``n_f`` reference samples, newest first."""

    n_f: int = 10
    _buf: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if self.n_f < 1:
            raise ValueError("n_f must be positive")

    def reset(self, yd0: float):
        self._buf = deque([float(yd0)] * self.n_f, maxlen=self.n_f)

    def push(self, yd: float) -> np.ndarray:
        if len(self._buf) != self.n_f:
            raise RuntimeError("window used before reset()")
        self._buf.appendleft(float(yd))
        return self.values()

    def values(self) -> np.ndarray:
        return np.array(self._buf, dtype=float)

    def __len__(self):
        return len(self._buf)


# -- forward passes -----------------------------------------------------------
def mlp_forward(p: MlpParams, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n_in,):
        raise ValueError(f"input has shape {x.shape}, network expects ({p.n_in},)")
    hidden = _NUMPY_ACT[p.activation](p.W1 @ x + p.b1)
    return float(p.W2[0] @ hidden + p.b2[0])


def mlp_forward_on(g: Graph, nodes, activation: str, x) -> Node:
    """Graph version; ``nodes`` are the four weight nodes ``(W1, b1, W2, b2)``."""
    W1, b1, W2, b2 = nodes
    x = np.asarray(x, dtype=float)
    if x.shape != (W1.value.shape[1],):
        raise ValueError(f"input has shape {x.shape}, network expects ({W1.value.shape[1]},)")
    pre = g.add(g.matvec(W1, x), b1)
    hidden = g.sigmoid(pre) if activation == "sigmoid" else g.relu(pre)
    out = g.add(g.matvec(W2, hidden), b2)
    return g.index(out, 0)


def controller_output(params: ControllerParams, x_p, x_f) -> float:
    return mlp_forward(params.feedback, x_p) + mlp_forward(params.feedforward, x_f)


def controller_output_on(g: Graph, nodes, params: ControllerParams, x_p, x_f) -> Node:
    """``nodes`` holds the eight weight nodes in :meth:`ControllerParams.arrays` order."""
    u_p = mlp_forward_on(g, nodes[:4], params.feedback.activation, x_p)
    u_f = mlp_forward_on(g, nodes[4:], params.feedforward.activation, x_f)
    return g.add(u_p, u_f)


def _strictly_inside(v: float, cfg: SaturationConfig) -> float:
    # tanh rounds to exactly +-1 once |z| > ~19, which would put v on a bound
    if v >= cfg.v_max:
        return math.nextafter(cfg.v_max, -math.inf)
    if v <= cfg.v_min:
        return math.nextafter(cfg.v_min, math.inf)
    return v


def saturate(u: float, cfg: SaturationConfig) -> float:
    """Smoothly squash ``u`` into ``(v_min, v_max)`` with unit slope at the midpoint."""
    half = 0.5 * cfg.span
    return _strictly_inside(half * math.tanh((u - cfg.mid) / half) + cfg.mid, cfg)


def saturate_on(g: Graph, u, cfg: SaturationConfig) -> Node:
    half = 0.5 * cfg.span
    out = g.add(g.mul(half, g.tanh(g.mul(g.sub(u, cfg.mid), 1.0 / half))), cfg.mid)
    # the local slope is already 0 wherever this moves the value
    out.value = _strictly_inside(out.value, cfg)
    return out


# -- persistence --------------------------------------------------------------
_NET_NAMES = ("feedback", "feedforward")
_ARRAY_NAMES = ("W1", "b1", "W2", "b2")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def format_params(params: ControllerParams) -> str:
    lines = ["# controller parameters v1"]
    for name, net in zip(_NET_NAMES, (params.feedback, params.feedforward)):
        lines.append(f"net {name} activation={net.activation} n_in={net.n_in} hidden={net.hidden}")
        for aname, arr in zip(_ARRAY_NAMES, net.arrays()):
            shape = "x".join(str(s) for s in arr.shape)
            lines.append(f"{aname} {shape} " + " ".join(_fmt(v) for v in arr.ravel()))
    return "\n".join(lines) + "\n"


def parse_params(text: str) -> ControllerParams:
    nets: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, *rest = line.split()
        if head == "net":
            if not rest or rest[0] not in _NET_NAMES:
                raise ValueError(f"line {lineno}: unknown network {rest[:1]}")
            meta = dict(kv.split("=", 1) for kv in rest[1:])
            current = nets.setdefault(rest[0], {"activation": meta.get("activation", "sigmoid")})
        elif head in _ARRAY_NAMES:
            if current is None:
                raise ValueError(f"line {lineno}: array before any 'net' header")
            shape = tuple(int(s) for s in rest[0].split("x"))
            values = np.array([float(v) for v in rest[1:]], dtype=float)
            if values.size != int(np.prod(shape)):
                raise ValueError(f"line {lineno}: {head} expects {int(np.prod(shape))} values, got {values.size}")
            current[head] = values.reshape(shape)
        else:
            raise ValueError(f"line {lineno}: unrecognised entry {head!r}")
    missing = [n for n in _NET_NAMES if n not in nets]
    if missing:
        raise ValueError(f"missing network(s): {', '.join(missing)}")
    built = [MlpParams(*(nets[n][a] for a in _ARRAY_NAMES), activation=nets[n]["activation"]) for n in _NET_NAMES]
    return ControllerParams(*built)


def save_params(params: ControllerParams, path) -> None:
    Path(path).write_text(format_params(params))


def load_params(path) -> ControllerParams:
    return parse_params(Path(path).read_text())
