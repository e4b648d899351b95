"""From-scratch feedforward demand predictor.

A small MLP maps (one-hot interval, normalized detector flow and speed) to a
raw demand vector: tanh hidden layers, linear output.  Forward passes record
an activation tape; the backward pass consumes the tape plus an externally
supplied gradient of the loss with respect to the raw output.  That injected
gradient is the whole point: it comes from the analytic surrogate, not from
anything the network knows about.

The raw output is clamped to [0, demand_clip_max] before it reaches a
simulator; gradients are taken at the raw (unclamped) output, i.e. the clamp
is straight-through.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GradientError(ValueError):
    """Raised when a parameter update would apply non-finite values."""


@dataclass
class PredictorParams:
    weights: list[np.ndarray]  # weights[i]: (n_out, n_in)
    biases: list[np.ndarray]   # biases[i]: (n_out,)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "PredictorParams":
        return PredictorParams(weights=[w.copy() for w in self.weights],
                               biases=[b.copy() for b in self.biases])

    def fingerprint(self) -> bytes:
        import hashlib
        h = hashlib.sha256()
        for w, b in zip(self.weights, self.biases):
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.digest()


@dataclass
class Normalizer:
    """Per-feature min/max for the measurement part of the input vector."""

    flow_min: np.ndarray
    flow_max: np.ndarray
    speed_min: np.ndarray
    speed_max: np.ndarray

    def to_dict(self) -> dict:
        return {
            "flow_min": self.flow_min.tolist(),
            "flow_max": self.flow_max.tolist(),
            "speed_min": self.speed_min.tolist(),
            "speed_max": self.speed_max.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(flow_min=np.asarray(d["flow_min"], dtype=float),
                   flow_max=np.asarray(d["flow_max"], dtype=float),
                   speed_min=np.asarray(d["speed_min"], dtype=float),
                   speed_max=np.asarray(d["speed_max"], dtype=float))


def normalizer_from_series(flows: np.ndarray, speeds: np.ndarray) -> Normalizer:
    """Min/max over a stacked (n_samples, n_detectors) measurement history."""
    return Normalizer(
        flow_min=flows.min(axis=0), flow_max=flows.max(axis=0),
        speed_min=speeds.min(axis=0), speed_max=speeds.max(axis=0),
    )


def _scale01(value: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.clip((value - lo) / safe, 0.0, 1.0)


def encode_input(interval: int, flow: np.ndarray, speed: np.ndarray,
                 normalizer: Normalizer, horizon: int) -> np.ndarray:
    """One-hot time slot plus per-detector normalized flow and speed in [0,1]."""
    k = len(flow)
    if len(normalizer.flow_min) != k or len(speed) != k:
        raise ValueError("detector count mismatch between frame and normalizer")
    if not 0 <= interval < horizon:
        raise ValueError(f"interval {interval} outside horizon {horizon}")
    x = np.zeros(horizon + 2 * k)
    x[interval] = 1.0
    x[horizon:horizon + k] = _scale01(flow, normalizer.flow_min,
                                      normalizer.flow_max)
    x[horizon + k:] = _scale01(speed, normalizer.speed_min, normalizer.speed_max)
    return x


def decode_interval(x: np.ndarray, horizon: int) -> int:
    """Recover the interval index from the one-hot time block."""
    return int(np.argmax(x[:horizon]))


def input_size(horizon: int, n_detectors: int) -> int:
    return horizon + 2 * n_detectors


# --------------------------------------------------------------------------
# Network core
# --------------------------------------------------------------------------

def init_params(sizes, seed: int) -> PredictorParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x1417)))
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return PredictorParams(weights=weights, biases=biases)


def forward(params: PredictorParams, x: np.ndarray):
    """Tanh hidden layers, linear head.  Returns (raw output, tape).

    The tape holds every layer input needed by ``backward``; it must not be
    reused after the parameters change.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (params.weights[0].shape[1],):
        raise ValueError(
            f"input length {x.shape} does not match network input "
            f"{params.weights[0].shape[1]}")
    activations = [x]
    a = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = w @ a + b
        a = z if i == last else np.tanh(z)
        activations.append(a)
    return a, activations


def backward(params: PredictorParams, tape, grad_output: np.ndarray):
    """Exact reverse-mode gradients for every weight/bias.

    ``grad_output`` is dLoss/d(raw output); the hidden nonlinearity derivative
    is recovered from the taped activations (tanh' = 1 - a^2).
    """
    if len(tape) != len(params.weights) + 1:
        raise ValueError("tape does not match network depth")
    g = np.asarray(grad_output, dtype=float)
    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        a_prev = tape[i]
        grad_w[i] = np.outer(g, a_prev)
        grad_b[i] = g.copy()
        if i > 0:
            g = params.weights[i].T @ g
            g = g * (1.0 - tape[i] ** 2)
    return list(zip(grad_w, grad_b))


def sgd_step(params: PredictorParams, grads, lr: float) -> PredictorParams:
    """Plain SGD: theta <- theta - lr * grad.  No momentum, no decay.

    Raises GradientError on any non-finite gradient entry; callers keep the
    old parameters in that case.
    """
    for gw, gb in grads:
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise GradientError("non-finite gradient entry; update rejected")
    weights = [w - lr * gw for w, (gw, _) in zip(params.weights, grads)]
    biases = [b - lr * gb for b, (_, gb) in zip(params.biases, grads)]
    return PredictorParams(weights=weights, biases=biases)


def clip_demand(raw: np.ndarray, clip_max: float) -> np.ndarray:
    """Clamp raw network output to a physical demand range [0, clip_max]."""
    return np.clip(raw, 0.0, clip_max)


# --------------------------------------------------------------------------
# Snapshot format: text, layer shapes first, then row-major values
# --------------------------------------------------------------------------

def save_params(params: PredictorParams, path):
    lines = [f"layers {len(params.weights)}"]
    for w in params.weights:
        lines.append(f"shape {w.shape[0]} {w.shape[1]}")
    for w, b in zip(params.weights, params.biases):
        lines.extend(repr(float(v)) for v in w.ravel())
        lines.extend(repr(float(v)) for v in b)
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path) -> PredictorParams:
    tokens = Path(path).read_text().split()
    if tokens[0] != "layers":
        raise ValueError("bad parameter snapshot: missing layer count")
    n_layers = int(tokens[1])
    pos = 2
    shapes = []
    for _ in range(n_layers):
        if tokens[pos] != "shape":
            raise ValueError("bad parameter snapshot: missing shape line")
        shapes.append((int(tokens[pos + 1]), int(tokens[pos + 2])))
        pos += 3
    weights, biases = [], []
    for n_out, n_in in shapes:
        w = np.array([float(v) for v in tokens[pos:pos + n_out * n_in]])
        pos += n_out * n_in
        b = np.array([float(v) for v in tokens[pos:pos + n_out]])
        pos += n_out
        weights.append(w.reshape(n_out, n_in))
        biases.append(b)
    return PredictorParams(weights=weights, biases=biases)
