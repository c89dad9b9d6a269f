"""Steering objectives: MSE, CCE, hybrid CCE+MSE, co-existence loss, sine baseline.

Losses operate on graph Tensors so gradients flow back through the network;
discretization/decoding helpers are plain numpy. Steering is discretized to 9
classes with step 0.2, midpoints -0.8 .. 0.8.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import Tensor

N_CLASSES = 9
STEP = 0.2
MIDPOINTS = np.linspace(-0.8, 0.8, N_CLASSES)
STEERING_LIMIT = 0.8
LOG_FLOOR = 1e-12


class SteeringRangeError(ValueError):
    """Steering label outside the trainable [-0.8, 0.8] range."""


def discretize(y: float) -> int:
    """Index of the nearest midpoint; exact ties break toward zero."""
    if abs(y) > STEERING_LIMIT + 1e-12:
        raise SteeringRangeError(f"steering {y} outside [-0.8, 0.8]")
    d = np.abs(MIDPOINTS - y)
    best = d.min()
    tied = np.flatnonzero(d <= best + 1e-9)
    if len(tied) == 1:
        return int(tied[0])
    return int(tied[np.argmin(np.abs(MIDPOINTS[tied]))])


def one_hot(classes) -> np.ndarray:
    classes = np.atleast_1d(np.asarray(classes, dtype=int))
    out = np.zeros((len(classes), N_CLASSES))
    out[np.arange(len(classes)), classes] = 1.0
    return out


def class_midpoint(idx: int) -> float:
    return float(MIDPOINTS[idx])


def expected_steering_np(scores: np.ndarray) -> np.ndarray:
    """Expected-value decode of softmax scores, batch (..., 9) -> (...)."""
    scores = np.asarray(scores, dtype=np.float64)
    _check_simplex(scores)
    return scores @ MIDPOINTS


def argmax_steering_np(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return MIDPOINTS[np.argmax(scores, axis=-1)]


def _check_simplex(scores: np.ndarray) -> None:
    sums = scores.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= 1e-6):
        raise ValueError("scores must lie on the probability simplex")


def _as_batch(o) -> Tensor:
    t = o if isinstance(o, Tensor) else Tensor(o)
    if t.ndim == 1:
        t = nm.reshape(t, (1, t.shape[0]))
    return t


def expected_steering(scores) -> Tensor:
    """Graph version: (B, 9) simplex scores -> (B, 1) decoded steering."""
    t = _as_batch(scores)
    _check_simplex(t.data)
    return nm.matmul(t, Tensor(MIDPOINTS.reshape(-1, 1)))


def mse_loss(pred, target) -> Tensor:
    """Mean squared error over the batch; pred (B,) or (B,1)."""
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    t = np.asarray(target, dtype=np.float64).reshape(p.shape)
    diff = p - Tensor(t)
    return nm.reduce_mean(nm.multiply(diff, diff))


def cce_loss(scores, onehot) -> Tensor:
    """Categorical cross-entropy, batch mean. scores are post-softmax."""
    o = _as_batch(scores)
    _check_simplex(o.data)
    y = np.atleast_2d(np.asarray(onehot, dtype=np.float64))
    if y.shape != o.shape:
        raise nm.ShapeError(f"cce_loss: labels {y.shape} vs scores {o.shape}")
    per_sample = nm.reduce_sum(nm.multiply(nm.log(o, LOG_FLOOR), Tensor(y)), axis=-1)
    return nm.scale(nm.reduce_mean(per_sample), -1.0)


def hybrid_loss(scores, y, weight: float) -> Tensor:
    """CCE on the discretized label plus weight * squared expectation error."""
    o = _as_batch(scores)
    ys = np.atleast_1d(np.asarray(y, dtype=np.float64))
    classes = [discretize(v) for v in ys]
    cce = cce_loss(o, one_hot(classes))
    err = expected_steering(o) - Tensor(ys.reshape(-1, 1))
    return nm.add(cce, nm.scale(nm.reduce_mean(nm.multiply(err, err)), float(weight)))


def coexistence_matrix(n: int = N_CLASSES, sigma2: float = 1.0) -> np.ndarray:
    """Gaussian class-affinity matrix mu[i,j] = exp(-(i-j)^2 / (2 sigma^2))."""
    idx = np.arange(n, dtype=np.float64)
    d = idx[:, None] - idx[None, :]
    return np.exp(-(d * d) / (2.0 * sigma2))


def coexistence_loss(scores, onehot, mu: np.ndarray, weight: float) -> Tensor:
    """-(1-W) * CCE term - W * O^T mu O, batch mean. W in [0, 1]."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"coexistence weight must be in [0, 1], got {weight}")
    o = _as_batch(scores)
    _check_simplex(o.data)
    y = np.atleast_2d(np.asarray(onehot, dtype=np.float64))
    ll = nm.reduce_sum(nm.multiply(nm.log(o, LOG_FLOOR), Tensor(y)), axis=-1)
    omu = nm.matmul(o, Tensor(mu))
    quad = nm.reduce_sum(nm.multiply(omu, o), axis=-1)
    term = nm.add(nm.scale(ll, 1.0 - weight), nm.scale(quad, weight))
    return nm.scale(nm.reduce_mean(term), -1.0)


SINE_SAMPLES = 32
PHASE_GAIN = np.pi / 2.0  # steering +-0.8 maps to phase +-0.4*pi, unambiguous


def sine_encode(y: float, k: int = SINE_SAMPLES) -> np.ndarray:
    """Encode steering as a sampled sine wave whose phase shift carries y."""
    if abs(y) > STEERING_LIMIT + 1e-12:
        raise SteeringRangeError(f"steering {y} outside [-0.8, 0.8]")
    t = 2.0 * np.pi * np.arange(k) / k
    return np.sin(t + y * PHASE_GAIN)


def sine_decode(wave: np.ndarray) -> float:
    """Recover steering from the fundamental-frequency phase of the waveform."""
    wave = np.asarray(wave, dtype=np.float64)
    k = len(wave)
    coef = np.fft.rfft(wave)[1]
    if abs(coef) < 1e-9 * k:
        raise ValueError("sine_decode: waveform has no energy at the fundamental")
    # sin(t + phi) has rfft[1] = -i * (k/2) * e^{i phi}
    phi = np.arctan2(coef.real, -coef.imag)
    return float(phi / PHASE_GAIN)


def sine_loss(pred, target_wave) -> Tensor:
    """Least-squares error between predicted and encoded waveforms."""
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    t = np.asarray(target_wave, dtype=np.float64).reshape(p.shape)
    diff = p - Tensor(t)
    return nm.reduce_mean(nm.multiply(diff, diff))
