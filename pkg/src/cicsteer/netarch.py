"""Branched steering network with an optional co-learning head.

The trunk extracts shared features from a grayscale camera image; four
specialist branches (left, right, straight, follow) each emit an output row.
With a co-learning head the rows are linearly mixed by a per-input matrix C
with unit diagonal before the navigational command selects one row. With the
head disabled this reduces exactly to the plain branched (CIL-style) model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses, numerics as nm
from .numerics import Tensor
from .seeding import substream

COMMANDS = ("left", "right", "straight", "follow")
CMD_INDEX = {c: i for i, c in enumerate(COMMANDS)}
N_BRANCHES = 4

DEFAULT_CONV = ((16, 5, 2), (32, 3, 2), (48, 3, 2), (64, 3, 2))

# off-diagonal (i, j) order used for the 12 generated coefficients
OFFDIAG = tuple((i, j) for i in range(N_BRANCHES)
                for j in range(N_BRANCHES) if i != j)

# mirror-turn coupling l<->r plus straight<->follow; other pairs off
DEFAULT_R = np.eye(N_BRANCHES)
DEFAULT_R[0, 1] = DEFAULT_R[1, 0] = 1.0
DEFAULT_R[2, 3] = DEFAULT_R[3, 2] = 1.0


class UnknownCommandError(KeyError):
    pass


@dataclass
class ArchitectureConfig:
    image_shape: tuple = (48, 64)
    channels: int = 1
    conv_spec: tuple = DEFAULT_CONV
    feature_width: int = 128
    branch_hidden: int = 64
    output_mode: str = "regression"   # regression | classification | sine
    head_mode: str = "none"           # none | manual | gtu
    relationship: np.ndarray = field(default_factory=lambda: DEFAULT_R.copy())
    decode: str = "expected"          # classification decode: expected | argmax

    @property
    def output_width(self) -> int:
        return {"regression": 1, "classification": losses.N_CLASSES,
                "sine": losses.SINE_SAMPLES}[self.output_mode]

    def conv_output_shape(self) -> tuple:
        h, w = self.image_shape
        c = self.channels
        for cout, k, stride in self.conv_spec:
            h = (h - k) // stride + 1
            w = (w - k) // stride + 1
            c = cout
        if h < 1 or w < 1:
            raise nm.ShapeError("conv stack consumes the whole image")
        return c, h, w


def _placement_matrix() -> np.ndarray:
    p = np.zeros((len(OFFDIAG), N_BRANCHES * N_BRANCHES))
    for k, (i, j) in enumerate(OFFDIAG):
        p[k, N_BRANCHES * i + j] = 1.0
    return p


_PLACEMENT = _placement_matrix()


class Model:
    """Parameter store plus forward passes (graph for training, numpy for inference)."""

    def __init__(self, config: ArchitectureConfig):
        self.config = config
        self.params: dict[str, np.ndarray] = {}

    # ----- parameters -------------------------------------------------
    def param_spec(self) -> dict[str, tuple]:
        cfg = self.config
        spec: dict[str, tuple] = {}
        cin = cfg.channels
        for i, (cout, k, _s) in enumerate(cfg.conv_spec):
            spec[f"conv{i}.w"] = (cout, cin, k, k)
            spec[f"conv{i}.b"] = (cout,)
            cin = cout
        c, h, w = cfg.conv_output_shape()
        flat = c * h * w
        spec["shared.w"] = (flat, cfg.feature_width)
        spec["shared.b"] = (cfg.feature_width,)
        for i in range(N_BRANCHES):
            spec[f"branch{i}.h.w"] = (cfg.feature_width, cfg.branch_hidden)
            spec[f"branch{i}.h.b"] = (cfg.branch_hidden,)
            spec[f"branch{i}.out.w"] = (cfg.branch_hidden, cfg.output_width)
            spec[f"branch{i}.out.b"] = (cfg.output_width,)
        if cfg.head_mode == "manual":
            spec["head.e.w"] = (cfg.feature_width, len(OFFDIAG))
            spec["head.e.b"] = (len(OFFDIAG),)
        elif cfg.head_mode == "gtu":
            spec["head.u.w"] = (cfg.feature_width, len(OFFDIAG))
            spec["head.u.b"] = (len(OFFDIAG),)
            spec["head.v.w"] = (cfg.feature_width, len(OFFDIAG))
            spec["head.v.b"] = (len(OFFDIAG),)
        elif cfg.head_mode != "none":
            raise ValueError(f"unknown head mode {self.config.head_mode!r}")
        return spec

    def init_params(self, seed: int) -> None:
        """He-scaled uniform weights, zero biases, zero head generators.

        Each tensor draws from a substream named after it, so two models that
        share a layer initialize it identically regardless of head mode.
        """
        self.params = {}
        for name, shape in self.param_spec().items():
            if name.endswith(".b") or name.startswith("head."):
                self.params[name] = np.zeros(shape)
                continue
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            # Uniform with variance 2/fan_in so activation scale survives
            # the ReLU stack instead of shrinking ~60% per layer.
            bound = np.sqrt(6.0 / fan_in)
            rng = substream(seed, "init", name)
            self.params[name] = rng.uniform(-bound, bound, size=shape)

    def load_params(self, arrays: dict[str, np.ndarray]) -> None:
        spec = self.param_spec()
        if set(arrays) != set(spec):
            missing = set(spec) - set(arrays)
            extra = set(arrays) - set(spec)
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, shape in spec.items():
            if tuple(arrays[name].shape) != shape:
                raise nm.ShapeError(f"checkpoint {name}: {arrays[name].shape} "
                                    f"vs expected {shape}")
        self.params = {k: np.array(v) for k, v in arrays.items()}

    def bind(self) -> dict[str, Tensor]:
        """Wrap parameters as graph leaves for one training step."""
        return {name: Tensor(arr, requires_grad=True)
                for name, arr in self.params.items()}

    # ----- graph forward ----------------------------------------------
    def shared_features(self, images, tensors: dict[str, Tensor]) -> Tensor:
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(images)
        expect = (cfg.channels,) + tuple(cfg.image_shape)
        if tuple(x.shape[1:]) != expect:
            raise nm.ShapeError(f"image batch {x.shape} vs expected (B,)+{expect}")
        for i, (_c, _k, stride) in enumerate(cfg.conv_spec):
            x = nm.conv2d(x, tensors[f"conv{i}.w"], stride=stride,
                          bias=tensors[f"conv{i}.b"], relu=True)
        x = nm.flatten(x)
        x = nm.bias_add(nm.matmul(x, tensors["shared.w"]), tensors["shared.b"])
        return nm.relu(x)

    def branch_outputs(self, features: Tensor,
                       tensors: dict[str, Tensor]) -> list[Tensor]:
        rows = []
        for i in range(N_BRANCHES):
            h = nm.bias_add(nm.matmul(features, tensors[f"branch{i}.h.w"]),
                            tensors[f"branch{i}.h.b"])
            h = nm.relu(h)
            rows.append(nm.bias_add(nm.matmul(h, tensors[f"branch{i}.out.w"]),
                                    tensors[f"branch{i}.out.b"]))
        return rows

    def colearn_coefficients(self, features: Tensor,
                             tensors: dict[str, Tensor]) -> Tensor | None:
        """(B, 12) off-diagonal coefficients in OFFDIAG order, or None."""
        mode = self.config.head_mode
        if mode == "none":
            return None
        if mode == "manual":
            e = nm.tanh(nm.bias_add(nm.matmul(features, tensors["head.e.w"]),
                                    tensors["head.e.b"]))
            mask = np.array([self.config.relationship[i, j] for i, j in OFFDIAG])
            return nm.multiply(e, Tensor(mask))
        if mode == "gtu":
            u = nm.bias_add(nm.matmul(features, tensors["head.u.w"]),
                            tensors["head.u.b"])
            v = nm.bias_add(nm.matmul(features, tensors["head.v.w"]),
                            tensors["head.v.b"])
            return nm.multiply(nm.tanh(u), nm.sigmoid(v))
        raise ValueError(f"unknown head mode {mode!r}")

    def colearn_matrix(self, features: Tensor,
                       tensors: dict[str, Tensor]) -> Tensor:
        """Full (B, 4, 4) mixing matrix with unit diagonal."""
        coeff = self.colearn_coefficients(features, tensors)
        if coeff is None:
            b = features.shape[0]
            return Tensor(np.broadcast_to(np.eye(N_BRANCHES),
                                          (b, N_BRANCHES, N_BRANCHES)).copy())
        flat = nm.matmul(coeff, Tensor(_PLACEMENT))
        c = nm.reshape(flat, (coeff.shape[0], N_BRANCHES, N_BRANCHES))
        return nm.add(c, Tensor(np.eye(N_BRANCHES)))

    def mix_branches(self, rows: list[Tensor], coeff: Tensor | None) -> list[Tensor]:
        """Apply the co-learning mix row-wise: A^i = rows[i] + sum_j c_ij rows[j]."""
        if coeff is None:
            return rows
        mixed = []
        for i in range(N_BRANCHES):
            acc = rows[i]
            for k, (ci, j) in enumerate(OFFDIAG):
                if ci != i:
                    continue
                sel = np.zeros((len(OFFDIAG), 1))
                sel[k, 0] = 1.0
                cij = nm.matmul(coeff, Tensor(sel))       # (B, 1)
                acc = nm.add(acc, nm.multiply(cij, rows[j]))
            mixed.append(acc)
        return mixed

    def forward(self, images, tensors: dict[str, Tensor]) -> dict:
        feats = self.shared_features(images, tensors)
        rows = self.branch_outputs(feats, tensors)
        coeff = self.colearn_coefficients(feats, tensors)
        return {"features": feats, "branch_raw": rows, "coeff": coeff,
                "mixed": self.mix_branches(rows, coeff)}

    # ----- numpy inference path ----------------------------------------
    def forward_np(self, images: np.ndarray) -> np.ndarray:
        """Inference forward: (B, C, H, W) -> mixed outputs (B, 4, out_width)."""
        cfg = self.config
        p = self.params
        x = np.asarray(images, dtype=np.float64)
        for i, (_c, k, stride) in enumerate(cfg.conv_spec):
            x = _conv2d_np(x, p[f"conv{i}.w"], stride)
            x = np.maximum(x + p[f"conv{i}.b"].reshape(1, -1, 1, 1), 0.0)
        x = x.reshape(x.shape[0], -1)
        feats = np.maximum(x @ p["shared.w"] + p["shared.b"], 0.0)
        rows = []
        for i in range(N_BRANCHES):
            h = np.maximum(feats @ p[f"branch{i}.h.w"] + p[f"branch{i}.h.b"], 0.0)
            rows.append(h @ p[f"branch{i}.out.w"] + p[f"branch{i}.out.b"])
        a_hat = np.stack(rows, axis=1)
        mode = cfg.head_mode
        if mode == "none":
            return a_hat
        if mode == "manual":
            e = np.tanh(feats @ p["head.e.w"] + p["head.e.b"])
            mask = np.array([cfg.relationship[i, j] for i, j in OFFDIAG])
            coeff = e * mask
        else:
            u = feats @ p["head.u.w"] + p["head.u.b"]
            v = feats @ p["head.v.w"] + p["head.v.b"]
            coeff = np.tanh(u) / (1.0 + np.exp(-v))
        c = coeff @ _PLACEMENT
        c = c.reshape(-1, N_BRANCHES, N_BRANCHES) + np.eye(N_BRANCHES)
        return np.matmul(c, a_hat)

    def predict(self, image: np.ndarray, command: str) -> float:
        """Steering for one observation under one navigational command."""
        if command not in CMD_INDEX:
            raise UnknownCommandError(command)
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = img[None, None]
        elif img.ndim == 3:
            img = img[None]
        out = self.forward_np(img)[0, CMD_INDEX[command]]
        return decode_output(out, self.config)


def decode_output(row: np.ndarray, config: ArchitectureConfig) -> float:
    """Turn one branch output row into a steering value in [-1, 1]."""
    if config.output_mode == "regression":
        return float(np.clip(row[0], -1.0, 1.0))
    if config.output_mode == "classification":
        scores = _softmax_np(row)
        if config.decode == "argmax":
            return float(losses.MIDPOINTS[int(np.argmax(scores))])
        return float(losses.expected_steering_np(scores))
    if config.output_mode == "sine":
        return float(np.clip(losses.sine_decode(row), -1.0, 1.0))
    raise ValueError(f"unknown output mode {config.output_mode!r}")


def colearn_forward(a_hat: Tensor, c: Tensor) -> Tensor:
    """Matrix form of the mix: A = C @ A_hat for stacked (B, 4, out) rows."""
    return nm.matmul(c, a_hat)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _conv2d_np(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (bsz, cin, oh, ow, kh, kw),
        (s0, s1, s2 * stride, s3 * stride, s2, s3))
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(bsz * oh * ow, cin * kh * kw)
    out = cols @ w.reshape(cout, -1).T
    return out.reshape(bsz, oh, ow, cout).transpose(0, 3, 1, 2)
