"""Dense float64 tensors with reverse-mode autodiff, Adam, and checkpoint I/O.

Everything downstream (network, losses, training) is built on the small op set
here: matmul, 2D valid convolution, bias add, tanh/sigmoid/relu, softmax,
flatten/reshape, elementwise add/multiply/scale, log, and reduce sum/mean.
A computation graph is built eagerly during the forward pass and consumed by
a single backward() call.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or infinity."""


class GraphError(RuntimeError):
    """Backward called on a non-scalar root or an already-consumed graph."""


def _require_finite(op: str, arr: np.ndarray) -> None:
    # summing is one SIMD pass and any nan/inf poisons the total; fall back
    # to the elementwise check only when the cheap probe trips, to rule out
    # overflow of the sum itself
    if not np.isfinite(np.sum(arr)) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: produced non-finite values")


class Tensor:
    """Node in a reverse-mode computation graph backed by a float64 ndarray."""

    _next_id = 0

    def __init__(self, data, requires_grad: bool = False, parents=(),
                 backward_fn: Callable[[np.ndarray], tuple] | None = None,
                 op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._grad_borrowed = False
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._op = op
        self._consumed = False
        # needs_grad marks whether any parameter leaf is reachable below.
        self.needs_grad = requires_grad or any(p.needs_grad for p in self._parents)
        self.node_id = Tensor._next_id
        Tensor._next_id += 1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op})"

    # operator sugar used throughout the network and loss code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor)
                   else Tensor(-np.asarray(other, dtype=np.float64)))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> dict[int, np.ndarray]:
        """Reverse-mode sweep from a scalar root.

        Populates .grad on every reachable node that needs one and returns a
        map {node_id: grad} for the parameter leaves. A graph can only be
        consumed once.
        """
        if self.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward pass")
        self._consumed = True

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen or not node.needs_grad:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        self.grad = np.ones_like(self.data)
        leaf_grads: dict[int, np.ndarray] = {}
        for node in reversed(order):
            if node._backward_fn is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    leaf_grads[node.node_id] = node.grad
                continue
            if node.grad is None:
                # reachable but unused (e.g. dead branch of the graph)
                continue
            for parent, g in zip(node._parents, node._backward_fn(node.grad)):
                if g is None or not parent.needs_grad:
                    continue
                if parent.grad is None:
                    # Hold a borrowed reference on first contribution; g may
                    # alias a forward buffer, so only add in place once this
                    # node owns a private accumulator.
                    if g.shape != parent.data.shape:
                        g = np.broadcast_to(g, parent.data.shape)
                    parent.grad = g
                    parent._grad_borrowed = True
                elif parent._grad_borrowed:
                    parent.grad = parent.grad + g
                    parent._grad_borrowed = False
                else:
                    parent.grad += g
        return leaf_grads


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad back down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    _require_finite("add", out)
    return Tensor(out, parents=(a, b), op="add",
                  backward_fn=lambda g: (_unbroadcast(g, a.shape),
                                         _unbroadcast(g, b.shape)))


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} do not broadcast")
    _require_finite("multiply", out)
    return Tensor(out, parents=(a, b), op="multiply",
                  backward_fn=lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = a.data * s
    return Tensor(out, parents=(a,), op="scale",
                  backward_fn=lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} x {b.shape} do not conform")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, parents=(a, b), op="matmul", backward_fn=backward)


def bias_add(x, b) -> Tensor:
    """Add a 1-D bias along channels (4-D conv input) or the last axis."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim != 1:
        raise ShapeError(f"bias_add: bias must be 1-D, got {b.shape}")
    if x.ndim == 4:
        if b.shape[0] != x.shape[1]:
            raise ShapeError(f"bias_add: {b.shape} vs channels of {x.shape}")
        view = b.data.reshape(1, -1, 1, 1)
        axes = (0, 2, 3)
    else:
        if b.shape[0] != x.shape[-1]:
            raise ShapeError(f"bias_add: {b.shape} vs last axis of {x.shape}")
        view = b.data
        axes = tuple(range(x.ndim - 1))
    out = x.data + view
    return Tensor(out, parents=(x, b), op="bias_add",
                  backward_fn=lambda g: (g, g.sum(axis=axes)))


def conv2d(x, w, stride: int = 1, bias=None, relu: bool = False) -> Tensor:
    """Valid-padding 2D convolution, x (B,C,H,W) with kernel w (O,C,kh,kw).

    Optionally fuses a per-channel bias add and a ReLU into the same graph
    node; the conv stack runs hot enough that the saved full-map passes and
    intermediate tensors are worth the wider op.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.ndim != 1 or bias.shape[0] != w.shape[0]:
            raise ShapeError(f"conv2d: bias {bias.shape} vs kernel {w.shape}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if kh > h or kw > wd:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    s0, s1, s2, s3 = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data, (bsz, cin, oh, ow, kh, kw),
        (s0, s1, s2 * stride, s3 * stride, s2, s3))
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(bsz * oh * ow, cin * kh * kw)
    wmat = w.data.reshape(cout, -1).T
    flat = cols @ wmat                     # (B*oh*ow, cout)
    if bias is not None:
        flat += bias.data
    if relu:
        np.maximum(flat, 0.0, out=flat)
    out = flat.reshape(bsz, oh, ow, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if relu:
            g2 = g2 * (flat > 0.0)
        gw = (cols.T @ g2).T.reshape(cout, cin, kh, kw)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if x.needs_grad:
            gcols = (g2 @ wmat.T).reshape(bsz, oh, ow, cin, kh, kw)
            gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + stride * oh:stride,
                       j:j + stride * ow:stride] += gcols[:, :, :, :, i, j]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor(out, parents=parents, op="conv2d", backward_fn=backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return Tensor(out, parents=(x,), op="tanh",
                  backward_fn=lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor(out, parents=(x,), op="sigmoid",
                  backward_fn=lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return Tensor(out, parents=(x,), op="relu",
                  backward_fn=lambda g: (g * (x.data > 0.0),))


def softmax(x) -> Tensor:
    """Numerically stable softmax over the last axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    _require_finite("softmax", out)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, parents=(x,), op="softmax", backward_fn=backward)


def log(x, floor: float = 1e-12) -> Tensor:
    """Elementwise log with a floor guarding zeros; gradient is 0 below it."""
    x = _as_tensor(x)
    clipped = np.maximum(x.data, floor)
    out = np.log(clipped)
    mask = (x.data >= floor).astype(np.float64)
    return Tensor(out, parents=(x,), op="log",
                  backward_fn=lambda g: (g * mask / clipped,))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {x.shape} -> {shape} size mismatch")
    return Tensor(out, parents=(x,), op="reshape",
                  backward_fn=lambda g: (g.reshape(x.shape),))


def flatten(x) -> Tensor:
    """Collapse everything but the leading (batch) axis."""
    x = _as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def reduce_sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return Tensor(out, parents=(x,), op="reduce_sum", backward_fn=backward)


def reduce_mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def finite_difference_grad(f: Callable[[], float],
                           params: dict[str, np.ndarray],
                           h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of f() w.r.t. every entry of params.

    f must read the (mutated in place) arrays in params and return a scalar.
    Independent of the autodiff path above, so it can serve as its oracle.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"finite_difference_grad: f non-finite at {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


class AdamState:
    """Adam moments plus the fixed hyperparameters used for every model here."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 2e-4,
                 beta1: float = 0.70, beta2: float = 0.85, eps: float = 1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Missing grads are treated as 0."""
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape} for {name}")
        _require_finite(f"adam_step[{name}]", g)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


CHECKPOINT_MAGIC = b"CICSTEER1"


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays: magic, JSON manifest line, raw LE payload."""
    manifest = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(manifest).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        manifest = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    out = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return out


def global_grad_norm(grads: Iterable[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    return float(np.sqrt(total))
