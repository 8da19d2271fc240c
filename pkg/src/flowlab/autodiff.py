"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records primitive operations as they execute (define-by-run).
``Tape.backward`` replays the record in reverse and accumulates exact
gradients into every reachable node.  The tape is rebuilt for every
training step; there is no graph caching.

Primitives are module-level functions that accept either ``Tensor`` nodes
or plain ``numpy`` arrays (and python floats where a scalar makes sense).
If no argument is a live ``Tensor`` the primitive computes with numpy and
returns a bare array, so the same model code serves both the training path
(gradients) and the inference path (no recording).  Inputs that are bare
arrays act as constants and receive no gradient.

All math is float64.  Gradient accumulation is plain summation in reverse
node order, which is deterministic for a fixed graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A value recorded on a tape, with a slot for its gradient."""

    __slots__ = ("tape", "index", "data", "grad", "_backward")

    def __init__(self, tape: "Tape", index: int, data: np.ndarray,
                 backward: Callable[[np.ndarray], None] | None):
        self.tape = tape
        self.index = index
        self.data = data
        self.grad: np.ndarray | None = None
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(idx={self.index}, shape={self.data.shape})"


class Tape:
    """Append-only record of primitive operations.

    Nodes are appended in execution order, so every node's inputs precede
    it and a single reverse sweep is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._consumed = False

    def leaf(self, value) -> Tensor:
        """Register an input/parameter as a differentiable leaf."""
        arr = np.asarray(value, dtype=np.float64)
        return self._record(arr, None)

    def wrap(self, params: dict[str, np.ndarray]) -> dict[str, "Tensor"]:
        """Register a parameter tree as leaves, keeping names."""
        return {name: self.leaf(arr) for name, arr in params.items()}

    def _record(self, value: np.ndarray,
                backward: Callable[[np.ndarray], None] | None) -> Tensor:
        node = Tensor(self, len(self.nodes), value, backward)
        self.nodes.append(node)
        return node

    def backward(self, root: Tensor) -> None:
        """Accumulate gradients of ``root`` into every reachable node.

        ``root`` must be scalar-valued (a single element).  A tape can be
        consumed only once; rebuild the graph for the next step.
        """
        if self._consumed:
            raise RuntimeError("backward() already called on this tape")
        if not isinstance(root, Tensor) or root.tape is not self:
            raise ValueError("backward root must be a Tensor of this tape")
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
        if not np.isfinite(root.data).all():
            raise FloatingPointError("non-finite value at backward root")
        self._consumed = True
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes[: root.index + 1]):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def backward(tape: Tape, root: Tensor) -> None:
    tape.backward(root)


def grad_of(leaf: Tensor) -> np.ndarray:
    """Gradient of a leaf after backward; zeros if the loss never touched it."""
    if leaf.grad is None:
        return np.zeros_like(leaf.data)
    return leaf.grad


def grads_of(leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: grad_of(t) for name, t in leaves.items()}


# ---------------------------------------------------------------------------
# dispatch helpers

def value_of(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Tensor):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("inputs from different tapes")
    return tape


def _accum(x, g: np.ndarray) -> None:
    if not isinstance(x, Tensor):
        return
    if x.grad is None:
        x.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        x.grad += g


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: saturates cleanly, no overflow for any finite input
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _reduce_like(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (used for broadcast parameters)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives

def add(a, b):
    va, vb = value_of(a), value_of(b)
    _same_shape(va, vb, "add")
    out = va + vb
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return tape._record(out, bw)


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    _same_shape(va, vb, "sub")
    out = va - vb
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return tape._record(out, bw)


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    _same_shape(va, vb, "mul")
    out = va * vb
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bw(g):
        _accum(a, g * vb)
        _accum(b, g * va)

    return tape._record(out, bw)


def scale(a, s: float):
    va = value_of(a)
    s = float(s)
    out = va * s
    tape = _tape_of(a)
    if tape is None:
        return out

    def bw(g):
        _accum(a, g * s)

    return tape._record(out, bw)


def matmul(a, b):
    va, vb = value_of(a), value_of(b)
    if va.ndim < 2 or vb.ndim < 2:
        raise ValueError("matmul expects arrays with ndim >= 2")
    if va.shape[-1] != vb.shape[-2] or va.shape[:-2] != vb.shape[:-2]:
        raise ValueError(f"matmul: shape mismatch {va.shape} @ {vb.shape}")
    out = va @ vb
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bw(g):
        _accum(a, g @ vb.swapaxes(-1, -2))
        _accum(b, va.swapaxes(-1, -2) @ g)

    return tape._record(out, bw)


def transpose(a):
    va = value_of(a)
    out = va.swapaxes(-1, -2)
    tape = _tape_of(a)
    if tape is None:
        return out

    def bw(g):
        _accum(a, g.swapaxes(-1, -2))

    return tape._record(out, bw)


def affine(x, w, b):
    """x @ w + b with the bias broadcast over rows."""
    vx, vw, vb = value_of(x), value_of(w), value_of(b)
    if vx.shape[-1] != vw.shape[-2] or vx.shape[:-2] != vw.shape[:-2]:
        raise ValueError(f"affine: shape mismatch {vx.shape} @ {vw.shape}")
    out = vx @ vw + vb
    tape = _tape_of(x, w, b)
    if tape is None:
        return out

    def bw(g):
        _accum(x, g @ vw.swapaxes(-1, -2))
        _accum(w, vx.swapaxes(-1, -2) @ g)
        _accum(b, _reduce_like(g, vb.shape))

    return tape._record(out, bw)


def silu(x):
    vx = value_of(x)
    s = _sigmoid(vx)
    out = vx * s
    tape = _tape_of(x)
    if tape is None:
        return out

    def bw(g):
        _accum(x, g * (s * (1.0 + vx * (1.0 - s))))

    return tape._record(out, bw)


LAYER_NORM_EPS = 1e-6


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS):
    """Normalize over the last axis, then apply a learnable gain and bias."""
    vx, vg, vb = value_of(x), value_of(gain), value_of(bias)
    mu = vx.mean(axis=-1, keepdims=True)
    xc = vx - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * vg + vb
    tape = _tape_of(x, gain, bias)
    if tape is None:
        return out

    def bw(g):
        gxh = g * vg
        m1 = gxh.mean(axis=-1, keepdims=True)
        m2 = np.mean(gxh * xhat, axis=-1, keepdims=True)
        _accum(x, inv * (gxh - m1 - xhat * m2))
        _accum(gain, _reduce_like(g * xhat, vg.shape))
        _accum(bias, _reduce_like(g, vb.shape))

    return tape._record(out, bw)


def reduce_mean(x):
    vx = value_of(x)
    out = np.asarray(vx.mean())
    tape = _tape_of(x)
    if tape is None:
        return out

    def bw(g):
        _accum(x, np.full(vx.shape, float(g) / vx.size))

    return tape._record(out, bw)


def reduce_sum(x):
    vx = value_of(x)
    out = np.asarray(vx.sum())
    tape = _tape_of(x)
    if tape is None:
        return out

    def bw(g):
        _accum(x, np.full(vx.shape, float(g)))

    return tape._record(out, bw)


def batch_mean(x):
    """Mean over the second-to-last axis, keeping it as size 1."""
    vx = value_of(x)
    n = vx.shape[-2]
    out = vx.mean(axis=-2, keepdims=True)
    tape = _tape_of(x)
    if tape is None:
        return out

    def bw(g):
        _accum(x, np.broadcast_to(g / n, vx.shape))

    return tape._record(out, bw)


def mse(a, b):
    """Mean over all elements of the squared difference."""
    va, vb = value_of(a), value_of(b)
    _same_shape(va, vb, "mse")
    diff = va - vb
    out = np.asarray(np.mean(diff * diff))
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bw(g):
        c = 2.0 * float(g) / diff.size
        _accum(a, c * diff)
        _accum(b, -c * diff)

    return tape._record(out, bw)


def softplus(x):
    vx = value_of(x)
    out = np.maximum(vx, 0.0) + np.log1p(np.exp(-np.abs(vx)))
    tape = _tape_of(x)
    if tape is None:
        return out

    def bw(g):
        _accum(x, g * _sigmoid(vx))

    return tape._record(out, bw)


def log_sigmoid(x):
    vx = value_of(x)
    out = np.minimum(vx, 0.0) - np.log1p(np.exp(-np.abs(vx)))
    tape = _tape_of(x)
    if tape is None:
        return out

    def bw(g):
        _accum(x, g * _sigmoid(-vx))

    return tape._record(out, bw)


def sin(x):
    vx = value_of(x)
    out = np.sin(vx)
    tape = _tape_of(x)
    if tape is None:
        return out

    def bw(g):
        _accum(x, g * np.cos(vx))

    return tape._record(out, bw)


def cos(x):
    vx = value_of(x)
    out = np.cos(vx)
    tape = _tape_of(x)
    if tape is None:
        return out

    def bw(g):
        _accum(x, -g * np.sin(vx))

    return tape._record(out, bw)


def concat_cols(parts: Sequence):
    """Concatenate 2-D blocks along the column axis."""
    vals = [value_of(p) for p in parts]
    rows = vals[0].shape[0]
    for v in vals:
        if v.ndim != 2 or v.shape[0] != rows:
            raise ValueError("concat_cols: blocks must be 2-D with equal rows")
    out = np.concatenate(vals, axis=1)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    offsets = np.cumsum([0] + [v.shape[1] for v in vals])

    def bw(g):
        for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[:, j0:j1])

    return tape._record(out, bw)


def take_cols(x, j0: int, j1: int):
    """Static column slice of a 2-D block."""
    vx = value_of(x)
    if vx.ndim != 2:
        raise ValueError("take_cols expects a 2-D block")
    out = vx[:, j0:j1]
    tape = _tape_of(x)
    if tape is None:
        return out

    def bw(g):
        z = np.zeros_like(vx)
        z[:, j0:j1] = g
        _accum(x, z)

    return tape._record(out, bw)


def stack_parts(parts: Sequence):
    """Stack equally shaped blocks along a new leading axis."""
    vals = [value_of(p) for p in parts]
    out = np.stack(vals)
    tape = _tape_of(*parts)
    if tape is None:
        return out

    def bw(g):
        for i, p in enumerate(parts):
            _accum(p, g[i])

    return tape._record(out, bw)


def embed_rows(table, idx: np.ndarray):
    """Gather rows of an embedding table by integer index."""
    vt = value_of(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= vt.shape[0]):
        raise ValueError("embed_rows: index out of range")
    out = vt[idx]
    tape = _tape_of(table)
    if tape is None:
        return out

    def bw(g):
        gt = np.zeros_like(vt)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return tape._record(out, bw)


def check_finite(arr, context: str) -> np.ndarray:
    """Raise if the array holds NaN/Inf.  Used at module boundaries."""
    a = value_of(arr)
    if not np.isfinite(a).all():
        raise FloatingPointError(f"non-finite values in {context}")
    return a
