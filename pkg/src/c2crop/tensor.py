"""Minimal reverse-mode autodiff on float64 numpy buffers.

The graph is define-by-run: every op builds a fresh node holding its input
tensors and a backward closure, so the tape is rebuilt on each forward pass.
`backward` linearizes the graph reachable from a scalar loss into a `Tape`
and replays it once in reverse order, accumulating gradients additively.

Only the operator set needed by the boundary-locating model and its losses
is provided; all values are float64 and all reductions run in a fixed order,
so repeated runs are bit-identical.
"""
from __future__ import annotations

import logging
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

# Opt-in per-op NaN/Inf assertion. Tests enable it; training leaves it off
# and relies on the loop-level finiteness check instead.
CHECK_FINITE = False

_GRAD_ENABLED = True

# Every differentiable op exposed by this module. The gradient-check suite
# must cover each name exactly once.
REGISTERED_OPS = (
    "add",
    "subtract",
    "multiply",
    "scalar_multiply",
    "matmul",
    "relu",
    "exp",
    "sigmoid",
    "sqrt",
    "power",
    "absolute",
    "concat",
    "split",
    "sum_axis",
    "reduce_mean",
    "softmax_axis",
    "transpose",
    "conv2d",
    "l2_normalize_rows",
)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values unchanged)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _checked(arr: np.ndarray) -> np.ndarray:
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite values produced by op")
    return arr


class Tensor:
    """A float64 array with an optional gradient slot and graph linkage.

    ``data`` is immutable by convention after creation (optimizers mutate it
    between steps); ``grad`` accumulates additively across backward passes
    until ``zero_grad`` clears it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        # note: not ascontiguousarray, which would promote 0-d scalars to (1,)
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may alias another node's buffer (e.g. a slice view)
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the named functions below are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_multiply(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(_checked(data))
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _broadcast_guard(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_guard(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_guard(a, b, "subtract")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), backward)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_guard(a, b, "multiply")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward)


def scalar_multiply(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def backward(g):
        if x.requires_grad:
            x._accum(g * c)

    return _node(x.data * c, (x,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        if x.requires_grad:
            x._accum(g * mask)

    return _node(np.maximum(x.data, 0.0), (x,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(g * out_data)

    return _node(out_data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # exp of -|x| only: stable on both tails
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        if x.requires_grad:
            x._accum(g * s * (1.0 - s))

    return _node(s, (x,), backward)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative input")
    root = np.sqrt(x.data)

    def backward(g):
        # clamp keeps the pullback finite at 0, where masked-out chord
        # distances of identical rows would otherwise produce 0 * inf
        if x.requires_grad:
            x._accum(g * 0.5 / np.maximum(root, 1e-12))

    return _node(root, (x,), backward)


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    if p < 0 and np.any(x.data <= 0):
        raise ValueError("power: non-positive base with negative exponent")
    if p != round(p) and np.any(x.data < 0):
        raise ValueError("power: negative base with fractional exponent")

    def backward(g):
        if x.requires_grad:
            base = np.maximum(x.data, 1e-12) if p < 1 else x.data
            x._accum(g * p * np.power(base, p - 1.0))

    return _node(np.power(x.data, p), (x,), backward)


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)  # subgradient 0 at ties

    def backward(g):
        if x.requires_grad:
            x._accum(g * sign)

    return _node(np.abs(x.data), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            "concat: shapes " + ", ".join(str(t.shape) for t in tensors)
            + f" do not align on axis {axis}"
        ) from None
    return _node(data, tensors, backward)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"slice_axis: axis {axis} invalid for shape {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x._accum(full)

    return _node(x.data[idx].copy(), (x,), backward)


def split(x, parts: int, axis: int) -> list[Tensor]:
    """Split into `parts` equal slices along `axis`."""
    x = as_tensor(x)
    n = x.shape[axis]
    if n % parts != 0:
        raise ShapeError(f"split: axis {axis} of length {n} not divisible by {parts}")
    w = n // parts
    return [slice_axis(x, axis, i * w, (i + 1) * w) for i in range(parts)]


def sum_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"sum_axis: axis {axis} invalid for shape {x.shape}")

    def backward(g):
        if x.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accum(np.broadcast_to(gg, x.shape).copy())

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def reduce_mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None and not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"reduce_mean: axis {axis} invalid for shape {x.shape}")
    n = x.data.size if axis is None else x.shape[axis]
    inv = 1.0 / n if n else 0.0

    def backward(g):
        if x.requires_grad:
            if axis is None:
                x._accum(np.full(x.shape, float(g) * inv))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                x._accum(np.broadcast_to(gg * inv, x.shape).copy())

    return _node(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {x.shape}")

    def backward(g):
        if x.requires_grad:
            x._accum(g.T)

    return _node(x.data.T.copy(), (x,), backward)


def softmax_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax_axis: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            x._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node(s, (x,), backward)


def l2_normalize_rows(x, eps: float = 1e-12) -> Tensor:
    """Project each row of an N x D tensor onto the unit sphere.

    Rows with norm below `eps` are divided by `eps` instead (untrained
    features can vanish); such rows are logged, not rejected.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected N x D, got {x.shape}")
    sq = sum_axis(multiply(x, x), axis=1, keepdims=True)
    if np.any(sq.data < eps * eps):
        log.warning("l2_normalize_rows: zero-norm row hit the epsilon guard")
    # max(sq, eps^2) via the relu identity, keeps the graph differentiable
    guarded = add(relu(subtract(sq, eps * eps)), eps * eps)
    return multiply(x, power(guarded, -0.5))


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate `x` (C_in,H,W or B,C_in,H,W) with `w` (C_out,C_in,k,k).

    k must be 1 or 3. A 1x1 kernel is a per-pixel linear map over channels.
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected image {x.shape} and kernel {w.shape}")
    B, Cin, H, W = xd.shape
    Cout, Cw, kh, kw = w.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if Cw != Cin:
        raise ShapeError(f"conv2d: input channels {Cin} != kernel channels {Cw}")
    k, s, p = kh, int(stride), int(padding)
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: output would be empty for input {x.shape}")

    wmat = w.data.reshape(Cout, Cin * k * k)
    if k == 1 and p == 0:
        xs = xd[:, :, ::s, ::s]
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, Cin)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, ::s, ::s]  # B,Cin,Ho,Wo,k,k
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, Cin * k * k)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    bias = as_tensor(b) if b is not None else None
    if bias is not None:
        if bias.shape != (Cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({Cout},)")
        out = out + bias.data[None, :, None, None]

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        if squeeze:
            g = g[None]
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            w._accum((gmat.T @ cols).reshape(w.shape))
        if x.requires_grad:
            dcols = gmat @ wmat  # (B*Ho*Wo, Cin*k*k)
            if k == 1 and p == 0:
                dx = np.zeros_like(xd)
                dx[:, :, ::s, ::s] = dcols.reshape(B, Ho, Wo, Cin).transpose(0, 3, 1, 2)
            else:
                dwin = dcols.reshape(B, Ho, Wo, Cin, k, k).transpose(0, 3, 1, 2, 4, 5)
                dxp = np.zeros((B, Cin, H + 2 * p, W + 2 * p))
                for ki in range(k):
                    for kj in range(k):
                        dxp[:, :, ki : ki + s * Ho : s, kj : kj + s * Wo : s] += dwin[
                            :, :, :, :, ki, kj
                        ]
                dx = dxp[:, :, p : p + H, p : p + W]
            x._accum(dx[0] if squeeze else dx)

    return _node(out[0] if squeeze else out, parents, backward)


# ---------------------------------------------------------------------------
# backward machinery


class Tape:
    """Topologically ordered nodes reachable from one root tensor.

    Replaying in reverse order visits every node exactly once; gradients
    accumulate additively. A tape can be replayed only once — rebuild the
    graph (rerun the forward pass) to differentiate again.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self._replayed = False

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward(self) -> None:
        if self._replayed:
            raise RuntimeError("tape already replayed; rerun the forward pass")
        self._replayed = True
        if not self.nodes:
            return
        root = self.nodes[-1]
        root._accum(np.ones_like(root.data))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                _checked(node.grad)
                node._backward(node.grad)


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable requires_grad tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.from_root(loss).backward()


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def grad_check(f, params: Sequence[Tensor], eps: float = 1e-5, atol: float = 1e-9) -> float:
    """Worst relative error between reverse-mode and central differences.

    `f` takes no arguments and returns a scalar Tensor computed from
    `params`; it must be deterministic. The relative error uses an
    absolute floor of 1e-8 in the denominator; absolute discrepancies
    below `atol` count as exact agreement (central differences carry
    ~1e-11 of cancellation noise at eps=1e-5, which would otherwise
    dominate components whose true gradient is 0).
    """
    zero_grads(params)
    loss = f()
    if loss.data.size != 1:
        raise ValueError("grad_check: f must return a scalar")
    backward(loss)
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                gap = abs(aflat[i] - numeric)
                if gap < atol:
                    continue
                worst = max(worst, gap / max(abs(aflat[i]), abs(numeric), 1e-8))
    return worst
