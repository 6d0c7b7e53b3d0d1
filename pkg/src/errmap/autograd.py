"""Reverse-mode automatic differentiation over dense 4-D float64 tensors.

Every value in the computation graph is a ``Tensor`` holding a
(batch, channels, height, width) array. The op set is exactly what the
depth/error network and its losses need: conv2d, transpose_conv2d, a small
family of elementwise ops, channel concatenation, masked mean-squared error,
and a copy-without-gradient (``stop_gradient``). No broadcasting beyond
scalar-by-tensor is supported; shape mismatches are rejected eagerly with a
shape report instead of producing silently wrong results.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

GUARD_EPS = 1e-12

_node_ids = itertools.count()


class Tensor:
    """A node in the computation graph: a 4-D float64 value plus autodiff state.

    ``grad`` accumulates d(root)/d(self) during ``backward`` and has the same
    shape as ``data``. Nodes with ``requires_grad=False`` never receive
    gradient flow.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Tensor"] = ()):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(
                f"Tensor data must be 4-d (batch, channels, height, width), got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def is_scalar(self) -> bool:
        return self.data.shape == (1, 1, 1, 1)

    def item(self) -> float:
        if not self.is_scalar():
            raise ValueError(f"item() requires a scalar-shaped tensor, got {self.shape}")
        return float(self.data[0, 0, 0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars lift to constant nodes.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return mul(self, scalar(-1.0))


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    """A (1,1,1,1) constant node."""
    return Tensor(np.full((1, 1, 1, 1), float(value)), requires_grad=requires_grad, op="scalar")


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return scalar(float(x))
    raise TypeError(f"cannot use {type(x).__name__} as a tensor operand")


def _accumulate(node: Tensor, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad += g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Only scalar-by-tensor mixing exists, so the reduction is all-or-nothing.
    if g.shape == shape:
        return g
    return g.sum().reshape(1, 1, 1, 1)


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.is_scalar():
        return b.shape
    if b.is_scalar():
        return a.shape
    raise ValueError(f"{name}: operand shapes {a.shape} and {b.shape} differ "
                     "(only scalar-by-tensor mixing is allowed)")


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[Tensor], None] | None) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, op=op, parents=parents)
    if requires and backward is not None:
        out._backward = lambda: backward(out)
    return out


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")

    def bw(out: Tensor) -> None:
        _accumulate(a, _reduce_to(out.grad, a.shape))
        _accumulate(b, _reduce_to(out.grad, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")

    def bw(out: Tensor) -> None:
        _accumulate(a, _reduce_to(out.grad, a.shape))
        _accumulate(b, _reduce_to(-out.grad, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")

    def bw(out: Tensor) -> None:
        _accumulate(a, _reduce_to(out.grad * b.data, a.shape))
        _accumulate(b, _reduce_to(out.grad * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a: Tensor, b: Tensor, guarded: bool = False) -> Tensor:
    """a / b. Rejects near-zero denominators unless ``guarded``, which clamps
    them to magnitude >= GUARD_EPS (zero subgradient inside the clamp)."""
    _binary_shapes(a, b, "div")
    if guarded:
        denom = np.where(b.data >= 0,
                         np.maximum(b.data, GUARD_EPS),
                         np.minimum(b.data, -GUARD_EPS))
        live = (np.abs(b.data) >= GUARD_EPS).astype(np.float64)
    else:
        if np.any(np.abs(b.data) < GUARD_EPS):
            raise ValueError(
                f"div: denominator contains values with |x| < {GUARD_EPS}; "
                "use guarded=True if clamping is intended")
        denom = b.data
        live = 1.0

    def bw(out: Tensor) -> None:
        _accumulate(a, _reduce_to(out.grad / denom, a.shape))
        _accumulate(b, _reduce_to(-out.grad * a.data / (denom * denom) * live, b.shape))

    return _make(a.data / denom, (a, b), "div", bw)


def log(x: Tensor, guarded: bool = False) -> Tensor:
    """Natural log. Rejects non-positive inputs unless ``guarded``, which
    clamps the argument to >= GUARD_EPS (zero subgradient inside the clamp)."""
    if guarded:
        arg = np.maximum(x.data, GUARD_EPS)
        live = (x.data >= GUARD_EPS).astype(np.float64)
    else:
        if np.any(x.data <= 0):
            raise ValueError("log: input contains non-positive values; "
                             "use guarded=True if clamping is intended")
        arg = x.data
        live = 1.0

    def bw(out: Tensor) -> None:
        _accumulate(x, out.grad / arg * live)

    return _make(np.log(arg), (x,), "log", bw)


def square(x: Tensor) -> Tensor:
    def bw(out: Tensor) -> None:
        _accumulate(x, out.grad * 2.0 * x.data)

    return _make(x.data * x.data, (x,), "square", bw)


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at 0."""
    def bw(out: Tensor) -> None:
        _accumulate(x, out.grad * np.sign(x.data))

    return _make(np.abs(x.data), (x,), "abs", bw)


def relu(x: Tensor) -> Tensor:
    def bw(out: Tensor) -> None:
        _accumulate(x, out.grad * (x.data > 0))

    return _make(np.maximum(x.data, 0.0), (x,), "relu", bw)


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x), computed stably; gradient is the logistic sigmoid."""
    def bw(out: Tensor) -> None:
        _accumulate(x, out.grad * expit(x.data))

    return _make(np.logaddexp(0.0, x.data), (x,), "softplus", bw)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a (1,1,1,1) node."""
    def bw(out: Tensor) -> None:
        _accumulate(x, np.full_like(x.data, out.grad[0, 0, 0, 0]))

    return _make(x.data.sum().reshape(1, 1, 1, 1), (x,), "sum", bw)


def stop_gradient(x: Tensor) -> Tensor:
    """Forward-identity copy that carries no backward path.

    The result is a constant leaf: its value equals ``x`` bit-exactly, but no
    gradient ever flows from it into ``x`` or any ancestor of ``x``.
    """
    return Tensor(x.data.copy(), requires_grad=False, op="stop_gradient")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; the gradient splits back to parts."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels: need at least one part")
    b, _, h, w = parts[0].shape
    for p in parts[1:]:
        pb, _, ph, pw = p.shape
        if (pb, ph, pw) != (b, h, w):
            raise ValueError("concat_channels: batch/spatial dims differ: "
                             f"{parts[0].shape} vs {p.shape}")
    splits = [p.shape[1] for p in parts]

    def bw(out: Tensor) -> None:
        start = 0
        for p, c in zip(parts, splits):
            _accumulate(p, out.grad[:, start:start + c])
            start += c

    return _make(np.concatenate([p.data for p in parts], axis=1), parts, "concat", bw)


# ---------------------------------------------------------------------------
# Convolution primitives (im2col based, forward = cross-correlation)
# ---------------------------------------------------------------------------

def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    oh = _conv_out_dim(h, kh, stride, pad)
    ow = _conv_out_dim(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def _col2im(gcols: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int,
            stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x_shape
    oh = _conv_out_dim(h, kh, stride, pad)
    ow = _conv_out_dim(w, kw, stride, pad)
    g6 = gcols.reshape(b, c, kh, kw, oh, ow)
    gxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g6[:, :, i, j]
    if pad:
        return gxp[:, :, pad:pad + h, pad:pad + w]
    return gxp


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    oc, ic, kh, kw = w.shape
    b = x.shape[0]
    oh = _conv_out_dim(x.shape[2], kh, stride, pad)
    ow = _conv_out_dim(x.shape[3], kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    y = np.matmul(w.reshape(oc, ic * kh * kw)[None], cols)
    return y.reshape(b, oc, oh, ow)


def _conv_backward_input(gy: np.ndarray, w: np.ndarray, x_shape: tuple[int, ...],
                         stride: int, pad: int) -> np.ndarray:
    oc, ic, kh, kw = w.shape
    b, _, oh, ow = gy.shape
    gy_mat = gy.reshape(b, oc, oh * ow)
    gcols = np.matmul(w.reshape(oc, ic * kh * kw).T[None], gy_mat)
    return _col2im(gcols, x_shape, kh, kw, stride, pad)


def _conv_backward_weights(gy: np.ndarray, x: np.ndarray, w_shape: tuple[int, ...],
                           stride: int, pad: int) -> np.ndarray:
    oc, ic, kh, kw = w_shape
    b, _, oh, ow = gy.shape
    cols = _im2col(x, kh, kw, stride, pad)
    gy_mat = gy.reshape(b, oc, oh * ow)
    gw = np.einsum("bop,bcp->oc", gy_mat, cols)
    return gw.reshape(w_shape)


def conv2d(x: Tensor, weights: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Strided 2-D cross-correlation.

    weights: (out_ch, in_ch, kh, kw); bias: (1, out_ch, 1, 1) or None.
    Output spatial dims are (size + 2*padding - k) // stride + 1 and must be
    positive. Differentiable w.r.t. input, weights, and bias.
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    oc, ic, kh, kw = weights.shape
    if ic != x.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels but weights expect {ic} "
                         f"(input {x.shape}, weights {weights.shape})")
    oh = _conv_out_dim(x.shape[2], kh, stride, padding)
    ow = _conv_out_dim(x.shape[3], kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d: non-positive output dims {oh}x{ow} for input {x.shape}, "
                         f"kernel {kh}x{kw}, stride {stride}, padding {padding}")
    if bias is not None and bias.shape != (1, oc, 1, 1):
        raise ValueError(f"conv2d: bias must have shape (1, {oc}, 1, 1), got {bias.shape}")

    y = _conv_forward(x.data, weights.data, stride, padding)
    if bias is not None:
        y = y + bias.data
    parents = (x, weights) if bias is None else (x, weights, bias)

    def bw(out: Tensor) -> None:
        gy = out.grad
        _accumulate(x, _conv_backward_input(gy, weights.data, x.shape, stride, padding))
        _accumulate(weights, _conv_backward_weights(gy, x.data, weights.shape, stride, padding))
        if bias is not None:
            _accumulate(bias, gy.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1))

    return _make(y, parents, "conv2d", bw)


def transpose_conv2d(x: Tensor, weights: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (gradient-of-conv2d semantics).

    weights: (in_ch, out_ch, kh, kw); output spatial dim is
    (size - 1) * stride - 2*padding + k.
    """
    if stride < 1:
        raise ValueError(f"transpose_conv2d: stride must be >= 1, got {stride}")
    ic, oc, kh, kw = weights.shape
    if ic != x.shape[1]:
        raise ValueError(f"transpose_conv2d: input has {x.shape[1]} channels but weights "
                         f"expect {ic} (input {x.shape}, weights {weights.shape})")
    b = x.shape[0]
    oh = (x.shape[2] - 1) * stride - 2 * padding + kh
    ow = (x.shape[3] - 1) * stride - 2 * padding + kw
    if oh <= 0 or ow <= 0:
        raise ValueError(f"transpose_conv2d: non-positive output dims {oh}x{ow}")
    if bias is not None and bias.shape != (1, oc, 1, 1):
        raise ValueError(f"transpose_conv2d: bias must have shape (1, {oc}, 1, 1), "
                         f"got {bias.shape}")

    # The (ic, oc, kh, kw) layout IS the conv2d layout of the adjoint: x plays
    # the out-gradient role, so conv2d's input-gradient computes the forward.
    y = _conv_backward_input(x.data, weights.data, (b, oc, oh, ow), stride, padding)
    if bias is not None:
        y = y + bias.data
    parents = (x, weights) if bias is None else (x, weights, bias)

    def bw(out: Tensor) -> None:
        gy = out.grad
        _accumulate(x, _conv_forward(gy, weights.data, stride, padding))
        _accumulate(weights, _conv_backward_weights(x.data, gy, weights.shape, stride, padding))
        if bias is not None:
            _accumulate(bias, gy.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1))

    return _make(y, parents, "transpose_conv2d", bw)


def masked_mse(pred: Tensor, target: Tensor, mask: Tensor | np.ndarray) -> Tensor:
    """Mean of (pred - target)^2 over mask==1 pixels, as a scalar node.

    Normalizes by the count of valid pixels, not by the full image area, so
    the loss magnitude does not depend on ground-truth coverage. Rejects an
    empty mask.
    """
    mask_t = mask if isinstance(mask, Tensor) else Tensor(mask)
    if pred.shape != target.shape or pred.shape != mask_t.shape:
        raise ValueError(f"masked_mse: shapes differ: pred {pred.shape}, "
                         f"target {target.shape}, mask {mask_t.shape}")
    md = mask_t.data
    if not np.all((md == 0) | (md == 1)):
        raise ValueError("masked_mse: mask must be binary")
    count = md.sum()
    if count == 0:
        raise ValueError("masked_mse: mask has no valid pixels")
    diff = sub(pred, target)
    return mul(tsum(mul(square(diff), mask_t)), scalar(1.0 / count))


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if node.id in visited:
            continue
        visited.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.id not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode accumulation from a scalar-shaped root.

    Resets the gradients of every reachable node, then accumulates
    d(root)/d(node) for every node with requires_grad. Returns the gradient
    table for requires-grad leaves (nodes with no parents). Traversal order is
    deterministic, so repeated calls yield identical gradients.
    """
    if not root.is_scalar():
        raise ValueError(f"backward: root must be scalar-shaped (1,1,1,1), got {root.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = None
    if not root.requires_grad:
        return {}
    root.grad = np.ones((1, 1, 1, 1))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
    return {n: n.grad for n in order
            if n.requires_grad and not n._parents and n.grad is not None}


def finite_diff_gradcheck(f: Callable[[], Tensor], params: Iterable[Tensor],
                          eps: float = 1e-3) -> float:
    """Max relative error between analytic gradients of f() and central differences.

    ``f`` must rebuild and return a fresh scalar graph reading the current
    contents of ``params``; parameters are perturbed in place. The relative
    error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("finite_diff_gradcheck: eps must be positive")
    params = list(params)
    table = backward(f())
    worst = 0.0
    for p in params:
        analytic = table.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat_idx = [np.unravel_index(i, p.shape) for i in range(p.data.size)]
        for idx in flat_idx:
            orig = p.data[idx]
            p.data[idx] = orig + eps
            f_plus = f().item()
            p.data[idx] = orig - eps
            f_minus = f().item()
            p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(analytic[idx]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[idx] - numeric) / denom)
    return worst
