"""Minimal N-dimensional tensor engine with reverse-mode differentiation.

Tensors wrap contiguous numpy buffers (float32 by default; float64 for
gradient checks). Operators executed while a Graph is active are recorded
on an append-only tape; ``backward`` replays the tape in reverse to fill
parameter gradients. Inference runs with no active graph and records
nothing.
"""

from __future__ import annotations

import math
import time
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_active_graph: "Graph | None" = None
_op_timings: dict[str, float] | None = None


class ShapeError(ValueError):
    pass


class Tensor:
    """N-dimensional value buffer with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False,
                 dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.dtype, copy=True)
        else:
            self.grad += g

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"


class Node:
    """One executed operator on the tape."""

    __slots__ = ("op", "output", "inputs", "backward_fn")

    def __init__(self, op: str, output: Tensor, inputs: Sequence[Tensor],
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.output = output
        self.inputs = list(inputs)
        self.backward_fn = backward_fn


class Graph:
    """Append-only record of executed operators for one reverse pass.

    Use as a context manager; operators run inside record themselves.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        global _active_graph
        if _active_graph is not None:
            raise RuntimeError("a Graph is already active in this context")
        _active_graph = self
        return self

    def __exit__(self, *exc):
        global _active_graph
        _active_graph = None
        return False


def record(op: str, output: Tensor, inputs: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Attach an executed op to the active graph, if any.

    backward_fn maps the output gradient to one gradient (or None) per input.
    """
    if _active_graph is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _active_graph.nodes.append(Node(op, output, inputs, backward_fn))
    return output


def backward(graph: Graph, loss: Tensor,
             parameters: Sequence[Tensor] | None = None) -> list[Tensor]:
    """Reverse pass: populate .grad on every tensor reachable from loss.

    Returns the subset of ``parameters`` that turned out to be detached
    from the loss (their grads are filled with zeros).
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        g_out = node.output.grad
        if g_out is None:
            continue
        grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, grads):
            if g is not None and t.requires_grad:
                t.accumulate_grad(g)
    detached: list[Tensor] = []
    if parameters is not None:
        for p in parameters:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
                detached.append(p)
    return detached


class op_timing:
    """Context collecting cumulative per-op forward seconds."""

    def __enter__(self):
        global _op_timings
        _op_timings = {}
        return _op_timings

    def __exit__(self, *exc):
        global _op_timings
        _op_timings = None
        return False


def _timed(op: str, t0: float) -> None:
    if _op_timings is not None:
        _op_timings[op] = _op_timings.get(op, 0.0) + (time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# convolution

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2D cross-correlation, NCHW layout, optional grouping."""
    t0 = time.perf_counter()
    n, c, h, w = x.shape
    o, cpg, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if c % groups or o % groups:
        raise ShapeError(f"channels {c}/{o} not divisible by groups {groups}")
    if cpg != c // groups:
        raise ShapeError(
            f"weight expects {cpg} channels/group, input has {c // groups} "
            f"(input {x.shape}, weight {weight.shape})")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    cols_g = cols.reshape(n, groups, cpg, kh, kw, ho, wo)
    w_g = weight.data.reshape(groups, o // groups, cpg, kh, kw)
    out_data = np.einsum("ngcijhw,gocij->ngohw", cols_g, w_g,
                         optimize=True).reshape(n, o, ho, wo)
    if bias is not None:
        out_data += bias.data.reshape(1, o, 1, 1)
    out = Tensor(out_data)
    _timed("conv2d", t0)

    def bwd(g_out: np.ndarray):
        go = g_out.reshape(n, groups, o // groups, ho, wo)
        grad_w = np.einsum("ngcijhw,ngohw->gocij", cols_g, go,
                           optimize=True).reshape(weight.shape)
        grad_b = g_out.sum(axis=(0, 2, 3)) if bias is not None else None
        grad_x = None
        if x.requires_grad:
            gcols = np.einsum("gocij,ngohw->ngcijhw", w_g, go,
                              optimize=True).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[:, :, i, j]
            grad_x = gxp[:, :, ph:ph + h, pw:pw + w]
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(grad_b)
        return grads

    inputs = [x, weight] if bias is None else [x, weight, bias]
    return record("conv2d", out, inputs, bwd)


def separable_conv2d(x: Tensor, depthwise_weight: Tensor, depthwise_bias: Tensor,
                     pointwise_weight: Tensor, pointwise_bias: Tensor,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Depthwise 3x3 conv -> ReLU -> pointwise 1x1 conv."""
    c = x.shape[1]
    if depthwise_weight.shape[0] != c or depthwise_weight.shape[1] != 1:
        raise ShapeError(
            f"depthwise weight {depthwise_weight.shape} does not match {c} input channels")
    y = conv2d(x, depthwise_weight, depthwise_bias,
               stride=stride, padding=padding, groups=c)
    y = relu(y)
    return conv2d(y, pointwise_weight, pointwise_bias)


# ---------------------------------------------------------------------------
# pooling / elementwise / layout

def maxpool2d_ceil(x: Tensor, k: int = 3, stride: int = 2) -> Tensor:
    """Max pooling with ceil-mode output size; edge windows are truncated."""
    t0 = time.perf_counter()
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"cannot pool empty input {x.shape}")
    ho = max(1, math.ceil((h - k) / stride) + 1)
    wo = max(1, math.ceil((w - k) / stride) + 1)
    # pad with -inf out to the last window's extent; every window keeps at
    # least one in-range element, so -inf never reaches the output
    he = (ho - 1) * stride + k
    we = (wo - 1) * stride + k
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, he - h), (0, we - w)),
                constant_values=-np.inf)
    windows = np.empty((n, c, k * k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            windows[:, :, i * k + j] = xp[:, :, i:i + stride * ho:stride,
                                          j:j + stride * wo:stride]
    arg = windows.argmax(axis=2)
    out = Tensor(np.take_along_axis(windows, arg[:, :, None], axis=2)[:, :, 0])
    _timed("maxpool2d", t0)

    def bwd(g_out: np.ndarray):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                mask = arg == (i * k + j)
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    g_out * mask
        return [gxp[:, :, :h, :w]]

    return record("maxpool2d", out, [x], bwd)


def relu(x: Tensor) -> Tensor:
    t0 = time.perf_counter()
    out = Tensor(np.maximum(x.data, 0))
    _timed("relu", t0)

    def bwd(g_out: np.ndarray):
        return [g_out * (x.data > 0)]

    return record("relu", out, [x], bwd)


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"channel_concat shape mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def bwd(g_out: np.ndarray):
        return [g_out[:, :ca], g_out[:, ca:]]

    return record("channel_concat", out, [a, b], bwd)


def fold_stacked(x: Tensor) -> Tensor:
    """Fold a stacked feature map: top/bottom halves become concatenated
    channels, halving height. [N,C,H,W] -> [N,2C,H/2,W]."""
    n, c, h, w = x.shape
    if h % 2 != 0:
        raise ShapeError(f"fold_stacked needs even height, got {x.shape}")
    out = Tensor(np.concatenate([x.data[:, :, :h // 2], x.data[:, :, h // 2:]], axis=1))

    def bwd(g_out: np.ndarray):
        return [np.concatenate([g_out[:, :c], g_out[:, c:]], axis=2)]

    return record("fold_stacked", out, [x], bwd)


def unfold_stacked(x: Tensor) -> Tensor:
    """Inverse of fold_stacked: [N,2C,H,W] -> [N,C,2H,W]."""
    n, c2, h, w = x.shape
    if c2 % 2 != 0:
        raise ShapeError(f"unfold_stacked needs even channels, got {x.shape}")
    c = c2 // 2
    out = Tensor(np.concatenate([x.data[:, :c], x.data[:, c:]], axis=2))

    def bwd(g_out: np.ndarray):
        return [np.concatenate([g_out[:, :, :h], g_out[:, :, h:]], axis=1)]

    return record("unfold_stacked", out, [x], bwd)


def to_prior_form(x: Tensor, dims: int) -> Tensor:
    """Head output [N, priors_per_cell*dims, H, W] -> [N, H*W*priors_per_cell, dims].

    Row-major over cells, prior-major within a cell.
    """
    n, c, h, w = x.shape
    if c % dims:
        raise ShapeError(f"channel count {c} not divisible by dims {dims}")
    out = Tensor(x.data.transpose(0, 2, 3, 1).reshape(n, h * w * (c // dims), dims))

    def bwd(g_out: np.ndarray):
        return [g_out.reshape(n, h, w, c).transpose(0, 3, 1, 2)]

    return record("to_prior_form", out, [x], bwd)


def concat_priors(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate per-head [N,P_i,D] outputs along the prior axis."""
    sizes = [t.shape[1] for t in parts]
    out = Tensor(np.concatenate([t.data for t in parts], axis=1))

    def bwd(g_out: np.ndarray):
        grads, at = [], 0
        for s in sizes:
            grads.append(g_out[:, at:at + s])
            at += s
        return grads

    return record("concat_priors", out, list(parts), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return record("add", out, [a, b], lambda g: [g, g])


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * s)
    return record("scale", out, [x], lambda g: [g * s])


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(np.array([x.data.sum()], dtype=x.dtype))
    return record("sum", out, [x],
                  lambda g: [np.full(x.shape, g.reshape(-1)[0], dtype=x.dtype)])


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5, tolerance: float = 1e-3) -> dict:
    """Compare analytic gradients of scalar fn against central differences.

    Inputs must be float64. Returns {"max_rel_error", "passed", "per_input"}.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.zero_grad()

    with Graph() as g:
        loss = fn(*inputs)
    backward(g, loss, parameters=list(inputs))

    max_rel = 0.0
    per_input = []
    for t in inputs:
        analytic = t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = fn(*inputs).item()
            flat[idx] = orig - eps
            f_minus = fn(*inputs).item()
            flat[idx] = orig
            nflat[idx] = (f_plus - f_minus) / (2 * eps)
        denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1.0)
        rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
        per_input.append(rel)
        max_rel = max(max_rel, rel)

    return {"max_rel_error": max_rel, "passed": max_rel < tolerance,
            "per_input": per_input}
