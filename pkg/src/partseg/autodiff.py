"""Minimal reverse-mode automatic differentiation over a fixed operator set.

Only what the segmentation network needs is here: 2D convolution (any
stride, zero padding), ReLU, sigmoid, nearest 2x upsampling, channel
concatenation and elementwise addition, plus the soft Dice loss.

Activations are float64 in (channel, batch, height, width) layout so that
every convolution is one matrix product with no transposes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ShapeError

OPERATORS = ("conv2d", "relu", "sigmoid", "upsample2x", "concat", "add")


class Tensor:
    """A value on the tape together with the closure that propagates its gradient."""

    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad")

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward=None,
                 requires_grad: bool = False):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- operators ---------------------------------------------------------------

def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # C, B, Ho, Wo, k, k


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of a (C, B, H, W) tensor with an (O, C, k, k) kernel."""
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and kernel, got {xv.shape} and {wv.shape}")
    n_out, n_in, k, k2 = wv.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {wv.shape}")
    if xv.shape[0] != n_in:
        raise ShapeError(f"conv2d expects {n_in} input channels, got {xv.shape[0]}")
    C, B, H, W = xv.shape
    win = _windows(xv, k, stride, padding)
    Ho, Wo = win.shape[2], win.shape[3]
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d input {xv.shape} too small for kernel {k}")
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(C * k * k, B * Ho * Wo)
    wmat = wv.reshape(n_out, C * k * k)
    out = wmat @ cols
    if b is not None:
        out += b.value[:, None]
    out = out.reshape(n_out, B, Ho, Wo)

    def _back(g):
        g2 = g.reshape(n_out, B * Ho * Wo)
        if w.requires_grad:
            _accumulate(w, (g2 @ cols.T).reshape(wv.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=1))
        if x.requires_grad and stride == 1 and padding < k:
            # stride-1 input gradient is a full correlation with the flipped kernel
            gwin = _windows(g, k, 1, k - 1 - padding)
            gcols = gwin.transpose(0, 4, 5, 1, 2, 3).reshape(n_out * k * k, B * H * W)
            wflip = wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, n_out * k * k)
            _accumulate(x, (wflip @ gcols).reshape(C, B, H, W))
        elif x.requires_grad:
            dcols = (wmat.T @ g2).reshape(C, k, k, B, Ho, Wo)
            dxp = np.zeros((C, B, H + 2 * padding, W + 2 * padding))
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i, j]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            _accumulate(x, dxp)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, _back)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0

    def _back(g):
        _accumulate(x, g * mask)

    return Tensor(x.value * mask, (x,), _back)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.value)

    def _back(g):
        _accumulate(x, g * s * (1.0 - s))

    return Tensor(s, (x,), _back)


def upsample2x(x: Tensor) -> Tensor:
    if x.value.ndim != 4:
        raise ShapeError(f"upsample2x expects 4D input, got {x.value.shape}")
    C, B, H, W = x.value.shape
    out = x.value.repeat(2, axis=2).repeat(2, axis=3)

    def _back(g):
        _accumulate(x, g.reshape(C, B, H, 2, W, 2).sum(axis=(3, 5)))

    return Tensor(out, (x,), _back)


def concat(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    shapes = [t.value.shape for t in xs]
    if len({s[1:] for s in shapes}) != 1:
        raise ShapeError(f"concat needs matching batch and spatial dims, got {shapes}")
    out = np.concatenate([t.value for t in xs], axis=0)
    bounds = np.cumsum([0] + [s[0] for s in shapes])

    def _back(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            _accumulate(t, g[lo:hi])

    return Tensor(out, xs, _back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add needs equal shapes, got {a.value.shape} and {b.value.shape}")

    def _back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return Tensor(a.value + b.value, (a, b), _back)


def soft_dice_loss(pred: Tensor, ref: np.ndarray, eps: float = 1.0,
                   batch_axis: int | None = None) -> Tensor:
    """Soft Dice loss ``1 - (2 sum(p*r) + eps) / (sum(p) + sum(r) + eps)``.

    Sums run over every axis except ``batch_axis``; with a batch axis the
    result is the mean of the per-sample losses.
    """
    p = pred.value
    ref = np.asarray(ref, dtype=np.float64)
    if p.shape != ref.shape:
        raise ShapeError(f"soft_dice_loss shape mismatch: pred {p.shape} vs ref {ref.shape}")
    axes = tuple(a for a in range(p.ndim) if a != batch_axis)
    n = 1 if batch_axis is None else p.shape[batch_axis]
    inter = (p * ref).sum(axis=axes, keepdims=True)
    denom = p.sum(axis=axes, keepdims=True) + ref.sum(axis=axes, keepdims=True) + eps
    num = 2.0 * inter + eps
    loss = np.mean(1.0 - num / denom)

    def _back(g):
        # d/dp of -num/denom = -(2 r denom - num) / denom^2
        _accumulate(pred, g * (-(2.0 * ref * denom - num) / denom ** 2) / n)

    return Tensor(np.asarray(loss), (pred,), _back)


# -- graphs ------------------------------------------------------------------

@dataclass(frozen=True)
class OpNode:
    """One operator application: reads named tensors, writes ``output``."""

    op: str
    inputs: tuple[str, ...]
    output: str
    params: tuple[str, ...] = ()
    stride: int = 1
    padding: int = 0


@dataclass
class OperatorGraph:
    """A topologically ordered list of operators plus the parameters they use."""

    nodes: list[OpNode]
    parameters: dict[str, np.ndarray]
    inputs: tuple[str, ...] = ("x",)
    outputs: tuple[str, ...] = ("y",)
    _checked: bool = field(default=False, repr=False, compare=False)

    def validate(self) -> None:
        defined = set(self.inputs)
        used_params: set[str] = set()
        for node in self.nodes:
            if node.op not in OPERATORS:
                raise ValueError(f"unknown operator {node.op!r} at node {node.output!r}")
            for name in node.inputs:
                if name not in defined:
                    raise ValueError(f"node {node.output!r} reads {name!r} before it is defined")
            for name in node.params:
                if name not in self.parameters:
                    raise ValueError(f"node {node.output!r} uses unknown parameter {name!r}")
            used_params.update(node.params)
            if node.output in defined:
                raise ValueError(f"tensor {node.output!r} is written twice")
            defined.add(node.output)
        for name in self.outputs:
            if name not in defined:
                raise ValueError(f"graph output {name!r} is never computed")
        unused = set(self.parameters) - used_params
        if unused:
            raise ValueError(f"parameters not reachable from outputs: {sorted(unused)}")
        self._checked = True

    def param_tensors(self, trainable: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=trainable) for k, v in self.parameters.items()}

    def run(self, feeds: dict[str, Tensor], params: dict[str, Tensor] | None = None,
            return_all: bool = False) -> dict[str, Tensor]:
        if not self._checked:
            self.validate()
        if params is None:
            params = self.param_tensors(trainable=False)
        env = dict(feeds)
        for node in self.nodes:
            args = [env[name] for name in node.inputs]
            ps = [params[name] for name in node.params]
            try:
                env[node.output] = _apply(node, args, ps)
            except ShapeError as exc:
                raise ShapeError(f"node {node.output!r} ({node.op}): {exc}") from None
        if return_all:
            return env
        return {name: env[name] for name in self.outputs}

    def relu_inputs(self) -> list[str]:
        return [n.inputs[0] for n in self.nodes if n.op == "relu"]

    def num_parameters(self) -> int:
        return sum(int(v.size) for v in self.parameters.values())


def _apply(node: OpNode, args: list[Tensor], ps: list[Tensor]) -> Tensor:
    if node.op == "conv2d":
        b = ps[1] if len(ps) > 1 else None
        return conv2d(args[0], ps[0], b, stride=node.stride, padding=node.padding)
    if node.op == "relu":
        return relu(args[0])
    if node.op == "sigmoid":
        return sigmoid(args[0])
    if node.op == "upsample2x":
        return upsample2x(args[0])
    if node.op == "concat":
        return concat(args)
    if node.op == "add":
        return add(args[0], args[1])
    raise ValueError(f"unknown operator {node.op!r}")


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, index: tuple,
                     h: float = 1e-4) -> float:
    """Central finite difference of ``f`` w.r.t. ``arr[index]`` (modified in place, restored)."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2.0 * h)
