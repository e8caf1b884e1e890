#!/usr/bin/env python3
"""
Dense tensors and the handful of differentiable layer ops the slimmable
encoder, reconstructor and distillation loss are built from.

Feature maps are (C, H, W) or batched (N, C, H, W), channel-major and
row-major within a channel. That order is also the wire order used by the
codec. Reverse-mode gradients are recorded on a Graph that is active on the
current thread (`with Graph() as g: ...`).
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from split_errors import GraphError, ShapeError

INSTANCE_NORM_EPS = 1e-5

_local = threading.local()


class Tensor:
    """A float64 array plus the bookkeeping needed for gradients"""

    __slots__ = ('data', 'requires_grad', 'grad', 'name', '_tracked')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._tracked = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


@dataclass
class LayerParams:
    """Weights and geometry of one convolution.

    Forward convs use weights shaped (out_channels, in_channels, K, K);
    transposed convs use (in_channels, out_channels, K, K).
    """
    weights: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    kernel: Optional[int] = None
    padding: int = 0
    output_padding: int = 0
    transposed: bool = False

    def __post_init__(self):
        shape = self.weights.shape
        if len(shape) != 4 or shape[2] != shape[3]:
            raise ShapeError("conv weights must be (C, C, K, K)", "rank-4 square kernel", shape)
        if self.kernel is None:
            self.kernel = shape[2]
        if self.kernel != shape[2]:
            raise ShapeError("kernel size disagrees with weights", self.kernel, shape[2])
        if self.stride < 1 or self.kernel < 1:
            raise ShapeError("stride and kernel must be positive", ">= 1", (self.stride, self.kernel))
        if self.padding < 0:
            raise ShapeError("padding must be non-negative", ">= 0", self.padding)
        if not 0 <= self.output_padding < self.stride:
            raise ShapeError("output_padding must be smaller than stride", f"< {self.stride}", self.output_padding)
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError("bias length must equal out_channels", (self.out_channels,), self.bias.shape)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[0] if self.transposed else self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[1] if self.transposed else self.weights.shape[0]

    def tensors(self) -> List[Tensor]:
        return [self.weights] + ([self.bias] if self.bias is not None else [])


# ---------------------------------------------------------------------------
# Recording graph
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ('output', 'inputs', 'vjp')

    def __init__(self, output, inputs, vjp):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Gradients:
    """Result of Graph.backward, indexed by tensor"""

    def __init__(self, grads: Dict[int, np.ndarray], members: Dict[int, Tensor]):
        self._grads = grads
        self._members = members

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if id(tensor) not in self._members:
            label = tensor.name or repr(tensor)
            raise GraphError(f"gradient requested for {label}, which is not in the recorded graph")
        grad = self._grads.get(id(tensor))
        return grad if grad is not None else np.zeros_like(tensor.data)

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._members


class Graph:
    """Tape of differentiable ops recorded on the current thread"""

    def __init__(self):
        self.nodes: List[_Node] = []
        self._members: Dict[int, Tensor] = {}

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _graph_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, output: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        output._tracked = True
        self.nodes.append(_Node(output, list(inputs), vjp))
        self._members[id(output)] = output
        for tensor in inputs:
            self._members[id(tensor)] = tensor

    def backward(self, output: Tensor, output_gradient=None) -> Gradients:
        """Reverse sweep from `output`; leaf tensors with requires_grad accumulate .grad"""
        if id(output) not in self._members:
            raise GraphError("backward() called on a tensor the graph did not produce")
        if output_gradient is None:
            if output.size != 1:
                raise GraphError(f"output gradient required for non-scalar output of shape {output.shape}")
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(output_gradient, dtype=np.float64)
            if seed.shape != output.shape:
                raise ShapeError("output gradient shape mismatch", output.shape, seed.shape)

        grads: Dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            upstream = grads.get(id(node.output))
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.vjp(upstream)):
                if grad is None or not tensor._tracked:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        for key, tensor in self._members.items():
            if tensor.requires_grad and key in grads:
                tensor.grad = grads[key] if tensor.grad is None else tensor.grad + grads[key]
        return Gradients(grads, self._members)


def backward(graph: Graph, output: Tensor, output_gradient=None) -> Gradients:
    return graph.backward(output, output_gradient)


def _graph_stack() -> List[Graph]:
    stack = getattr(_local, 'graphs', None)
    if stack is None:
        stack = _local.graphs = []
    return stack


def current_graph() -> Optional[Graph]:
    stack = _graph_stack()
    return stack[-1] if stack else None


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    graph = current_graph()
    if graph is not None and any(t._tracked for t in inputs):
        graph.record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# Multiply-accumulate counter
# ---------------------------------------------------------------------------

class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_op: Dict[str, int] = {}

    def add(self, op: str, macs: int):
        self.total += macs
        self.by_op[op] = self.by_op.get(op, 0) + macs


@contextmanager
def count_macs():
    """Count conv multiply-accumulates issued inside the block"""
    counter = MacCounter()
    stack = getattr(_local, 'counters', None)
    if stack is None:
        stack = _local.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _count(op: str, macs: int):
    for counter in getattr(_local, 'counters', ()):
        counter.add(op, int(macs))


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def _as_batch(x: np.ndarray, op: str) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op} expects (C,H,W) or (N,C,H,W) input", "rank 3 or 4", x.shape)


def _windows(x: np.ndarray, kernel: int, stride: int, padding: int, out_hw: Tuple[int, int]) -> np.ndarray:
    """(N, C, Ho, Wo, K, K) strided view over the zero-padded input"""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    view = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    return view[:, :, :out_hw[0], :out_hw[1]]


def _scatter_windows(grad: np.ndarray, weights: np.ndarray, stride: int, padding: int,
                     in_hw: Tuple[int, int]) -> np.ndarray:
    """Adjoint of the windowed product: (N,O,Ho,Wo) x (O,C,K,K) -> (N,C,H,W)"""
    n, _, ho, wo = grad.shape
    channels, kernel = weights.shape[1], weights.shape[2]
    h, w = in_hw
    out = np.zeros((n, channels, h + 2 * padding, w + 2 * padding))
    for i in range(kernel):
        for j in range(kernel):
            contrib = np.tensordot(grad, weights[:, :, i, j], axes=([1], [0]))
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                contrib.transpose(0, 3, 1, 2)
    return out[:, :, padding:padding + h, padding:padding + w]


def conv2d(input: Tensor, params: LayerParams) -> Tensor:
    """Direct 2-D convolution with zero padding"""
    if params.transposed:
        raise ShapeError("conv2d needs forward-layout weights", "(out, in, K, K)", params.weights.shape)
    x, squeeze = _as_batch(input.data, "conv2d")
    weights = params.weights.data
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(f"conv2d channel mismatch between input {input.shape} and weights {weights.shape}",
                         weights.shape[1], x.shape[1])

    n, c, h, w = x.shape
    k, s, p = params.kernel, params.stride, params.padding
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d input {input.shape} too small for kernel {k}", f">= {k - 2 * p}", (h, w))

    windows = _windows(x, k, s, p, (ho, wo))
    out = np.tensordot(windows, weights, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if params.bias is not None:
        out = out + params.bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    _count("conv2d", n * weights.shape[0] * ho * wo * c * k * k)

    has_bias = params.bias is not None

    def vjp(grad):
        g = grad[None] if squeeze else grad
        gx = _scatter_windows(g, weights, s, p, (h, w))
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grads = [gx[0] if squeeze else gx, gw]
        if has_bias:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _emit(out[0] if squeeze else out, [input] + params.tensors(), vjp)


def transpose_conv2d(input: Tensor, params: LayerParams) -> Tensor:
    """Transposed convolution, the input-gradient of conv2d; used for upscaling"""
    if not params.transposed:
        raise ShapeError("transpose_conv2d needs transposed-layout weights", "(in, out, K, K)",
                         params.weights.shape)
    x, squeeze = _as_batch(input.data, "transpose_conv2d")
    weights = params.weights.data
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"transpose_conv2d channel mismatch between input {input.shape} and weights {weights.shape}",
                         weights.shape[0], x.shape[1])

    n, c, h, w = x.shape
    k, s, p, op = params.kernel, params.stride, params.padding, params.output_padding
    ho = (h - 1) * s - 2 * p + k + op
    wo = (w - 1) * s - 2 * p + k + op
    if ho < 1 or wo < 1:
        raise ShapeError(f"transpose_conv2d output would be empty for input {input.shape}", ">= 1", (ho, wo))

    out = _scatter_windows(x, weights, s, p, (ho, wo))
    if params.bias is not None:
        out = out + params.bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    _count("transpose_conv2d", n * c * h * w * weights.shape[1] * k * k)

    has_bias = params.bias is not None

    def vjp(grad):
        g = grad[None] if squeeze else grad
        windows = _windows(g, k, s, p, (h, w))
        gx = np.tensordot(windows, weights, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x, windows, axes=([0, 2, 3], [0, 2, 3]))
        grads = [gx[0] if squeeze else gx, gw]
        if has_bias:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _emit(out[0] if squeeze else out, [input] + params.tensors(), vjp)


# ---------------------------------------------------------------------------
# Normalization, activation, arithmetic
# ---------------------------------------------------------------------------

def instance_norm(input: Tensor, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes"""
    x, squeeze = _as_batch(input.data, "instance_norm")
    if x.shape[1] < 1 or x.shape[2] * x.shape[3] < 1:
        raise ShapeError("instance_norm needs at least one channel and one pixel", ">= 1", x.shape)

    mean = x.mean(axis=(2, 3), keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def vjp(grad):
        g = grad[None] if squeeze else grad
        gx = inv_std * (g - g.mean(axis=(2, 3), keepdims=True)
                        - xhat * (g * xhat).mean(axis=(2, 3), keepdims=True))
        return [gx[0] if squeeze else gx]

    return _emit(xhat[0] if squeeze else xhat, [input], vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(input: Tensor) -> Tensor:
    x = input.data
    sig = _sigmoid(x)

    def vjp(grad):
        return [grad * (sig + x * sig * (1.0 - sig))]

    return _emit(x * sig, [input], vjp)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op} operands differ in shape", a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, [a, b], lambda g: [g, g])


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit(a.data * factor, [a], lambda g: [g * factor])


def add_constant(a: Tensor, offset: np.ndarray) -> Tensor:
    """a + offset where offset carries no gradient (noise, straight-through deltas)"""
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != a.shape:
        raise ShapeError("add_constant offset shape mismatch", a.shape, offset.shape)
    return _emit(a.data + offset, [a], lambda g: [g])


def mean(a: Tensor) -> Tensor:
    count = a.size

    def vjp(grad):
        return [np.full(a.shape, float(grad) / count)]

    return _emit(np.asarray(a.data.mean()), [a], vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """||a - b||^2 / numel, as a scalar tensor"""
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    count = diff.size

    def vjp(grad):
        ga = (2.0 * float(grad) / count) * diff
        return [ga, -ga]

    return _emit(np.asarray((diff * diff).mean()), [a, b], vjp)
