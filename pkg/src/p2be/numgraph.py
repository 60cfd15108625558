"""Dense-tensor graph with hand-derived reverse-mode gradients.

Tensors are plain ``numpy`` arrays (float32 by default).  A :class:`Graph` is
built node by node; every constructor validates input shapes so that a bad
architecture fails at build time rather than on the first batch.

Example::

    g = Graph((3, 8, 8), seed=0)
    h = g.relu(g.conv2d(g.input, "conv1", 16, 3))
    g.set_output(g.dense(g.global_avg_pool(h), "fc", 4))
    logits = g.forward(x)
    grads = g.backward(dlogits)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np


class GraphError(ValueError):
    """Raised for shape mismatches at construction or evaluation time."""


class GraphStateError(RuntimeError):
    """Raised when backward is requested without a retained forward pass."""


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]  # per-sample shape, batch axis excluded
    name: str
    attrs: dict = field(default_factory=dict)


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B, C*k*k, Ho*Wo]`` (channel-major patches)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c, hp, wp = x.shape
    ho, wo = hp - k + 1, wp - k + 1
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i:i + ho, j:j + wo]
    return cols.reshape(b, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, x_shape: tuple[int, ...], k: int, pad: int) -> np.ndarray:
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = hp - k + 1, wp - k + 1
    cols = cols.reshape(b, c, k, k, ho, wo)
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + ho, j:j + wo] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


class Graph:
    """A directed acyclic graph over a closed operator set.

    Nodes are appended in construction order, which is also the evaluation
    order; backward walks that order in reverse.
    """

    def __init__(self, input_shape, dtype=np.float32, seed: int | None = 0):
        self.dtype = np.dtype(dtype)
        self.input_shape = tuple(int(s) for s in input_shape)
        if not self.input_shape or min(self.input_shape) < 1:
            raise GraphError(f"input: invalid shape {self.input_shape}")
        self.nodes: list[Node] = [Node("input", (), self.input_shape, "input")]
        self.params: dict[str, np.ndarray] = {}
        self.output = 0
        self._rng = np.random.default_rng(seed)
        self._cache: list[np.ndarray] | None = None

    @property
    def input(self) -> int:
        return 0

    def _add(self, op, inputs, shape, name, **attrs) -> int:
        self.nodes.append(Node(op, tuple(inputs), tuple(shape), name, attrs))
        return len(self.nodes) - 1

    def _node_name(self, op: str) -> str:
        return f"{op}_{len(self.nodes)}"

    def _check(self, src: int) -> Node:
        if not 0 <= src < len(self.nodes):
            raise GraphError(f"unknown node id {src}")
        return self.nodes[src]

    def _new_param(self, name: str, value: np.ndarray):
        if name in self.params:
            raise GraphError(f"{name}: duplicate parameter name")
        self.params[name] = np.ascontiguousarray(value, dtype=self.dtype)

    # -- constructors -----------------------------------------------------

    def conv2d(self, src: int, name: str, out_channels: int, kernel_size: int,
               padding: int | None = None, weight=None, bias=None) -> int:
        """Stride-1 convolution; ``padding`` defaults to 'same' for odd kernels."""
        node = self._check(src)
        if len(node.shape) != 3:
            raise GraphError(f"{name}: conv2d expects [C,H,W] input, got {list(node.shape)}")
        c, h, w = node.shape
        k = int(kernel_size)
        pad = k // 2 if padding is None else int(padding)
        ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
        if ho < 1 or wo < 1:
            raise GraphError(f"{name}: kernel {k} does not fit input {list(node.shape)}")
        if weight is None:
            weight = self._rng.normal(0.0, math.sqrt(2.0 / (c * k * k)), (out_channels, c, k, k))
        if bias is None:
            bias = np.zeros(out_channels)
        if np.shape(weight) != (out_channels, c, k, k) or np.shape(bias) != (out_channels,):
            raise GraphError(f"{name}: parameter shapes do not match [{out_channels},{c},{k},{k}]")
        self._new_param(f"{name}.weight", weight)
        self._new_param(f"{name}.bias", bias)
        return self._add("conv2d", (src,), (out_channels, ho, wo), name, k=k, pad=pad)

    def dense(self, src: int, name: str, out_features: int, weight=None, bias=None) -> int:
        """Affine map ``y = x W^T + b`` with ``W`` of shape [out, in]."""
        node = self._check(src)
        if len(node.shape) != 1:
            raise GraphError(f"{name}: dense expects a flat input, got {list(node.shape)}")
        n_in = node.shape[0]
        if weight is None:
            weight = self._rng.normal(0.0, math.sqrt(2.0 / n_in), (out_features, n_in))
        if bias is None:
            bias = np.zeros(out_features)
        if np.shape(weight) != (out_features, n_in) or np.shape(bias) != (out_features,):
            raise GraphError(f"{name}: parameter shapes do not match [{out_features},{n_in}]")
        self._new_param(f"{name}.weight", weight)
        self._new_param(f"{name}.bias", bias)
        return self._add("dense", (src,), (out_features,), name)

    def relu(self, src: int) -> int:
        return self._add("relu", (src,), self._check(src).shape, self._node_name("relu"))

    def global_avg_pool(self, src: int) -> int:
        node = self._check(src)
        name = self._node_name("gap")
        if len(node.shape) != 3:
            raise GraphError(f"{name}: global_avg_pool expects [C,H,W], got {list(node.shape)}")
        return self._add("gap", (src,), (node.shape[0],), name)

    def add(self, a: int, b: int) -> int:
        na, nb = self._check(a), self._check(b)
        name = self._node_name("add")
        if na.shape != nb.shape:
            raise GraphError(f"{name}: operand shapes differ {list(na.shape)} vs {list(nb.shape)}")
        return self._add("add", (a, b), na.shape, name)

    def scale(self, src: int, factor: float) -> int:
        return self._add("scale", (src,), self._check(src).shape, self._node_name("scale"),
                         factor=float(factor))

    def softmax(self, src: int) -> int:
        node = self._check(src)
        name = self._node_name("softmax")
        if len(node.shape) != 1:
            raise GraphError(f"{name}: softmax expects [K] logits, got {list(node.shape)}")
        return self._add("softmax", (src,), node.shape, name)

    def set_output(self, node: int) -> None:
        self._check(node)
        self.output = node

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.nodes[self.output].shape

    # -- evaluation -------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate every node and retain intermediates for :meth:`backward`."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise GraphError(f"input: expected [batch, {', '.join(map(str, self.input_shape))}], "
                             f"got {list(x.shape)}")
        vals: list[np.ndarray] = [x]
        for node in self.nodes[1:]:
            args = [vals[i] for i in node.inputs]
            vals.append(self._forward_node(node, args))
        self._cache = vals
        return vals[self.output]

    def _forward_node(self, node: Node, args: list[np.ndarray]) -> np.ndarray:
        op = node.op
        if op == "conv2d":
            x = args[0]
            w = self.params[f"{node.name}.weight"]
            b = self.params[f"{node.name}.bias"]
            cols = _im2col(x, node.attrs["k"], node.attrs["pad"])
            node.attrs["_cols"] = cols
            out = w.reshape(w.shape[0], -1) @ cols + b[:, None]
            return out.reshape(x.shape[0], *node.shape)
        if op == "dense":
            return args[0] @ self.params[f"{node.name}.weight"].T + self.params[f"{node.name}.bias"]
        if op == "relu":
            return np.maximum(args[0], 0)
        if op == "gap":
            return args[0].mean(axis=(2, 3), dtype=self.dtype)
        if op == "add":
            return args[0] + args[1]
        if op == "scale":
            return args[0] * self.dtype.type(node.attrs["factor"])
        if op == "softmax":
            z = args[0] - args[0].max(axis=1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=1, keepdims=True)
        raise GraphError(f"{node.name}: unknown op {op}")

    def backward(self, upstream: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients for every parameter plus ``"input"`` given dL/d(output)."""
        if self._cache is None:
            raise GraphStateError("backward called before forward")
        vals = self._cache
        upstream = np.asarray(upstream, dtype=self.dtype)
        if upstream.shape != vals[self.output].shape:
            raise GraphError(f"{self.nodes[self.output].name}: upstream shape {list(upstream.shape)} "
                             f"!= output shape {list(vals[self.output].shape)}")
        node_grads: list[np.ndarray | None] = [None] * len(self.nodes)
        node_grads[self.output] = upstream
        grads: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in self.params.items()}
        for idx in range(len(self.nodes) - 1, 0, -1):
            g = node_grads[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            in_grads = self._backward_node(node, [vals[i] for i in node.inputs], vals[idx], g, grads)
            for src, ig in zip(node.inputs, in_grads):
                node_grads[src] = ig if node_grads[src] is None else node_grads[src] + ig
        gin = node_grads[0]
        grads["input"] = np.zeros_like(vals[0]) if gin is None else gin
        return grads

    def _backward_node(self, node, args, out, g, grads):
        op = node.op
        if op == "conv2d":
            x = args[0]
            w = self.params[f"{node.name}.weight"]
            f = w.shape[0]
            gflat = g.reshape(g.shape[0], f, -1)
            cols = node.attrs["_cols"]
            grads[f"{node.name}.weight"] += (gflat @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            grads[f"{node.name}.bias"] += gflat.sum(axis=(0, 2))
            dcols = w.reshape(f, -1).T @ gflat
            return [_col2im(dcols, x.shape, node.attrs["k"], node.attrs["pad"])]
        if op == "dense":
            w = self.params[f"{node.name}.weight"]
            grads[f"{node.name}.weight"] += g.T @ args[0]
            grads[f"{node.name}.bias"] += g.sum(axis=0)
            return [g @ w]
        if op == "relu":
            return [g * (args[0] > 0)]
        if op == "gap":
            h, w = args[0].shape[2:]
            return [np.broadcast_to(g[:, :, None, None] / self.dtype.type(h * w), args[0].shape).copy()]
        if op == "add":
            return [g, g]
        if op == "scale":
            return [g * self.dtype.type(node.attrs["factor"])]
        if op == "softmax":
            return [out * (g - (g * out).sum(axis=1, keepdims=True))]
        raise GraphError(f"{node.name}: unknown op {op}")

    # -- parameter handling -----------------------------------------------

    def get_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for k, v in params.items():
            if k not in self.params:
                raise GraphError(f"{k}: unknown parameter")
            if np.shape(v) != self.params[k].shape:
                raise GraphError(f"{k}: shape {list(np.shape(v))} != {list(self.params[k].shape)}")
            self.params[k] = np.ascontiguousarray(v, dtype=self.dtype)
        self._cache = None


def toy_cnn(in_channels: int, num_classes: int, height: int, width: int,
            dtype=np.float32, seed: int | None = 0, widths=(16, 32)) -> Graph:
    """conv(3x3) -> relu -> conv(3x3) -> relu -> global-average-pool -> dense."""
    g = Graph((in_channels, height, width), dtype=dtype, seed=seed)
    h = g.relu(g.conv2d(g.input, "conv1", widths[0], 3))
    h = g.relu(g.conv2d(h, "conv2", widths[1], 3))
    g.set_output(g.dense(g.global_avg_pool(h), "fc", num_classes))
    return g


class GradCheck(NamedTuple):
    max_rel_error: float
    checked: int
    skipped: int


def finite_difference_check(graph: Graph, x: np.ndarray,
                            loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
                            name: str, eps: float = 1e-3, n_samples: int | None = 32,
                            seed: int = 0) -> GradCheck:
    """Compare analytic gradients of ``name`` against central differences.

    ``loss_fn`` maps graph output to ``(loss, dloss/doutput)``.  ``name`` is a
    parameter name or ``"input"``.  Coordinates whose one-sided slopes do not
    shrink linearly with the step (a kink inside the stencil) are skipped.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=graph.dtype)

    def loss_at() -> float:
        val = float(loss_fn(graph.forward(x))[0])
        if not math.isfinite(val):
            raise FloatingPointError("non-finite loss in finite_difference_check")
        return val

    f0, up = loss_fn(graph.forward(x))
    if not math.isfinite(float(f0)):
        raise FloatingPointError("non-finite loss in finite_difference_check")
    analytic = graph.backward(up)[name]
    target = x if name == "input" else graph.params[name]

    flat = target.reshape(-1)
    idx = np.arange(flat.size)
    if n_samples is not None and flat.size > n_samples:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, n_samples, replace=False))

    noise = 1e3 * np.finfo(graph.dtype).eps * (abs(float(f0)) + 1.0) / eps
    worst, checked, skipped = 0.0, 0, 0
    for i in idx:
        orig = flat[i]
        vals = {}
        for step in (eps, -eps, eps / 2, -eps / 2):
            flat[i] = orig + graph.dtype.type(step)
            vals[step] = loss_at()
        flat[i] = orig
        slopes = {}
        for h in (eps, eps / 2):
            fwd = (vals[h] - f0) / h
            bwd = (f0 - vals[-h]) / h
            slopes[h] = (fwd, bwd, (vals[h] - vals[-h]) / (2 * h))
        d_full = slopes[eps][0] - slopes[eps][1]
        d_half = slopes[eps / 2][0] - slopes[eps / 2][1]
        numeric = slopes[eps][2]
        a = float(analytic.reshape(-1)[i])
        if abs(d_full - 2 * d_half) > 1e-4 * max(abs(a), abs(numeric)) + noise:
            skipped += 1
            continue
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
        checked += 1
    graph.forward(x)
    return GradCheck(worst, checked, skipped)
