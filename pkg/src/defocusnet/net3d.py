"""3-D fully convolutional encoder-decoder over hypothesis stacks.

Tensors are ``[H, W, D, C]`` arrays with channels fastest. Every layer has an
explicit forward and reverse-mode pass; :func:`forward` and :func:`backward`
run the whole graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StaleCacheError, TrainingAbortError

LN_EPS = 1e-5

__all__ = [
    "LayerSpec",
    "ARCHITECTURE",
    "LAYER_DEPTHS",
    "NetParams",
    "conv3d",
    "conv3d_grad",
    "layer_norm",
    "layer_norm_grad",
    "nn_upsample",
    "nn_upsample_grad",
    "build_graph",
    "forward",
    "backward",
    "sgd_step",
    "init_params",
    "depth_trace",
]


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple
    stride: int = 1
    dilation: int = 1
    filters: int = 0
    kernel_size: int = 3


def _conv(name, stride, dilation, filters, src):
    return LayerSpec(name, "conv3d", (src,), stride, dilation, filters)


# Rows of the canonical table; every conv but the last is followed by layer
# norm and ReLU when the graph is expanded.
ARCHITECTURE = (
    _conv("conv1_1", 1, 1, 8, "stack"),
    _conv("conv1_2", 2, 1, 16, "conv1_1"),
    _conv("conv2_1", 1, 1, 16, "conv1_2"),
    _conv("conv2_2", 2, 1, 32, "conv2_1"),
    _conv("conv3_1", 1, 1, 32, "conv2_2"),
    _conv("conv3_2", 1, 1, 32, "conv3_1"),
    _conv("conv3_3", 2, 1, 64, "conv3_2"),
    _conv("conv4_1", 1, 2, 64, "conv3_3"),
    _conv("conv4_2", 1, 2, 64, "conv4_1"),
    _conv("conv4_3", 1, 2, 64, "conv4_2"),
    LayerSpec("nnup_5", "nn_upsample", ("conv3_3", "conv4_3")),
    _conv("conv5_1", 1, 1, 32, "nnup_5"),
    _conv("conv5_2", 1, 1, 32, "conv5_1"),
    _conv("conv5_3", 1, 1, 32, "conv5_2"),
    LayerSpec("nnup_6", "nn_upsample", ("conv2_2", "conv5_3")),
    _conv("conv6_1", 1, 1, 16, "nnup_6"),
    _conv("conv6_2", 1, 1, 16, "conv6_1"),
    LayerSpec("nnup_7", "nn_upsample", ("conv1_2", "conv6_2")),
    _conv("conv7_1", 1, 1, 8, "nnup_7"),
    _conv("conv7_2", 1, 1, 8, "conv7_1"),
    _conv("conv7_3", 1, 1, 1, "conv7_2"),
)
OUTPUT_LAYER = "conv7_3"

LAYER_DEPTHS = {
    "conv1_1": (24, 24), "conv1_2": (24, 12), "conv2_1": (12, 12), "conv2_2": (12, 6),
    "conv3_1": (6, 6), "conv3_2": (6, 6), "conv3_3": (6, 3), "conv4_1": (3, 3),
    "conv4_2": (3, 3), "conv4_3": (3, 3), "nnup_5": (3, 6), "conv5_1": (6, 6),
    "conv5_2": (6, 6), "conv5_3": (6, 6), "nnup_6": (6, 12), "conv6_1": (12, 12),
    "conv6_2": (12, 12), "nnup_7": (12, 24), "conv7_1": (24, 24), "conv7_2": (24, 24),
    "conv7_3": (24, 24),
}


def build_graph(architecture=ARCHITECTURE, output=OUTPUT_LAYER):
    """Expand table rows into primitive nodes.

    A conv row becomes ``conv3d`` (named after the row), ``layernorm`` and
    ``activation`` nodes, and later rows referring to it read the activation.
    An upsampling row with several inputs gets a ``concat`` node first.
    """
    nodes = []
    alias = {"stack": "stack"}
    for row in architecture:
        srcs = tuple(alias[s] for s in row.inputs)
        if row.kind == "conv3d":
            nodes.append(LayerSpec(row.name, "conv3d", srcs, row.stride, row.dilation, row.filters))
            if row.name == output:
                alias[row.name] = row.name
                continue
            nodes.append(LayerSpec(row.name + "/ln", "layernorm", (row.name,)))
            nodes.append(LayerSpec(row.name + "/relu", "activation", (row.name + "/ln",)))
            alias[row.name] = row.name + "/relu"
        elif row.kind == "nn_upsample":
            if len(srcs) > 1:
                nodes.append(LayerSpec(row.name + "/concat", "concat", srcs))
                srcs = (row.name + "/concat",)
            nodes.append(LayerSpec(row.name, "nn_upsample", srcs))
            alias[row.name] = row.name
        else:
            raise ShapeError(f"unsupported table row kind {row.kind!r}")
    return tuple(nodes)


GRAPH = build_graph()


class NetParams(dict):
    """Learnable tensors keyed ``<layer>.weight|bias|gain|offset``.

    ``version`` increases on every in-place update so stale forward caches
    can be detected.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.version = 0

    def copy(self):
        return NetParams({k: v.copy() for k, v in self.items()})

    def astype(self, dtype):
        return NetParams({k: v.astype(dtype) for k, v in self.items()})


# -- primitive layers ---------------------------------------------------------

@dataclass
class ConvCache:
    x_padded: np.ndarray
    weight: np.ndarray
    stride: int
    dilation: int
    in_shape: tuple
    out_shape: tuple


def _tap_view(xp, i, j, k, d, s, out_dims):
    ho, wo, do = out_dims
    return xp[i * d:i * d + s * (ho - 1) + 1:s,
              j * d:j * d + s * (wo - 1) + 1:s,
              k * d:k * d + s * (do - 1) + 1:s]


def conv3d(x, weight, bias, stride: int = 1, dilation: int = 1):
    """Zero-padded "same" 3-D cross-correlation with a 3x3x3 kernel.

    Stride and dilation apply to all three axes; output dims are
    ``ceil(dim / stride)``. Returns ``(output, cache)``.
    """
    if weight.shape[:3] != (3, 3, 3) or weight.ndim != 5:
        raise ShapeError(f"weight must be [3, 3, 3, Cin, Cout], got {weight.shape}")
    if x.ndim != 4 or x.shape[3] != weight.shape[3]:
        raise ShapeError(f"input {x.shape} does not match weight {weight.shape}")
    h, w, dd, _ = x.shape
    s, d = int(stride), int(dilation)
    out_dims = (-(-h // s), -(-w // s), -(-dd // s))
    xp = np.pad(x, ((d, d), (d, d), (d, d), (0, 0)))
    cout = weight.shape[4]
    out = np.empty(out_dims + (cout,), dtype=np.result_type(x, weight))
    out[...] = bias
    flat = out.reshape(-1, cout)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                view = _tap_view(xp, i, j, k, d, s, out_dims)
                flat += view.reshape(-1, view.shape[-1]) @ weight[i, j, k]
    return out, ConvCache(xp, weight, s, d, x.shape, out.shape)


def conv3d_grad(upstream, cache: ConvCache):
    """Gradients of :func:`conv3d` w.r.t. input, weight and bias."""
    if not isinstance(cache, ConvCache):
        raise StaleCacheError("conv3d_grad needs the cache of a conv3d forward call")
    if upstream.shape != cache.out_shape:
        raise StaleCacheError(
            f"upstream {upstream.shape} does not match cached output {cache.out_shape}"
        )
    s, d = cache.stride, cache.dilation
    xp, weight = cache.x_padded, cache.weight
    out_dims = upstream.shape[:3]
    cout = upstream.shape[3]
    g = upstream.reshape(-1, cout)
    grad_w = np.empty_like(weight)
    grad_xp = np.zeros_like(xp)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                view = _tap_view(xp, i, j, k, d, s, out_dims)
                cols = view.reshape(-1, view.shape[-1])
                grad_w[i, j, k] = cols.T @ g
                gview = _tap_view(grad_xp, i, j, k, d, s, out_dims)
                gview += (g @ weight[i, j, k].T).reshape(gview.shape)
    h, w, dd, _ = cache.in_shape
    grad_x = grad_xp[d:d + h, d:d + w, d:d + dd]
    grad_b = g.sum(axis=0)
    return grad_x, grad_w, grad_b


def layer_norm(x, gain, offset, eps: float = LN_EPS):
    """Normalize over channels at each site, then scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + offset, (xhat, inv, gain)


def layer_norm_grad(upstream, cache):
    xhat, inv, gain = cache
    grad_gain = np.sum(upstream * xhat, axis=(0, 1, 2))
    grad_offset = np.sum(upstream, axis=(0, 1, 2))
    gx = upstream * gain
    mean_g = gx.mean(axis=-1, keepdims=True)
    mean_gx = np.mean(gx * xhat, axis=-1, keepdims=True)
    grad_x = inv * (gx - mean_g - xhat * mean_gx)
    return grad_x, grad_gain, grad_offset


def nn_upsample(x):
    """Double H, W and D by repetition."""
    h, w, d, c = x.shape
    out = np.broadcast_to(x[:, None, :, None, :, None, :], (h, 2, w, 2, d, 2, c))
    return out.reshape(2 * h, 2 * w, 2 * d, c)


def nn_upsample_grad(upstream):
    h, w, d, c = upstream.shape
    return upstream.reshape(h // 2, 2, w // 2, 2, d // 2, 2, c).sum(axis=(1, 3, 5))


# -- whole network ------------------------------------------------------------

def _stack_array(stack):
    data = getattr(stack, "data", stack)
    return np.asarray(data)


def forward(stack, params: NetParams, graph=GRAPH):
    """Run the network; returns ``(logits [H, W, D], cache)``."""
    x = _stack_array(stack)
    if x.ndim != 4:
        raise ShapeError(f"stack must be [H, W, D, C], got shape {x.shape}")
    h, w, depth, _ = x.shape
    if h % 8 or w % 8 or depth % 8:
        raise ShapeError(
            f"H, W and D must be multiples of 8, got {h}x{w}x{depth}; "
            f"pad or crop to {h - h % 8}x{w - w % 8} (or {-(-h // 8) * 8}x{-(-w // 8) * 8})"
        )
    dtype = params["conv1_1.weight"].dtype
    values = {"stack": x.astype(dtype, copy=False)}
    caches = {}
    for node in graph:
        args = [values[s] for s in node.inputs]
        if node.kind == "conv3d":
            out, caches[node.name] = conv3d(args[0], params[node.name + ".weight"],
                                            params[node.name + ".bias"], node.stride, node.dilation)
        elif node.kind == "layernorm":
            layer = node.name.split("/")[0]
            out, caches[node.name] = layer_norm(args[0], params[layer + ".gain"],
                                                params[layer + ".offset"])
        elif node.kind == "activation":
            out = np.maximum(args[0], 0)
        elif node.kind == "concat":
            out = np.concatenate(args, axis=-1)
            caches[node.name] = [a.shape[-1] for a in args]
        elif node.kind == "nn_upsample":
            out = nn_upsample(args[0])
        else:
            raise ShapeError(f"unknown node kind {node.kind!r}")
        values[node.name] = out
    final = values[graph[-1].name]
    if final.shape[-1] != 1:
        raise ShapeError("output layer must have a single filter")
    cache = {"values": values, "caches": caches, "graph": graph,
             "params": params, "version": getattr(params, "version", 0)}
    return final[..., 0], cache


def backward(loss_grad, cache):
    """Reverse-mode pass; returns parameter gradients as :class:`NetParams`.

    The cache is left untouched, so repeated calls return identical results.
    """
    if not cache or "values" not in cache:
        raise StaleCacheError("backward needs the cache returned by forward")
    params = cache["params"]
    if getattr(params, "version", 0) != cache["version"]:
        raise StaleCacheError("parameters changed since the forward pass")
    graph, values, caches = cache["graph"], cache["values"], cache["caches"]
    out_name = graph[-1].name
    if loss_grad.shape != values[out_name].shape[:3]:
        raise StaleCacheError(f"loss gradient {loss_grad.shape} does not match logits")
    grads = NetParams()
    pending = {out_name: loss_grad[..., None].astype(values[out_name].dtype)}
    for node in reversed(graph):
        g = pending.pop(node.name, None)
        if g is None:
            continue
        if node.kind == "conv3d":
            gx, grads[node.name + ".weight"], grads[node.name + ".bias"] = conv3d_grad(
                g, caches[node.name])
            upstream = [gx]
        elif node.kind == "layernorm":
            layer = node.name.split("/")[0]
            gx, grads[layer + ".gain"], grads[layer + ".offset"] = layer_norm_grad(
                g, caches[node.name])
            upstream = [gx]
        elif node.kind == "activation":
            upstream = [g * (values[node.name] > 0)]
        elif node.kind == "concat":
            bounds = np.cumsum(caches[node.name])[:-1]
            upstream = np.split(g, bounds, axis=-1)
        elif node.kind == "nn_upsample":
            upstream = [nn_upsample_grad(g)]
        for src, gs in zip(node.inputs, upstream):
            if src == "stack":
                continue
            if src in pending:
                pending[src] = pending[src] + gs
            else:
                pending[src] = gs
    for name, value in params.items():
        if name not in grads:
            grads[name] = np.zeros_like(value)
    return NetParams({k: grads[k] for k in params})


def sgd_step(params: NetParams, grads, lr: float = 0.01) -> NetParams:
    """In-place ``p <- p - lr * g``; returns ``params``."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAbortError(f"non-finite gradient for {name}")
    for name, g in grads.items():
        params[name] -= lr * g
    if isinstance(params, NetParams):
        params.version += 1
    return params


def init_params(seed: int = 0, in_channels: int = 1, dtype=np.float32,
                architecture=ARCHITECTURE) -> NetParams:
    """Uniform fan-in init with bound ``sqrt(6 / fan_in)``; zero biases,
    unit layer-norm gains and zero offsets."""
    rng = np.random.default_rng(seed)
    channels = {"stack": in_channels}
    params = NetParams()
    for row in architecture:
        cin = sum(channels[s] for s in row.inputs)
        if row.kind == "conv3d":
            fan_in = row.kernel_size ** 3 * cin
            bound = np.sqrt(6.0 / fan_in)
            shape = (row.kernel_size,) * 3 + (cin, row.filters)
            params[row.name + ".weight"] = rng.uniform(-bound, bound, shape).astype(dtype)
            params[row.name + ".bias"] = np.zeros(row.filters, dtype)
            if row.name != OUTPUT_LAYER:
                params[row.name + ".gain"] = np.ones(row.filters, dtype)
                params[row.name + ".offset"] = np.zeros(row.filters, dtype)
            channels[row.name] = row.filters
        else:
            channels[row.name] = cin
    return params


def depth_trace(cache) -> dict:
    """Input/output depth of every table row from a forward cache."""
    values, graph = cache["values"], cache["graph"]
    producer = {n.name: n for n in graph}
    trace = {}
    for row in ARCHITECTURE:
        node = producer[row.name]
        src = node.inputs[0]
        trace[row.name] = (values[src].shape[2], values[row.name].shape[2])
    return trace
