"""A small static computation graph with reverse-mode differentiation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L

TRAIN = "train"
INFER = "infer"


class GraphError(RuntimeError):
    pass


@dataclass
class Node:
    name: str
    kind: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)
    params: tuple = ()
    stage: str = ""


@dataclass
class LossValue:
    """Scalar training loss plus what :func:`backward` needs to propagate it."""

    value: float
    data_loss: float
    dlogits: list
    l2: float = 0.0
    reg_names: tuple = ()


class NetworkGraph:
    """Ordered list of nodes plus named parameter and buffer arrays.

    Nodes are appended in topological order by the builder methods, each of
    which returns the new node's name. ``stage`` tags group parameters for
    accounting (see :func:`mpunet.unetzoo.count_params`).
    """

    def __init__(self, input_channels, dtype=np.float32, seed=0, bn_momentum=0.9):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.param_info: dict[str, tuple] = {}   # name -> (stage, role)
        self.outputs: list[str] = []
        self.channels: dict[str, int] = {}
        self.scale: dict[str, int] = {}
        self.input_channels = input_channels
        self.bn_momentum = bn_momentum
        self.rng = np.random.default_rng(seed)
        self._by_name: dict[str, Node] = {}
        self._cache = None
        self.input = self._add(Node("input", "input", ()), input_channels, 1)

    # ------------------------------------------------------------ building

    def _add(self, node, channels, scale):
        if node.name in self._by_name:
            raise GraphError(f"duplicate node name {node.name!r}")
        for src in node.inputs:
            if src not in self._by_name:
                raise GraphError(f"node {node.name!r} references unknown input {src!r}")
        self.nodes.append(node)
        self._by_name[node.name] = node
        self.channels[node.name] = channels
        self.scale[node.name] = scale
        return node.name

    def _param(self, name, array, stage, role):
        self.params[name] = np.asarray(array, dtype=self.dtype)
        self.param_info[name] = (stage, role)
        return name

    def node(self, name) -> Node:
        return self._by_name[name]

    @property
    def min_divisor(self):
        return max(self.scale.values())

    def conv(self, x, cout, name, stage, kernel=3):
        cin = self.channels[x]
        std = np.sqrt(2.0 / (kernel * kernel * cin))
        w = self._param(f"{name}.w", self.rng.normal(0.0, std, (kernel, kernel, cin, cout)),
                        stage, "kernel")
        b = self._param(f"{name}.b", np.zeros(cout), stage, "bias")
        return self._add(Node(name, "conv", (x,), {"kernel": kernel}, (w, b), stage),
                         cout, self.scale[x])

    def tconv(self, x, cout, name, stage, kernel=3):
        cin = self.channels[x]
        std = np.sqrt(2.0 / (kernel * kernel * cin))
        w = self._param(f"{name}.w", self.rng.normal(0.0, std, (kernel, kernel, cin, cout)),
                        stage, "kernel")
        b = self._param(f"{name}.b", np.zeros(cout), stage, "bias")
        if self.scale[x] % 2:
            raise GraphError(f"cannot upsample {x!r} above input resolution")
        return self._add(Node(name, "tconv", (x,), {"kernel": kernel}, (w, b), stage),
                         cout, self.scale[x] // 2)

    def bn(self, x, name, stage):
        c = self.channels[x]
        g = self._param(f"{name}.gamma", np.ones(c), stage, "bn")
        b = self._param(f"{name}.beta", np.zeros(c), stage, "bn")
        self.buffers[f"{name}.mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.var"] = np.ones(c, dtype=self.dtype)
        return self._add(Node(name, "bn", (x,), {}, (g, b), stage), c, self.scale[x])

    def relu(self, x, name, stage=""):
        return self._add(Node(name, "relu", (x,), {}, (), stage), self.channels[x], self.scale[x])

    def maxpool(self, x, name, factor=2, stage=""):
        return self._add(Node(name, "maxpool", (x,), {"factor": factor}, (), stage),
                         self.channels[x], self.scale[x] * factor)

    def upsample(self, x, name, factor=2, mode="bilinear", stage=""):
        if self.scale[x] % factor:
            raise GraphError(f"cannot upsample {x!r} above input resolution")
        kind = "up_bilinear" if mode == "bilinear" else "up_nearest"
        return self._add(Node(name, kind, (x,), {"factor": factor}, (), stage),
                         self.channels[x], self.scale[x] // factor)

    def concat(self, xs, name, stage=""):
        scales = {self.scale[x] for x in xs}
        if len(scales) != 1:
            raise GraphError(f"concat {name!r} mixes resolutions {sorted(scales)}")
        return self._add(Node(name, "concat", tuple(xs), {}, (), stage),
                         sum(self.channels[x] for x in xs), scales.pop())

    def conv_bn_relu(self, x, cout, name, stage, kernel=3):
        y = self.conv(x, cout, f"{name}.conv", stage, kernel)
        y = self.bn(y, f"{name}.bn", stage)
        return self.relu(y, f"{name}.relu", stage)

    def tconv_bn_relu(self, x, cout, name, stage, kernel=3):
        y = self.tconv(x, cout, f"{name}.tconv", stage, kernel)
        y = self.bn(y, f"{name}.bn", stage)
        return self.relu(y, f"{name}.relu", stage)

    def set_outputs(self, names):
        for n in names:
            if self.scale[n] != 1:
                raise GraphError(f"output {n!r} is not at input resolution")
        self.outputs = list(names)

    def kernel_params(self):
        return {n: p for n, p in self.params.items() if self.param_info[n][1] == "kernel"}

    def astype(self, dtype):
        """Copy of the graph with parameters and buffers cast to ``dtype``."""
        other = object.__new__(NetworkGraph)
        other.__dict__.update(self.__dict__)
        other.dtype = np.dtype(dtype)
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        other.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        other._cache = None
        return other

    # ------------------------------------------------------------ execution

    def forward(self, x, mode=TRAIN):
        return forward(self, x, mode)


def _consumers(g):
    count = {n.name: 0 for n in g.nodes}
    for n in g.nodes:
        for src in n.inputs:
            count[src] += 1
    for o in g.outputs:
        count[o] += 1
    return count


def forward(g: NetworkGraph, x, mode=TRAIN):
    """Run the graph on an NHWC batch; returns the list of output logits.

    The first output is the primary segmentation; deep-supervision heads
    follow. Train mode keeps the per-node caches for :func:`backward` and
    uses batch statistics in batchnorm.
    """
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be {TRAIN!r} or {INFER!r}")
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[3] != g.input_channels:
        raise GraphError(f"expected input (B, H, W, {g.input_channels}), got {x.shape}")
    div = g.min_divisor
    if x.shape[1] % div or x.shape[2] % div:
        raise GraphError(f"input spatial size {x.shape[1:3]} must be divisible by {div}")
    if not g.outputs:
        raise GraphError("graph has no outputs")
    train = mode == TRAIN
    x = x.astype(g.dtype, copy=False)
    values = {"input": x}
    caches = {}
    remaining = _consumers(g)
    for node in g.nodes[1:]:
        ins = [values[s] for s in node.inputs]
        p = [g.params[n] for n in node.params]
        k = node.kind
        if k == "conv":
            out, cache = L.conv_forward(ins[0], *p, keep_cols=train)
        elif k == "tconv":
            out, cache = L.tconv_forward(ins[0], *p)
        elif k == "bn":
            out, cache = L.bn_forward(ins[0], p[0], p[1], g.buffers[f"{node.name}.mean"],
                                      g.buffers[f"{node.name}.var"], train, g.bn_momentum)
        elif k == "relu":
            out, cache = L.relu_forward(ins[0])
        elif k == "maxpool":
            out, cache = L.maxpool_forward(ins[0], node.attrs["factor"])
        elif k == "up_nearest":
            out, cache = L.upsample_nearest_forward(ins[0], node.attrs["factor"]), None
        elif k == "up_bilinear":
            out, cache = L.upsample_bilinear_forward(ins[0], node.attrs["factor"])
        elif k == "concat":
            out = np.concatenate(ins, axis=-1)
            cache = [a.shape[-1] for a in ins]
        else:
            raise GraphError(f"unknown node kind {k!r}")
        values[node.name] = out
        if train:
            caches[node.name] = cache
        else:
            for s in node.inputs:
                remaining[s] -= 1
                if remaining[s] == 0:
                    del values[s]
    g._cache = caches if train else None
    return [values[o] for o in g.outputs]


def loss(logits, target, params=None, l2=0.0) -> LossValue:
    """Mean cross-entropy (averaged over outputs under deep supervision) + ``l2 * sum ||w||^2``.

    ``params`` are the arrays the L2 term covers (normally the conv kernels).
    """
    outs = list(logits) if isinstance(logits, (list, tuple)) else [logits]
    data, grads = 0.0, []
    for out in outs:
        v, d = L.cross_entropy(out, target)
        data += v / len(outs)
        grads.append(d / len(outs))
    reg, names = 0.0, ()
    if l2 and params:
        reg = l2 * float(sum(np.sum(np.square(p, dtype=np.float64)) for p in params.values()))
        names = tuple(params)
    return LossValue(data + reg, data, grads, l2 if names else 0.0, names)


def backward(g: NetworkGraph, lossval: LossValue):
    """Exact reverse-mode gradients of ``lossval`` for every parameter of ``g``."""
    if g._cache is None:
        raise GraphError("backward called before a train-mode forward")
    if len(lossval.dlogits) != len(g.outputs):
        raise GraphError("loss does not match the graph outputs")
    caches = g._cache
    grads = {n: np.zeros_like(p) for n, p in g.params.items()}
    upstream = {}
    for name, d in zip(g.outputs, lossval.dlogits):
        d = d.astype(g.dtype, copy=False)
        upstream[name] = upstream[name] + d if name in upstream else d
    for node in reversed(g.nodes[1:]):
        dout = upstream.pop(node.name, None)
        if dout is None:
            continue
        cache = caches[node.name]
        k = node.kind
        if k == "conv":
            dx, dw, db = L.conv_backward(dout, cache, g.params[node.params[0]])
            grads[node.params[0]] += dw
            grads[node.params[1]] += db
            dins = [dx]
        elif k == "tconv":
            dx, dw, db = L.tconv_backward(dout, cache, g.params[node.params[0]])
            grads[node.params[0]] += dw
            grads[node.params[1]] += db
            dins = [dx]
        elif k == "bn":
            dx, dgamma, dbeta = L.bn_backward(dout, cache, g.params[node.params[0]])
            grads[node.params[0]] += dgamma
            grads[node.params[1]] += dbeta
            dins = [dx]
        elif k == "relu":
            dins = [L.relu_backward(dout, cache)]
        elif k == "maxpool":
            dins = [L.maxpool_backward(dout, cache, node.attrs["factor"])]
        elif k == "up_nearest":
            dins = [L.upsample_nearest_backward(dout, node.attrs["factor"])]
        elif k == "up_bilinear":
            dins = [L.upsample_bilinear_backward(dout, cache)]
        elif k == "concat":
            splits = np.cumsum(cache)[:-1]
            dins = np.split(dout, splits, axis=-1)
        else:
            raise GraphError(f"unknown node kind {k!r}")
        for src, d in zip(node.inputs, dins):
            if src == "input":
                continue
            upstream[src] = upstream[src] + d if src in upstream else d
    for name in lossval.reg_names:
        grads[name] += (2.0 * lossval.l2) * g.params[name]
    return grads


def predict_proba(g: NetworkGraph, x, batch_size=16):
    """Infer-mode softmax of the primary output, batched over the first axis."""
    parts = []
    for start in range(0, len(x), batch_size):
        logits = forward(g, x[start:start + batch_size], INFER)[0]
        parts.append(L.softmax(logits))
    return np.concatenate(parts, axis=0)


def activation_bytes(g: NetworkGraph, height, width):
    """Rough per-sample training memory: every node output kept for backward, plus its gradient."""
    total = 0
    for n in g.nodes:
        s = g.scale[n.name]
        total += g.channels[n.name] * (height // s) * (width // s)
    return 2 * total * g.dtype.itemsize
