"""UNet, UNet2+ (nested) and UNet3+ (full-scale) builders and their parameter accounting.

Levels are numbered ``0 .. N-1`` from full resolution down to the bottleneck;
level ``l`` of the encoder has ``base * 2**(l+1)`` channels, i.e. 64..1024
for ``base = 32, N = 5``. Decoder stage ``j`` (``0 <= j < N-1``) is the
decoder node at level ``j``. Its convolution kernels are tagged ``dec{j}``;
encoder blocks are tagged ``enc{l}``, nested intermediate nodes ``mid{l}.{k}``
and 1x1 output heads ``head``.

Per decoder stage the kernels are laid out so that their sizes are exactly
the closed-form counts returned by :func:`formula_params`:

* ``unet``: 3x3 transposed conv from the level below, then two 3x3 convs on
  ``[skip, upsampled]``.
* ``unet2p``: every nested node is one 3x3 transposed conv from the node
  below-left plus one 3x3 aggregation conv over all same-level predecessors.
* ``unet3p``: one 3x3 conv per scale (``cat_channels`` each) after max-pooling
  finer encoder maps or bilinearly upsampling coarser decoder maps, then a
  3x3 fusion conv over the ``N * cat_channels`` concatenation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .nncore.graph import NetworkGraph

VARIANTS = ("unet", "unet2p", "unet3p")


@dataclass(frozen=True)
class ArchSpec:
    """Architecture hyperparameters; ``num_classes`` counts background too (K+1)."""

    variant: str = "unet2p"
    deep_supervision: bool = False
    levels: int = 5
    base_channels: int = 32
    kernel: int = 3
    input_channels: int = 1
    num_classes: int = 8
    unet_sqrt2_scale: bool = False
    cat_channels: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.base_channels < 1 or self.cat_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")
        if self.deep_supervision and self.variant == "unet":
            raise ValueError("deep supervision is only defined for unet2p and unet3p")
        if self.unet_sqrt2_scale and self.variant != "unet":
            raise ValueError("sqrt(2) filter scaling applies to the unet baseline only")
        if self.num_classes < 2 or self.input_channels < 1:
            raise ValueError("need >= 2 classes and >= 1 input channel")

    @property
    def name(self):
        suffix = " DS" if self.deep_supervision else ""
        return {"unet": "UNet", "unet2p": "UNet2+", "unet3p": "UNet3+"}[self.variant] + suffix

    def to_dict(self):
        return asdict(self)


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def encoder_channels(spec: ArchSpec):
    scale = math.sqrt(2.0) if spec.unet_sqrt2_scale else 1.0
    return [_round_half_up(spec.base_channels * 2 ** (level + 1) * scale)
            for level in range(spec.levels)]


def decoder_channels(spec: ArchSpec):
    """Depth of the decoder node at each level; the bottleneck doubles as the deepest one."""
    enc = encoder_channels(spec)
    if spec.variant == "unet3p":
        dec = [spec.cat_channels * spec.levels] * (spec.levels - 1)
    else:
        dec = enc[:-1]
    return dec + [enc[-1]]


def formula_params(spec: ArchSpec, j):
    """Closed-form convolution-kernel count of decoder stage ``j`` (no biases/batchnorm)."""
    n = spec.levels
    if not 0 <= j < n - 1:
        raise ValueError(f"decoder stage {j} out of range [0, {n - 2}]")
    f2 = spec.kernel * spec.kernel
    enc, dec = encoder_channels(spec), decoder_channels(spec)
    if spec.variant == "unet":
        return f2 * (dec[j] * dec[j + 1] + dec[j] ** 2 + (enc[j] + dec[j]) * dec[j])
    if spec.variant == "unet2p":
        intermediates = n - 2 - j
        return f2 * (dec[j + 1] * dec[j] + (enc[j] + intermediates * dec[j] + dec[j]) * dec[j])
    finer = sum(enc[: j + 1])
    coarser = sum(dec[j + 1:])
    return f2 * ((finer + coarser) * spec.cat_channels + dec[j] ** 2)


# ------------------------------------------------------------------ builders

def _encoder(g, spec, enc):
    feats, x = [], g.input
    for level, c in enumerate(enc):
        stage = f"enc{level}"
        if level:
            x = g.maxpool(x, f"enc{level}.pool")
        x = g.conv_bn_relu(x, c, f"enc{level}.0", stage, spec.kernel)
        x = g.conv_bn_relu(x, c, f"enc{level}.1", stage, spec.kernel)
        feats.append(x)
    return feats


def _head(g, x, spec, name, level):
    y = g.conv(x, spec.num_classes, name, "head", kernel=1)
    if level:
        y = g.upsample(y, f"{name}.up", 2 ** level, "bilinear", "head")
    return y


def _build_unet(g, spec):
    enc = encoder_channels(spec)
    dec = decoder_channels(spec)
    feats = _encoder(g, spec, enc)
    below = feats[-1]
    for j in range(spec.levels - 2, -1, -1):
        stage = f"dec{j}"
        up = g.tconv_bn_relu(below, dec[j], f"dec{j}.up", stage, spec.kernel)
        x = g.concat([feats[j], up], f"dec{j}.cat", stage)
        x = g.conv_bn_relu(x, dec[j], f"dec{j}.0", stage, spec.kernel)
        below = g.conv_bn_relu(x, dec[j], f"dec{j}.1", stage, spec.kernel)
    return [_head(g, below, spec, "head", 0)]


def _build_unet2p(g, spec):
    n = spec.levels
    enc = encoder_channels(spec)
    grid = [[f] for f in _encoder(g, spec, enc)]
    for k in range(1, n):
        for i in range(0, n - k):
            stage = f"dec{i}" if k == n - 1 - i else f"mid{i}.{k}"
            name = f"x{i}.{k}"
            up = g.tconv_bn_relu(grid[i + 1][k - 1], enc[i], f"{name}.up", stage, spec.kernel)
            x = g.concat(grid[i][:k] + [up], f"{name}.cat", stage)
            grid[i].append(g.conv_bn_relu(x, enc[i], f"{name}.agg", stage, spec.kernel))
    outputs = [_head(g, grid[0][n - 1], spec, "head", 0)]
    if spec.deep_supervision:
        for i in range(n - 1):
            for k in range(1, n - i):
                if (i, k) != (0, n - 1):
                    outputs.append(_head(g, grid[i][k], spec, f"head.x{i}.{k}", i))
    return outputs


def _build_unet3p(g, spec):
    n = spec.levels
    enc = encoder_channels(spec)
    dec = decoder_channels(spec)
    feats = _encoder(g, spec, enc)
    decoded = {n - 1: feats[-1]}
    for j in range(n - 2, -1, -1):
        stage = f"dec{j}"
        branches = []
        for m in range(0, j + 1):
            src = feats[m]
            if m < j:
                src = g.maxpool(src, f"dec{j}.pool{m}", 2 ** (j - m), stage)
            branches.append(g.conv_bn_relu(src, spec.cat_channels, f"dec{j}.en{m}", stage,
                                           spec.kernel))
        for m in range(j + 1, n):
            src = g.upsample(decoded[m], f"dec{j}.up{m}", 2 ** (m - j), "bilinear", stage)
            branches.append(g.conv_bn_relu(src, spec.cat_channels, f"dec{j}.de{m}", stage,
                                           spec.kernel))
        x = g.concat(branches, f"dec{j}.cat", stage)
        decoded[j] = g.conv_bn_relu(x, dec[j], f"dec{j}.fuse", stage, spec.kernel)
    outputs = [_head(g, decoded[0], spec, "head", 0)]
    if spec.deep_supervision:
        for j in range(1, n - 1):
            outputs.append(_head(g, decoded[j], spec, f"head.dec{j}", j))
    return outputs


_BUILDERS = {"unet": _build_unet, "unet2p": _build_unet2p, "unet3p": _build_unet3p}


def build(spec: ArchSpec, seed=0, dtype=np.float32, materialize=True) -> NetworkGraph:
    """Construct the graph for ``spec``.

    With ``materialize=False`` parameters are zero-stride placeholders: shapes
    and counts are exact but nothing is allocated, which keeps accounting of
    the 60M-parameter configurations cheap.
    """
    g = NetworkGraph(spec.input_channels, dtype=dtype, seed=seed)
    if not materialize:
        def _shape_only(name, array, stage, role, _g=g):
            shape = np.shape(array)
            _g.params[name] = np.broadcast_to(np.zeros((), dtype=_g.dtype), shape)
            _g.param_info[name] = (stage, role)
            return name
        g._param = _shape_only
        g.rng = _ShapeRng()
    outputs = _BUILDERS[spec.variant](g, spec)
    g.set_outputs(outputs)
    g.spec = spec
    return g


class _ShapeRng:
    """Stands in for the init RNG when only shapes are needed."""

    def normal(self, loc, scale, size):
        return np.broadcast_to(np.zeros(()), size)


# ---------------------------------------------------------------- accounting

def count_params(g: NetworkGraph):
    """Total trainable parameters and a per-stage ``{stage: {role: count}}`` breakdown.

    Roles are ``kernel`` (conv/transposed-conv weights), ``bias`` and ``bn``.
    """
    breakdown = {}
    total = 0
    for name, p in g.params.items():
        stage, role = g.param_info[name]
        n = int(np.prod(p.shape))
        total += n
        entry = breakdown.setdefault(stage, {"kernel": 0, "bias": 0, "bn": 0})
        entry[role] += n
    return total, breakdown


def audit(spec: ArchSpec, g: NetworkGraph | None = None):
    """Rows of ``(stage, formula, graph, delta)`` for every decoder stage."""
    g = g if g is not None else build(spec, materialize=False)
    _, breakdown = count_params(g)
    rows = []
    for j in range(spec.levels - 1):
        formula = formula_params(spec, j)
        graph = breakdown[f"dec{j}"]["kernel"]
        rows.append({"stage": j, "formula": formula, "graph": graph, "delta": graph - formula})
    return rows
