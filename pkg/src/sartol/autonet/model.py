"""Layer graphs, parameter initialization and the forward/backward passes.

A :class:`ModelSpec` is an ordered list of :class:`LayerSpec` nodes.  Each
node names its inputs (``"input"`` is the image batch), so skip and
residual connections are plain multi-input nodes.  Node kinds:

``conv``             k x k convolution (attrs ``k``, ``out_ch``, ``stride``)
``batch_norm``       per-channel batch normalization
``relu``             rectifier
``maxpool``          2 x 2 max pooling, stride 2
``transposed_conv``  stride-2 4 x 4 transposed convolution (attr ``out_ch``)
``skip_fuse``        two inputs ``(main, source)``; mode ``add_after_1x1``
                     adds a 1 x 1 projection of ``source`` to ``main``,
                     mode ``concat`` stacks channels
``add``              elementwise sum of two inputs (residual join)
``sigmoid_head``     1 x 1 convolution to one channel, then sigmoid

The public batch layout is ``(B, C, H, W)``; layers run channels-last and
convolution weights are stored ``(k, k, C_in, C_out)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import NumericError
from ..rng import SplitMix64
from . import layers as L

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
KINDS = ("conv", "batch_norm", "relu", "maxpool", "transposed_conv", "skip_fuse", "add", "sigmoid_head")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    attrs: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "inputs": list(self.inputs), "attrs": dict(self.attrs)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["name"], d["kind"], tuple(d["inputs"]), dict(d.get("attrs", {})))


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        seen = {"input"}
        for layer in self.layers:
            if layer.kind not in KINDS:
                raise ValueError(f"layer {layer.name}: unknown kind {layer.kind!r}")
            if layer.name in seen:
                raise ValueError(f"duplicate layer name {layer.name!r}")
            for src in layer.inputs:
                if src not in seen:
                    raise ValueError(f"layer {layer.name}: input {src!r} is not defined earlier")
            seen.add(layer.name)
        if not self.layers or self.layers[-1].kind != "sigmoid_head":
            raise ValueError("the last layer must be a sigmoid_head")

    @property
    def output(self) -> str:
        return self.layers[-1].name

    def to_dict(self) -> dict:
        return {"name": self.name, "in_channels": self.in_channels,
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["name"], tuple(LayerSpec.from_dict(x) for x in d["layers"]), d.get("in_channels", 1))

    def trace(self) -> dict[str, tuple[int, int]]:
        """``(channels, downsampling factor)`` of every node's output."""
        info = {"input": (self.in_channels, 1)}
        for layer in self.layers:
            ch, f = info[layer.inputs[0]]
            a = layer.attrs
            if layer.kind == "conv":
                ch, f = a["out_ch"], f * a.get("stride", 1)
            elif layer.kind == "maxpool":
                f *= 2
            elif layer.kind == "transposed_conv":
                ch, f = a["out_ch"], f / 2
            elif layer.kind in ("skip_fuse", "add"):
                ch2, f2 = info[layer.inputs[1]]
                if f2 != f:
                    raise ShapeError(f"layer {layer.name}: joins resolutions 1/{f} and 1/{f2}")
                if layer.kind == "add" and ch2 != ch:
                    raise ShapeError(f"layer {layer.name}: adds {ch} and {ch2} channels")
                if a.get("mode") == "concat":
                    ch += ch2
            elif layer.kind == "sigmoid_head":
                ch = 1
            info[layer.name] = (ch, f)
        return info

    @property
    def downsampling(self) -> int:
        return int(max(f for _, f in self.trace().values()))


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self):
        self.layers: list[LayerSpec] = []

    def add(self, name, kind, inputs, **attrs) -> str:
        if isinstance(inputs, str):
            inputs = (inputs,)
        self.layers.append(LayerSpec(name, kind, tuple(inputs), attrs))
        return name

    def conv_bn_relu(self, name, src, out_ch, k=3, stride=1) -> str:
        x = self.add(name, "conv", src, k=k, out_ch=out_ch, stride=stride)
        x = self.add(name + "_bn", "batch_norm", x)
        return self.add(name + "_relu", "relu", x)

    def residual_unit(self, name, src) -> str:
        """Pre-activation unit: ``src + conv(relu(bn(conv(relu(bn(src))))))``."""
        ch = self.channels(src)
        x = self.add(name + "_bn1", "batch_norm", src)
        x = self.add(name + "_relu1", "relu", x)
        x = self.add(name + "_conv1", "conv", x, k=3, out_ch=ch, stride=1)
        x = self.add(name + "_bn2", "batch_norm", x)
        x = self.add(name + "_relu2", "relu", x)
        x = self.add(name + "_conv2", "conv", x, k=3, out_ch=ch, stride=1)
        return self.add(name, "add", (src, x), residual=True)

    def channels(self, name) -> int:
        spec = ModelSpec("partial", tuple(self.layers) + (LayerSpec("_h", "sigmoid_head", (name,)),))
        return spec.trace()[name][0]


def mini_fcn(widths=(16, 32, 64), decoder_width: int = 16) -> ModelSpec:
    """FCN-8s in miniature.

    Three encoder blocks (two conv-BN-ReLU then 2 x 2 max pooling), a
    conv-BN-ReLU bottleneck at 1/8 resolution, a 1 x 1 score projection and
    three BN-followed transposed convolutions back to full resolution.  The
    first two upsamplings are fused with 1 x 1 projections of the pool-2 and
    pool-1 outputs.
    """
    b = _Builder()
    x = "input"
    pools = []
    for i, w in enumerate(widths, 1):
        x = b.conv_bn_relu(f"enc{i}a", x, w)
        x = b.conv_bn_relu(f"enc{i}b", x, w)
        x = b.add(f"pool{i}", "maxpool", x)
        pools.append(x)
    x = b.conv_bn_relu("bottleneck", x, widths[-1])
    x = b.add("score", "conv", x, k=1, out_ch=decoder_width, stride=1)
    for i, src in enumerate((pools[1], pools[0]), 1):
        x = b.add(f"up{i}", "transposed_conv", x, out_ch=decoder_width)
        x = b.add(f"up{i}_bn", "batch_norm", x)
        x = b.add(f"fuse{i}", "skip_fuse", (x, src), mode="add_after_1x1")
        x = b.add(f"fuse{i}_relu", "relu", x)
    x = b.add("up3", "transposed_conv", x, out_ch=decoder_width)
    x = b.add("up3_bn", "batch_norm", x)
    x = b.add("up3_relu", "relu", x)
    b.add("head", "sigmoid_head", x)
    return ModelSpec("MiniFCN", tuple(b.layers))


def mini_res_unet(widths=(16, 32, 64)) -> ModelSpec:
    """Symmetric three-level residual U-Net.

    Every encoder and decoder block is an entry convolution followed by a
    residual unit; the encoder downsamples with stride-2 convolutions and
    each decoder level concatenates the matching encoder block output.
    """
    b = _Builder()
    x = b.add("enc1_conv", "conv", "input", k=3, out_ch=widths[0], stride=1)
    x = b.residual_unit("enc1", x)
    skips = [x]
    for i, w in enumerate(widths[1:], 2):
        x = b.add(f"enc{i}_conv", "conv", x, k=3, out_ch=w, stride=2)
        x = b.residual_unit(f"enc{i}", x)
        skips.append(x)
    for level in range(len(widths) - 1, 0, -1):
        w = widths[level - 1]
        x = b.add(f"dec{level}_up", "transposed_conv", x, out_ch=w)
        x = b.add(f"dec{level}_up_bn", "batch_norm", x)
        x = b.add(f"dec{level}_cat", "skip_fuse", (x, skips[level - 1]), mode="concat")
        x = b.add(f"dec{level}_conv", "conv", x, k=3, out_ch=w, stride=1)
        x = b.residual_unit(f"dec{level}", x)
    x = b.add("out_bn", "batch_norm", x)
    x = b.add("out_relu", "relu", x)
    b.add("head", "sigmoid_head", x)
    return ModelSpec("MiniResUNet", tuple(b.layers))


PRESETS = {"MiniFCN": mini_fcn, "MiniResUNet": mini_res_unet}


def preset(name: str) -> ModelSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown model {name!r}; expected one of {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Every parameter and buffer, in declaration order."""
    info = spec.trace()
    shapes = {}
    for layer in spec.layers:
        cin = info[layer.inputs[0]][0]
        cout = info[layer.name][0]
        n = layer.name
        if layer.kind == "conv":
            k = layer.attrs["k"]
            shapes[f"{n}.weight"] = (k, k, cin, cout)
            shapes[f"{n}.bias"] = (cout,)
        elif layer.kind == "transposed_conv":
            shapes[f"{n}.weight"] = (4, 4, cin, cout)
            shapes[f"{n}.bias"] = (cout,)
        elif layer.kind == "batch_norm":
            for p in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{n}.{p}"] = (cin,)
        elif layer.kind == "skip_fuse" and layer.attrs["mode"] == "add_after_1x1":
            csrc = info[layer.inputs[1]][0]
            shapes[f"{n}.weight"] = (1, 1, csrc, cin)
            shapes[f"{n}.bias"] = (cin,)
        elif layer.kind == "sigmoid_head":
            shapes[f"{n}.weight"] = (1, 1, cin, 1)
            shapes[f"{n}.bias"] = (1,)
    return shapes


def is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


def trainable(params: dict[str, np.ndarray]) -> list[str]:
    return [n for n in params if not is_buffer(n)]


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-uniform convolutions, bilinear transposed convolutions, zero biases.

    Convolution weights are drawn in declaration order from one SplitMix64
    stream as ``(2u - 1) * sqrt(6 / fan_in)``.  A transposed convolution
    maps input channel ``c`` to output channel ``c`` through the bilinear
    kernel and every other channel pair through zeros.
    """
    rng = SplitMix64(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        kind = name.rsplit(".", 1)[1]
        layer = spec_layer(spec, name)
        if kind == "weight" and layer.kind == "transposed_conv":
            w = np.zeros(shape)
            kern = L.bilinear_kernel(shape[0])
            for c in range(min(shape[2], shape[3])):
                w[:, :, c, c] = kern
        elif kind == "weight":
            fan_in = int(np.prod(shape[:3]))
            limit = math.sqrt(6.0 / fan_in)
            w = (rng.uniform(int(np.prod(shape))) * 2.0 - 1.0).reshape(shape) * limit
        elif kind in ("gamma", "running_var"):
            w = np.ones(shape)
        else:
            w = np.zeros(shape)
        params[name] = w.astype(dtype)
    return params


def spec_layer(spec: ModelSpec, param_name: str) -> LayerSpec:
    layer_name = param_name.rsplit(".", 1)[0]
    for layer in spec.layers:
        if layer.name == layer_name:
            return layer
    raise KeyError(param_name)


def cast_params(params: dict[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: v.astype(dtype) for k, v in params.items()}


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    spec_name: str
    mode: str
    caches: dict[str, Any]
    shapes: dict[str, tuple[int, ...]]
    switches: dict[str, Any] = field(default_factory=dict)


def forward(spec: ModelSpec, params: dict[str, np.ndarray], batch: np.ndarray, mode: str = "train",
            update_stats: bool = True, switches: dict | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Run the graph on a ``(B, C, H, W)`` batch; returns predictions in (0, 1).

    In ``train`` mode batch normalization uses batch statistics and, unless
    ``update_stats`` is false, folds them into the running averages with
    momentum 0.9 (unbiased variance).  ``infer`` mode uses the running
    averages.

    ``switches`` maps ReLU and max-pool layer names to the active masks and
    pooling winners of an earlier pass (``ForwardCache.switches``); when
    given, those are reused instead of recomputed, which makes the network
    linear in each parameter tensor around that pass.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if batch.ndim != 4 or batch.shape[1] != spec.in_channels:
        raise ShapeError(f"expected a (B, {spec.in_channels}, H, W) batch, got {batch.shape}")
    factor = spec.downsampling
    h, w = batch.shape[2:]
    if h % factor or w % factor:
        raise ShapeError(f"input {h}x{w} is not divisible by the downsampling factor {factor}")
    train = mode == "train"
    values = {"input": np.ascontiguousarray(batch.transpose(0, 2, 3, 1))}
    caches: dict[str, Any] = {}
    sw: dict[str, Any] = {}
    for layer in spec.layers:
        x = values[layer.inputs[0]]
        n = layer.name
        k = layer.kind
        if k == "conv":
            out, c = L.conv_forward(x, params[f"{n}.weight"], params[f"{n}.bias"], layer.attrs.get("stride", 1))
        elif k == "transposed_conv":
            out, c = L.tconv_forward(x, params[f"{n}.weight"], params[f"{n}.bias"])
        elif k == "batch_norm":
            if train:
                out, c = L.bn_forward(x, params[f"{n}.gamma"], params[f"{n}.beta"], eps=BN_EPS)
                if update_stats:
                    _update_running(params, n, c, x.size // x.shape[-1])
            else:
                out, c = L.bn_forward(x, params[f"{n}.gamma"], params[f"{n}.beta"],
                                      params[f"{n}.running_mean"], params[f"{n}.running_var"], BN_EPS)
        elif k == "relu":
            out, c = L.relu_forward(x, None if switches is None else switches[n])
        elif k == "maxpool":
            out, c = L.maxpool_forward(x, None if switches is None else switches[n][0])
        elif k == "skip_fuse":
            src = values[layer.inputs[1]]
            if layer.attrs["mode"] == "add_after_1x1":
                proj, c = L.conv_forward(src, params[f"{n}.weight"], params[f"{n}.bias"])
                out = x + proj
            else:
                out, c = np.concatenate([x, src], axis=-1), x.shape[-1]
        elif k == "add":
            out, c = x + values[layer.inputs[1]], None
        elif k == "sigmoid_head":
            z, cz = L.conv_forward(x, params[f"{n}.weight"], params[f"{n}.bias"])
            out, cs = L.sigmoid_forward(z)
            c = (cz, cs)
        if out.shape[1:3] != x.shape[1:3] and k not in ("conv", "maxpool", "transposed_conv"):
            raise ShapeError(f"layer {n}: unexpected output shape {out.shape}")
        values[n] = out
        caches[n] = c
        if k in ("relu", "maxpool"):
            sw[n] = c
    pred = values[spec.output].transpose(0, 3, 1, 2)
    if not np.isfinite(pred).all():
        bad = next(l.name for l in spec.layers if not np.isfinite(values[l.name]).all())
        raise NumericError(f"non-finite activations first appear in layer {bad}")
    if pred.shape[2:] != batch.shape[2:]:
        raise ShapeError(f"output {pred.shape} does not match input {batch.shape}")
    shapes = {name: v.shape for name, v in values.items()}
    return pred, ForwardCache(spec.name, mode, caches, shapes, sw)


def _update_running(params, name, cache, n):
    mean, var = cache[4], cache[5]
    unbiased = var * (n / max(n - 1, 1))
    m = params[f"{name}.running_mean"]
    v = params[f"{name}.running_var"]
    m *= BN_MOMENTUM
    m += (1 - BN_MOMENTUM) * mean.astype(m.dtype)
    v *= BN_MOMENTUM
    v += (1 - BN_MOMENTUM) * unbiased.astype(v.dtype)


def backward(spec: ModelSpec, params: dict[str, np.ndarray], cache: ForwardCache,
             dpred: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every trainable parameter given ``dL/dprediction``."""
    if cache.spec_name != spec.name or set(cache.caches) != {l.name for l in spec.layers}:
        raise ValueError("forward cache does not belong to this model spec")
    if cache.mode != "train":
        raise ValueError("backward needs a cache from a train-mode forward pass")
    out_shape = cache.shapes[spec.output]
    if dpred.shape != (out_shape[0], out_shape[3], out_shape[1], out_shape[2]):
        raise ShapeError(f"gradient seed {dpred.shape} does not match prediction shape")
    grads_act = {spec.output: np.ascontiguousarray(dpred.transpose(0, 2, 3, 1))}
    grads: dict[str, np.ndarray] = {}

    def accumulate(name, g):
        if name in grads_act:
            grads_act[name] = grads_act[name] + g
        else:
            grads_act[name] = g

    for layer in reversed(spec.layers):
        n = layer.name
        g = grads_act.pop(n, None)
        if g is None:
            continue
        c = cache.caches[n]
        k = layer.kind
        if k == "conv":
            dx, grads[f"{n}.weight"], grads[f"{n}.bias"] = L.conv_backward(g, c)
        elif k == "transposed_conv":
            dx, grads[f"{n}.weight"], grads[f"{n}.bias"] = L.tconv_backward(g, c)
        elif k == "batch_norm":
            dx, grads[f"{n}.gamma"], grads[f"{n}.beta"] = L.bn_backward(g, c)
        elif k == "relu":
            dx = L.relu_backward(g, c)
        elif k == "maxpool":
            dx = L.maxpool_backward(g, c)
        elif k == "skip_fuse":
            if layer.attrs["mode"] == "add_after_1x1":
                dsrc, grads[f"{n}.weight"], grads[f"{n}.bias"] = L.conv_backward(g, c)
                dx = g
            else:
                dx, dsrc = g[..., :c], g[..., c:]
            accumulate(layer.inputs[1], dsrc)
        elif k == "add":
            dx = g
            accumulate(layer.inputs[1], g)
        elif k == "sigmoid_head":
            cz, cs = c
            dz = L.sigmoid_backward(g, cs)
            dx, grads[f"{n}.weight"], grads[f"{n}.bias"] = L.conv_backward(dz, cz)
        accumulate(layer.inputs[0], dx)
    for name in trainable(params):
        if name not in grads:
            grads[name] = np.zeros_like(params[name])
    return {name: grads[name] for name in trainable(params)}
