"""
plaincnn Network Module
Layer math (conv, max-pool, ReLU, regular/spatial dropout, dense,
softmax cross-entropy), the fixed plain-CNN presets, parameter
initialization, and whole-model forward/backward.

Architectures are plain stacks: 3x3 same-padded convolutions with ReLU,
a 2x2 max-pool after every two convolutions while the feature map can still
be halved, then two equal-width dense layers and a softmax classifier.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import (
    FormatError,
    InvalidParameterError,
    InvalidShapeError,
    ShapeMismatchError,
)
from tensor import KERNEL, TRAIN_DTYPE, col2im, im2col, matmul


LAYER_KINDS = ("conv", "pool", "relu", "dropout", "flatten", "dense", "softmax")
DROPOUT_MODES = ("regular", "spatial")
PARAM_KINDS = ("conv", "dense", "softmax")

PARADIGM_KINDS = ("regular_after_fc", "spatial_at_pools", "combined")
PLACEMENTS = ("before_pool", "after_pool")


# =============================================================================
# ARCHITECTURE DESCRIPTION
# =============================================================================

@dataclass(frozen=True)
class LayerDesc:
    """One layer. `size` is conv out-channels, dense units or class count."""

    kind: str
    size: int = 0
    rate: float = 0.0
    mode: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidParameterError(f"Unknown layer kind: {self.kind!r}")
        if self.kind in ("conv", "dense") and self.size < 1:
            raise InvalidParameterError(f"{self.kind} needs size >= 1, got {self.size}")
        if self.kind == "softmax" and self.size < 2:
            raise InvalidParameterError(f"softmax needs >= 2 classes, got {self.size}")
        if self.kind == "dropout":
            _check_rate(self.rate)
            if self.mode not in DROPOUT_MODES:
                raise InvalidParameterError(f"Unknown dropout mode: {self.mode!r}")

    def to_text(self):
        if self.kind in ("conv", "dense", "softmax"):
            return f"{self.kind} {self.size}"
        if self.kind == "dropout":
            return f"dropout {self.mode} {self.rate!r}"
        return self.kind


@dataclass(frozen=True)
class ArchitectureSpec:
    """A named preset: per-sample input shape [c,h,w] and the ordered layers."""

    name: str
    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise InvalidShapeError(f"input_shape must be [c,h,w], got {list(self.input_shape)}")
        softmax_at = [i for i, layer in enumerate(self.layers) if layer.kind == "softmax"]
        if softmax_at != [len(self.layers) - 1]:
            raise InvalidShapeError(
                f"{self.name}: exactly one softmax classifier is required and it must be last"
            )
        self.shapes()

    def shapes(self):
        """Per-sample output shape of every layer, in order."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            shape = _propagate(layer, shape, i)
            out.append(shape)
        return out

    @property
    def output_classes(self):
        return self.layers[-1].size

    def to_text(self):
        lines = [f"name {self.name}", "input " + " ".join(str(s) for s in self.input_shape)]
        lines.extend(layer.to_text() for layer in self.layers)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        name = None
        input_shape = None
        layers = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            head = parts[0]
            try:
                if head == "name":
                    name = " ".join(parts[1:])
                elif head == "input":
                    input_shape = tuple(int(p) for p in parts[1:])
                elif head in ("conv", "dense", "softmax"):
                    layers.append(LayerDesc(head, size=int(parts[1])))
                elif head == "dropout":
                    layers.append(LayerDesc("dropout", rate=float(parts[2]), mode=parts[1]))
                elif head in ("pool", "relu", "flatten"):
                    layers.append(LayerDesc(head))
                else:
                    raise FormatError(f"line {lineno}: unknown layer {head!r}")
            except (IndexError, ValueError) as e:
                if isinstance(e, FormatError):
                    raise
                raise FormatError(f"line {lineno}: cannot parse {raw.strip()!r} ({e})") from e
        if name is None or input_shape is None:
            raise FormatError("architecture text needs 'name' and 'input' lines")
        return cls(name, input_shape, tuple(layers))


def _check_rate(rate):
    if not 0.0 <= float(rate) < 1.0:
        raise InvalidParameterError(f"Dropout rate must be in [0, 1), got {rate}")
    return float(rate)


def _propagate(layer, shape, index):
    kind = layer.kind
    where = f"layer {index} ({layer.to_text()})"
    if kind == "conv":
        if len(shape) != 3:
            raise InvalidShapeError(f"{where}: needs a [c,h,w] input, got {list(shape)}")
        return (layer.size, shape[1], shape[2])
    if kind == "pool":
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise InvalidShapeError(f"{where}: needs even spatial extents, got {list(shape)}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if kind == "dropout" and layer.mode == "spatial" and len(shape) != 3:
        raise InvalidShapeError(f"{where}: spatial dropout needs a [c,h,w] input")
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind in ("dense", "softmax"):
        if len(shape) != 1:
            raise InvalidShapeError(f"{where}: needs a flat input, got {list(shape)}")
        return (layer.size,)
    return shape


# =============================================================================
# DROPOUT PARADIGMS AND PRESETS
# =============================================================================

@dataclass(frozen=True)
class DropoutParadigm:
    """
    Where dropout goes.

    regular_after_fc  dropout after each dense layer only
    spatial_at_pools  dropout at every pooling stage only
    combined          both

    `spatial_rate` is the pooling-stage rate and `pool_mode` its kind
    (spatial by default; the larger presets use regular dropout there).
    `regular_rate` is the dense-layer rate.
    """

    kind: str = "regular_after_fc"
    spatial_rate: float = 0.0
    regular_rate: float = 0.0
    placement: str = "before_pool"
    pool_mode: str = "spatial"

    def __post_init__(self):
        if self.kind not in PARADIGM_KINDS:
            raise InvalidParameterError(
                f"Unknown dropout paradigm {self.kind!r}; expected one of {', '.join(PARADIGM_KINDS)}"
            )
        if self.placement not in PLACEMENTS:
            raise InvalidParameterError(f"Unknown placement {self.placement!r}")
        if self.pool_mode not in DROPOUT_MODES:
            raise InvalidParameterError(f"Unknown pool dropout mode {self.pool_mode!r}")
        _check_rate(self.spatial_rate)
        _check_rate(self.regular_rate)

    @property
    def at_pools(self):
        return self.kind in ("spatial_at_pools", "combined")

    @property
    def after_fc(self):
        return self.kind in ("regular_after_fc", "combined")


def regular_after_fc(rate):
    return DropoutParadigm("regular_after_fc", regular_rate=rate)


def spatial_at_pools(rate, placement="before_pool"):
    return DropoutParadigm("spatial_at_pools", spatial_rate=rate, placement=placement)


def combined(spatial_rate, regular_rate, placement="before_pool", pool_mode="spatial"):
    return DropoutParadigm(
        "combined", spatial_rate=spatial_rate, regular_rate=regular_rate,
        placement=placement, pool_mode=pool_mode,
    )


# The three rows of the MNIST dropout-placement study.
DROPOUT_STUDY = {
    "regular_after_fc": regular_after_fc(0.4),
    "spatial_at_pools": spatial_at_pools(0.125),
    "combined": combined(0.125, 0.4),
}

# CIFAR / SVHN / STL-10: regular dropout 0.25 after every pool, 0.4 after FC.
LARGE_PRESET_PARADIGM = combined(0.25, 0.4, placement="after_pool", pool_mode="regular")

WIDTHS_11 = [32, 32, 64, 64, 128, 128, 256, 256, 256, 256, 256]
WIDTHS_13 = [32, 32, 64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512]

PRESETS = {
    "mnist": {
        "input_shape": (1, 28, 28), "classes": 10,
        "widths": [32, 32, 64, 64], "fc_width": 2048,
        "paradigm": regular_after_fc(0.8),
    },
    "cifar10": {
        "input_shape": (3, 32, 32), "classes": 10,
        "widths": WIDTHS_11, "fc_width": 1024,
        "paradigm": LARGE_PRESET_PARADIGM,
    },
    "cifar100": {
        "input_shape": (3, 32, 32), "classes": 100,
        "widths": WIDTHS_11, "fc_width": 1024,
        "paradigm": LARGE_PRESET_PARADIGM,
    },
    "svhn": {
        "input_shape": (3, 32, 32), "classes": 10,
        "widths": WIDTHS_11, "fc_width": 1024,
        "paradigm": LARGE_PRESET_PARADIGM,
    },
    "stl10": {
        "input_shape": (3, 96, 96), "classes": 10,
        "widths": WIDTHS_13, "fc_width": 1024,
        "paradigm": LARGE_PRESET_PARADIGM,
    },
}

# Published total for the CIFAR-10 / SVHN network; filter counts were never
# given, so this is shown next to our own count, not matched.
REFERENCE_PARAM_COUNT = 4_252_298

# Published totals per preset as (relation, count); ">" marks a lower bound.
PUBLISHED_PARAM_COUNTS = {
    "mnist": (">", 1_400_000),
    "cifar10": ("=", REFERENCE_PARAM_COUNT),
    "cifar100": (">", REFERENCE_PARAM_COUNT),
    "svhn": ("=", REFERENCE_PARAM_COUNT),
    "stl10": (">", 5_000_000),
}


def build_preset(name, paradigm=None, widths=None, fc_width=None):
    """
    Build the ArchitectureSpec for a preset.

    Parameters:
        name: mnist, cifar10, cifar100, svhn or stl10
        paradigm: DropoutParadigm (default: the preset's own)
        widths: conv channel list override
        fc_width: dense width override
    """
    if name not in PRESETS:
        raise InvalidParameterError(
            f"Unknown preset {name!r}; expected one of {', '.join(PRESETS)}"
        )
    preset = PRESETS[name]
    paradigm = paradigm or preset["paradigm"]
    widths = list(widths or preset["widths"])
    fc_width = int(fc_width or preset["fc_width"])
    c, h, w = preset["input_shape"]

    layers = []
    for i, width in enumerate(widths, 1):
        layers.append(LayerDesc("conv", size=int(width)))
        layers.append(LayerDesc("relu"))
        if i % 2 == 0 and h % 2 == 0 and w % 2 == 0 and min(h, w) // 2 >= 2:
            if paradigm.at_pools and paradigm.placement == "before_pool":
                layers.append(LayerDesc("dropout", rate=paradigm.spatial_rate, mode=paradigm.pool_mode))
            layers.append(LayerDesc("pool"))
            h, w = h // 2, w // 2
            if paradigm.at_pools and paradigm.placement == "after_pool":
                layers.append(LayerDesc("dropout", rate=paradigm.spatial_rate, mode=paradigm.pool_mode))

    layers.append(LayerDesc("flatten"))
    for _ in range(2):
        layers.append(LayerDesc("dense", size=fc_width))
        layers.append(LayerDesc("relu"))
        if paradigm.after_fc:
            layers.append(LayerDesc("dropout", rate=paradigm.regular_rate, mode="regular"))
    layers.append(LayerDesc("softmax", size=preset["classes"]))

    return ArchitectureSpec(name, preset["input_shape"], tuple(layers))


# =============================================================================
# LAYER MATH
# =============================================================================

def conv2d_forward(x, w, b):
    """Same-padded 3x3 cross-correlation: [n,c,h,w] -> [n,oc,h,w]."""
    _check_conv_shapes(x, w, b)
    n, _, h, wd = x.shape
    oc = w.shape[0]
    y = matmul(w.reshape(oc, -1), im2col(x)) + b[:, None]
    return y.reshape(oc, n, h, wd).transpose(1, 0, 2, 3)


def conv2d_backward(x, w, dy):
    """Return (dx, dw, db) for conv2d_forward(x, w, b) given upstream dy."""
    n, _, h, wd = x.shape
    oc = w.shape[0]
    if dy.shape != (n, oc, h, wd):
        raise ShapeMismatchError(f"conv2d_backward: dy {list(dy.shape)} != output {[n, oc, h, wd]}")
    dy2 = dy.transpose(1, 0, 2, 3).reshape(oc, -1)
    db = dy2.sum(axis=1)
    dw = matmul(dy2, im2col(x).T).reshape(w.shape)
    dx = col2im(matmul(w.reshape(oc, -1).T, dy2), x.shape)
    return dx, dw, db


def _check_conv_shapes(x, w, b):
    if x.ndim != 4:
        raise InvalidShapeError(f"conv2d needs [n,c,h,w], got {list(x.shape)}")
    if w.ndim != 4 or w.shape[2:] != (KERNEL, KERNEL):
        raise ShapeMismatchError(f"conv2d weights must be [oc,c,3,3], got {list(w.shape)}")
    if w.shape[1] != x.shape[1]:
        raise ShapeMismatchError(f"conv2d channel mismatch: input has {x.shape[1]}, weights expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatchError(f"conv2d bias must be [{w.shape[0]}], got {list(b.shape)}")


def maxpool2x2_forward(x):
    """
    Disjoint 2x2 max-pool. Returns (y, idx) where idx is the flat input
    position of each max; ties go to the first cell in row-major order.
    """
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise InvalidShapeError(f"maxpool2x2 needs [n,c,h,w] with even h,w, got {list(x.shape)}")
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    k = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, k[..., None], axis=-1)[..., 0]

    ni, ci, ii, jj = np.indices(k.shape)
    idx = ((ni * c + ci) * h + 2 * ii + k // 2) * w + 2 * jj + k % 2
    return y, idx


def maxpool2x2_backward(dy, idx, in_shape):
    """Route each dy value to its recorded argmax cell."""
    in_shape = tuple(in_shape)
    if idx.shape != dy.shape:
        raise ShapeMismatchError(f"maxpool2x2_backward: idx {list(idx.shape)} != dy {list(dy.shape)}")
    n, c, h, w = in_shape
    if dy.shape != (n, c, h // 2, w // 2) or (idx.size and idx.max() >= n * c * h * w):
        raise ShapeMismatchError(f"maxpool2x2_backward: idx/dy inconsistent with input {list(in_shape)}")
    dx = np.zeros(n * c * h * w, dtype=dy.dtype)
    dx[idx.ravel()] = dy.ravel()
    return dx.reshape(in_shape)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    # Gradient at exactly 0 is 0.
    return np.where(x > 0, dy, 0).astype(dy.dtype, copy=False)


def dropout_forward(x, rate, mode, rng, training):
    """
    Inverted dropout. Returns (y, mask).

    Regular mode draws keep/drop per element; spatial mode draws once per
    (batch, channel) and the mask has shape [n, c, 1, 1]. Kept values are
    scaled by 1/(1-rate), so inference is the identity.
    """
    rate = _check_rate(rate)
    if mode not in DROPOUT_MODES:
        raise InvalidParameterError(f"Unknown dropout mode: {mode!r}")
    if mode == "spatial" and x.ndim != 4:
        raise InvalidShapeError(f"Spatial dropout needs [n,c,h,w], got {list(x.shape)}")

    mask_shape = x.shape if mode == "regular" else x.shape[:2] + (1, 1)
    if not training or rate == 0.0:
        return x, np.ones(mask_shape, dtype=x.dtype)
    if rng is None:
        raise ValueError("dropout_forward in training mode needs an rng")

    keep = rng.random(mask_shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(dy, mask):
    if mask.ndim != dy.ndim or any(m not in (1, d) for m, d in zip(mask.shape, dy.shape)):
        raise ShapeMismatchError(f"dropout_backward: mask {list(mask.shape)} does not fit dy {list(dy.shape)}")
    return dy * mask


def dense_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatchError(
            f"dense: x {list(x.shape)}, w {list(w.shape)}, b {list(b.shape)} are inconsistent"
        )
    return matmul(x, w) + b


def dense_backward(x, w, dy):
    """Return (dx, dw, db)."""
    if dy.shape != (x.shape[0], w.shape[1]):
        raise ShapeMismatchError(f"dense_backward: dy {list(dy.shape)} != output {[x.shape[0], w.shape[1]]}")
    return matmul(dy, w.T), matmul(x.T, dy), dy.sum(axis=0)


def softmax_cross_entropy(logits, labels):
    """Return (mean loss, probs). Softmax is computed with max-subtraction."""
    labels = _check_labels(labels, logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(len(labels)), labels].mean()
    return float(loss), np.exp(log_probs)


def softmax_cross_entropy_backward(probs, labels, n):
    labels = _check_labels(labels, probs)
    if probs.shape[0] != n:
        raise ShapeMismatchError(f"softmax backward: batch {probs.shape[0]} != n {n}")
    d = probs.copy()
    d[np.arange(n), labels] -= 1
    return d / d.dtype.type(n)


def _check_labels(labels, logits):
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(f"labels {list(labels.shape)} do not match logits {list(logits.shape)}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InvalidParameterError(
            f"label out of range [0, {logits.shape[1]}): min {labels.min()}, max {labels.max()}"
        )
    return labels


# =============================================================================
# PARAMETERS
# =============================================================================

def parameter_shapes(spec):
    """{layer_index: {"w": shape, "b": shape}} for every parameterized layer."""
    shapes = {}
    in_shape = spec.input_shape
    for i, (layer, out_shape) in enumerate(zip(spec.layers, spec.shapes())):
        if layer.kind == "conv":
            shapes[i] = {"w": (layer.size, in_shape[0], KERNEL, KERNEL), "b": (layer.size,)}
        elif layer.kind in ("dense", "softmax"):
            shapes[i] = {"w": (in_shape[0], layer.size), "b": (layer.size,)}
        in_shape = out_shape
    return shapes


def init_parameters(spec, rng, dtype=TRAIN_DTYPE):
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases."""
    params = {}
    for i, shapes in parameter_shapes(spec).items():
        w_shape = shapes["w"]
        fan_in = int(np.prod(w_shape[1:])) if len(w_shape) == 4 else w_shape[0]
        w = rng.standard_normal(w_shape) * np.sqrt(2.0 / fan_in)
        params[i] = {"w": w.astype(dtype), "b": np.zeros(shapes["b"], dtype=dtype)}
    return params


def copy_parameters(params):
    return {i: {k: v.copy() for k, v in p.items()} for i, p in params.items()}


def count_parameters(spec):
    """Total scalar weights + biases."""
    return int(sum(np.prod(s) for shapes in parameter_shapes(spec).values() for s in shapes.values()))


def parameter_table(spec):
    """One row per layer: index, layer, output shape, parameter count."""
    pshapes = parameter_shapes(spec)
    rows = []
    for i, (layer, out_shape) in enumerate(zip(spec.layers, spec.shapes())):
        count = sum(int(np.prod(s)) for s in pshapes.get(i, {}).values())
        rows.append({
            "index": i,
            "layer": layer.to_text(),
            "output_shape": "x".join(str(s) for s in out_shape),
            "params": count,
        })
    return pd.DataFrame(rows, columns=["index", "layer", "output_shape", "params"])


# =============================================================================
# WHOLE MODEL
# =============================================================================

@dataclass
class ForwardCache:
    """What backward needs, one dict per executed layer."""

    spec: ArchitectureSpec
    entries: list
    output_shape: tuple

    @property
    def masks(self):
        return {i: e["mask"] for i, e in enumerate(self.entries) if "mask" in e}


def model_forward(spec, params, x, training=False, rng=None, masks=None):
    """
    Run every layer in order. Returns (logits, cache).

    The cache is None in eval mode. `masks` ({layer_index: mask}) replays
    fixed dropout masks instead of drawing new ones.
    """
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeMismatchError(
            f"{spec.name}: input {list(x.shape)} does not match [n, {', '.join(map(str, spec.input_shape))}]"
        )
    masks = masks or {}
    entries = []
    out = x
    for i, layer in enumerate(spec.layers):
        entry = {}
        kind = layer.kind
        if kind == "conv":
            entry["x"] = out
            out = conv2d_forward(out, params[i]["w"], params[i]["b"])
        elif kind == "pool":
            entry["in_shape"] = out.shape
            out, entry["idx"] = maxpool2x2_forward(out)
        elif kind == "relu":
            entry["x"] = out
            out = relu_forward(out)
        elif kind == "dropout":
            if not training:
                pass
            elif i in masks:
                entry["mask"] = masks[i]
                out = out * masks[i]
            else:
                out, entry["mask"] = dropout_forward(out, layer.rate, layer.mode, rng, True)
        elif kind == "flatten":
            entry["in_shape"] = out.shape
            out = out.reshape(out.shape[0], -1)
        elif kind in ("dense", "softmax"):
            entry["x"] = out
            out = dense_forward(out, params[i]["w"], params[i]["b"])
        if training:
            entries.append(entry)

    cache = ForwardCache(spec, entries, out.shape) if training else None
    return out, cache


def model_backward(spec, params, cache, upstream):
    """Chain rule through the cached layers in reverse. Returns gradients shaped like params."""
    if cache is None or cache.spec != spec or len(cache.entries) != len(spec.layers):
        raise ShapeMismatchError(f"{spec.name}: missing or stale forward cache (run a training-mode forward first)")
    if upstream.shape != cache.output_shape:
        raise ShapeMismatchError(f"upstream {list(upstream.shape)} != logits {list(cache.output_shape)}")

    grads = {}
    d = upstream
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        entry = cache.entries[i]
        kind = layer.kind
        if kind == "conv":
            d, dw, db = conv2d_backward(entry["x"], params[i]["w"], d)
            grads[i] = {"w": dw, "b": db}
        elif kind == "pool":
            d = maxpool2x2_backward(d, entry["idx"], entry["in_shape"])
        elif kind == "relu":
            d = relu_backward(d, entry["x"])
        elif kind == "dropout":
            if "mask" in entry:
                d = dropout_backward(d, entry["mask"])
        elif kind == "flatten":
            d = d.reshape(entry["in_shape"])
        elif kind in ("dense", "softmax"):
            d, dw, db = dense_backward(entry["x"], params[i]["w"], d)
            grads[i] = {"w": dw, "b": db}
    return grads
