"""Minimal sequential CNN engine: forward pass, exact backward pass to a tapped
layer or to the input.

Everything runs on float64 NumPy arrays without a batch dimension; images are
``(C, H, W)``. Contractions go through ``np.einsum`` without path optimisation
so no BLAS call is involved and results are bit-reproducible across threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import StructuralError, ValidationError

LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "globalavgpool", "flatten", "linear")
PARAM_KINDS = ("conv2d", "linear")

_REQUIRED_PARAMS = {
    "conv2d": ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "padding"),
    "maxpool2d": ("kernel", "stride"),
    "linear": ("in_features", "out_features"),
    "relu": (),
    "globalavgpool": (),
    "flatten": (),
}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    params: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise StructuralError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        missing = [p for p in _REQUIRED_PARAMS[self.kind] if p not in self.params]
        if missing:
            raise StructuralError(f"layer {self.name!r}: missing params {missing}")
        params = {k: int(v) for k, v in self.params.items()}
        for key in ("stride", "kernel", "kernel_h", "kernel_w", "in_channels",
                    "out_channels", "in_features", "out_features"):
            if key in params and params[key] < 1:
                raise StructuralError(f"layer {self.name!r}: {key} must be >= 1")
        if params.get("padding", 0) < 0:
            raise StructuralError(f"layer {self.name!r}: padding must be >= 0")
        object.__setattr__(self, "params", MappingProxyType(params))

    def weight_shape(self) -> tuple[int, ...] | None:
        p = self.params
        if self.kind == "conv2d":
            return (p["out_channels"], p["in_channels"], p["kernel_h"], p["kernel_w"])
        if self.kind == "linear":
            return (p["out_features"], p["in_features"])
        return None

    def bias_shape(self) -> tuple[int, ...] | None:
        if self.kind == "conv2d":
            return (self.params["out_channels"],)
        if self.kind == "linear":
            return (self.params["out_features"],)
        return None


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


class ModelBundle:
    """A validated, immutable sequential network.

    ``weights`` maps a layer name to ``{"weight": array, "bias": array}``; the
    bias entry may be absent. Construction checks parameter shapes, finiteness and
    that the layers compose from ``input_shape`` down to ``class_count`` logits.
    """

    def __init__(self, layers, weights, input_shape, class_count):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.class_count = int(class_count)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise StructuralError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.class_count < 1:
            raise StructuralError("class_count must be positive")

        names = [layer.name for layer in self.layers]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise StructuralError(f"duplicate layer names: {dupes}")
        unknown = sorted(set(weights) - set(names))
        if unknown:
            raise StructuralError(f"weights given for unknown layers: {unknown}")

        frozen = {}
        for layer in self.layers:
            if layer.kind not in PARAM_KINDS:
                if weights.get(layer.name):
                    raise StructuralError(f"layer {layer.name!r} ({layer.kind}) takes no parameters")
                continue
            entry = weights.get(layer.name) or {}
            if entry.get("weight") is None:
                raise StructuralError(f"layer {layer.name!r}: missing weight")
            w = _frozen(entry["weight"])
            if w.shape != layer.weight_shape():
                raise StructuralError(
                    f"layer {layer.name!r}: weight shape {w.shape} != declared {layer.weight_shape()}")
            params = {"weight": w}
            if entry.get("bias") is not None:
                b = _frozen(entry["bias"])
                if b.shape != layer.bias_shape():
                    raise StructuralError(
                        f"layer {layer.name!r}: bias shape {b.shape} != declared {layer.bias_shape()}")
                params["bias"] = b
            for key, arr in params.items():
                if not np.all(np.isfinite(arr)):
                    raise ValidationError(f"layer {layer.name!r}: non-finite {key}")
            frozen[layer.name] = MappingProxyType(params)
        self.weights = MappingProxyType(frozen)

        if not self.layers:
            raise StructuralError("model has no layers")
        self.shapes = infer_shapes(self.layers, self.input_shape)
        if self.shapes[-1] != (self.class_count,):
            raise StructuralError(
                f"network output shape {self.shapes[-1]} != ({self.class_count},) logits")
        self._index = {layer.name: i for i, layer in enumerate(self.layers)}

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise StructuralError(f"unknown layer {name!r}") from None

    def layer(self, name: str) -> LayerSpec:
        return self.layers[self.index_of(name)]

    def last_conv(self) -> str:
        convs = [layer.name for layer in self.layers if layer.kind == "conv2d"]
        if not convs:
            raise StructuralError("model has no conv2d layer")
        return convs[-1]

    @property
    def has_bias(self) -> bool:
        return any("bias" in p for p in self.weights.values())

    def __repr__(self):
        kinds = ", ".join(f"{l.name}:{l.kind}" for l in self.layers)
        return f"ModelBundle(input_shape={self.input_shape}, classes={self.class_count}, [{kinds}])"


def infer_shapes(layers, input_shape) -> list[tuple[int, ...]]:
    """Output shape of every layer, raising a StructuralError naming the first
    layer whose input does not fit."""
    shapes = []
    shape = tuple(input_shape)
    for layer in layers:
        p = layer.params
        if layer.kind == "conv2d":
            if len(shape) != 3 or shape[0] != p["in_channels"]:
                raise StructuralError(
                    f"layer {layer.name!r}: expects ({p['in_channels']}, H, W) input, got {shape}")
            h = (shape[1] + 2 * p["padding"] - p["kernel_h"]) // p["stride"] + 1
            w = (shape[2] + 2 * p["padding"] - p["kernel_w"]) // p["stride"] + 1
            if h < 1 or w < 1:
                raise StructuralError(f"layer {layer.name!r}: kernel larger than padded input {shape}")
            shape = (p["out_channels"], h, w)
        elif layer.kind == "maxpool2d":
            if len(shape) != 3:
                raise StructuralError(f"layer {layer.name!r}: expects (C, H, W) input, got {shape}")
            h = (shape[1] - p["kernel"]) // p["stride"] + 1
            w = (shape[2] - p["kernel"]) // p["stride"] + 1
            if h < 1 or w < 1:
                raise StructuralError(f"layer {layer.name!r}: pool window larger than input {shape}")
            shape = (shape[0], h, w)
        elif layer.kind == "globalavgpool":
            if len(shape) != 3:
                raise StructuralError(f"layer {layer.name!r}: expects (C, H, W) input, got {shape}")
            shape = (shape[0],)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "linear":
            if shape != (p["in_features"],):
                raise StructuralError(
                    f"layer {layer.name!r}: expects flat ({p['in_features']},) input, got {shape}")
            shape = (p["out_features"],)
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------------
# layer kernels


def _conv2d_forward(x, w, b, stride, padding):
    out_c, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((out_c, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += np.einsum("oc,chw->ohw", w[:, :, i, j], patch)
    if b is not None:
        out += b[:, None, None]
    return out


def _conv2d_backward(grad, x_shape, w, stride, padding):
    _, _, kh, kw = w.shape
    c, h, wd = x_shape
    gxp = np.zeros((c, h + 2 * padding, wd + 2 * padding))
    ho, wo = grad.shape[1:]
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                np.einsum("oc,ohw->chw", w[:, :, i, j], grad)
    if padding:
        gxp = gxp[:, padding:padding + h, padding:padding + wd]
    return gxp


def _maxpool_forward(x, k, s):
    c = x.shape[0]
    ho = (x.shape[1] - k) // s + 1
    wo = (x.shape[2] - k) // s + 1
    best = np.full((c, ho, wo), -np.inf)
    arg = np.zeros((c, ho, wo), dtype=np.int64)
    # row-major scan with strict '>' keeps the first maximal element
    for i in range(k):
        for j in range(k):
            cand = x[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
            better = cand > best
            best = np.where(better, cand, best)
            arg = np.where(better, i * k + j, arg)
    return best, arg


def _maxpool_backward(grad, arg, x_shape, k, s):
    gx = np.zeros(x_shape)
    ho, wo = grad.shape[1:]
    for i in range(k):
        for j in range(k):
            gx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                np.where(arg == i * k + j, grad, 0.0)
    return gx


def _layer_forward(model: ModelBundle, layer: LayerSpec, x):
    """Returns (output, cache) where cache holds whatever backward needs."""
    p = layer.params
    if layer.kind == "conv2d":
        wts = model.weights[layer.name]
        return _conv2d_forward(x, wts["weight"], wts.get("bias"), p["stride"], p["padding"]), None
    if layer.kind == "relu":
        return np.maximum(x, 0.0), None
    if layer.kind == "maxpool2d":
        return _maxpool_forward(x, p["kernel"], p["stride"])
    if layer.kind == "globalavgpool":
        return x.mean(axis=(1, 2)), None
    if layer.kind == "flatten":
        return x.reshape(-1), None
    wts = model.weights[layer.name]
    y = np.einsum("oi,i->o", wts["weight"], x)
    if "bias" in wts:
        y = y + wts["bias"]
    return y, None


def _layer_backward(model: ModelBundle, layer: LayerSpec, x, cache, grad):
    p = layer.params
    if layer.kind == "conv2d":
        return _conv2d_backward(grad, x.shape, model.weights[layer.name]["weight"],
                                p["stride"], p["padding"])
    if layer.kind == "relu":
        return np.where(x > 0.0, grad, 0.0)
    if layer.kind == "maxpool2d":
        return _maxpool_backward(grad, cache, x.shape, p["kernel"], p["stride"])
    if layer.kind == "globalavgpool":
        hw = x.shape[1] * x.shape[2]
        return np.broadcast_to((grad / hw)[:, None, None], x.shape).copy()
    if layer.kind == "flatten":
        return grad.reshape(x.shape)
    return np.einsum("oi,o->i", model.weights[layer.name]["weight"], grad)


# ---------------------------------------------------------------------------
# public API


@dataclass(frozen=True)
class TapResult:
    logits: np.ndarray
    probabilities: np.ndarray
    tapped_activations: np.ndarray
    tapped_gradients: np.ndarray
    tap_layer: str
    class_index: int


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def _check_input(model: ModelBundle, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise StructuralError(f"input shape {x.shape} != model input_shape {model.input_shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("input contains non-finite values")
    return x


def _check_class(model: ModelBundle, class_index) -> int:
    c = int(class_index)
    if not 0 <= c < model.class_count:
        raise ValidationError(f"class index {c} outside [0, {model.class_count})")
    return c


def _run(model, x, start=0):
    """Forward from layer ``start`` (whose input is ``x``); keeps inputs and caches."""
    inputs, caches = [], []
    for layer in model.layers[start:]:
        inputs.append(x)
        x, cache = _layer_forward(model, layer, x)
        caches.append(cache)
    return x, inputs, caches


def _backprop(model, inputs, caches, class_index, stop):
    """Gradient of logit ``class_index`` w.r.t. the input of layer ``stop``."""
    grad = np.zeros(model.class_count)
    grad[class_index] = 1.0
    offset = len(model.layers) - len(inputs)
    for idx in range(len(model.layers) - 1, stop - 1, -1):
        layer = model.layers[idx]
        grad = _layer_backward(model, layer, inputs[idx - offset], caches[idx - offset], grad)
    return grad


def forward(model: ModelBundle, x) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Run the network; returns the logits and every layer's output by name."""
    x = _check_input(model, x)
    activations = {}
    for layer in model.layers:
        x, _ = _layer_forward(model, layer, x)
        activations[layer.name] = x
    return x, activations


def logits(model: ModelBundle, x) -> np.ndarray:
    out, _, _ = _run(model, _check_input(model, x))
    return out


def forward_from(model: ModelBundle, layer_name: str, activation) -> np.ndarray:
    """Logits obtained by injecting ``activation`` as the output of ``layer_name``."""
    idx = model.index_of(layer_name)
    a = np.asarray(activation, dtype=np.float64)
    if a.shape != model.shapes[idx]:
        raise StructuralError(
            f"injected activation shape {a.shape} != layer {layer_name!r} output {model.shapes[idx]}")
    out, _, _ = _run(model, a, start=idx + 1)
    return out


def backward_to_layer(model: ModelBundle, x, class_index: int, tap_layer: str) -> TapResult:
    """Feature maps at ``tap_layer`` and the exact gradient of the pre-softmax
    logit ``class_index`` with respect to them."""
    x = _check_input(model, x)
    c = _check_class(model, class_index)
    idx = model.index_of(tap_layer)
    if len(model.shapes[idx]) != 3 or idx == len(model.layers) - 1:
        raise StructuralError(
            f"tap layer {tap_layer!r} must produce (C, H, W) feature maps before the head, "
            f"got {model.shapes[idx]}")
    out, inputs, caches = _run(model, x)
    grad = _backprop(model, inputs, caches, c, idx + 1)
    return TapResult(
        logits=out,
        probabilities=softmax(out),
        tapped_activations=inputs[idx + 1],
        tapped_gradients=grad,
        tap_layer=tap_layer,
        class_index=c,
    )


def input_gradient(model: ModelBundle, x, class_index: int) -> tuple[np.ndarray, np.ndarray]:
    """(logits, d logit_c / d input)."""
    x = _check_input(model, x)
    c = _check_class(model, class_index)
    out, inputs, caches = _run(model, x)
    return out, _backprop(model, inputs, caches, c, 0)


def score(model: ModelBundle, x, class_index: int, mode: str = "probability") -> float:
    """Confidence used by the faithfulness metrics: softmax probability or raw logit."""
    c = _check_class(model, class_index)
    out = logits(model, x)
    if mode == "probability":
        return float(softmax(out)[c])
    if mode == "logit":
        return float(out[c])
    raise ValidationError(f"unknown score mode {mode!r}")
