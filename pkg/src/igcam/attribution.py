"""Gradient-based attribution: Grad-CAM, Grad-CAM++, Integrated Gradients and
Integrated Grad-CAM.

Integrated Grad-CAM walks a straight path from a baseline image to the input,
and at each of ``m`` right-endpoint samples ``t/m`` forms a Grad-CAM style map
whose feature maps are replaced by their difference from the baseline's
feature maps. The explanation is the mean of the rectified per-step maps.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from . import engine
from .engine import ModelBundle
from .errors import StructuralError, ValidationError

METHODS = ("grad_cam", "grad_cam_pp", "integrated_gradients", "integrated_grad_cam")
CAM_METHODS = ("grad_cam", "grad_cam_pp", "integrated_grad_cam")
PATH_METHODS = ("integrated_gradients", "integrated_grad_cam")
RELU_PLACEMENTS = ("per_step", "final")

GRAD_CAM_PP_EPS = 1e-12


@dataclass(frozen=True)
class PathSpec:
    """Straight-line path from ``baseline`` to the input with ``steps`` samples.

    ``baseline=None`` means a black (all-zero) image of the input's shape.
    """

    baseline: np.ndarray | None = None
    steps: int = 50
    path_kind: str = "linear"

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValidationError(f"steps must be a positive integer, got {self.steps!r}")
        if self.path_kind != "linear":
            raise ValidationError(f"unsupported path kind {self.path_kind!r}")

    @classmethod
    def constant(cls, value: float, shape, steps: int = 50) -> "PathSpec":
        return cls(baseline=np.full(shape, float(value)), steps=steps)

    def baseline_for(self, image: np.ndarray) -> np.ndarray:
        if self.baseline is None:
            return np.zeros_like(image, dtype=np.float64)
        base = np.asarray(self.baseline, dtype=np.float64)
        if base.shape != image.shape:
            raise StructuralError(f"baseline shape {base.shape} != image shape {image.shape}")
        return base

    def f(self, alpha: float) -> float:
        return alpha


@dataclass(frozen=True)
class AttributionRequest:
    model: ModelBundle
    image: np.ndarray
    class_index: int | str = "argmax"
    tap_layer: str | None = None
    method: str = "integrated_grad_cam"
    path: PathSpec = field(default_factory=PathSpec)
    relu_placement: str = "per_step"
    # False drops the 1/Z spatial average from the channel weights
    average_weights: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if self.relu_placement not in RELU_PLACEMENTS:
            raise ValidationError(f"unknown relu placement {self.relu_placement!r}")

    def resolved_class(self) -> int:
        if self.class_index == "argmax":
            return int(np.argmax(engine.logits(self.model, self.image)))
        return engine._check_class(self.model, self.class_index)

    def resolved_layer(self) -> str:
        name = self.tap_layer or self.model.last_conv()
        self.model.index_of(name)
        return name


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray
    resolution: str  # "feature" or "image"
    method: str
    class_index: int | None = None
    tap_layer: str | None = None
    steps: int | None = None
    signed: bool = False
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def with_values(self, values, resolution=None) -> "SaliencyMap":
        return replace(self, values=values, resolution=resolution or self.resolution)


@dataclass(frozen=True)
class ActivationDelta:
    """Per-step feature map differences, shape (m, N, u, v)."""

    deltas: np.ndarray
    alphas: np.ndarray
    tap_layer: str


def path_point(path: PathSpec, image, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    image = np.asarray(image, dtype=np.float64)
    base = path.baseline_for(image)
    s = path.f(alpha)
    # endpoints returned exactly; the lerp formula can be off by an ulp at s == 1
    if s == 0.0:
        return base.copy()
    if s == 1.0:
        return image.copy()
    return base + s * (image - base)


def _alphas(steps: int) -> list[float]:
    return [t / steps for t in range(1, steps + 1)]


def _channel_weights(grads: np.ndarray, average: bool) -> np.ndarray:
    w = grads.sum(axis=(1, 2))
    if average:
        w = w / (grads.shape[1] * grads.shape[2])
    return w


def _combine(weights: np.ndarray, maps: np.ndarray) -> np.ndarray:
    return np.einsum("k,kij->ij", weights, maps)


def _map_steps(fn: Callable[[float], Any], alphas: Sequence[float], threads: int) -> list:
    if threads > 1 and len(alphas) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, alphas))
    return [fn(a) for a in alphas]


def grad_cam(request: AttributionRequest) -> SaliencyMap:
    c = request.resolved_class()
    layer = request.resolved_layer()
    tap = engine.backward_to_layer(request.model, request.image, c, layer)
    w = _channel_weights(tap.tapped_gradients, request.average_weights)
    cam = np.maximum(_combine(w, tap.tapped_activations), 0.0)
    return SaliencyMap(cam, "feature", "grad_cam", c, layer)


def grad_cam_pp(request: AttributionRequest) -> SaliencyMap:
    """Grad-CAM++ with the closed-form second/third-order terms that hold for
    piecewise-linear networks (higher derivatives are powers of the gradient)."""
    c = request.resolved_class()
    layer = request.resolved_layer()
    tap = engine.backward_to_layer(request.model, request.image, c, layer)
    g, a = tap.tapped_gradients, tap.tapped_activations
    g2 = g * g
    g3 = g2 * g
    denom = 2.0 * g2 + a.sum(axis=(1, 2))[:, None, None] * g3 + GRAD_CAM_PP_EPS
    safe = (g != 0.0) & (denom != 0.0)
    alpha = np.divide(g2, denom, out=np.zeros_like(g), where=safe)
    w = (alpha * np.maximum(g, 0.0)).sum(axis=(1, 2))
    cam = np.maximum(_combine(w, a), 0.0)
    return SaliencyMap(cam, "feature", "grad_cam_pp", c, layer)


def integrated_gradients(request: AttributionRequest) -> SaliencyMap:
    """Signed per-pixel attribution (image - baseline) * mean path gradient.

    ``values`` holds the channel sum at image resolution; the per-channel
    attribution is kept in ``meta["per_channel"]``.
    """
    c = request.resolved_class()
    model, path = request.model, request.path
    image = np.asarray(request.image, dtype=np.float64)
    base = path.baseline_for(image)

    def step(alpha):
        return engine.input_gradient(model, path_point(path, image, alpha), c)[1]

    total = np.zeros_like(image)
    for g in _map_steps(step, _alphas(path.steps), request.threads):
        total += g
    attr = (image - base) * (total / path.steps)
    return SaliencyMap(attr.sum(axis=0), "image", "integrated_gradients", c,
                       steps=path.steps, signed=True, meta={"per_channel": attr})


def delta_maps(model: ModelBundle, image, path: PathSpec, tap_layer: str) -> ActivationDelta:
    image = np.asarray(image, dtype=np.float64)
    idx = model.index_of(tap_layer)
    base_act = engine.forward(model, path.baseline_for(image))[1][tap_layer]
    alphas = _alphas(path.steps)
    deltas = np.empty((len(alphas),) + model.shapes[idx])
    for t, alpha in enumerate(alphas):
        deltas[t] = engine.forward(model, path_point(path, image, alpha))[1][tap_layer] - base_act
    return ActivationDelta(deltas, np.array(alphas), tap_layer)


def integrated_grad_cam(request: AttributionRequest) -> SaliencyMap:
    c = request.resolved_class()
    layer = request.resolved_layer()
    model, path = request.model, request.path
    image = np.asarray(request.image, dtype=np.float64)
    base_act = engine.forward(model, path.baseline_for(image))[1][layer]
    if base_act.ndim != 3:
        raise StructuralError(f"tap layer {layer!r} does not produce (C, H, W) feature maps")

    def step(alpha):
        tap = engine.backward_to_layer(model, path_point(path, image, alpha), c, layer)
        w = _channel_weights(tap.tapped_gradients, request.average_weights)
        return _combine(w, tap.tapped_activations - base_act)

    acc = np.zeros(base_act.shape[1:])
    per_step = request.relu_placement == "per_step"
    # reduction runs in ascending t whatever the thread count
    for cam in _map_steps(step, _alphas(path.steps), request.threads):
        acc += np.maximum(cam, 0.0) if per_step else cam
    result = acc / path.steps
    if not per_step:
        result = np.maximum(result, 0.0)
    return SaliencyMap(result, "feature", "integrated_grad_cam", c, layer, steps=path.steps,
                       meta={"relu_placement": request.relu_placement})


_DISPATCH = {
    "grad_cam": grad_cam,
    "grad_cam_pp": grad_cam_pp,
    "integrated_gradients": integrated_gradients,
    "integrated_grad_cam": integrated_grad_cam,
}


def explain(request: AttributionRequest) -> SaliencyMap:
    """Run ``request.method``; the class is resolved once on the original image."""
    if request.class_index == "argmax":
        request = replace(request, class_index=request.resolved_class())
    return _DISPATCH[request.method](request)


def to_saliency(smap: SaliencyMap) -> np.ndarray:
    """Non-negative 2-D map for rendering and metrics.

    CAM maps are already rectified; signed Integrated Gradients maps are turned
    into magnitudes.
    """
    return np.abs(smap.values) if smap.signed else smap.values
