"""Deterministic fixture networks and datasets.

quadrant
    ``(1, 16, 16)`` input. Two bias-free conv layers feed a linear head whose
    class-0 row reads only the top-left 8x8 quadrant of channel 0, so on
    non-negative images ``logit_0`` is the quadrant's pixel sum. Images carry
    textured content in the quadrant and faint noise elsewhere; masks are the
    quadrant.

dead-relu
    ``(3, 16, 16)`` input. A bias-free conv with non-negative kernels is
    spatially averaged to ``s`` and the head computes
    ``logit_0 = relu(s) - relu(s - theta) = min(s, theta)``. With ``theta`` set
    below every image's ``s`` the class-0 gradient at the tapped layer is exactly
    zero at the input but not along the path from a black baseline. Images
    are bright rectangles on black; masks are the rectangles.

random
    ``(3, 12, 12)`` input, conv/relu/maxpool x2 + linear head, all with
    biases, random weights drawn from the seed. Used for gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import LayerSpec, ModelBundle
from .errors import UsageError, ValidationError

FAMILIES = ("quadrant", "dead-relu", "random")
DATASET_SIZE = 10
QUADRANT_SIZE = 16


def _conv(name, cin, cout, k, stride=1, padding=0):
    return LayerSpec(name, "conv2d", {"in_channels": cin, "out_channels": cout, "kernel_h": k,
                                      "kernel_w": k, "stride": stride, "padding": padding})


def _linear(name, fin, fout):
    return LayerSpec(name, "linear", {"in_features": fin, "out_features": fout})


@dataclass(frozen=True)
class Fixture:
    family: str
    model: ModelBundle
    images: tuple[np.ndarray, ...]
    masks: tuple[np.ndarray, ...]
    labels: tuple[int, ...]


def quadrant_mask(size: int = QUADRANT_SIZE) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    mask[: size // 2, : size // 2] = True
    return mask


def quadrant_model(size: int = QUADRANT_SIZE) -> ModelBundle:
    conv1 = np.zeros((2, 1, 3, 3))
    conv1[0, 0, 1, 1] = 1.0            # identity
    conv1[1, 0] = 1.0 / 9.0            # box blur
    conv2 = np.eye(2)[:, :, None, None]
    quad = quadrant_mask(size).astype(np.float64)
    fc = np.zeros((2, 2, size, size))
    fc[0, 0] = quad
    fc[1, 1] = 1.0 - quad
    layers = [
        _conv("conv1", 1, 2, 3, padding=1),
        LayerSpec("relu1", "relu"),
        _conv("conv2", 2, 2, 1),
        LayerSpec("relu2", "relu"),
        LayerSpec("flatten", "flatten"),
        _linear("fc", 2 * size * size, 2),
    ]
    weights = {"conv1": {"weight": conv1}, "conv2": {"weight": conv2},
               "fc": {"weight": fc.reshape(2, -1)}}
    return ModelBundle(layers, weights, (1, size, size), 2)


def _quantize(img: np.ndarray) -> np.ndarray:
    # images round-trip through 8-bit PNG, so generate them on that grid
    return np.round(img * 255.0) / 255.0


def quadrant_fixture(seed: int = 0, count: int = DATASET_SIZE) -> Fixture:
    rng = np.random.default_rng(seed)
    size = QUADRANT_SIZE
    quad = quadrant_mask(size)
    images = []
    for _ in range(count):
        img = rng.integers(0, 9, size=(size, size)) / 255.0
        img[quad] = rng.integers(100, 256, size=int(quad.sum())) / 255.0
        images.append(img[None])
    return Fixture("quadrant", quadrant_model(size), tuple(images),
                   tuple(quad.copy() for _ in images), tuple(0 for _ in images))


def dead_relu_model(kernels: np.ndarray, theta: float, size: int = QUADRANT_SIZE) -> ModelBundle:
    k = kernels.shape[0]
    layers = [
        _conv("conv1", 3, k, 3, padding=1),
        LayerSpec("relu1", "relu"),
        LayerSpec("gap", "globalavgpool"),
        _linear("fc1", k, 2),
        LayerSpec("relu2", "relu"),
        _linear("fc2", 2, 2),
    ]
    weights = {
        "conv1": {"weight": kernels},
        "fc1": {"weight": np.ones((2, k)), "bias": np.array([0.0, -theta])},
        "fc2": {"weight": np.array([[1.0, -1.0], [0.0, 0.0]]), "bias": np.array([0.0, theta / 2.0])},
    }
    return ModelBundle(layers, weights, (3, size, size), 2)


def dead_relu_fixture(seed: int = 0, count: int = DATASET_SIZE) -> Fixture:
    rng = np.random.default_rng(seed)
    size = QUADRANT_SIZE
    kernels = rng.uniform(0.0, 1.0, size=(2, 3, 3, 3)) / 9.0
    images, masks = [], []
    for _ in range(count):
        h, w = rng.integers(4, 9, size=2)
        top = rng.integers(0, size - h + 1)
        left = rng.integers(0, size - w + 1)
        mask = np.zeros((size, size), dtype=bool)
        mask[top:top + h, left:left + w] = True
        img = np.zeros((3, size, size))
        img[:, mask] = _quantize(rng.uniform(0.5, 1.0, size=(3, int(mask.sum()))))
        images.append(img)
        masks.append(mask)
    probe = dead_relu_model(kernels, 1.0, size)
    sums = [float(engine.forward(probe, img)[1]["fc1"][0]) for img in images]
    theta = 0.5 * min(sums)
    model = dead_relu_model(kernels, theta, size)
    fixture = Fixture("dead-relu", model, tuple(images), tuple(masks), tuple(0 for _ in images))
    _verify_dead(fixture)
    return fixture


def _verify_dead(fixture: Fixture) -> None:
    layer = fixture.model.last_conv()
    for i, (img, label) in enumerate(zip(fixture.images, fixture.labels)):
        tap = engine.backward_to_layer(fixture.model, img, label, layer)
        if np.any(tap.tapped_gradients != 0.0):
            raise ValidationError(f"dead-relu fixture image {i}: tap gradient is not zero")


def random_model(seed: int) -> ModelBundle:
    rng = np.random.default_rng(seed)
    size = 12
    layers = [
        _conv("conv1", 3, 4, 3, padding=1),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool2d", {"kernel": 2, "stride": 2}),
        _conv("conv2", 4, 6, 3, stride=1 + seed % 2, padding=1),
        LayerSpec("relu2", "relu"),
        LayerSpec("pool2", "maxpool2d", {"kernel": 2, "stride": 1}),
        LayerSpec("flatten", "flatten"),
    ]
    shapes = engine.infer_shapes(layers, (3, size, size))
    flat = shapes[-1][0]
    layers.append(_linear("fc", flat, 3))
    weights = {
        "conv1": {"weight": rng.normal(0, 0.5, (4, 3, 3, 3)), "bias": rng.normal(0, 0.1, 4)},
        "conv2": {"weight": rng.normal(0, 0.4, (6, 4, 3, 3)), "bias": rng.normal(0, 0.1, 6)},
        "fc": {"weight": rng.normal(0, 0.3, (3, flat)), "bias": rng.normal(0, 0.1, 3)},
    }
    return ModelBundle(layers, weights, (3, size, size), 3)


def random_fixture(seed: int = 0, count: int = DATASET_SIZE) -> Fixture:
    model = random_model(seed)
    rng = np.random.default_rng(seed + 10_000)
    _, h, w = model.input_shape
    images, masks, labels = [], [], []
    for _ in range(count):
        img = _quantize(rng.uniform(0.0, 0.3, size=model.input_shape))
        mh, mw = rng.integers(3, 7, size=2)
        top, left = rng.integers(0, h - mh + 1), rng.integers(0, w - mw + 1)
        mask = np.zeros((h, w), dtype=bool)
        mask[top:top + mh, left:left + mw] = True
        img[:, mask] = _quantize(rng.uniform(0.4, 1.0, size=(3, int(mask.sum()))))
        images.append(img)
        masks.append(mask)
        labels.append(int(np.argmax(engine.logits(model, img))))
    return Fixture("random", model, tuple(images), tuple(masks), tuple(labels))


def make_fixture(family: str, seed: int = 0, count: int = DATASET_SIZE) -> Fixture:
    if family == "quadrant":
        return quadrant_fixture(seed, count)
    if family == "dead-relu":
        return dead_relu_fixture(seed, count)
    if family == "random":
        return random_fixture(seed, count)
    raise UsageError(f"unknown fixture family {family!r} (choose from {', '.join(FAMILIES)})")


def write_fixture(fixture: Fixture, out_dir) -> dict:
    """Write model.json / model.bin / dataset.json plus PNGs into ``out_dir``."""
    from . import model_io

    out = model_io.ensure_dir(out_dir)
    model_io.save_bundle(fixture.model, out / "model.json", out / "model.bin")
    records = []
    for i, (img, mask, label) in enumerate(zip(fixture.images, fixture.masks, fixture.labels)):
        img_name, mask_name = f"img_{i:03d}.png", f"mask_{i:03d}.png"
        model_io.save_image(img, out / img_name)
        model_io.save_mask(mask, out / mask_name)
        records.append({"id": f"{i:03d}", "image": img_name, "mask": mask_name, "label": label})
    model_io.save_dataset(records, out / "dataset.json")
    return {"model": out / "model.json", "blob": out / "model.bin", "dataset": out / "dataset.json"}
