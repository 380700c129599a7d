"""On-disk formats.

Model bundle
    A JSON manifest plus a raw blob of little-endian float64 values::

        {
          "format_version": 1,
          "input_shape": [1, 16, 16],
          "class_count": 2,
          "layers": [
            {"name": "conv1", "kind": "conv2d",
             "params": {"in_channels": 1, "out_channels": 2, "kernel_h": 3,
                        "kernel_w": 3, "stride": 1, "padding": 1},
             "weight": {"offset": 0, "shape": [2, 1, 3, 3]},
             "bias": null},
            {"name": "relu1", "kind": "relu", "params": {}},
            ...
          ]
        }

    ``offset`` is in bytes. Tensors must tile the blob exactly: no overlaps,
    no gaps, and blob length = 8 * total element count.

Saliency dump
    ``b"IGSM"``, then little-endian ``u16 version, u32 height, u32 width,
    u8 resolution (0 feature, 1 image), u8 signed, u16 len`` followed by
    ``len`` bytes of UTF-8 method name and ``height * width`` float64 values
    in row-major order.

Dataset index
    JSON ``{"records": [{"id", "image", "mask", "label"}, ...]}``; paths are
    relative to the index file's directory.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .attribution import SaliencyMap
from .engine import LayerSpec, ModelBundle
from .errors import IgcamError, InputFormatError, StructuralError, ValidationError
from .metrics import GroundTruth
from .postprocess import RenderedHeatmap, resize_bilinear

FORMAT_VERSION = 1
SALIENCY_MAGIC = b"IGSM"
SALIENCY_VERSION = 1
_SAL_HEADER = struct.Struct("<HIIBBH")
_RESOLUTIONS = ("feature", "image")


# ---------------------------------------------------------------------------
# model bundles

def manifest_dict(model: ModelBundle) -> tuple[dict, bytes]:
    offset = 0
    chunks = []
    layers = []
    for layer in model.layers:
        entry = {"name": layer.name, "kind": layer.kind, "params": dict(layer.params)}
        wts = model.weights.get(layer.name)
        if wts is not None:
            for key in ("weight", "bias"):
                arr = wts.get(key)
                if arr is None:
                    entry[key] = None
                    continue
                data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
                entry[key] = {"offset": offset, "shape": list(arr.shape)}
                chunks.append(data)
                offset += len(data)
        layers.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "layers": layers,
    }
    return manifest, b"".join(chunks)


def save_bundle(model: ModelBundle, manifest_path, blob_path) -> None:
    manifest, blob = manifest_dict(model)
    Path(manifest_path).write_text(json.dumps(manifest, indent=2) + "\n")
    Path(blob_path).write_bytes(blob)


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputFormatError(f"cannot read {path}: {exc.strerror or exc}") from None


def load_bundle(manifest_path, blob_path) -> ModelBundle:
    try:
        manifest = json.loads(_read_bytes(manifest_path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputFormatError(f"{manifest_path}: malformed manifest ({exc})") from None
    blob = _read_bytes(blob_path)
    return bundle_from_manifest(manifest, blob, source=str(manifest_path))


def bundle_from_manifest(manifest: dict, blob: bytes, source: str = "manifest") -> ModelBundle:
    if not isinstance(manifest, dict):
        raise InputFormatError(f"{source}: manifest must be a JSON object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise InputFormatError(f"{source}: format_version {version!r}, expected {FORMAT_VERSION}")
    for key in ("input_shape", "class_count", "layers"):
        if key not in manifest:
            raise InputFormatError(f"{source}: missing key {key!r}")

    spans = []
    layers, weights = [], {}
    try:
        for entry in manifest["layers"]:
            layer = LayerSpec(entry["name"], entry["kind"], entry.get("params") or {})
            layers.append(layer)
            tensors = {}
            for key in ("weight", "bias"):
                desc = entry.get(key)
                if desc is None:
                    continue
                shape = tuple(int(s) for s in desc["shape"])
                start = int(desc["offset"])
                size = int(np.prod(shape)) * 8
                spans.append((start, start + size, f"{layer.name}.{key}"))
                tensors[key] = shape, start
            if tensors:
                weights[layer.name] = tensors
    except (KeyError, TypeError, ValueError) as exc:
        raise InputFormatError(f"{source}: malformed layer descriptor ({exc!r})") from None
    except StructuralError as exc:
        raise InputFormatError(f"{source}: {exc}") from None

    expected = sum(end - start for start, end, _ in spans)
    if len(blob) != expected:
        raise InputFormatError(
            f"blob length mismatch: expected {expected} bytes, got {len(blob)} bytes")
    spans.sort()
    cursor = 0
    for start, end, name in spans:
        if start % 8:
            raise InputFormatError(f"{name}: offset {start} not a multiple of 8")
        if start != cursor:
            kind = "overlaps" if start < cursor else "leaves a gap before"
            raise InputFormatError(f"{name}: tensor at offset {start} {kind} byte {cursor}")
        cursor = end

    arrays = {}
    for name, tensors in weights.items():
        arrays[name] = {
            key: np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)), offset=start)
            .astype(np.float64).reshape(shape)
            for key, (shape, start) in tensors.items()
        }
    try:
        return ModelBundle(layers, arrays, manifest["input_shape"], manifest["class_count"])
    except StructuralError as exc:
        raise InputFormatError(f"{source}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InputFormatError(f"{source}: {exc}") from None


# ---------------------------------------------------------------------------
# images and masks

def _open_png(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F", "1"):
                raise InputFormatError(f"{path}: unsupported bit depth (mode {mode})")
            if mode == "P":
                img = img.convert("RGBA" if "transparency" in img.info else "RGB")
                mode = img.mode
            if mode == "LA":
                img, mode = img.getchannel("L"), "L"
            if mode == "RGBA":
                img, mode = img.convert("RGB"), "RGB"
            if mode not in ("L", "RGB"):
                raise InputFormatError(f"{path}: unsupported image mode {mode}")
            return np.asarray(img, dtype=np.uint8)
    except IgcamError:
        raise
    except FileNotFoundError:
        raise InputFormatError(f"{path}: no such file") from None
    except (OSError, SyntaxError, ValueError) as exc:
        raise InputFormatError(f"{path}: cannot decode image ({exc})") from None


def load_image(path, input_shape=None) -> np.ndarray:
    """Decode an 8-bit PNG to a (C, H, W) float64 tensor in [0, 1].

    With ``input_shape`` the image is resized bilinearly (half-pixel centres)
    and its channels adapted: grey is replicated, RGB is averaged to one
    channel for single-channel models.
    """
    raw = _open_png(path).astype(np.float64) / 255.0
    chw = raw[None] if raw.ndim == 2 else raw.transpose(2, 0, 1)
    if input_shape is None:
        return chw
    c, h, w = input_shape
    if chw.shape[0] != c:
        if chw.shape[0] == 1:
            chw = np.repeat(chw, c, axis=0)
        elif c == 1:
            chw = chw.mean(axis=0, keepdims=True)
        else:
            raise StructuralError(f"{path}: cannot map {chw.shape[0]} channels to {c}")
    if chw.shape[1:] != (h, w):
        chw = resize_bilinear(chw, h, w)
    return chw


def save_image(chw, path) -> None:
    """Write a (C, H, W) [0, 1] tensor as an 8-bit PNG (C = 1 or 3)."""
    arr = np.floor(np.clip(np.asarray(chw, dtype=np.float64), 0, 1) * 255.0 + 0.5).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0]).save(path, format="PNG")
    else:
        Image.fromarray(arr.transpose(1, 2, 0)).save(path, format="PNG")


def load_mask(path, shape=None) -> GroundTruth:
    """Greyscale (or RGB) PNG; any nonzero pixel is foreground."""
    raw = _open_png(path)
    if raw.ndim == 3:
        raw = raw.max(axis=2)
    if shape is not None and raw.shape != tuple(shape):
        raise StructuralError(f"{path}: mask shape {raw.shape} != expected {tuple(shape)}")
    return GroundTruth(raw != 0)


def save_mask(mask, path) -> None:
    arr = np.where(np.asarray(mask) != 0, 255, 0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def save_heatmap(heatmap: RenderedHeatmap, path) -> None:
    Image.fromarray(heatmap.rgba).save(path, format="PNG")


def load_heatmap(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGBA"), dtype=np.uint8)


# ---------------------------------------------------------------------------
# saliency dumps

def save_saliency(smap: SaliencyMap, path) -> None:
    values = np.asarray(smap.values, dtype=np.float64)
    if values.ndim != 2:
        raise StructuralError(f"saliency must be 2-D, got shape {values.shape}")
    name = smap.method.encode("utf-8")
    header = _SAL_HEADER.pack(SALIENCY_VERSION, values.shape[0], values.shape[1],
                              _RESOLUTIONS.index(smap.resolution), int(smap.signed), len(name))
    Path(path).write_bytes(SALIENCY_MAGIC + header + name + values.astype("<f8").tobytes())


def load_saliency(path) -> SaliencyMap:
    data = _read_bytes(path)
    if data[:4] != SALIENCY_MAGIC or len(data) < 4 + _SAL_HEADER.size:
        raise InputFormatError(f"{path}: not a saliency dump")
    version, h, w, res, signed, nlen = _SAL_HEADER.unpack_from(data, 4)
    if version != SALIENCY_VERSION:
        raise InputFormatError(f"{path}: saliency version {version}, expected {SALIENCY_VERSION}")
    if res >= len(_RESOLUTIONS):
        raise InputFormatError(f"{path}: bad resolution tag {res}")
    start = 4 + _SAL_HEADER.size
    body = start + nlen
    expected = body + 8 * h * w
    if len(data) != expected:
        raise InputFormatError(f"{path}: expected {expected} bytes, got {len(data)} bytes")
    method = data[start:body].decode("utf-8")
    values = np.frombuffer(data, dtype="<f8", offset=body).astype(np.float64).reshape(h, w)
    return SaliencyMap(values, _RESOLUTIONS[res], method, signed=bool(signed))


# ---------------------------------------------------------------------------
# dataset index

@dataclass(frozen=True)
class DatasetRecord:
    image_id: str
    image: Path
    mask: Path
    label: int


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    records: tuple[DatasetRecord, ...]


def load_dataset(path, class_count: int | None = None) -> DatasetIndex:
    """Parse an index and check every referenced file exists.

    All missing files are listed in one error.
    """
    path = Path(path)
    try:
        doc = json.loads(_read_bytes(path).decode("utf-8"))
        entries = doc["records"]
        root = path.parent
        records = tuple(
            DatasetRecord(str(e.get("id", i)), root / e["image"], root / e["mask"], int(e["label"]))
            for i, e in enumerate(entries)
        )
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputFormatError(f"{path}: malformed dataset index ({exc!r})") from None
    if not records:
        raise ValidationError(f"{path}: dataset has no records")
    missing = [str(p) for r in records for p in (r.image, r.mask) if not p.is_file()]
    if missing:
        raise InputFormatError("missing files: " + ", ".join(missing))
    if class_count is not None:
        bad = [r.image_id for r in records if not 0 <= r.label < class_count]
        if bad:
            raise ValidationError(f"labels outside [0, {class_count}) for records {bad}")
    return DatasetIndex(root, records)


def save_dataset(records, path) -> None:
    """``records``: iterable of dicts with id/image/mask/label (paths relative)."""
    doc = {"records": [dict(r) for r in records]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
