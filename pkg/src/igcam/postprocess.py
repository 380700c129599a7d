"""Upsampling, normalisation and heatmap rendering.

Bilinear resampling uses half-pixel centres: output column ``x`` samples input
coordinate ``(x + 0.5) * v / W - 0.5``, clamped to ``[0, v - 1]`` (likewise for
rows). No corner alignment.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError, ValidationError


def _axis_weights(src_len: int, dst_len: int):
    coord = (np.arange(dst_len) + 0.5) * (src_len / dst_len) - 0.5
    coord = np.clip(coord, 0.0, src_len - 1)
    lo = np.floor(coord).astype(np.int64)
    hi = np.minimum(lo + 1, src_len - 1)
    return lo, hi, coord - lo


def resize_bilinear(arr, height: int, width: int) -> np.ndarray:
    """Resize the trailing two axes of ``arr`` to ``(height, width)``."""
    if height < 1 or width < 1:
        raise ValidationError(f"target size must be positive, got {height}x{width}")
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim < 2 or 0 in arr.shape:
        raise ValidationError(f"cannot resize array of shape {arr.shape}")
    y0, y1, fy = _axis_weights(arr.shape[-2], height)
    x0, x1, fx = _axis_weights(arr.shape[-1], width)
    rows = arr[..., y0, :] * (1.0 - fy)[:, None] + arr[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1.0 - fx) + rows[..., x1] * fx


def upsample_bilinear(smap, height: int, width: int):
    """Bring a feature-resolution SaliencyMap to image resolution."""
    return smap.with_values(resize_bilinear(smap.values, height, width), resolution="image")


def normalize_max(values) -> np.ndarray:
    """Scale a non-negative map so its maximum is 1. All-zero maps pass through."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise ValidationError("normalize_max expects a non-negative map")
    peak = values.max() if values.size else 0.0
    if peak == 0.0:
        return values.copy()
    return values / peak


# 256-entry "jet" lookup, i = 0..255, x = i / 255:
#   r = clip(1.5 - |4x - 3|), g = clip(1.5 - |4x - 2|), b = clip(1.5 - |4x - 1|)
# each channel scaled to 0..255 and rounded half up.
def _jet() -> np.ndarray:
    x = np.arange(256) / 255.0
    chans = [np.clip(1.5 - np.abs(4.0 * x - k), 0.0, 1.0) for k in (3.0, 2.0, 1.0)]
    return np.floor(np.stack(chans, axis=1) * 255.0 + 0.5).astype(np.uint8)


COLORMAPS = {"jet": _jet()}


@dataclass(frozen=True)
class RenderedHeatmap:
    width: int
    height: int
    rgba: np.ndarray  # (H, W, 4) uint8
    colormap: str = "jet"
    blend: float | None = None


def _to_uint8(x) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 255.0) + 0.5).astype(np.uint8)


def colormap_indices(values) -> np.ndarray:
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)


def render(values, base_image=None, blend: float = 0.5, colormap: str = "jet") -> RenderedHeatmap:
    """Map a [0, 1] map through the colormap, optionally blended over ``base_image``.

    ``base_image`` is a (C, H, W) float image in [0, 1] with C = 1 or 3; the
    result is ``blend * colour + (1 - blend) * base`` per channel.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValidationError(f"render expects a 2-D map, got shape {values.shape}")
    if np.any(values < 0) or np.any(values > 1) or not np.all(np.isfinite(values)):
        raise ValidationError("render expects a map normalised to [0, 1]")
    if not 0.0 <= blend <= 1.0:
        raise ValidationError(f"blend must lie in [0, 1], got {blend}")
    lut = COLORMAPS[colormap]
    h, w = values.shape
    rgb = lut[colormap_indices(values)].astype(np.float64)
    used_blend = None
    if base_image is not None:
        base = np.asarray(base_image, dtype=np.float64)
        if base.ndim != 3 or base.shape[1:] != (h, w):
            raise StructuralError(f"base image shape {base.shape} does not match map {values.shape}")
        if base.shape[0] == 1:
            base = np.repeat(base, 3, axis=0)
        elif base.shape[0] != 3:
            raise StructuralError(f"base image must have 1 or 3 channels, got {base.shape[0]}")
        base8 = _to_uint8(base.transpose(1, 2, 0) * 255.0).astype(np.float64)
        rgb = blend * rgb + (1.0 - blend) * base8
        used_blend = float(blend)
    rgba = np.empty((h, w, 4), dtype=np.uint8)
    rgba[..., :3] = _to_uint8(rgb)
    rgba[..., 3] = 255
    return RenderedHeatmap(w, h, rgba, colormap, used_blend)


def strip(heatmaps, gap: int = 2) -> RenderedHeatmap:
    """Concatenate equally sized heatmaps left to right with a white gap."""
    heatmaps = list(heatmaps)
    if not heatmaps:
        raise ValidationError("nothing to compose")
    h = heatmaps[0].height
    if any(hm.height != h for hm in heatmaps):
        raise StructuralError("strip members must share a height")
    parts = []
    for i, hm in enumerate(heatmaps):
        if i:
            parts.append(np.full((h, gap, 4), 255, dtype=np.uint8))
        parts.append(hm.rgba)
    rgba = np.concatenate(parts, axis=1)
    return RenderedHeatmap(rgba.shape[1], h, rgba, heatmaps[0].colormap)
