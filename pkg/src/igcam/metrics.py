"""Localisation (EBPG, Bbox) and faithfulness (Drop%, Increase%) metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import StructuralError, UndefinedMetricError, ValidationError

DEFAULT_KEEP_FRACTION = 0.15
# reported metric values are rounded to this many decimals
REPORT_DECIMALS = 9


@dataclass(frozen=True)
class GroundTruth:
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise StructuralError(f"ground-truth mask must be 2-D, got shape {m.shape}")
        object.__setattr__(self, "mask", m != 0)

    @property
    def positive_count(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def shape(self):
        return self.mask.shape


def _check_pair(saliency, gt: GroundTruth) -> np.ndarray:
    s = np.asarray(saliency, dtype=np.float64)
    if s.shape != gt.shape:
        raise StructuralError(f"saliency shape {s.shape} != mask shape {gt.shape}")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValidationError("saliency map must be finite and non-negative")
    if not np.any(s > 0):
        raise UndefinedMetricError("saliency map is all zero")
    if gt.positive_count < 1:
        raise UndefinedMetricError("ground-truth mask is empty")
    return s


def ebpg(saliency, gt: GroundTruth) -> float:
    """Energy-based pointing game: share of the map's mass inside the mask."""
    s = _check_pair(saliency, gt)
    inside = math.fsum(s[gt.mask].tolist())
    return inside / math.fsum(s.ravel().tolist())


def rank_order(saliency) -> np.ndarray:
    """Flat pixel indices sorted by value descending, ties by row-major index."""
    flat = np.asarray(saliency, dtype=np.float64).ravel()
    return np.argsort(-flat, kind="stable")


def bbox_score(saliency, gt: GroundTruth) -> float:
    """Fraction of the ``N`` most salient pixels that fall in the mask, ``N`` = mask size."""
    s = _check_pair(saliency, gt)
    n = gt.positive_count
    top = rank_order(s)[:n]
    return int(np.count_nonzero(gt.mask.ravel()[top])) / n


def keep_count(fraction: float, pixels: int) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"keep fraction must lie in (0, 1], got {fraction}")
    # round first so that e.g. 0.15 * 100 keeps 15 pixels, not 16
    return max(1, math.ceil(round(fraction * pixels, 9)))


def threshold_top(image, saliency, fraction: float = DEFAULT_KEEP_FRACTION) -> np.ndarray:
    """Zero every channel of the pixels outside the top ``fraction`` of ``saliency``."""
    image = np.asarray(image, dtype=np.float64)
    s = np.asarray(saliency, dtype=np.float64)
    if image.ndim != 3 or image.shape[1:] != s.shape:
        raise StructuralError(f"image shape {image.shape} does not match saliency {s.shape}")
    k = keep_count(fraction, s.size)
    keep = np.zeros(s.size, dtype=bool)
    keep[rank_order(s)[:k]] = True
    return image * keep.reshape(s.shape)[None, :, :]


@dataclass(frozen=True)
class DropIncreaseTerm:
    orig: float
    masked: float

    @property
    def drop(self) -> float:
        return max(self.orig - self.masked, 0.0) / self.orig

    @property
    def increased(self) -> bool:
        return self.masked > self.orig

    @property
    def sign(self) -> int:
        return (self.masked > self.orig) - (self.masked < self.orig)


@dataclass(frozen=True)
class DropIncrease:
    terms: tuple[DropIncreaseTerm, ...]

    @property
    def drop_pct(self) -> float:
        return 100.0 * math.fsum(t.drop for t in self.terms) / len(self.terms)

    @property
    def increase_pct(self) -> float:
        return 100.0 * sum(t.increased for t in self.terms) / len(self.terms)

    @property
    def signed_increase_mean(self) -> float:
        """The literal (100/K) * sum of sign(masked - orig); may be negative."""
        return 100.0 * sum(t.sign for t in self.terms) / len(self.terms)


def drop_increase_term(score_fn: Callable[[np.ndarray], float], image, saliency,
                       fraction: float = DEFAULT_KEEP_FRACTION) -> DropIncreaseTerm:
    orig = float(score_fn(np.asarray(image, dtype=np.float64)))
    if not orig > 0:
        raise ValidationError(f"confidence must be positive for Drop%, got {orig}")
    masked = float(score_fn(threshold_top(image, saliency, fraction)))
    return DropIncreaseTerm(orig, masked)


def drop_increase(score_fn: Callable[[np.ndarray], float],
                  items: Iterable[tuple[np.ndarray, np.ndarray]],
                  fraction: float = DEFAULT_KEEP_FRACTION) -> DropIncrease:
    """Drop% / Increase% over ``(image, saliency)`` pairs.

    ``score_fn`` maps an image to the model's confidence for the class being
    explained (bind the class per image with a closure).
    """
    terms = tuple(drop_increase_term(score_fn, img, s, fraction) for img, s in items)
    if not terms:
        raise ValidationError("drop/increase needs at least one image")
    return DropIncrease(terms)


@dataclass
class ImageRecord:
    image_id: str
    class_index: int
    ebpg: float | None
    bbox: float | None
    drop: float
    increase: int
    psi: float
    psi_masked: float
    sign: int = 0


@dataclass
class MetricReport:
    method: str
    records: list[ImageRecord] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.records)

    @property
    def skipped(self) -> int:
        return sum(r.ebpg is None for r in self.records)

    def _mean_pct(self, values: Sequence[float]) -> float | None:
        return 100.0 * math.fsum(values) / len(values) if values else None

    def aggregates(self) -> dict:
        if not self.records:
            raise ValidationError("empty report")
        k = len(self.records)
        return {
            "method": self.method,
            "K": k,
            "ebpg_mean_pct": reported(self._mean_pct([r.ebpg for r in self.records if r.ebpg is not None])),
            "bbox_mean_pct": reported(self._mean_pct([r.bbox for r in self.records if r.bbox is not None])),
            "drop_pct": reported(100.0 * math.fsum(r.drop for r in self.records) / k),
            "increase_pct": reported(100.0 * sum(r.increase for r in self.records) / k),
            "signed_increase_mean": reported(100.0 * sum(r.sign for r in self.records) / k),
            "skipped": self.skipped,
        }


def reported(x):
    """The value as it appears in reports."""
    return None if x is None else round(float(x), REPORT_DECIMALS)
