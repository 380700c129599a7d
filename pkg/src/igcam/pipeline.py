"""Glue between attribution, postprocessing and metrics used by the CLI."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import engine, metrics, model_io
from .attribution import AttributionRequest, PathSpec, SaliencyMap, explain, to_saliency
from .engine import ModelBundle
from .errors import UndefinedMetricError, UsageError
from .metrics import GroundTruth, ImageRecord, MetricReport, reported
from .postprocess import normalize_max, resize_bilinear


@dataclass(frozen=True)
class ExplainSettings:
    method: str = "integrated_grad_cam"
    class_index: int | str = "argmax"
    tap_layer: str | None = None
    steps: int = 50
    baseline: str = "black"
    relu_placement: str = "per_step"
    score_mode: str = "probability"
    keep_fraction: float = metrics.DEFAULT_KEEP_FRACTION
    threads: int = 1

    def path_for(self, model: ModelBundle) -> PathSpec:
        return PathSpec(baseline=resolve_baseline(self.baseline, model), steps=self.steps)


def resolve_baseline(spec: str, model: ModelBundle) -> np.ndarray | None:
    """``black`` | ``const:<v>`` | path to a PNG loaded at the model's input shape."""
    if spec == "black":
        return None
    if spec.startswith("const:"):
        try:
            value = float(spec[len("const:"):])
        except ValueError:
            raise UsageError(f"bad constant baseline {spec!r}") from None
        return np.full(model.input_shape, value)
    return model_io.load_image(spec, model.input_shape)


def image_saliency(smap: SaliencyMap, height: int, width: int) -> np.ndarray:
    """Image-resolution, max-normalised, non-negative map."""
    values = to_saliency(smap)
    if values.shape != (height, width):
        values = resize_bilinear(values, height, width)
    return normalize_max(values)


def run_explain(model: ModelBundle, image: np.ndarray, settings: ExplainSettings,
                path: PathSpec | None = None, threads: int | None = None) -> SaliencyMap:
    request = AttributionRequest(
        model=model,
        image=image,
        class_index=settings.class_index,
        tap_layer=settings.tap_layer,
        method=settings.method,
        path=path if path is not None else settings.path_for(model),
        relu_placement=settings.relu_placement,
        threads=settings.threads if threads is None else threads,
    )
    return explain(request)


def evaluate_image(model: ModelBundle, image_id: str, image: np.ndarray, gt: GroundTruth,
                   class_index: int, settings: ExplainSettings, path: PathSpec) -> ImageRecord:
    s = replace(settings, class_index=class_index)
    smap = run_explain(model, image, s, path=path, threads=1)
    _, h, w = model.input_shape
    sal = image_saliency(smap, h, w)
    try:
        ebpg = metrics.ebpg(sal, gt)
        bbox = metrics.bbox_score(sal, gt)
    except UndefinedMetricError:
        ebpg = bbox = None

    def psi(x):
        return engine.score(model, x, class_index, settings.score_mode)

    term = metrics.drop_increase_term(psi, image, sal, settings.keep_fraction)
    return ImageRecord(image_id, class_index, ebpg, bbox, term.drop, int(term.increased),
                       term.orig, term.masked, term.sign)


@dataclass
class LoadedDataset:
    ids: list[str]
    images: list[np.ndarray]
    masks: list[GroundTruth]
    labels: list[int]


def load_dataset_arrays(model: ModelBundle, index_path) -> LoadedDataset:
    index = model_io.load_dataset(index_path, model.class_count)
    _, h, w = model.input_shape
    out = LoadedDataset([], [], [], [])
    for rec in index.records:
        out.ids.append(rec.image_id)
        out.images.append(model_io.load_image(rec.image, model.input_shape))
        out.masks.append(model_io.load_mask(rec.mask, (h, w)))
        out.labels.append(rec.label)
    return out


def _resolve_class(model, image, label, class_spec) -> int:
    if class_spec == "label":
        return label
    if class_spec == "argmax":
        return int(np.argmax(engine.logits(model, image)))
    return int(class_spec)


def evaluate(model: ModelBundle, data: LoadedDataset, settings: ExplainSettings,
             threads: int = 1) -> MetricReport:
    """Per-image metric records for one method; results are ordered by dataset index."""
    path = settings.path_for(model)

    def one(i):
        c = _resolve_class(model, data.images[i], data.labels[i], settings.class_index)
        return evaluate_image(model, data.ids[i], data.images[i], data.masks[i], c, settings, path)

    idx = range(len(data.ids))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, idx))
    else:
        records = [one(i) for i in idx]
    return MetricReport(settings.method, records)


def report_lines(report: MetricReport) -> list[str]:
    """One JSON object per image, then one aggregate object."""
    lines = []
    for r in report.records:
        lines.append(json.dumps({
            "record": "image",
            "method": report.method,
            "id": r.image_id,
            "class": r.class_index,
            "ebpg": reported(r.ebpg),
            "bbox": reported(r.bbox),
            "drop": reported(r.drop),
            "increase": r.increase,
            "sign": r.sign,
            "psi": reported(r.psi),
            "psi_masked": reported(r.psi_masked),
        }))
    lines.append(json.dumps({"record": "aggregate", **report.aggregates()}))
    return lines


def format_table(reports: Sequence[MetricReport]) -> str:
    cols = ["ebpg_mean_pct", "bbox_mean_pct", "drop_pct", "increase_pct", "skipped"]
    header = f"{'method':<22}" + "".join(f"{c:>15}" for c in cols)
    rows = [header]
    for rep in reports:
        agg = rep.aggregates()
        cells = []
        for c in cols:
            v = agg[c]
            cells.append(f"{'-':>15}" if v is None else
                         (f"{v:>15d}" if isinstance(v, int) else f"{v:>15.4f}"))
        rows.append(f"{rep.method:<22}" + "".join(cells))
    return "\n".join(rows)

