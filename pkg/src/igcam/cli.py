"""Command-line front end.

Exit codes: 0 success, 2 usage error, 3 input-format error, 4 numeric or
validation error. Errors are reported on stderr as one line,
``error: <category>: <message>``.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import engine, fixtures, model_io
from .attribution import PATH_METHODS, PathSpec
from .errors import IgcamError, UsageError
from .metrics import DEFAULT_KEEP_FRACTION
from .pipeline import (ExplainSettings, evaluate, format_table, image_saliency,
                       load_dataset_arrays, report_lines, run_explain)
from .postprocess import render, strip

CLI_METHODS = ("grad-cam", "grad-cam-pp", "integrated-gradients", "integrated-grad-cam")
DEFAULT_STEPS = 50
DEFAULT_OVERLAY_BLEND = 0.5


def _method_name(cli_name: str) -> str:
    return cli_name.replace("-", "_")


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _fraction(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {value}")
    return value


def _class_spec(text):
    if text in ("argmax", "label"):
        return text
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, 'argmax' or 'label', got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("class index must be >= 0")
    return value


def _add_model_args(p):
    p.add_argument("--model", required=True, help="model manifest (JSON)")
    p.add_argument("--blob", help="weight blob; default: manifest path with .bin suffix")


def _add_method_args(p, multi=False):
    if multi:
        p.add_argument("--method", action="append", choices=CLI_METHODS,
                       help="method to include, repeatable (default: all four)")
    else:
        p.add_argument("--method", choices=CLI_METHODS, default="integrated-grad-cam",
                       help="attribution method (default: integrated-grad-cam)")
    p.add_argument("--layer", default=None,
                   help="tap layer name or 'last-conv' (default: last-conv)")
    p.add_argument("--steps", type=_positive_int, default=None,
                   help=f"path steps m for integrated methods (default: {DEFAULT_STEPS})")
    p.add_argument("--baseline", default=None,
                   help="'black', 'const:<value>' or a PNG path (default: black)")
    p.add_argument("--relu", choices=("per-step", "final"), default=None,
                   help="ReLU placement for integrated-grad-cam (default: per-step)")
    p.add_argument("--score", choices=("logit", "probability"), default="probability",
                   help="confidence used for Drop%%/Increase%% and printed scores (default: probability)")
    p.add_argument("--threads", type=_positive_int, default=1,
                   help="worker threads; never changes results (default: 1)")


def _add_eval_args(p):
    p.add_argument("--keep-fraction", type=_fraction, default=DEFAULT_KEEP_FRACTION,
                   help=f"fraction of top pixels kept for Drop%%/Increase%% (default: {DEFAULT_KEEP_FRACTION})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="igcam", description="CAM-style attribution for small CNNs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explain", help="explain one image")
    _add_model_args(p)
    p.add_argument("--image", required=True, help="input PNG")
    _add_method_args(p)
    p.add_argument("--class", dest="class_spec", type=_class_spec, default="argmax",
                   help="class index or 'argmax' (default: argmax)")
    p.add_argument("--out", required=True,
                   help="heatmap PNG; the saliency dump is written next to it with suffix .sal")
    p.add_argument("--overlay", help="optional overlay PNG (heatmap blended over the image)")

    p = sub.add_parser("evaluate", help="metrics over a dataset")
    _add_model_args(p)
    p.add_argument("--dataset", required=True, help="dataset index (JSON)")
    _add_method_args(p)
    _add_eval_args(p)
    p.add_argument("--class", dest="class_spec", type=_class_spec, default="label",
                   help="class index, 'argmax' or 'label' (default: label)")
    p.add_argument("--report", required=True, help="output report (JSON lines)")

    p = sub.add_parser("compare", help="run several methods with one configuration")
    _add_model_args(p)
    p.add_argument("--dataset", help="dataset index (JSON)")
    p.add_argument("--image", help="single image; with --out writes a heatmap strip")
    _add_method_args(p, multi=True)
    _add_eval_args(p)
    p.add_argument("--class", dest="class_spec", type=_class_spec, default=None,
                   help="class index, 'argmax' or 'label' (default: label for datasets, argmax for images)")
    p.add_argument("--report", help="output report (JSON lines, one block per method)")
    p.add_argument("--out", help="heatmap strip PNG for --image")

    p = sub.add_parser("gen-fixture", help="write a deterministic fixture model and dataset")
    p.add_argument("--family", required=True, choices=fixtures.FAMILIES)
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p.add_argument("--out", required=True, help="output directory")
    return parser


# ---------------------------------------------------------------------------


def _load_model(args):
    blob = args.blob or str(Path(args.model).with_suffix(".bin"))
    return model_io.load_bundle(args.model, blob)


def _settings(args, model, method: str, class_spec) -> ExplainSettings:
    layer = None if args.layer in (None, "last-conv") else args.layer
    if layer is not None:
        try:
            model.index_of(layer)
        except IgcamError:
            raise UsageError(f"unknown layer {layer!r}") from None
    if isinstance(class_spec, int) and class_spec >= model.class_count:
        raise UsageError(f"class {class_spec} outside [0, {model.class_count})")
    return ExplainSettings(
        method=method,
        class_index=class_spec,
        tap_layer=layer,
        steps=args.steps or DEFAULT_STEPS,
        baseline=args.baseline or "black",
        relu_placement=(args.relu or "per-step").replace("-", "_"),
        score_mode=args.score,
        keep_fraction=getattr(args, "keep_fraction", DEFAULT_KEEP_FRACTION),
        threads=args.threads,
    )


def _flag_warnings(args, cli_method: str) -> None:
    method = _method_name(cli_method)
    if method not in PATH_METHODS:
        if args.steps is not None:
            _warn(f"--steps is ignored by {cli_method}")
        if args.baseline is not None:
            _warn(f"--baseline is ignored by {cli_method}")
    if method != "integrated_grad_cam" and args.relu is not None:
        _warn(f"--relu is ignored by {cli_method}")
    if method == "integrated_gradients" and args.layer not in (None, "last-conv"):
        _warn("--layer is ignored by integrated-gradients")


def _baseline_warning(path: PathSpec, image: np.ndarray, method: str) -> None:
    if method in PATH_METHODS and np.array_equal(path.baseline_for(image), image):
        _warn("baseline equals the input image; the integrated map is all zero")


def cmd_explain(args) -> int:
    if args.class_spec == "label":
        raise UsageError("--class label needs a dataset; use an index or 'argmax'")
    model = _load_model(args)
    image = model_io.load_image(args.image, model.input_shape)
    _flag_warnings(args, args.method)
    settings = _settings(args, model, _method_name(args.method), args.class_spec)
    path = settings.path_for(model)
    _baseline_warning(path, image, settings.method)

    smap = run_explain(model, image, settings, path=path)
    _, h, w = model.input_shape
    sal = image_saliency(smap, h, w)
    if not np.any(sal > 0):
        _warn("saliency map is all zero")
    out = Path(args.out)
    model_io.save_heatmap(render(sal), out)
    model_io.save_saliency(smap, out.with_suffix(".sal"))
    if args.overlay:
        model_io.save_heatmap(render(sal, image, DEFAULT_OVERLAY_BLEND), args.overlay)
    psi = engine.score(model, image, smap.class_index, settings.score_mode)
    print(f"class={smap.class_index} score={psi!r} method={args.method}")
    return 0


def _write_report(reports, path) -> None:
    lines = [line for rep in reports for line in report_lines(rep)]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_evaluate(args) -> int:
    model = _load_model(args)
    _flag_warnings(args, args.method)
    settings = _settings(args, model, _method_name(args.method), args.class_spec)
    data = load_dataset_arrays(model, args.dataset)
    report = evaluate(model, data, settings, threads=args.threads)
    _write_report([report], args.report)
    print(format_table([report]))
    return 0


def cmd_compare(args) -> int:
    if not args.dataset and not args.image:
        raise UsageError("compare needs --dataset and/or --image")
    if args.out and not args.image:
        raise UsageError("--out (heatmap strip) requires --image")
    if args.dataset and not args.report:
        raise UsageError("--dataset requires --report")
    methods = args.method or list(CLI_METHODS)
    model = _load_model(args)
    for m in methods:
        _flag_warnings(args, m)

    if args.dataset:
        class_spec = args.class_spec if args.class_spec is not None else "label"
        data = load_dataset_arrays(model, args.dataset)
        reports = [evaluate(model, data, _settings(args, model, _method_name(m), class_spec),
                            threads=args.threads) for m in methods]
        _write_report(reports, args.report)
        print(format_table(reports))

    if args.image:
        class_spec = args.class_spec if args.class_spec not in (None, "label") else "argmax"
        image = model_io.load_image(args.image, model.input_shape)
        _, h, w = model.input_shape
        heatmaps = []
        for m in methods:
            settings = _settings(args, model, _method_name(m), class_spec)
            smap = run_explain(model, image, settings)
            heatmaps.append(render(image_saliency(smap, h, w)))
            print(f"method={m} class={smap.class_index}")
        if args.out:
            model_io.save_heatmap(strip(heatmaps), args.out)
    return 0


def cmd_gen_fixture(args) -> int:
    fixture = fixtures.make_fixture(args.family, args.seed)
    paths = fixtures.write_fixture(fixture, args.out)
    print(f"family={args.family} seed={args.seed} images={len(fixture.images)} "
          f"model={paths['model']}")
    return 0


COMMANDS = {
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "gen-fixture": cmd_gen_fixture,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with np.errstate(over="raise", divide="raise", invalid="raise"):
            return COMMANDS[args.command](args)
    except IgcamError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: validation: floating point error ({exc})", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
