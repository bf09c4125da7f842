"""Command line interface: ``noctis <command> ...``.

Exit codes: 0 success, 2 invalid input or data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .core import (DatasetEntry, DatasetIndex, FormatError, NoctisError, NumericError, load_catalog, load_manifest,
                   load_samples, read_image, save_manifest, write_panoptic)
from .fusion import FusionParams, fuse_from_heads, read_heads
from .harness import (Cell, StageError, delta_table, evaluate_manifests, fmt, load_config, metric_table,
                      per_class_table, run_experiment)
from .learner import TrainConfig, load_checkpoint, predict_heads, save_checkpoint, train_segmenter
from .metrics import MetricReport, delta_report
from .nightshift import (GanConfig, convert_subset, load_translator, parametric_converter, read_night_params,
                         save_translator, train_translator, translator_converter)
from .scenegen import DAY, NIGHT_STYLES, generate_dataset, read_lighting

log = logging.getLogger("noctis")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _json_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return doc


def _fusion_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nms-kernel", type=int, default=7)
    p.add_argument("--center-threshold", type=float, default=0.1)
    p.add_argument("--top-k", type=int, default=200)
    p.add_argument("--stuff-area-min", type=int, default=None)


def _fusion(args) -> FusionParams:
    return FusionParams(args.nms_kernel, args.center_threshold, args.top_k, args.stuff_area_min)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    catalog = load_catalog(args.catalog)
    if args.lighting is None or args.lighting == "day":
        lighting = DAY
    elif args.lighting in NIGHT_STYLES:
        lighting = NIGHT_STYLES[args.lighting]
    else:
        lighting = read_lighting(args.lighting)
    index = generate_dataset(args.out, args.count, args.seed, args.dims, lighting, args.split, catalog)
    print(f"wrote {len(index)} scenes to {args.out}")
    return EXIT_OK


def cmd_convert(args) -> int:
    if (args.params is None) == (args.translator is None):
        raise FormatError("give exactly one of --params or --translator")
    convert = (parametric_converter(read_night_params(args.params)) if args.params
               else translator_converter(load_translator(args.translator)))
    index = load_manifest(args.manifest)
    out = convert_subset(index, args.fraction, args.seed, convert, args.out)
    path = save_manifest(Path(args.out) / "manifest.json", out)
    n = sum(e.domain == "converted" for e in out.entries) - sum(e.domain == "converted" for e in index.entries)
    print(f"converted {n} of {len(index)} images; manifest {path}")
    return EXIT_OK


def cmd_train_translator(args) -> int:
    cfg = GanConfig.from_dict(_json_file(args.config))
    init = load_translator(args.resume) if args.resume else None
    res = train_translator(load_manifest(args.day), load_manifest(args.night), cfg, init)
    save_translator(args.out, res.pair, cfg)
    if res.trace["cyc"]:
        print(f"cycle loss {res.trace['cyc'][0]:.4f} -> {res.trace['cyc'][-1]:.4f}")
    print(f"saved {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    catalog = load_catalog(args.catalog)
    cfg = TrainConfig.from_dict(_json_file(args.config))
    init = state = None
    if args.resume:
        init, state, _ = load_checkpoint(args.resume)
    samples = load_samples(load_manifest(args.manifest), catalog)
    res = train_segmenter(cfg, samples, catalog, init=init, state=state)
    save_checkpoint(args.out, res.model, res.state, cfg)
    if res.trace:
        print(f"loss {res.trace[0]:.4f} -> {res.trace[-1]:.4f} over {len(res.trace)} iterations")
    print(f"saved {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    catalog = load_catalog(args.catalog)
    params = _fusion(args)
    if (args.heads is None) == (args.model is None):
        raise FormatError("give exactly one of --heads or --model")
    if args.heads:
        lm, scores = fuse_from_heads(read_heads(args.heads), params, catalog)
        write_panoptic(args.out, lm, catalog, scores)
        print(f"wrote {args.out}")
        return EXIT_OK
    if args.manifest is None:
        raise FormatError("--model needs --manifest")
    model, _, _ = load_checkpoint(args.model)
    index = load_manifest(args.manifest)
    out = Path(args.out)
    entries = []
    for i, e in enumerate(index.entries):
        lm, scores = fuse_from_heads(predict_heads(model, read_image(index.image_path(i))), params, catalog)
        dst = out / "panoptic" / f"{Path(e.image).stem}.png"
        write_panoptic(dst, lm, catalog, scores)
        entries.append(DatasetEntry(str(index.image_path(i).resolve()), str(dst.resolve()), e.split, e.domain,
                                    e.source))
    path = save_manifest(out / "manifest.json", DatasetIndex(tuple(entries), index.seed))
    print(f"wrote {len(entries)} predictions; manifest {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    catalog = load_catalog(args.catalog)
    report = evaluate_manifests(load_manifest(args.pred), load_manifest(args.gt), catalog)
    cell = Cell("evaluate", Path(args.pred).parent.name or "pred", Path(args.gt).parent.name or "gt", 0, report)
    _, txt = metric_table([cell])
    print(txt, end="")
    print(per_class_table([cell])[1], end="")
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def _read_report(path: str) -> MetricReport:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return MetricReport.from_dict(doc)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"cannot read metric report {path}: {exc}") from exc


def cmd_compare(args) -> int:
    d = delta_report(_read_report(args.a), _read_report(args.b))
    csv_text, txt = delta_table({f"{Path(args.b).stem}-vs-{Path(args.a).stem}": d})
    print(txt, end="")
    for name, v in d.per_class_pq.items():
        print(f"  {name:<16} {fmt(v, signed=True):>8}")
    if args.out:
        Path(args.out).write_text(csv_text, encoding="utf-8")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    formats = ["json", "csv", "txt"] + ([] if args.no_plots else ["png"])
    result = run_experiment(cfg, args.out, formats=formats)
    print(metric_table(result.section("approach1"))[1], end="")
    if result.section("approach2"):
        print(metric_table(result.section("approach2"), with_iterations=True)[1], end="")
    print(f"reports in {Path(args.out) / 'reports'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="noctis", description="Night-time panoptic segmentation experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render synthetic scenes with panoptic labels")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_dims, default=(64, 128), help="HxW, default 64x128")
    p.add_argument("--lighting", help="'day', a night style name or a key = value lighting file")
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--catalog", default="desk")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("convert", help="translate a seeded fraction of a dataset to night")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fraction", type=float, default=0.28)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", help="night transform key = value file")
    p.add_argument("--translator", help="translator checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train-translator", help="train the day/night translator on unpaired sets")
    p.add_argument("--day", required=True, help="day manifest")
    p.add_argument("--night", required=True, help="night manifest")
    p.add_argument("--config", help="JSON translator settings")
    p.add_argument("--resume", help="translator checkpoint to refine")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_translator)

    p = sub.add_parser("train", help="train or refine the segmenter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON training settings")
    p.add_argument("--resume", help="checkpoint to continue from, optimizer state included")
    p.add_argument("--catalog", default="desk")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="panoptic prediction from a heads file or a model")
    p.add_argument("--heads", help="binary heads file")
    p.add_argument("--model", help="segmenter checkpoint")
    p.add_argument("--manifest", help="images to segment with --model")
    p.add_argument("--catalog", default="desk")
    p.add_argument("--out", required=True, help="PNG path for --heads, directory for --model")
    _fusion_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="prediction manifest")
    p.add_argument("--gt", required=True, help="ground-truth manifest")
    p.add_argument("--catalog", default="desk")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="difference b - a of two metric reports")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out", help="write the differences as CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("experiment", help="run both protocols and write reports")
    p.add_argument("--config", default="desk", help="JSON experiment config or 'desk'")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return ap


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return _exit_code(exc.cause)
    if isinstance(exc, (NumericError, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_INPUT


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NoctisError, ValueError, OSError, KeyError) as exc:
        print(f"noctis: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
