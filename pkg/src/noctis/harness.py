"""Config-driven experiment runner and report emission.

Approach 1 trains a baseline on day scenes, converts a seeded fraction of
the training images (and the whole validation set) to night, retrains on
the mixed set and evaluates both models on both validation sets.

Approach 2 trains a day-to-night translator against a mix of differently
lit night scenes, converts a fraction of the training images with it and
refines the Approach-1 model in stages, evaluating every stage on the
original, converted and varied-night validation sets.

Every metric cell records the content hash of the model and of the dataset
it was computed from.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

from .core import (ClassCatalog, DatasetIndex, NoctisError, Sample, ValidationError, load_catalog, load_manifest,
                   load_samples, manifest_digest, read_panoptic_raw, decode_panoptic, save_manifest, segment_scores)
from .fusion import FusionParams, fuse_from_heads
from .learner import (OptimState, SegModel, TrainConfig, load_checkpoint, predict_heads, prepare, save_checkpoint,
                      train_segmenter)
from .metrics import DeltaReport, EvalAccumulator, MetricReport, aggregate, delta_report, evaluate_image, \
    instances_from_labels
from .nightshift import (DEFAULT_NIGHT, GanConfig, NightParams, TranslatorPair, load_translator,
                         parametric_converter, save_translator, train_translator, translator_converter,
                         convert_subset)
from .scenegen import NIGHT_STYLES, GeneratorSource, MixSource, build_mix, generate_dataset, varied_night_styles

log = logging.getLogger(__name__)


class StageError(NoctisError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixPart:
    """``count`` scenes drawn from a pool of ``pool`` scenes lit in ``style``."""

    style: str
    count: int
    pool: int

    def __post_init__(self):
        if self.style not in NIGHT_STYLES:
            raise ValidationError(f"unknown night style {self.style!r}")
        if not 0 <= self.count <= self.pool:
            raise ValidationError(f"mix part {self.style}: need 0 <= count <= pool")


@dataclass(frozen=True)
class Stage:
    """One refinement stage: extra iterations on a freshly converted training set."""

    name: str
    iterations: int
    fraction: float | None = None  # None uses ExperimentConfig.refine_fraction

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError("stage iterations must be >= 0")
        if self.fraction is not None and not 0.0 <= self.fraction <= 1.0:
            raise ValidationError("stage fraction must lie in [0, 1]")


def _desk_train() -> TrainConfig:
    return TrainConfig(iterations=2000, lr_base=1e-2, seed=7, hidden=64, center_sigma=2.0)


def _desk_gan() -> GanConfig:
    return GanConfig(epochs=60, lr_base=2e-3, seed=3)


def _desk_mix() -> tuple[MixPart, ...]:
    return (MixPart("sodium", 12, 60), MixPart("led", 12, 60), MixPart("wet", 8, 30), MixPart("dark", 8, 30))


def _desk_stages() -> tuple[Stage, ...]:
    return (Stage("refined-1", 700), Stage("refined-2", 1300))


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of both protocols. The defaults are the shipped desk preset."""

    name: str = "desk"
    seed: int = 11
    dims: tuple[int, int] = (64, 128)
    catalog: str = "desk"
    train_count: int = 80
    val_count: int = 40
    fraction: float = 0.28
    converter: str = "parametric"
    night_params: dict = field(default_factory=dict)
    translator: str | None = None
    retrain: str = "scratch"
    train: TrainConfig = field(default_factory=_desk_train)
    fusion: FusionParams = field(default_factory=FusionParams)
    mix: tuple[MixPart, ...] = field(default_factory=_desk_mix)
    gan: GanConfig = field(default_factory=_desk_gan)
    refine_fraction: float = 0.28
    stages: tuple[Stage, ...] = field(default_factory=_desk_stages)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "mix", tuple(self.mix))
        object.__setattr__(self, "stages", tuple(self.stages))
        if len(self.dims) != 2 or min(self.dims) < 32:
            raise ValidationError("dims must be two sizes >= 32")
        if self.train_count < 1 or self.val_count < 1:
            raise ValidationError("scene counts must be >= 1")
        for name in ("fraction", "refine_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.converter not in ("parametric", "translator"):
            raise ValidationError(f"unknown converter {self.converter!r}")
        if self.converter == "translator" and not self.translator:
            raise ValidationError("converter 'translator' needs a translator checkpoint path")
        if self.retrain not in ("scratch", "warm"):
            raise ValidationError(f"unknown retrain mode {self.retrain!r}")
        self.night()  # validates the overrides

    def night(self) -> NightParams:
        unknown = set(self.night_params) - {f.name for f in fields(NightParams)} - {"lights"}
        if unknown:
            raise ValidationError(f"unknown night_params keys: {sorted(unknown)}")
        if "lights" in self.night_params:
            raise ValidationError("night_params cannot set lights in an experiment config")
        return replace(DEFAULT_NIGHT, **self.night_params)

    @property
    def seeds(self) -> dict[str, int]:
        """Every seed the pipeline uses, derived from ``seed`` unless set in a sub-config."""
        return {
            "train_scenes": self.seed, "val_scenes": self.seed + 1, "conversion": self.seed + 2,
            "mix": self.seed + 3, "mix_scenes": self.seed + 4, "refine_conversion": self.seed + 5,
            "night_noise": self.night().seed, "segmenter": self.train.seed, "translator": self.gan.seed,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["mix"] = [asdict(m) for m in self.mix]
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown experiment config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "train" in kw:
                kw["train"] = TrainConfig.from_dict({**asdict(_desk_train()), **kw["train"]})
            if "gan" in kw:
                kw["gan"] = GanConfig.from_dict({**asdict(_desk_gan()), **kw["gan"]})
            if "fusion" in kw:
                kw["fusion"] = FusionParams(**kw["fusion"])
            if "mix" in kw:
                kw["mix"] = tuple(MixPart(**m) for m in kw["mix"])
            if "stages" in kw:
                kw["stages"] = tuple(Stage(**s) for s in kw["stages"])
            return cls(**kw)
        except TypeError as exc:
            raise ValidationError(f"bad experiment config: {exc}") from exc


def load_config(spec: str | os.PathLike | None) -> ExperimentConfig:
    """``None`` or ``"desk"`` gives the shipped preset; anything else is a JSON file path."""
    if spec is None or str(spec) == "desk":
        return ExperimentConfig()
    try:
        doc = json.loads(Path(spec).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read experiment config {spec}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError("experiment config must be a JSON object")
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def worker_count() -> int:
    """Evaluation threads: ``NOCTIS_THREADS`` if set, else the CPU count."""
    env = os.environ.get("NOCTIS_THREADS")
    if env is None or env == "":
        return os.cpu_count() or 1
    try:
        n = int(env)
    except ValueError:
        raise ValidationError(f"NOCTIS_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ValidationError("NOCTIS_THREADS must be >= 1")
    return n


def _parallel_map(fn, n: int, threads: int | None) -> list:
    threads = worker_count() if threads is None else threads
    if threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, range(n)))


def evaluate_model(model: SegModel, samples: Sequence[Sample], catalog: ClassCatalog,
                   fusion: FusionParams = FusionParams(), threads: int | None = None) -> MetricReport:
    """Predict, fuse and score every sample; images run in parallel, reduction is exact."""

    def one(i: int) -> EvalAccumulator:
        s = samples[i]
        pred, scores = fuse_from_heads(predict_heads(model, s.image), fusion, catalog)
        return evaluate_image(pred, s.labels, catalog, instances_from_labels(pred, catalog, scores), key=f"{i:06d}")

    if not samples:
        raise ValidationError("nothing to evaluate")
    return aggregate(_parallel_map(one, len(samples), threads))


def evaluate_manifests(pred: DatasetIndex, gt: DatasetIndex, catalog: ClassCatalog,
                       threads: int | None = None) -> MetricReport:
    """Score stored panoptic predictions against ground truth, pairing entries by position.

    Prediction entries carry their panoptic PNG in the ``label`` field (or
    ``image`` when no label is given); sidecar scores feed AP.
    """
    if len(pred) != len(gt):
        raise ValidationError(f"prediction manifest has {len(pred)} entries, ground truth {len(gt)}")

    def one(i: int) -> EvalAccumulator:
        path = pred.label_path(i) or pred.image_path(i)
        rgb, metas = read_panoptic_raw(path)
        lm = decode_panoptic(rgb, metas, catalog)
        scores = segment_scores(lm, rgb, metas)
        gt_path = gt.label_path(i)
        if gt_path is None:
            raise ValidationError(f"ground-truth entry {gt.entries[i].image} has no labels")
        rgb_gt, metas_gt = read_panoptic_raw(gt_path)
        g = decode_panoptic(rgb_gt, metas_gt, catalog)
        return evaluate_image(lm, g, catalog, instances_from_labels(lm, catalog, scores), key=f"{i:06d}")

    if not len(gt):
        raise ValidationError("nothing to evaluate")
    return aggregate(_parallel_map(one, len(gt), threads))


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class Cell:
    """One (model, dataset) evaluation with its provenance."""

    section: str
    model: str
    dataset: str
    iterations: int
    report: MetricReport
    checkpoint: str = ""
    checkpoint_sha256: str = ""
    manifest: str = ""
    manifest_sha256: str = ""

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("section", "model", "dataset", "iterations", "checkpoint",
                                           "checkpoint_sha256", "manifest", "manifest_sha256")}
        d["report"] = self.report.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Cell":
        kw = {k: v for k, v in d.items() if k != "report"}
        return cls(report=MetricReport.from_dict(d["report"]), **kw)


@dataclass
class ExperimentResult:
    cells: list[Cell] = field(default_factory=list)
    deltas: dict[str, DeltaReport] = field(default_factory=dict)
    traces: dict[str, list[float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def cell(self, model: str, dataset: str) -> Cell:
        for c in self.cells:
            if c.model == model and c.dataset == dataset:
                return c
        raise KeyError((model, dataset))

    def section(self, name: str) -> list[Cell]:
        return [c for c in self.cells if c.section == name]

    def add_delta(self, name: str, a: tuple[str, str], b: tuple[str, str]) -> None:
        self.deltas[name] = delta_report(self.cell(*a).report, self.cell(*b).report)

    def merged(self, other: "ExperimentResult") -> "ExperimentResult":
        return ExperimentResult(self.cells + other.cells, {**self.deltas, **other.deltas},
                                {**self.traces, **other.traces}, self.config or other.config,
                                {**self.seeds, **other.seeds})

    def to_dict(self) -> dict:
        return {
            "config": self.config, "seeds": self.seeds,
            "cells": [c.to_dict() for c in self.cells],
            "deltas": {k: v.to_dict() for k, v in self.deltas.items()},
            "traces": self.traces,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        deltas = {k: DeltaReport.from_dict(v) for k, v in d.get("deltas", {}).items()}
        return cls([Cell.from_dict(c) for c in d.get("cells", [])], deltas, dict(d.get("traces", {})),
                   dict(d.get("config", {})), dict(d.get("seeds", {})))


def load_result(path: str | os.PathLike) -> ExperimentResult:
    return ExperimentResult.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Pipeline helpers
# ---------------------------------------------------------------------------


@contextmanager
def _stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _rel(path: Path, root: Path) -> str:
    return os.path.relpath(Path(path).resolve(), Path(root).resolve())


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


@dataclass
class _Dataset:
    """A saved dataset: manifest on disk, loaded samples and content hash."""

    manifest: Path
    index: DatasetIndex
    samples: list[Sample]
    digest: str

    @classmethod
    def save(cls, index: DatasetIndex, manifest: Path, catalog: ClassCatalog) -> "_Dataset":
        save_manifest(manifest, index)
        index = load_manifest(manifest)
        return cls(manifest, index, load_samples(index, catalog), manifest_digest(index))


@dataclass
class _Model:
    name: str
    model: SegModel
    state: OptimState | None
    path: Path
    iterations: int


def _save_model(name: str, model: SegModel, state, cfg: TrainConfig, out: Path, iterations: int) -> _Model:
    path = save_checkpoint(out / "checkpoints" / f"{name}.npz", model, state, cfg)
    return _Model(name, model, state, path, iterations)


def _day_data(cfg: ExperimentConfig, out: Path, catalog: ClassCatalog) -> tuple[_Dataset, _Dataset]:
    data = out / "data"
    s = cfg.seeds
    train = generate_dataset(_fresh_dir(data / "train"), cfg.train_count, s["train_scenes"], cfg.dims,
                             split="train", catalog=catalog, prefix="train", write_manifest=False)
    val = generate_dataset(_fresh_dir(data / "val"), cfg.val_count, s["val_scenes"], cfg.dims,
                           split="val", catalog=catalog, prefix="val", write_manifest=False)
    return (_Dataset.save(train, data / "train" / "manifest.json", catalog),
            _Dataset.save(val, data / "val" / "manifest.json", catalog))


def _converter(cfg: ExperimentConfig):
    if cfg.converter == "translator":
        return translator_converter(load_translator(cfg.translator))
    return parametric_converter(cfg.night())


def _evaluate_cell(section: str, m: _Model, name: str, ds: _Dataset, cfg: ExperimentConfig,
                   catalog: ClassCatalog, out: Path, threads: int | None) -> Cell:
    report = evaluate_model(m.model, ds.samples, catalog, cfg.fusion, threads)
    log.info("%s on %s: PQ %.2f", m.name, name, report.pq["all"] or 0.0)
    return Cell(section, m.name, name, m.iterations, report, _rel(m.path, out), m.model.digest(),
                _rel(ds.manifest, out), ds.digest)


def _train(cfg: TrainConfig, ds: _Dataset, catalog: ClassCatalog, init: SegModel | None = None,
           state: OptimState | None = None):
    return train_segmenter(cfg, ds.samples, catalog, init=init, state=state,
                           prepared=prepare(ds.samples, catalog, cfg))


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------


@dataclass
class Approach1Artifacts:
    """Datasets and models produced by :func:`run_approach1`, reused by Approach 2."""

    train: _Dataset
    val: _Dataset
    val_converted: _Dataset
    baseline: _Model
    retrained: _Model


def run_approach1(cfg: ExperimentConfig, out: str | os.PathLike, threads: int | None = None
                  ) -> tuple[ExperimentResult, Approach1Artifacts]:
    """Baseline vs retrained on the original and the converted validation set."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    catalog = load_catalog(cfg.catalog)
    result = ExperimentResult(config=cfg.to_dict(), seeds=cfg.seeds)
    s = cfg.seeds
    data = out / "data"

    with _stage("generate"):
        train, val = _day_data(cfg, out, catalog)
    with _stage("convert"):
        convert = _converter(cfg)
        mixed = convert_subset(train.index, cfg.fraction, s["conversion"], convert,
                               _fresh_dir(data / "train_converted"))
        mixed = _Dataset.save(mixed, data / "train_converted" / "manifest.json", catalog)
        val_conv = convert_subset(val.index, 1.0, s["conversion"], convert, _fresh_dir(data / "val_converted"))
        val_conv = _Dataset.save(val_conv, data / "val_converted" / "manifest.json", catalog)
    with _stage("train-baseline"):
        res = _train(cfg.train, train, catalog)
        baseline = _save_model("baseline", res.model, res.state, cfg.train, out, cfg.train.iterations)
        result.traces["baseline"] = res.trace
    with _stage("retrain"):
        warm = cfg.retrain == "warm"
        res = _train(cfg.train, mixed, catalog, init=baseline.model if warm else None,
                     state=baseline.state if warm else None)
        iters = cfg.train.iterations * (2 if warm else 1)
        retrained = _save_model("retrained", res.model, res.state, cfg.train, out, iters)
        result.traces["retrained"] = res.trace
    with _stage("evaluate-approach1"):
        for m in (baseline, retrained):
            for name, ds in (("original", val), ("converted", val_conv)):
                result.cells.append(_evaluate_cell("approach1", m, name, ds, cfg, catalog, out, threads))
        for name in ("original", "converted"):
            result.add_delta(f"retrained-vs-baseline/{name}", ("baseline", name), ("retrained", name))
    return result, Approach1Artifacts(train, val, val_conv, baseline, retrained)


def run_approach2(cfg: ExperimentConfig, out: str | os.PathLike, base: Approach1Artifacts | str | os.PathLike,
                  threads: int | None = None) -> ExperimentResult:
    """Translator on a night mix, staged refinement of the Approach-1 model.

    Args:
        cfg: experiment configuration.
        out: output directory (shared with Approach 1).
        base: artifacts of :func:`run_approach1`, or a path to the checkpoint
            to refine; with a path the day datasets are regenerated.
        threads: evaluation threads (default :func:`worker_count`).
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    catalog = load_catalog(cfg.catalog)
    result = ExperimentResult(config=cfg.to_dict(), seeds=cfg.seeds)
    s = cfg.seeds
    data = out / "data"

    with _stage("load-base"):
        if isinstance(base, Approach1Artifacts):
            art = base
            start, val, val_conv, train = art.retrained, art.val, art.val_converted, art.train
            baseline = art.baseline
        else:
            model, state, _ = load_checkpoint(base)
            if model.catalog_digest != catalog.digest():
                raise ValidationError("base checkpoint was trained on a different catalog")
            start = _Model("retrained", model, state, Path(base), cfg.train.iterations)
            baseline = None
            train, val = _day_data(cfg, out, catalog)
            vc = convert_subset(val.index, 1.0, s["conversion"], _converter(cfg), _fresh_dir(data / "val_converted"))
            val_conv = _Dataset.save(vc, data / "val_converted" / "manifest.json", catalog)
    with _stage("generate-night"):
        styles = varied_night_styles()
        night_val = generate_dataset(_fresh_dir(data / "val_night"), cfg.val_count, s["val_scenes"], cfg.dims,
                                     styles, split="val", catalog=catalog, prefix="val", write_manifest=False)
        night_val = _Dataset.save(night_val, data / "val_night" / "manifest.json", catalog)
        sources = [MixSource(p.style, p.count, generator=GeneratorSource(NIGHT_STYLES[p.style], p.pool,
                                                                         s["mix_scenes"] + k, cfg.dims))
                   for k, p in enumerate(cfg.mix)]
        mix = build_mix(sources, s["mix"], _fresh_dir(data / "mix"), catalog)
        mix = _Dataset.save(mix, data / "mix" / "manifest.json", catalog)
    with _stage("train-translator"):
        tr = train_translator([x.image for x in train.samples], [x.image for x in mix.samples], cfg.gan)
        pair: TranslatorPair = tr.pair
        save_translator(out / "checkpoints" / "translator.npz", pair, cfg.gan)
        for k, v in tr.trace.items():
            result.traces[f"translator/{k}"] = v

    models = [start]
    model, state, done = start.model, start.state, start.iterations
    for k, st in enumerate(cfg.stages):
        with _stage(st.name):
            frac = cfg.refine_fraction if st.fraction is None else st.fraction
            conv = convert_subset(train.index, frac, s["refine_conversion"], translator_converter(pair),
                                  _fresh_dir(data / f"train_{st.name}"), suffix="mixnight")
            ds = _Dataset.save(conv, data / f"train_{st.name}" / "manifest.json", catalog)
            scfg = replace(cfg.train, iterations=st.iterations)
            res = _train(scfg, ds, catalog, init=model, state=state)
            model, state, done = res.model, res.state, done + st.iterations
            models.append(_save_model(st.name, model, state, scfg, out, done))
            result.traces[st.name] = res.trace

    with _stage("evaluate-approach2"):
        sets = (("original", val), ("converted", val_conv), ("varied-night", night_val))
        refs = [m for m in (baseline, start) if m is not None]
        for m in refs:
            result.cells.append(_evaluate_cell("approach2", m, "varied-night", night_val, cfg, catalog, out,
                                               threads))
        for m in models[1:]:
            for name, ds in sets:
                result.cells.append(_evaluate_cell("approach2", m, name, ds, cfg, catalog, out, threads))
        if len(models) > 1:
            last = models[-1].name
            result.add_delta(f"{last}-vs-retrained/varied-night", ("retrained", "varied-night"),
                             (last, "varied-night"))
    return result


def run_experiment(cfg: ExperimentConfig, out: str | os.PathLike, threads: int | None = None,
                   formats: Iterable[str] = ("json", "csv", "txt")) -> ExperimentResult:
    """Approach 1, then Approach 2 when stages are configured; reports go to ``out/reports``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    result, art = run_approach1(cfg, out, threads)
    try:
        if cfg.stages:
            result = result.merged(run_approach2(cfg, out, art, threads))
            for name in ("original", "converted"):
                last = cfg.stages[-1].name
                result.add_delta(f"{last}-vs-retrained/{name}", ("retrained", name), (last, name))
    except StageError:
        emit_report(result, out / "reports", formats=("json",))
        raise
    emit_report(result, out / "reports", formats=formats)
    return result


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

COLUMN_LABELS = ("PQ", "SQ", "RQ", "PQ_th", "SQ_th", "RQ_th", "PQ_st", "SQ_st", "RQ_st",
                 "mIoU", "fwIoU", "mACC", "pACC", "AP", "AP50")


def fmt(v: float | None, signed: bool = False) -> str:
    if v is None:
        return "-"
    return f"{v:+.2f}" if signed else f"{v:.2f}"


def text_table(header: Sequence[str], rows: Sequence[Sequence[str]], left: int = 2) -> str:
    """Aligned plain-text table; the first ``left`` columns are left-aligned."""
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]

    def line(r):
        return "  ".join(str(v).ljust(w) if i < left else str(v).rjust(w)
                         for i, (v, w) in enumerate(zip(r, widths))).rstrip()

    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), sep, *(line(r) for r in rows)]) + "\n"


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def metric_table(cells: Sequence[Cell], with_iterations: bool = False):
    """(csv text, aligned text) for the main metric table."""
    head = ["model", "dataset"] + (["iterations"] if with_iterations else [])
    csv_rows, txt_rows = [], []
    for c in cells:
        lead = [c.model, c.dataset] + ([c.iterations] if with_iterations else [])
        csv_rows.append(lead + c.report.row())
        txt_rows.append([str(v) for v in lead] + [fmt(v) for v in c.report.row()])
    return (_csv(head + list(MetricReport.COLUMNS), csv_rows),
            text_table([h.capitalize() for h in head] + list(COLUMN_LABELS), txt_rows,
                       left=len(head)))


def per_class_table(cells: Sequence[Cell]):
    names = list(cells[0].report.per_class_pq) if cells else []
    csv_rows = [[c.model, c.dataset] + [c.report.per_class_pq.get(n) for n in names] for c in cells]
    txt_rows = [[c.model, c.dataset] + [fmt(c.report.per_class_pq.get(n)) for n in names] for c in cells]
    return (_csv(["model", "dataset"] + names, csv_rows),
            text_table(["Model", "Dataset"] + [n.title() for n in names], txt_rows))


def delta_table(deltas: dict[str, DeltaReport]):
    deltas = dict(sorted(deltas.items()))  # stable across a JSON round trip
    csv_rows = [[k] + [d.columns.get(c) for c in MetricReport.COLUMNS] for k, d in deltas.items()]
    txt_rows = [[k] + [fmt(d.columns.get(c), signed=True) for c in MetricReport.COLUMNS] for k, d in deltas.items()]
    return (_csv(["comparison"] + list(MetricReport.COLUMNS), csv_rows),
            text_table(["Comparison"] + list(COLUMN_LABELS), txt_rows, left=1))


def emit_report(result: ExperimentResult, out_dir: str | os.PathLike,
                formats: Iterable[str] = ("json", "csv", "txt")) -> list[Path]:
    """Write the result as JSON, CSV tables, aligned text tables and (``png``) figures.

    Tables: ``table1`` (Approach 1 grid), ``table2`` (its per-class PQ),
    ``table3`` and ``table3_per_class`` (Approach 2, omitted without
    refinement cells) and ``deltas``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats = set(formats)
    written: list[Path] = []

    def put(name: str, text: str):
        p = out / name
        p.write_text(text, encoding="utf-8")
        written.append(p)

    if "json" in formats:
        put("result.json", json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
    tables = {}
    a1 = result.section("approach1")
    if a1:
        tables["table1"] = metric_table(a1)
        tables["table2"] = per_class_table(a1)
    a2 = result.section("approach2")
    if a2:
        tables["table3"] = metric_table(a2, with_iterations=True)
        tables["table3_per_class"] = per_class_table(a2)
    if result.deltas:
        tables["deltas"] = delta_table(result.deltas)
    for name, (csv_text, txt) in tables.items():
        if "csv" in formats:
            put(f"{name}.csv", csv_text)
        if "txt" in formats:
            put(f"{name}.txt", txt)
    if "png" in formats:
        from . import plots

        written.extend(plots.render_all(result, out))
    return written
