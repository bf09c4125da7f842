"""Panoptic, semantic and instance metrics with exact dataset-level accumulation.

Per-image results are kept as integer counts, exact rational IoU sums and
integer confusion matrices, so merging them is associative and commutative
bit for bit. Ratios are only formed when a :class:`MetricReport` is built.

Conventions:

* A ground-truth pixel is void if its class is ``catalog.void_id`` or a
  non-eval class. Void pixels are removed from IoU denominators.
* Predicted segments with more than half their area on void are dropped
  before false positives are counted.
* Class means skip classes that appear in neither prediction nor ground
  truth.
* Mask AP uses IoU thresholds 0.50:0.05:0.95, inclusive (IoU >= t is a hit),
  with 101-point interpolated precision, averaged over classes that have
  ground-truth instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .core import ClassCatalog, LabelMap, ValidationError

GROUPS = ("all", "things", "stuff")
AP_THRESHOLDS = tuple(range(50, 100, 5))  # percent


def _pct(x) -> float:
    return float(x) * 100.0


# ---------------------------------------------------------------------------
# Segment matching
# ---------------------------------------------------------------------------


@dataclass
class ClassMatch:
    tp: list[tuple[tuple[int, int], tuple[int, int], Fraction]] = field(default_factory=list)
    fp: list[tuple[int, int]] = field(default_factory=list)
    fn: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class MatchResult:
    """TP/FP/FN partition per eval class. Segments are (class, instance) keys."""

    per_class: dict[int, ClassMatch]

    def iou_sum(self, c: int) -> Fraction:
        return sum((t[2] for t in self.per_class[c].tp), Fraction(0))


def _segment_areas(key: np.ndarray, valid: np.ndarray) -> dict[int, int]:
    k, n = np.unique(key[valid], return_counts=True)
    return dict(zip(k.tolist(), n.tolist()))


def _void_mask(lm: LabelMap, catalog: ClassCatalog) -> np.ndarray:
    lut = catalog.eval_lut()
    sem = np.where((lm.sem >= 0) & (lm.sem < len(lut)), lm.sem, catalog.void_id)
    return lut[sem] < 0


_SHIFT = 1 << 31


def match_segments(pred: LabelMap, gt: LabelMap, catalog: ClassCatalog) -> MatchResult:
    """Match predicted and ground-truth segments of the same class with IoU > 0.5."""
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    gt_void = _void_mask(gt, catalog)
    pred_void = _void_mask(pred, catalog)
    gkey = gt.sem.astype(np.int64) * _SHIFT + gt.inst
    pkey = pred.sem.astype(np.int64) * _SHIFT + pred.inst

    gt_area = _segment_areas(gkey, ~gt_void)
    pred_area = _segment_areas(pkey, ~pred_void)
    pred_on_void = _segment_areas(pkey, ~pred_void & gt_void)

    both = ~gt_void & ~pred_void
    pair = np.stack([gkey[both], pkey[both]], axis=1)
    inter: dict[tuple[int, int], int] = {}
    if len(pair):
        uniq, counts = np.unique(pair, axis=0, return_counts=True)
        inter = {(int(g), int(p)): int(n) for (g, p), n in zip(uniq, counts)}

    def split(k: int) -> tuple[int, int]:
        return k // _SHIFT, k % _SHIFT

    per_class = {c: ClassMatch() for c in catalog.eval_ids}
    gt_hit, pred_hit = set(), set()
    for (g, p), n in sorted(inter.items()):
        gc, pc = g // _SHIFT, p // _SHIFT
        if gc != pc:
            continue
        union = pred_area[p] + gt_area[g] - n - pred_on_void.get(p, 0)
        if 2 * n > union:
            iou = Fraction(n, union)
            per_class[gc].tp.append((split(p), split(g), iou))
            gt_hit.add(g)
            pred_hit.add(p)
    for g in sorted(gt_area):
        if g not in gt_hit:
            per_class[g // _SHIFT].fn.append(split(g))
    for p in sorted(pred_area):
        if p in pred_hit:
            continue
        if 2 * pred_on_void.get(p, 0) > pred_area[p]:
            continue
        per_class[p // _SHIFT].fp.append(split(p))
    return MatchResult(per_class)


# ---------------------------------------------------------------------------
# Panoptic quality
# ---------------------------------------------------------------------------


def pq_from_counts(iou_sum, tp: int, fp: int, fn: int) -> tuple[float, float, float] | None:
    """Return (PQ, SQ, RQ) in percent, or None if the class has no segments."""
    if tp + fp + fn == 0:
        return None
    denom = Fraction(2 * tp + fp + fn, 2)
    iou_sum = Fraction(iou_sum)
    pq = iou_sum / denom
    sq = iou_sum / tp if tp else Fraction(0)
    rq = tp / denom
    return _pct(pq), _pct(sq), _pct(rq)


def _group_means(per_class: dict[int, tuple[float, float, float] | None], catalog: ClassCatalog):
    members = {"all": catalog.eval_ids, "things": catalog.thing_ids, "stuff": catalog.stuff_ids}
    out = {}
    for g in GROUPS:
        vals = [per_class[c] for c in members[g] if per_class.get(c) is not None]
        if vals:
            out[g] = tuple(math.fsum(v[i] for v in vals) / len(vals) for i in range(3))
        else:
            out[g] = None
    return out


def panoptic_quality(m: MatchResult, catalog: ClassCatalog):
    """Per-class and per-group (PQ, SQ, RQ) in percent.

    Returns:
        ``(per_class, groups)``; entries are ``None`` where undefined.
    """
    per_class = {
        c: pq_from_counts(m.iou_sum(c), len(cm.tp), len(cm.fp), len(cm.fn)) for c, cm in m.per_class.items()
    }
    return per_class, _group_means(per_class, catalog)


# ---------------------------------------------------------------------------
# Semantic metrics
# ---------------------------------------------------------------------------


def confusion_matrix(pred_sem: np.ndarray, gt_sem: np.ndarray, catalog: ClassCatalog) -> np.ndarray:
    """Rows are gt eval channels, columns pred eval channels plus a final void column."""
    pred_sem, gt_sem = np.asarray(pred_sem), np.asarray(gt_sem)
    if pred_sem.shape != gt_sem.shape:
        raise ValidationError(f"prediction {pred_sem.shape} and ground truth {gt_sem.shape} differ in size")
    lut = catalog.eval_lut()
    n = len(catalog.eval_ids)

    def chan(s):
        s = np.where((s >= 0) & (s < len(lut)), s, catalog.void_id)
        return lut[s]

    g, p = chan(gt_sem).ravel(), chan(pred_sem).ravel()
    keep = g >= 0
    p = np.where(p < 0, n, p)
    return np.bincount(g[keep] * (n + 1) + p[keep], minlength=n * (n + 1)).reshape(n, n + 1).astype(np.int64)


def semantic_from_confusion(cm: np.ndarray):
    """(mIoU, fwIoU, mACC, pACC) in percent, or all None for an all-void gt."""
    n = cm.shape[0]
    total = int(cm.sum())
    if total == 0:
        return None, None, None, None
    tp = np.diag(cm[:, :n]).astype(np.int64)
    gt_count = cm.sum(axis=1)
    pred_count = cm[:, :n].sum(axis=0)
    present = gt_count > 0
    iou = [Fraction(int(tp[c]), int(gt_count[c] + pred_count[c] - tp[c])) for c in range(n) if present[c]]
    acc = [Fraction(int(tp[c]), int(gt_count[c])) for c in range(n) if present[c]]
    fw = sum((Fraction(int(gt_count[c]), total) * Fraction(int(tp[c]), int(gt_count[c] + pred_count[c] - tp[c]))
              for c in range(n) if present[c]), Fraction(0))
    miou = sum(iou, Fraction(0)) / len(iou)
    macc = sum(acc, Fraction(0)) / len(acc)
    pacc = Fraction(int(tp.sum()), total)
    return _pct(miou), _pct(fw), _pct(macc), _pct(pacc)


def semantic_metrics(pred_sem, gt_sem, catalog: ClassCatalog):
    return semantic_from_confusion(confusion_matrix(pred_sem, gt_sem, catalog))


# ---------------------------------------------------------------------------
# Instance AP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredInstance:
    mask: np.ndarray
    class_id: int
    score: float
    seg_id: int = 0


def instances_from_labels(lm: LabelMap, catalog: ClassCatalog, scores: dict[tuple[int, int], float] | None = None,
                          default_score: float = 1.0) -> list[PredInstance]:
    """Thing segments with inst > 0 as scored instances, numbered in segment order."""
    thing = set(catalog.thing_ids)
    out = []
    for c, i in lm.segments():
        if c in thing and i > 0:
            s = default_score if scores is None else scores.get((c, i), default_score)
            out.append(PredInstance((lm.sem == c) & (lm.inst == i), c, float(s), len(out) + 1))
    return out


@dataclass
class _Detection:
    score: float
    key: str
    seg_id: int
    hits: tuple[bool, ...]  # one flag per AP threshold


def _image_detections(preds: Sequence[PredInstance], gt: LabelMap, catalog: ClassCatalog, key: str):
    gts = instances_from_labels(gt, catalog)
    dets: dict[int, list[_Detection]] = {}
    n_gt: dict[int, int] = {}
    for g in gts:
        n_gt[g.class_id] = n_gt.get(g.class_id, 0) + 1
    for c in catalog.thing_ids:
        cp = sorted((p for p in preds if p.class_id == c), key=lambda p: (-p.score, p.seg_id))
        if not cp:
            continue
        cg = [g for g in gts if g.class_id == c]
        inter = np.array([[int(np.count_nonzero(p.mask & g.mask)) for g in cg] for p in cp], dtype=np.int64).reshape(len(cp), len(cg))
        union = np.array([[int(np.count_nonzero(p.mask | g.mask)) for g in cg] for p in cp], dtype=np.int64).reshape(len(cp), len(cg))
        flags = np.zeros((len(cp), len(AP_THRESHOLDS)), dtype=bool)
        for ti, t in enumerate(AP_THRESHOLDS):
            taken = np.zeros(len(cg), dtype=bool)
            for pi in range(len(cp)):
                best, best_iou = -1, Fraction(-1)
                for gi in range(len(cg)):
                    if taken[gi] or union[pi, gi] == 0:
                        continue
                    if 100 * inter[pi, gi] < t * union[pi, gi]:
                        continue
                    iou = Fraction(int(inter[pi, gi]), int(union[pi, gi]))
                    if iou > best_iou:
                        best, best_iou = gi, iou
                if best >= 0:
                    taken[best] = True
                    flags[pi, ti] = True
        dets[c] = [_Detection(p.score, key, p.seg_id, tuple(bool(f) for f in flags[k])) for k, p in enumerate(cp)]
    return dets, n_gt


def _average_precision(dets: list[_Detection], n_gt: int, ti: int) -> float:
    order = sorted(dets, key=lambda d: (-d.score, d.key, d.seg_id))
    tp = np.cumsum([d.hits[ti] for d in order], dtype=np.float64)
    fp = np.cumsum([not d.hits[ti] for d in order], dtype=np.float64)
    if not len(order):
        return 0.0
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    rec_thresholds = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, rec_thresholds, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(math.fsum(q) / len(rec_thresholds))


def _ap_from_pool(dets: dict[int, list[_Detection]], n_gt: dict[int, int], catalog: ClassCatalog):
    classes = [c for c in catalog.thing_ids if n_gt.get(c, 0) > 0]
    if not classes:
        return None, None
    per_t = []
    for ti in range(len(AP_THRESHOLDS)):
        per_t.append(math.fsum(_average_precision(dets.get(c, []), n_gt[c], ti) for c in classes) / len(classes))
    return _pct(math.fsum(per_t) / len(per_t)), _pct(per_t[0])


def instance_ap(preds: Sequence[PredInstance], gt: LabelMap, catalog: ClassCatalog):
    """Mask AP and AP50 (percent) for a single image."""
    dets, n_gt = _image_detections(preds, gt, catalog, "")
    return _ap_from_pool(dets, n_gt, catalog)


# ---------------------------------------------------------------------------
# Reports and accumulation
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    pq: dict[str, float | None]
    sq: dict[str, float | None]
    rq: dict[str, float | None]
    per_class_pq: dict[str, float | None]
    miou: float | None
    fwiou: float | None
    macc: float | None
    pacc: float | None
    ap: float | None
    ap50: float | None
    count: int
    catalog_digest: str = ""

    COLUMNS = ("pq_all", "sq_all", "rq_all", "pq_things", "sq_things", "rq_things",
               "pq_stuff", "sq_stuff", "rq_stuff", "miou", "fwiou", "macc", "pacc", "ap", "ap50")

    def value(self, column: str) -> float | None:
        if column.count("_") == 1 and column.split("_")[0] in ("pq", "sq", "rq"):
            metric, group = column.split("_")
            return getattr(self, metric)[group]
        return getattr(self, column)

    def row(self) -> list[float | None]:
        return [self.value(c) for c in self.COLUMNS]

    def to_dict(self) -> dict:
        return {
            "pq": dict(self.pq), "sq": dict(self.sq), "rq": dict(self.rq),
            "per_class_pq": dict(self.per_class_pq), "classes": list(self.per_class_pq),
            "miou": self.miou, "fwiou": self.fwiou, "macc": self.macc, "pacc": self.pacc,
            "ap": self.ap, "ap50": self.ap50, "count": self.count, "catalog_digest": self.catalog_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        order = d.get("classes") or list(d["per_class_pq"])  # JSON key order is not preserved
        per_class = {n: d["per_class_pq"][n] for n in order}
        return cls(d["pq"], d["sq"], d["rq"], per_class, d["miou"], d["fwiou"], d["macc"], d["pacc"],
                   d["ap"], d["ap50"], int(d.get("count", 0)), d.get("catalog_digest", ""))

    @classmethod
    def from_columns(cls, values: dict[str, float | None], per_class_pq: dict[str, float | None] | None = None,
                     count: int = 0) -> "MetricReport":
        """Build a report from flat column values, e.g. a published table row."""
        grp = {m: {g: values.get(f"{m}_{g}") for g in GROUPS} for m in ("pq", "sq", "rq")}
        return cls(grp["pq"], grp["sq"], grp["rq"], dict(per_class_pq or {}), values.get("miou"),
                   values.get("fwiou"), values.get("macc"), values.get("pacc"), values.get("ap"),
                   values.get("ap50"), count)


@dataclass
class EvalAccumulator:
    """Mergeable sufficient statistics for every metric in :class:`MetricReport`."""

    catalog: ClassCatalog
    iou_sum: dict[int, Fraction] = field(default_factory=dict)
    tp: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    fn: dict[int, int] = field(default_factory=dict)
    confusion: np.ndarray | None = None
    detections: dict[int, list[_Detection]] = field(default_factory=dict)
    n_gt: dict[int, int] = field(default_factory=dict)
    count: int = 0

    def __post_init__(self):
        for c in self.catalog.eval_ids:
            self.iou_sum.setdefault(c, Fraction(0))
            for d in (self.tp, self.fp, self.fn):
                d.setdefault(c, 0)
        if self.confusion is None:
            n = len(self.catalog.eval_ids)
            self.confusion = np.zeros((n, n + 1), dtype=np.int64)

    def add_image(self, pred: LabelMap, gt: LabelMap, instances: Sequence[PredInstance] | None = None,
                  key: str = "") -> "EvalAccumulator":
        m = match_segments(pred, gt, self.catalog)
        for c, cm in m.per_class.items():
            self.iou_sum[c] += m.iou_sum(c)
            self.tp[c] += len(cm.tp)
            self.fp[c] += len(cm.fp)
            self.fn[c] += len(cm.fn)
        self.confusion += confusion_matrix(pred.sem, gt.sem, self.catalog)
        if instances is None:
            instances = instances_from_labels(pred, self.catalog)
        dets, n_gt = _image_detections(instances, gt, self.catalog, key)
        for c, ds in dets.items():
            self.detections.setdefault(c, []).extend(ds)
        for c, n in n_gt.items():
            self.n_gt[c] = self.n_gt.get(c, 0) + n
        self.count += 1
        return self

    def merge(self, other: "EvalAccumulator") -> "EvalAccumulator":
        if other.catalog.digest() != self.catalog.digest():
            raise ValidationError("cannot merge results computed with different catalogs")
        out = EvalAccumulator(self.catalog)
        for c in self.catalog.eval_ids:
            out.iou_sum[c] = self.iou_sum[c] + other.iou_sum[c]
            out.tp[c] = self.tp[c] + other.tp[c]
            out.fp[c] = self.fp[c] + other.fp[c]
            out.fn[c] = self.fn[c] + other.fn[c]
        out.confusion = self.confusion + other.confusion
        for src in (self, other):
            for c, ds in src.detections.items():
                out.detections.setdefault(c, []).extend(ds)
            for c, n in src.n_gt.items():
                out.n_gt[c] = out.n_gt.get(c, 0) + n
        out.count = self.count + other.count
        return out

    def report(self) -> MetricReport:
        cat = self.catalog
        per_class = {c: pq_from_counts(self.iou_sum[c], self.tp[c], self.fp[c], self.fn[c]) for c in cat.eval_ids}
        groups = _group_means(per_class, cat)
        miou, fwiou, macc, pacc = semantic_from_confusion(self.confusion)
        ap, ap50 = _ap_from_pool(self.detections, self.n_gt, cat)

        def pick(i):
            return {g: (None if groups[g] is None else groups[g][i]) for g in GROUPS}

        return MetricReport(
            pq=pick(0), sq=pick(1), rq=pick(2),
            per_class_pq={cat[c].name: (None if per_class[c] is None else per_class[c][0]) for c in cat.eval_ids},
            miou=miou, fwiou=fwiou, macc=macc, pacc=pacc, ap=ap, ap50=ap50, count=self.count,
            catalog_digest=cat.digest(),
        )


def evaluate_image(pred: LabelMap, gt: LabelMap, catalog: ClassCatalog,
                   instances: Sequence[PredInstance] | None = None, key: str = "") -> EvalAccumulator:
    return EvalAccumulator(catalog).add_image(pred, gt, instances, key)


def aggregate(results: Iterable[EvalAccumulator]) -> MetricReport:
    """Combine per-image accumulators into one dataset-level report."""
    results = list(results)
    if not results:
        raise ValidationError("nothing to aggregate")
    total = results[0]
    for r in results[1:]:
        total = total.merge(r)
    return total.report()


# ---------------------------------------------------------------------------
# Deltas
# ---------------------------------------------------------------------------


def _diff(a, b):
    if a is None or b is None:
        return None
    return round(b - a, 9)


@dataclass
class DeltaReport:
    """Absolute differences ``b - a`` in percentage points."""

    columns: dict[str, float | None]
    per_class_pq: dict[str, float | None]

    def to_dict(self) -> dict:
        return {"columns": dict(self.columns), "per_class_pq": dict(self.per_class_pq),
                "classes": list(self.per_class_pq)}

    @classmethod
    def from_dict(cls, d: dict) -> "DeltaReport":
        order = d.get("classes") or list(d["per_class_pq"])
        return cls({c: d["columns"].get(c) for c in MetricReport.COLUMNS}, {n: d["per_class_pq"][n] for n in order})


def delta_report(a: MetricReport, b: MetricReport) -> DeltaReport:
    if a.catalog_digest and b.catalog_digest and a.catalog_digest != b.catalog_digest:
        raise ValidationError("reports come from different catalogs")
    cols = {c: _diff(a.value(c), b.value(c)) for c in MetricReport.COLUMNS}
    names = list(a.per_class_pq) + [n for n in b.per_class_pq if n not in a.per_class_pq]
    per_class = {n: _diff(a.per_class_pq.get(n), b.per_class_pq.get(n)) for n in names}
    return DeltaReport(cols, per_class)
