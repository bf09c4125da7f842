"""Bottom-up panoptic post-processing.

Three head outputs (semantic probabilities, a center heatmap and a per-pixel
offset to the owning center) are turned into a panoptic label map:

1. centers are local maxima of the heatmap inside a square window,
   thresholded and then capped at ``top_k``;
2. each thing pixel is moved by its offset and assigned to the nearest
   center;
3. each instance takes the majority thing class of its pixels, the rest of
   the image takes its best stuff class, and stuff segments below a minimum
   area become void.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from .core import ClassCatalog, LabelMap, NumericError, ValidationError

REFERENCE_PIXELS = 2048 * 1024


@dataclass(frozen=True)
class HeadOutputs:
    """sem_probs (H, W, n_eval), center (H, W) and offset (H, W, 2) as (dy, dx)."""

    sem_probs: np.ndarray
    center: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        sp = np.asarray(self.sem_probs, dtype=np.float64)
        ce = np.asarray(self.center, dtype=np.float64)
        of = np.asarray(self.offset, dtype=np.float64)
        if sp.ndim != 3 or ce.shape != sp.shape[:2] or of.shape != sp.shape[:2] + (2,):
            raise ValidationError(f"inconsistent head shapes {sp.shape}, {ce.shape}, {of.shape}")
        for name, a in (("sem_probs", sp), ("center", ce), ("offset", of)):
            if not np.all(np.isfinite(a)):
                raise NumericError(f"{name} contains non-finite values")
        if sp.size and np.max(np.abs(sp.sum(axis=2) - 1.0)) > 1e-6:
            raise ValidationError("sem_probs must sum to 1 at every pixel")
        object.__setattr__(self, "sem_probs", sp)
        object.__setattr__(self, "center", ce)
        object.__setattr__(self, "offset", of)

    @property
    def shape(self) -> tuple[int, int]:
        return self.center.shape


@dataclass(frozen=True)
class FusionParams:
    nms_kernel: int = 7
    center_threshold: float = 0.1
    top_k: int = 200
    stuff_area_min: int | None = None  # None scales 4096 px by the image size

    def __post_init__(self):
        if self.nms_kernel < 1 or self.nms_kernel % 2 == 0:
            raise ValidationError("nms_kernel must be odd and >= 1")
        if not 0.0 <= self.center_threshold <= 1.0:
            raise ValidationError("center_threshold must lie in [0, 1]")
        if self.top_k < 1:
            raise ValidationError("top_k must be >= 1")

    def area_min(self, height: int, width: int) -> int:
        if self.stuff_area_min is not None:
            return int(self.stuff_area_min)
        return int(round(4096 * height * width / REFERENCE_PIXELS))


@dataclass(frozen=True)
class Center:
    y: int
    x: int
    score: float


def find_centers(heatmap: np.ndarray, params: FusionParams = FusionParams()) -> list[Center]:
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.size == 0:
        return []
    pooled = maximum_filter(heatmap, size=params.nms_kernel, mode="constant", cval=-np.inf)
    keep = (heatmap == pooled) & (heatmap >= params.center_threshold)
    ys, xs = np.nonzero(keep)  # row-major
    scores = heatmap[ys, xs]
    order = np.argsort(-scores, kind="stable")[: params.top_k]
    return [Center(int(ys[i]), int(xs[i]), float(scores[i])) for i in order]


def group_instances(offset: np.ndarray, centers: list[Center], thing_mask: np.ndarray) -> np.ndarray:
    """Assign thing pixels to the center nearest to ``pixel + offset``.

    Returns an int32 map with instance ids 1..len(centers) in center order and
    0 outside ``thing_mask`` (or everywhere when there are no centers).
    """
    thing_mask = np.asarray(thing_mask, dtype=bool)
    out = np.zeros(thing_mask.shape, dtype=np.int32)
    if not centers or not thing_mask.any():
        return out
    ys, xs = np.nonzero(thing_mask)
    ty = ys + offset[ys, xs, 0]
    tx = xs + offset[ys, xs, 1]
    cy = np.array([c.y for c in centers], dtype=np.float64)
    cx = np.array([c.x for c in centers], dtype=np.float64)
    d2 = (ty[:, None] - cy[None, :]) ** 2 + (tx[:, None] - cx[None, :]) ** 2
    out[ys, xs] = np.argmin(d2, axis=1) + 1  # first minimum wins ties
    return out


def _uniform(sem_probs: np.ndarray) -> np.ndarray:
    # No class evidence at all; such pixels stay void.
    return (sem_probs.max(axis=2) - sem_probs.min(axis=2)) <= 1e-12


def fuse(sem_probs: np.ndarray, instances: np.ndarray, params: FusionParams, catalog: ClassCatalog,
         center_scores: list[float] | None = None) -> tuple[LabelMap, dict[tuple[int, int], float]]:
    """Combine semantic probabilities with an instance map by majority vote.

    Args:
        sem_probs: (H, W, n_eval) probabilities over eval classes in catalog order.
        instances: (H, W) instance ids from :func:`group_instances`.
        params: fusion parameters.
        catalog: class definitions.
        center_scores: seed score of each instance id (index = id - 1).

    Returns:
        ``(label_map, scores)`` where scores maps (class, instance) keys of the
        canonical output to the seed center score.
    """
    sem_probs = np.asarray(sem_probs, dtype=np.float64)
    h, w, n = sem_probs.shape
    eval_ids = np.array(catalog.eval_ids)
    if n != len(eval_ids) or instances.shape != (h, w):
        raise ValidationError("semantic channels or instance map do not match")
    is_thing_ch = catalog.is_thing_lut()[eval_ids]
    stuff_ch = np.nonzero(~is_thing_ch)[0]

    argmax = sem_probs.argmax(axis=2)
    stuff_best = stuff_ch[sem_probs[:, :, stuff_ch].argmax(axis=2)]
    void = _uniform(sem_probs)

    sem = eval_ids[stuff_best].astype(np.int32)
    inst = np.zeros((h, w), dtype=np.int32)
    raw_scores: dict[tuple[int, int], float] = {}
    ids = np.unique(instances[instances > 0])
    for k in ids.tolist():
        mask = (instances == k) & ~void
        if not mask.any():
            continue
        votes = np.bincount(argmax[mask], minlength=n)
        ch = int(np.argmax(votes))  # lowest class wins ties
        if not is_thing_ch[ch]:
            continue  # dissolved into stuff
        cid = int(eval_ids[ch])
        sem[mask] = cid
        inst[mask] = k
        raw_scores[(cid, k)] = 1.0 if center_scores is None else float(center_scores[k - 1])

    sem[void] = catalog.void_id
    inst[void] = 0
    area_min = params.area_min(h, w)
    for c in eval_ids[stuff_ch].tolist():
        region = (sem == c) & (inst == 0)
        if 0 < region.sum() < area_min:
            sem[region] = catalog.void_id

    lm = LabelMap(sem, inst)
    canon = lm.canonical()
    scores = {}
    for (c, k), s in raw_scores.items():
        where = (lm.sem == c) & (lm.inst == k)
        if where.any():
            y, x = np.argwhere(where)[0]
            scores[(c, int(canon.inst[y, x]))] = s
    return canon, scores


def fuse_from_heads(heads: HeadOutputs, params: FusionParams, catalog: ClassCatalog
                    ) -> tuple[LabelMap, dict[tuple[int, int], float]]:
    """find_centers -> group_instances -> fuse."""
    eval_ids = np.array(catalog.eval_ids)
    is_thing_ch = catalog.is_thing_lut()[eval_ids]
    argmax = heads.sem_probs.argmax(axis=2)
    thing_mask = is_thing_ch[argmax] & ~_uniform(heads.sem_probs)
    centers = find_centers(heads.center, params)
    instances = group_instances(heads.offset, centers, thing_mask)
    return fuse(heads.sem_probs, instances, params, catalog, [c.score for c in centers])


def instance_centroids(gt: LabelMap, catalog: ClassCatalog) -> dict[tuple[int, int], tuple[int, int]]:
    """Rounded (y, x) centroid of every thing instance, keyed by (class, instance)."""
    thing = set(catalog.thing_ids)
    out = {}
    for c, i in gt.segments():
        if c in thing and i > 0:
            ys, xs = np.nonzero((gt.sem == c) & (gt.inst == i))
            out[(c, i)] = (int(np.floor(ys.mean() + 0.5)), int(np.floor(xs.mean() + 0.5)))
    return out


def heads_from_labels(gt: LabelMap, catalog: ClassCatalog) -> HeadOutputs:
    """Ideal head outputs for a ground-truth map.

    One-hot semantics (uniform on void), a heatmap of 1 at every rounded
    instance centroid, and exact offsets from each thing pixel to its
    centroid.
    """
    h, w = gt.shape
    eval_ids = catalog.eval_ids
    n = len(eval_ids)
    lut = catalog.eval_lut()
    sem = np.where((gt.sem >= 0) & (gt.sem < len(lut)), gt.sem, catalog.void_id)
    ch = lut[sem]
    probs = np.full((h, w, n), 1.0 / n)
    valid = ch >= 0
    probs[valid] = 0.0
    yy, xx = np.nonzero(valid)
    probs[yy, xx, ch[valid]] = 1.0
    center = np.zeros((h, w))
    offset = np.zeros((h, w, 2))
    for (c, i), (cy, cx) in instance_centroids(gt, catalog).items():
        center[cy, cx] = 1.0
        ys, xs = np.nonzero((gt.sem == c) & (gt.inst == i))
        offset[ys, xs, 0] = cy - ys
        offset[ys, xs, 1] = cx - xs
    return HeadOutputs(probs, center, offset)


# ---------------------------------------------------------------------------
# Heads file
# ---------------------------------------------------------------------------

HEADS_MAGIC = b"NHDS"
HEADS_VERSION = 1
_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("h", "<u4"), ("w", "<u4"), ("c", "<u4")])


def write_heads(path, heads: HeadOutputs) -> None:
    """Binary layout: magic ``NHDS``, then little-endian uint32 version, H, W, C,
    then row-major float32 blocks sem (H, W, C), center (H, W), offset (H, W, 2)."""
    h, w = heads.shape
    c = heads.sem_probs.shape[2]
    header = np.array([(HEADS_MAGIC, HEADS_VERSION, h, w, c)], dtype=_HEADER)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        for block in (heads.sem_probs, heads.center, heads.offset):
            fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())


def read_heads(path) -> HeadOutputs:
    """Read a heads file; float32 probabilities are renormalized in float64."""
    from .core import FormatError

    raw = open(path, "rb").read()
    if len(raw) < _HEADER.itemsize:
        raise FormatError(f"{path}: truncated header")
    hd = np.frombuffer(raw[:_HEADER.itemsize], dtype=_HEADER)[0]
    if bytes(hd["magic"]) != HEADS_MAGIC:
        raise FormatError(f"{path}: not a heads file")
    if int(hd["version"]) != HEADS_VERSION:
        raise FormatError(f"{path}: unsupported heads version {int(hd['version'])}")
    h, w, c = int(hd["h"]), int(hd["w"]), int(hd["c"])
    n = h * w
    expect = _HEADER.itemsize + 4 * n * (c + 3)
    if len(raw) != expect:
        raise FormatError(f"{path}: expected {expect} bytes for {h}x{w}x{c}, found {len(raw)}")
    body = np.frombuffer(raw[_HEADER.itemsize:], dtype="<f4").astype(np.float64)
    sem = body[: n * c].reshape(h, w, c)
    center = body[n * c: n * (c + 1)].reshape(h, w)
    offset = body[n * (c + 1):].reshape(h, w, 2)
    if not np.all(np.isfinite(body)):
        raise NumericError(f"{path}: non-finite values")
    total = sem.sum(axis=2, keepdims=True)
    if sem.size and (np.max(np.abs(total - 1.0)) > 1e-4 or sem.min() < 0):
        raise ValidationError(f"{path}: semantic probabilities do not sum to 1")
    return HeadOutputs(sem / total, center, offset)
