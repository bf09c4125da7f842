"""Domain types, the panoptic PNG codec, dataset manifests and validation.

Every other module in the package passes these types around. Label maps
and images are thin wrappers over read-only numpy arrays so they can be
shared freely between threads.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image


class NoctisError(Exception):
    """Base class for all errors raised by the package."""


class ValidationError(NoctisError, ValueError):
    """Input violates a documented invariant."""


class FormatError(NoctisError, ValueError):
    """A file or encoded image cannot be interpreted."""


class ConsistencyError(NoctisError, ValueError):
    """Two pieces of data that must agree do not."""


class NumericError(NoctisError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Class catalog
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassDef:
    id: int
    name: str
    is_thing: bool
    is_eval: bool = True


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class definitions plus the reserved void id.

    Ids must be dense from 0. Non-eval classes are kept so that label files
    using them still decode, but every metric treats them like void.
    """

    classes: tuple[ClassDef, ...]
    void_id: int = 255

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ValidationError(f"class ids must be dense from 0, got {ids}")
        if self.void_id in ids:
            raise ValidationError(f"void_id {self.void_id} collides with a class id")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValidationError("class names must be unique")
        ev = [c for c in self.classes if c.is_eval]
        if not any(c.is_thing for c in ev) or all(c.is_thing for c in ev):
            raise ValidationError("need at least one thing and one stuff eval class")

    def __len__(self) -> int:
        return len(self.classes)

    def __getitem__(self, class_id: int) -> ClassDef:
        return self.classes[class_id]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def eval_ids(self) -> list[int]:
        return [c.id for c in self.classes if c.is_eval]

    @property
    def thing_ids(self) -> list[int]:
        return [c.id for c in self.classes if c.is_eval and c.is_thing]

    @property
    def stuff_ids(self) -> list[int]:
        return [c.id for c in self.classes if c.is_eval and not c.is_thing]

    def class_id(self, name: str) -> int:
        for c in self.classes:
            if c.name == name:
                return c.id
        raise KeyError(name)

    def is_thing_lut(self) -> np.ndarray:
        """Boolean lookup indexed by class id; void and out-of-range map to False."""
        lut = np.zeros(max(len(self.classes), self.void_id) + 1, dtype=bool)
        for c in self.classes:
            lut[c.id] = c.is_thing
        return lut

    def eval_lut(self) -> np.ndarray:
        """Maps class id to its channel among eval classes, or -1 for void/non-eval."""
        lut = np.full(max(len(self.classes), self.void_id) + 1, -1, dtype=np.int64)
        for ch, cid in enumerate(self.eval_ids):
            lut[cid] = ch
        return lut

    def to_dict(self) -> dict:
        return {
            "void_id": self.void_id,
            "classes": [
                {"id": c.id, "name": c.name, "is_thing": c.is_thing, "is_eval": c.is_eval}
                for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassCatalog":
        try:
            classes = tuple(
                ClassDef(int(c["id"]), str(c["name"]), bool(c["is_thing"]), bool(c.get("is_eval", True)))
                for c in d["classes"]
            )
            return cls(classes, int(d.get("void_id", 255)))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed catalog: {exc}") from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _catalog(rows: Sequence[tuple[str, bool]]) -> ClassCatalog:
    return ClassCatalog(tuple(ClassDef(i, n, t) for i, (n, t) in enumerate(rows)), 255)


CITYSCAPES = _catalog(
    [
        ("road", False), ("sidewalk", False), ("building", False), ("wall", False),
        ("fence", False), ("pole", False), ("traffic light", False), ("traffic sign", False),
        ("vegetation", False), ("terrain", False), ("sky", False), ("person", True),
        ("rider", True), ("car", True), ("truck", True), ("bus", True), ("train", True),
        ("motorcycle", True), ("bicycle", True),
    ]
)

# Desk-scale catalog rendered by the scene generator. Ordered like the
# Cityscapes table so per-class reports line up. Poles and traffic lights
# are countable here.
DESK = _catalog(
    [
        ("road", False), ("sidewalk", False), ("building", False), ("pole", True),
        ("traffic light", True), ("vegetation", False), ("sky", False),
        ("person", True), ("car", True),
    ]
)

BUILTIN_CATALOGS = {"desk": DESK, "cityscapes": CITYSCAPES}


def load_catalog(spec: str | os.PathLike | None) -> ClassCatalog:
    """Resolve a builtin catalog name or read a JSON catalog file."""
    if spec is None:
        return DESK
    if str(spec) in BUILTIN_CATALOGS:
        return BUILTIN_CATALOGS[str(spec)]
    with open(spec, encoding="utf-8") as fh:
        return ClassCatalog.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Label maps and images
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel semantic class id and instance id (0 means no instance)."""

    sem: np.ndarray
    inst: np.ndarray

    def __post_init__(self):
        sem = np.asarray(self.sem)
        inst = np.asarray(self.inst)
        if sem.ndim != 2 or sem.shape != inst.shape:
            raise ValidationError(f"sem {sem.shape} and inst {inst.shape} must be equal 2-D shapes")
        object.__setattr__(self, "sem", _frozen(sem.astype(np.int32, copy=False)))
        object.__setattr__(self, "inst", _frozen(inst.astype(np.int32, copy=False)))

    @property
    def height(self) -> int:
        return self.sem.shape[0]

    @property
    def width(self) -> int:
        return self.sem.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.sem.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelMap):
            return NotImplemented
        return np.array_equal(self.sem, other.sem) and np.array_equal(self.inst, other.inst)

    __hash__ = None

    @classmethod
    def void(cls, height: int, width: int, catalog: ClassCatalog) -> "LabelMap":
        return cls(np.full((height, width), catalog.void_id), np.zeros((height, width)))

    def segments(self) -> list[tuple[int, int]]:
        """(class, instance) keys in first-occurrence row-major order, void excluded."""
        key = self.sem.astype(np.int64) * (1 << 31) + self.inst
        _, first = np.unique(key.ravel(), return_index=True)
        order = np.sort(first)
        flat_sem, flat_inst = self.sem.ravel(), self.inst.ravel()
        return [(int(flat_sem[i]), int(flat_inst[i])) for i in order]

    def canonical(self) -> "LabelMap":
        """Renumber instance ids densely per class, 1-based, by first occurrence."""
        inst = np.zeros_like(self.inst)
        counters: dict[int, int] = {}
        for c, i in self.segments():
            if i == 0:
                continue
            counters[c] = counters.get(c, 0) + 1
            inst[(self.sem == c) & (self.inst == i)] = counters[c]
        return LabelMap(self.sem, inst)


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """RGB image with float intensities in [0, 1], shape (H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(f"image must have shape (H, W, 3), got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise NumericError("image contains non-finite values")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValidationError("image values must lie in [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    __hash__ = None

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "ImageBuffer":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.floor(self.pixels * 255.0 + 0.5), 0, 255).astype(np.uint8)


def read_image(path: str | os.PathLike) -> ImageBuffer:
    with Image.open(path) as im:
        return ImageBuffer.from_uint8(np.asarray(im.convert("RGB")))


def write_image(path: str | os.PathLike, img: ImageBuffer) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img.to_uint8(), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    pixel: tuple[int, int] | None = None  # (y, x) of the first offending pixel


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def raise_if_invalid(self) -> None:
        if self.violations:
            raise ValidationError("; ".join(v.message for v in self.violations))


def _first(mask: np.ndarray) -> tuple[int, int]:
    y, x = np.argwhere(mask)[0]
    return int(y), int(x)


def validate(label_map: LabelMap, catalog: ClassCatalog) -> ValidationReport:
    """Check a label map against the catalog. Violations are returned, not raised."""
    sem, inst = label_map.sem, label_map.inst
    out: list[Violation] = []
    known = (sem >= 0) & (sem < len(catalog))
    unknown = ~known & (sem != catalog.void_id)
    if unknown.any():
        y, x = _first(unknown)
        out.append(Violation("unknown class", f"unknown class {int(sem[y, x])} at pixel (y={y}, x={x})", (y, x)))
    if (inst < 0).any():
        y, x = _first(inst < 0)
        out.append(Violation("negative instance", f"negative instance id at pixel (y={y}, x={x})", (y, x)))
    thing = catalog.is_thing_lut()[np.where(known, sem, catalog.void_id)]
    on_void = (inst > 0) & (sem == catalog.void_id)
    if on_void.any():
        y, x = _first(on_void)
        out.append(Violation("instance on void", f"instance on void at pixel (y={y}, x={x})", (y, x)))
    on_stuff = (inst > 0) & known & ~thing
    if on_stuff.any():
        y, x = _first(on_stuff)
        name = catalog[int(sem[y, x])].name
        out.append(Violation("instance on stuff", f"instance on stuff class '{name}' at pixel (y={y}, x={x})", (y, x)))
    return ValidationReport(tuple(out))


# ---------------------------------------------------------------------------
# Panoptic codec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentMeta:
    id: int
    class_id: int
    area: int
    bbox: tuple[int, int, int, int]  # x, y, w, h
    score: float | None = None
    iscrowd: bool = False  # thing pixels without an instance id

    def to_dict(self) -> dict:
        d = {"id": self.id, "class_id": self.class_id, "area": self.area, "bbox": list(self.bbox)}
        if self.score is not None:
            d["score"] = self.score
        if self.iscrowd:
            d["iscrowd"] = 1
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentMeta":
        try:
            score = d.get("score")
            return cls(int(d["id"]), int(d["class_id"]), int(d["area"]), tuple(int(v) for v in d["bbox"]),
                       None if score is None else float(score), bool(d.get("iscrowd", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed segment entry {d!r}") from exc


def id_to_rgb(ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    return np.stack([ids % 256, (ids // 256) % 256, ids // 65536], axis=-1).astype(np.uint8)


def rgb_to_id(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.int64)
    return rgb[..., 0] + 256 * rgb[..., 1] + 65536 * rgb[..., 2]


def encode_panoptic(
    label_map: LabelMap, catalog: ClassCatalog, scores: dict[tuple[int, int], float] | None = None
) -> tuple[np.ndarray, list[SegmentMeta]]:
    """Encode a label map as a 3-channel uint8 id image plus segment metadata.

    Segment ids are assigned 1, 2, ... by first occurrence in row-major
    order; void pixels get id 0.

    Args:
        label_map: map to encode; must validate against ``catalog``.
        catalog: class definitions.
        scores: optional confidence per (class, instance) key, stored in the
            metadata of prediction files.

    Returns:
        ``(rgb, segments)`` with ``rgb`` of shape (H, W, 3) and dtype uint8.
    """
    validate(label_map, catalog).raise_if_invalid()
    ids = np.zeros(label_map.shape, dtype=np.int64)
    metas = []
    seg_id = 0
    for c, i in label_map.segments():
        if c == catalog.void_id:
            continue
        seg_id += 1
        if seg_id >= 1 << 24:
            raise FormatError("too many segments for 24-bit ids")
        mask = (label_map.sem == c) & (label_map.inst == i)
        ids[mask] = seg_id
        ys, xs = np.nonzero(mask)
        bbox = (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
        score = None if scores is None else scores.get((c, i))
        crowd = i == 0 and bool(catalog.is_thing_lut()[c])
        metas.append(SegmentMeta(seg_id, c, int(mask.sum()), bbox, score, crowd))
    return id_to_rgb(ids), metas


def decode_panoptic(rgb: np.ndarray, segments: Sequence[SegmentMeta], catalog: ClassCatalog) -> LabelMap:
    """Rebuild a label map from an id image and its segment metadata."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"panoptic image must be (H, W, 3), got {rgb.shape}")
    ids = rgb_to_id(rgb)
    by_id = {s.id: s for s in segments}
    if len(by_id) != len(segments):
        raise FormatError("duplicate segment ids in metadata")
    present, counts = np.unique(ids, return_counts=True)
    area = dict(zip(present.tolist(), counts.tolist()))
    for sid in area:
        if sid != 0 and sid not in by_id:
            raise FormatError(f"segment id {sid} in image but missing from metadata")
    for s in segments:
        if area.get(s.id, 0) != s.area:
            raise ConsistencyError(f"segment {s.id}: metadata area {s.area} != image area {area.get(s.id, 0)}")
        if not 0 <= s.class_id < len(catalog):
            raise FormatError(f"segment {s.id}: unknown class {s.class_id}")

    sem = np.full(ids.shape, catalog.void_id, dtype=np.int32)
    inst = np.zeros(ids.shape, dtype=np.int32)
    thing = catalog.is_thing_lut()
    _, first = np.unique(ids.ravel(), return_index=True)
    counters: dict[int, int] = {}
    for sid in ids.ravel()[np.sort(first)]:
        if sid == 0:
            continue
        s = by_id[int(sid)]
        mask = ids == sid
        sem[mask] = s.class_id
        if thing[s.class_id] and not s.iscrowd:
            counters[s.class_id] = counters.get(s.class_id, 0) + 1
            inst[mask] = counters[s.class_id]
    return LabelMap(sem, inst)


def segment_scores(label_map: LabelMap, rgb: np.ndarray, segments: Sequence[SegmentMeta]) -> dict[tuple[int, int], float]:
    """Map decoded (class, instance) keys to the scores stored in metadata."""
    ids = rgb_to_id(rgb)
    out = {}
    for s in segments:
        if s.score is None:
            continue
        ys, xs = np.nonzero(ids == s.id)
        if len(ys):
            out[(int(label_map.sem[ys[0], xs[0]]), int(label_map.inst[ys[0], xs[0]]))] = s.score
    return out


def sidecar_path(png_path: str | os.PathLike) -> Path:
    return Path(png_path).with_suffix(".json")


def write_panoptic(png_path: str | os.PathLike, label_map: LabelMap, catalog: ClassCatalog,
                   scores: dict[tuple[int, int], float] | None = None) -> list[SegmentMeta]:
    rgb, metas = encode_panoptic(label_map, catalog, scores)
    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(png_path, format="PNG")
    with open(sidecar_path(png_path), "w", encoding="utf-8") as fh:
        json.dump({"segments": [m.to_dict() for m in metas]}, fh, indent=1)
    return metas


def read_panoptic_raw(png_path: str | os.PathLike) -> tuple[np.ndarray, list[SegmentMeta]]:
    with Image.open(png_path) as im:
        rgb = np.asarray(im.convert("RGB"))
    try:
        with open(sidecar_path(png_path), encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read sidecar for {png_path}: {exc}") from exc
    return rgb, [SegmentMeta.from_dict(s) for s in doc.get("segments", [])]


def read_panoptic(png_path: str | os.PathLike, catalog: ClassCatalog) -> LabelMap:
    rgb, metas = read_panoptic_raw(png_path)
    return decode_panoptic(rgb, metas, catalog)


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")
DOMAINS = ("day", "night", "converted")


@dataclass(frozen=True)
class DatasetEntry:
    image: str
    label: str | None = None
    split: str = "train"
    domain: str = "day"
    source: str | None = None


@dataclass(frozen=True)
class DatasetIndex:
    """Ordered dataset entries. Paths are absolute or relative to ``root``."""

    entries: tuple[DatasetEntry, ...]
    seed: int = 0
    root: str = "."

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for e in self.entries:
            if e.image in seen:
                raise ValidationError(f"duplicate image path {e.image}")
            seen.add(e.image)
            if e.split not in SPLITS:
                raise ValidationError(f"bad split tag {e.split!r}")
            if e.domain not in DOMAINS:
                raise ValidationError(f"bad domain tag {e.domain!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.root) / p

    def image_path(self, i: int) -> Path:
        return self.resolve(self.entries[i].image)

    def label_path(self, i: int) -> Path | None:
        lab = self.entries[i].label
        return None if lab is None else self.resolve(lab)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "entries": [
                {k: v for k, v in vars(e).items() if v is not None} for e in self.entries
            ],
        }

    def rebased(self, root: str | os.PathLike) -> "DatasetIndex":
        """Same entries with every path made relative to ``root`` where possible."""
        root = Path(root).resolve()

        def rel(p: str | None) -> str | None:
            if p is None:
                return None
            ap = self.resolve(p).resolve()
            return os.path.relpath(ap, root)

        entries = [DatasetEntry(rel(e.image), rel(e.label), e.split, e.domain, e.source) for e in self.entries]
        return DatasetIndex(tuple(entries), self.seed, str(root))


def concat_indices(parts: Iterable[DatasetIndex], seed: int = 0) -> DatasetIndex:
    entries = []
    for part in parts:
        for e in part.entries:
            entries.append(DatasetEntry(str(part.resolve(e.image)), None if e.label is None else str(part.resolve(e.label)),
                                        e.split, e.domain, e.source))
    return DatasetIndex(tuple(entries), seed)


def save_manifest(path: str | os.PathLike, index: DatasetIndex) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = index.rebased(path.parent).to_dict()
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_manifest(path: str | os.PathLike) -> DatasetIndex:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        entries = tuple(
            DatasetEntry(e["image"], e.get("label"), e.get("split", "train"), e.get("domain", "day"), e.get("source"))
            for e in doc["entries"]
        )
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    return DatasetIndex(entries, int(doc.get("seed", 0)), str(path.parent))


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_digest(index: DatasetIndex) -> str:
    """Content hash over entry metadata and the bytes of every referenced file."""
    h = hashlib.sha256()
    for e in index.entries:
        h.update(json.dumps([e.split, e.domain, e.source or ""]).encode())
        h.update(file_digest(index.resolve(e.image)).encode())
        if e.label is not None:
            lab = index.resolve(e.label)
            h.update(file_digest(lab).encode())
            h.update(file_digest(sidecar_path(lab)).encode())
    return h.hexdigest()


@dataclass
class Sample:
    """An image loaded together with its decoded ground truth."""

    image: ImageBuffer
    labels: LabelMap | None
    entry: DatasetEntry = field(default_factory=lambda: DatasetEntry("?"))


def load_samples(index: DatasetIndex, catalog: ClassCatalog) -> list[Sample]:
    out = []
    for i, e in enumerate(index.entries):
        img = read_image(index.image_path(i))
        lab_path = index.label_path(i)
        lab = None if lab_path is None else read_panoptic(lab_path, catalog)
        out.append(Sample(img, lab, e))
    return out
