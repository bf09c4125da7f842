"""Procedural street scenes with exact panoptic ground truth.

Scenes are flat-shaded primitives laid out in normalized image coordinates
(y down, both axes in [0, 1]) and rasterized at render time, so one scene
can be rendered at any size. Labels come from the geometry alone; lighting
only changes pixel colors.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (DESK, ClassCatalog, DatasetEntry, DatasetIndex, ImageBuffer, LabelMap, ValidationError,
                   save_manifest, write_image, write_panoptic)
from .nightshift import Light, glow, parse_key_values

# Painting order, back to front.
DEPTH = ("sky", "building", "vegetation", "road", "sidewalk", "pole", "traffic light", "car", "person")

SKY = (0.55, 0.72, 0.92)
ROAD = (0.36, 0.36, 0.39)
SIDEWALK = (0.70, 0.65, 0.58)
VEGETATION = (0.24, 0.50, 0.20)
POLE = (0.20, 0.20, 0.24)
TRAFFIC_LIGHT = (0.85, 0.68, 0.10)
BUILDINGS = ((0.62, 0.52, 0.46), (0.50, 0.50, 0.56), (0.72, 0.66, 0.56), (0.46, 0.40, 0.38))
CARS = ((0.75, 0.10, 0.10), (0.10, 0.22, 0.62), (0.92, 0.92, 0.92), (0.07, 0.07, 0.08), (0.58, 0.60, 0.64),
        (0.18, 0.48, 0.30))
CLOTHES = ((0.82, 0.22, 0.20), (0.20, 0.30, 0.72), (0.90, 0.84, 0.30), (0.28, 0.26, 0.30), (0.62, 0.30, 0.62))


@dataclass(frozen=True)
class Thing:
    kind: str
    box: tuple[float, float, float, float]  # y0, x0, y1, x1
    color: tuple[float, float, float]
    facing: int = 0  # cars: 1 toward the camera (headlights), 0 away (taillights)


@dataclass(frozen=True)
class SceneGraph:
    seed: int
    horizon: float
    vanish_x: float
    road_top: float  # half-widths of the road at the horizon and bottom edge
    road_bottom: float
    sky: tuple[float, float, float]
    road: tuple[float, float, float]
    sidewalk: tuple[float, float, float]
    buildings: tuple[tuple[float, float, float, tuple[float, float, float]], ...]  # x0, x1, top, color
    vegetation: tuple[tuple[float, float, float, float, tuple[float, float, float]], ...]  # cy, cx, ry, rx, color
    things: tuple[Thing, ...] = ()

    def road_edges(self, y):
        t = np.clip((np.asarray(y, dtype=np.float64) - self.horizon) / (1.0 - self.horizon), 0.0, 1.0)
        cx = self.vanish_x + (0.5 - self.vanish_x) * t
        hw = self.road_top + (self.road_bottom - self.road_top) * t
        return cx - hw, cx + hw

    def depth(self, y: float) -> float:
        """0 at the horizon, 1 at the bottom edge."""
        return float(np.clip((y - self.horizon) / (1.0 - self.horizon), 0.0, 1.0))


def _jitter(rng, color, amount=0.04):
    return tuple(float(np.clip(c + rng.uniform(-amount, amount), 0.0, 1.0)) for c in color)


def _overlaps(a, b, margin=0.01) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _place(rng, existing, make, tries=30):
    for _ in range(tries):
        cand = make()
        if cand is None:
            continue
        if all(not _overlaps(cand.box, e.box) for e in existing):
            return cand
    return None


def compose_scene(seed: int, catalog: ClassCatalog = DESK, with_things: bool = True) -> SceneGraph:
    """Sample a deterministic scene layout from ``seed``."""
    missing = [n for n in DEPTH if n not in catalog.names]
    if missing:
        raise ValidationError(f"catalog lacks scene classes {missing}")
    rng = np.random.default_rng(seed)
    horizon = float(rng.uniform(0.38, 0.5))
    vanish_x = float(rng.uniform(0.4, 0.6))
    road_top = float(rng.uniform(0.02, 0.05))
    road_bottom = float(rng.uniform(0.28, 0.4))

    buildings = []
    n_b = int(rng.integers(1, 5))
    edges = np.sort(rng.uniform(0.0, 1.0, size=2 * n_b))
    for i in range(n_b):
        x0, x1 = float(edges[2 * i]), float(edges[2 * i + 1])
        if x1 - x0 < 0.06:
            x1 = min(1.0, x0 + 0.06)
        top = float(rng.uniform(0.08, horizon - 0.08))
        buildings.append((x0, x1, top, _jitter(rng, BUILDINGS[int(rng.integers(len(BUILDINGS)))])))

    vegetation = []
    for _ in range(int(rng.integers(0, 4))):
        ry, rx = float(rng.uniform(0.06, 0.14)), float(rng.uniform(0.05, 0.12))
        cy = float(rng.uniform(horizon - 0.08, horizon))
        cx = float(rng.choice([rng.uniform(0.0, 0.35), rng.uniform(0.65, 1.0)]))
        vegetation.append((cy, cx, ry, rx, _jitter(rng, VEGETATION)))

    scene = SceneGraph(seed, horizon, vanish_x, road_top, road_bottom, _jitter(rng, SKY, 0.03),
                       _jitter(rng, ROAD, 0.03), _jitter(rng, SIDEWALK, 0.03), tuple(buildings), tuple(vegetation))
    if not with_things:
        return scene

    things: list[Thing] = []

    def ground_y(lo=0.08):
        return float(rng.uniform(horizon + lo, 0.98))

    def sidewalk_x(yb, half):
        left, right = scene.road_edges(yb)
        spans = [(half, float(left) - half), (float(right) + half, 1.0 - half)]
        spans = [s for s in spans if s[1] > s[0]]
        if not spans:
            return None
        lo, hi = spans[int(rng.integers(len(spans)))]
        return float(rng.uniform(lo, hi))

    def make_car():
        yb = ground_y(0.1)
        t = scene.depth(yb)
        h, w = 0.05 + 0.20 * t, 0.06 + 0.22 * t
        left, right = scene.road_edges(yb)
        if right - left < w:
            return None
        cx = float(rng.uniform(left + w / 2, right - w / 2))
        return Thing("car", (yb - h, cx - w / 2, yb, cx + w / 2), _jitter(rng, CARS[int(rng.integers(len(CARS)))]),
                     int(rng.integers(0, 2)))

    def make_person():
        yb = ground_y(0.05)
        t = scene.depth(yb)
        h, w = 0.09 + 0.22 * t, 0.02 + 0.035 * t
        cx = sidewalk_x(yb, w / 2)
        if cx is None:
            return None
        return Thing("person", (yb - h, cx - w / 2, yb, cx + w / 2), _jitter(rng, CLOTHES[int(rng.integers(len(CLOTHES)))]))

    def make_pole():
        yb = ground_y(0.03)
        t = scene.depth(yb)
        h, w = 0.25 + 0.45 * t, 0.008 + 0.012 * t
        cx = sidewalk_x(yb, w / 2)
        if cx is None:
            return None
        return Thing("pole", (max(0.0, yb - h), cx - w / 2, yb, cx + w / 2), _jitter(rng, POLE, 0.03))

    # Ground objects never overlap, so every one of them stays visible.
    for make, hi in ((make_car, 6), (make_person, 4), (make_pole, 5)):
        for _ in range(int(rng.integers(0, hi + 1))):
            th = _place(rng, things, make)
            if th is not None:
                things.append(th)

    poles = [p for p in things if p.kind == "pole"]
    n_tl = int(rng.integers(0, min(3, len(poles)) + 1))
    for p in [poles[i] for i in sorted(rng.choice(len(poles), size=n_tl, replace=False).tolist())] if n_tl else []:
        y0, x0, y1, x1 = p.box
        t = scene.depth(y1)
        h, w = 0.05 + 0.06 * t, 0.02 + 0.02 * t
        cx = (x0 + x1) / 2
        things.append(Thing("traffic light", (y0, cx - w / 2, y0 + h, cx + w / 2), _jitter(rng, TRAFFIC_LIGHT, 0.03),
                            int(rng.integers(0, 2))))
    return replace(scene, things=tuple(things))


# ---------------------------------------------------------------------------
# Lighting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LightingSpec:
    style: str = "day"
    ambient_gain: float = 0.3
    gamma: float = 1.4
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    streetlights: bool = True
    headlights: bool = True
    traffic_glow: bool = True
    glow_intensity: float = 0.8
    glow_spread: float = 1.0
    noise: float = 0.02

    def __post_init__(self):
        if self.style not in ("day", "night"):
            raise ValidationError(f"unknown lighting style {self.style!r}")
        object.__setattr__(self, "tint", tuple(float(t) for t in self.tint))


DAY = LightingSpec("day")

# Four night looks, standing in for differently lit night datasets.
NIGHT_STYLES = {
    "sodium": LightingSpec("night", ambient_gain=0.32, gamma=1.3, tint=(1.0, 0.72, 0.42), glow_intensity=0.9,
                           glow_spread=1.2, noise=0.02),
    "led": LightingSpec("night", ambient_gain=0.36, gamma=1.2, tint=(0.78, 0.88, 1.0), glow_intensity=0.8,
                        noise=0.015),
    "dark": LightingSpec("night", ambient_gain=0.2, gamma=1.7, tint=(0.85, 0.9, 1.0), streetlights=False,
                         glow_intensity=1.0, noise=0.04),
    "wet": LightingSpec("night", ambient_gain=0.27, gamma=1.5, tint=(0.88, 0.82, 0.95), glow_intensity=1.0,
                        glow_spread=1.8, noise=0.025),
}
NIGHT = NIGHT_STYLES["sodium"]


def read_lighting(path: str | Path) -> LightingSpec:
    """Parse a ``key = value`` lighting file; ``preset = <name>`` starts from a named style."""
    spec = DAY
    kw: dict = {}
    for k, v in parse_key_values(Path(path).read_text(encoding="utf-8")):
        if k == "preset":
            spec = NIGHT_STYLES[v] if v in NIGHT_STYLES else DAY if v == "day" else None
            if spec is None:
                raise ValidationError(f"unknown lighting preset {v!r}")
        elif k == "style":
            kw[k] = v
        elif k == "tint":
            kw[k] = tuple(float(t) for t in v.replace(",", " ").split())
        elif k in ("streetlights", "headlights", "traffic_glow"):
            kw[k] = v.lower() in ("1", "true", "yes", "on")
        elif k in ("ambient_gain", "gamma", "glow_intensity", "glow_spread", "noise"):
            kw[k] = float(v)
        else:
            raise ValidationError(f"unknown lighting key {k!r}")
    return replace(spec, **kw)


def scene_lights(scene: SceneGraph, lighting: LightingSpec, dims: tuple[int, int]) -> list[Light]:
    """Light sources implied by the scene geometry, in pixel coordinates."""
    h, w = dims
    rng = np.random.default_rng(scene.seed + 7)
    out = []
    spread = lighting.glow_spread * h / 64.0

    def amp():
        return lighting.glow_intensity * float(rng.uniform(0.7, 1.1))

    for th in scene.things:
        y0, x0, y1, x1 = th.box
        if th.kind == "pole" and lighting.streetlights:
            out.append(Light(y0 * h, (x0 + x1) / 2 * w, 3.0 * spread, amp(), 0.11))
        elif th.kind == "car" and lighting.headlights:
            hue = 0.15 if th.facing else 0.0
            inten = amp() * (1.0 if th.facing else 0.7)
            yl = (y0 + 0.7 * (y1 - y0)) * h
            r = max(0.8, 0.35 * (y1 - y0) * h) * lighting.glow_spread
            out.append(Light(yl, (x0 + 0.15 * (x1 - x0)) * w, r, inten, hue))
            out.append(Light(yl, (x0 + 0.85 * (x1 - x0)) * w, r, inten, hue))
        elif th.kind == "traffic light" and lighting.traffic_glow:
            hue = 0.33 if th.facing else 0.0
            out.append(Light((y0 + 0.3 * (y1 - y0)) * h, (x0 + x1) / 2 * w, 1.5 * spread, amp(), hue))
    return out


def _light_rgb(light: Light) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(light.hue % 1.0, 0.6, 1.0))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _box_mask(box, h, w):
    y0, x0, y1, x1 = box
    r0 = int(np.clip(round(y0 * h), 0, h - 1))
    r1 = int(np.clip(max(round(y1 * h), r0 + 1), 1, h))
    c0 = int(np.clip(round(x0 * w), 0, w - 1))
    c1 = int(np.clip(max(round(x1 * w), c0 + 1), 1, w))
    m = np.zeros((h, w), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def rasterize(scene: SceneGraph, dims: tuple[int, int], catalog: ClassCatalog = DESK):
    """Paint the scene back to front. Returns (day pixels, LabelMap)."""
    h, w = dims
    if h < 32 or w < 32:
        raise ValidationError("render dims must be at least 32x32")
    yc = (np.arange(h) + 0.5) / h
    xc = (np.arange(w) + 0.5) / w
    Y, X = np.meshgrid(yc, xc, indexing="ij")
    cid = {n: catalog.class_id(n) for n in DEPTH}
    thing = catalog.is_thing_lut()
    px = np.zeros((h, w, 3))
    sem = np.zeros((h, w), dtype=np.int32)
    inst = np.zeros((h, w), dtype=np.int32)

    def paint(mask, name, color, key=0):
        px[mask] = color
        sem[mask] = cid[name]
        inst[mask] = key if thing[cid[name]] else 0

    paint(np.ones((h, w), dtype=bool), "sky", scene.sky)
    for x0, x1, top, color in scene.buildings:
        paint((X >= x0) & (X < x1) & (Y >= top) & (Y < scene.horizon + 0.01), "building", color)
    for cy, cx, ry, rx, color in scene.vegetation:
        paint(((Y - cy) / ry) ** 2 + ((X - cx) / rx) ** 2 <= 1.0, "vegetation", color)
    below = Y >= scene.horizon
    paint(below, "road", scene.road)
    left, right = scene.road_edges(Y)
    paint(below & ((X < left) | (X >= right)), "sidewalk", scene.sidewalk)
    counters: dict[str, int] = {}
    for kind in ("pole", "traffic light", "car", "person"):
        for th in scene.things:
            if th.kind != kind:
                continue
            counters[kind] = counters.get(kind, 0) + 1
            paint(_box_mask(th.box, h, w), kind, th.color, counters[kind])
    return px, LabelMap(sem, inst).canonical()


def render(scene: SceneGraph, lighting: LightingSpec, dims: tuple[int, int], catalog: ClassCatalog = DESK
           ) -> tuple[ImageBuffer, LabelMap]:
    """Render an image and its exact labels; night adds darkening, glows and noise."""
    px, labels = rasterize(scene, dims, catalog)
    if lighting.style == "day":
        return ImageBuffer(px), labels
    v = lighting.ambient_gain * np.asarray(lighting.tint) * np.power(px, lighting.gamma)
    for light in scene_lights(scene, lighting, dims):
        v = v + glow(dims, light)[..., None] * _light_rgb(light)
    if lighting.noise > 0:
        v = v + np.random.default_rng(scene.seed + 13).normal(0.0, lighting.noise, size=v.shape)
    return ImageBuffer(np.clip(v, 0.0, 1.0)), labels


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def scene_seed(dataset_seed: int, i: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, i]).generate_state(1)[0])


def generate_dataset(out_dir: str | Path, count: int, seed: int, dims: tuple[int, int],
                     lighting: LightingSpec | Sequence[LightingSpec] = DAY, split: str = "train",
                     catalog: ClassCatalog = DESK, prefix: str = "scene", source: str | None = None,
                     indices: Sequence[int] | None = None, write_manifest: bool = True) -> DatasetIndex:
    """Render scenes to PNG files plus panoptic labels and a manifest.

    ``lighting`` may be a sequence; scene ``i`` then uses ``lighting[i % len]``.
    ``indices`` selects scene numbers from the seeded sequence (default
    ``range(count)``).
    """
    out_dir = Path(out_dir)
    styles = [lighting] if isinstance(lighting, LightingSpec) else list(lighting)
    indices = list(range(count)) if indices is None else list(indices)
    entries = []
    for n, i in enumerate(indices):
        spec = styles[n % len(styles)]
        img, labels = render(compose_scene(scene_seed(seed, i), catalog), spec, dims, catalog)
        name = f"{prefix}_{i:05d}"
        write_image(out_dir / "images" / f"{name}.png", img)
        write_panoptic(out_dir / "labels" / f"{name}.png", labels, catalog)
        entries.append(DatasetEntry(f"images/{name}.png", f"labels/{name}.png", split,
                                    "day" if spec.style == "day" else "night", source))
    index = DatasetIndex(tuple(entries), seed, str(out_dir))
    if write_manifest:
        save_manifest(out_dir / "manifest.json", index)
    return index


@dataclass(frozen=True)
class GeneratorSource:
    """A virtual night dataset: ``pool`` scenes rendered on demand in one style."""

    lighting: LightingSpec
    pool: int
    seed: int
    dims: tuple[int, int] = (64, 128)


@dataclass(frozen=True)
class MixSource:
    name: str
    count: int
    index: DatasetIndex | None = None
    generator: GeneratorSource | None = None

    @property
    def available(self) -> int:
        return len(self.index) if self.index is not None else self.generator.pool


def build_mix(sources: Sequence[MixSource], seed: int, out_dir: str | Path | None = None,
              catalog: ClassCatalog = DESK) -> DatasetIndex:
    """Sample ``count`` entries without replacement from each source and concatenate.

    Manifest sources contribute their entries; generator sources render the
    chosen scenes under ``out_dir/<name>``. Every entry is tagged with its
    source name.
    """
    entries = []
    for k, src in enumerate(sources):
        if src.count < 0 or src.count > src.available:
            raise ValidationError(f"source {src.name!r}: asked for {src.count} of {src.available} entries")
        rng = np.random.default_rng([seed, k])
        picks = sorted(rng.choice(src.available, size=src.count, replace=False).tolist())
        if src.index is not None:
            for i in picks:
                e = src.index.entries[i]
                lab = None if e.label is None else str(src.index.resolve(e.label))
                entries.append(DatasetEntry(str(src.index.resolve(e.image)), lab, e.split, e.domain, src.name))
        elif picks:
            if out_dir is None:
                raise ValidationError("generator sources need an output directory")
            g = src.generator
            idx = generate_dataset(Path(out_dir) / src.name, len(picks), g.seed, g.dims, g.lighting, "train",
                                   catalog, prefix=src.name, source=src.name, indices=picks, write_manifest=False)
            for e in idx.entries:
                entries.append(replace(e, image=str(idx.resolve(e.image)), label=str(idx.resolve(e.label))))
    return DatasetIndex(tuple(entries), seed)


def varied_night_styles() -> list[LightingSpec]:
    return [NIGHT_STYLES[k] for k in sorted(NIGHT_STYLES)]
