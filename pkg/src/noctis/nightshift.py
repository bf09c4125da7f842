"""Day-to-night translation.

Two routes produce night images from day images:

* :func:`night_transform`, a fixed parametric degradation (exposure, gamma,
  contrast loss, blur, light glows, sensor noise);
* a learned :class:`TranslatorPair`: two small parametric color maps
  trained adversarially against histogram discriminators under a
  cycle-consistency penalty.

:func:`convert_subset` rewrites a seeded fraction of a dataset's images
through either route and keeps the label files untouched.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import (DatasetEntry, DatasetIndex, FormatError, ImageBuffer, ValidationError, read_image,
                   write_image)
from .learner import OptimState, adam_step, lr_at

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])


def luminance(px: np.ndarray) -> np.ndarray:
    return px[..., 0] * LUMA[0] + px[..., 1] * LUMA[1] + px[..., 2] * LUMA[2]


# ---------------------------------------------------------------------------
# Parametric night transform
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Light:
    y: float
    x: float
    radius: float
    intensity: float
    hue: float = 0.12

    def color(self) -> np.ndarray:
        return np.array(colorsys.hsv_to_rgb(self.hue % 1.0, 0.5, 1.0))


@dataclass(frozen=True)
class NightParams:
    gain: float = 1.0
    gamma: float = 1.0
    contrast: float = 0.0
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    lights: tuple[Light, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lights", tuple(self.lights))
        if not 0.0 < self.gain <= 1.0:
            raise ValidationError("gain must lie in (0, 1]")
        if self.gamma < 1.0:
            raise ValidationError("gamma must be >= 1")
        if not 0.0 <= self.contrast <= 1.0:
            raise ValidationError("contrast must lie in [0, 1]")
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ValidationError("noise_sigma and blur_radius must be >= 0")


def glow(shape: tuple[int, int], light: Light) -> np.ndarray:
    """Radial Gaussian glow of one light, shape (H, W), peak ``intensity``."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    d2 = (yy - light.y) ** 2 + (xx - light.x) ** 2
    return light.intensity * np.exp(-d2 / (2.0 * light.radius * light.radius))


def night_transform(img: ImageBuffer, p: NightParams) -> ImageBuffer:
    """Darken, flatten, blur, light and noise an image; deterministic per ``p.seed``."""
    v = p.gain * np.power(img.pixels, p.gamma)
    if p.contrast:
        v = (1.0 - p.contrast) * v + p.contrast * v.mean(axis=(0, 1), keepdims=True)
    if p.blur_radius > 0:
        v = gaussian_filter(v, sigma=(p.blur_radius, p.blur_radius, 0), mode="nearest")
    for light in p.lights:
        v = v + glow(v.shape[:2], light)[..., None] * light.color()
    if p.noise_sigma > 0:
        v = v + np.random.default_rng(p.seed).normal(0.0, p.noise_sigma, size=v.shape)
    return ImageBuffer(np.clip(v, 0.0, 1.0))


def write_night_params(path: str | Path, p: NightParams) -> None:
    """Write the ``key = value`` text form; one ``light = y x radius intensity hue`` line per light."""
    lines = [f"gain = {p.gain!r}", f"gamma = {p.gamma!r}", f"contrast = {p.contrast!r}",
             f"noise_sigma = {p.noise_sigma!r}", f"blur_radius = {p.blur_radius!r}", f"seed = {p.seed}"]
    lines += [f"light = {l.y!r} {l.x!r} {l.radius!r} {l.intensity!r} {l.hue!r}" for l in p.lights]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_key_values(text: str) -> list[tuple[str, str]]:
    out = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def read_night_params(path: str | Path) -> NightParams:
    kw: dict = {}
    lights = []
    for k, v in parse_key_values(Path(path).read_text(encoding="utf-8")):
        try:
            if k == "light":
                vals = [float(t) for t in v.split()]
                lights.append(Light(*vals))
            elif k == "seed":
                kw[k] = int(v)
            elif k in ("gain", "gamma", "contrast", "noise_sigma", "blur_radius"):
                kw[k] = float(v)
            else:
                raise FormatError(f"unknown night parameter {k!r}")
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad value for {k}: {v!r}") from exc
    return NightParams(lights=tuple(lights), **kw)


# Approach-1 stand-in: uniformly dark, low contrast, noisy, no light sources.
DEFAULT_NIGHT = NightParams(gain=0.45, gamma=1.6, contrast=0.25, noise_sigma=0.03, blur_radius=0.6)


# ---------------------------------------------------------------------------
# Image statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageStats:
    mean: float
    std: float
    histogram: tuple[int, ...]
    bright_spots: int


def image_stats(img: ImageBuffer, bins: int = 24, bright: float = 0.9) -> ImageStats:
    """Luminance mean/std, a 24-bin histogram and the count of pixels above 0.9."""
    lum = luminance(img.pixels)
    hist, _ = np.histogram(lum, bins=bins, range=(0.0, 1.0))
    return ImageStats(float(lum.mean()), float(lum.std()), tuple(int(h) for h in hist), int((lum > bright).sum()))


# ---------------------------------------------------------------------------
# Learned translator
# ---------------------------------------------------------------------------

GLOW_SHARPNESS = 25.0
GLOW_SIGMA = 2.0
HIST_BINS = 24
_CENTERS = (np.arange(HIST_BINS) + 0.5) / HIST_BINS
_WIDTH = 1.0 / HIST_BINS
# rows: luminance, blue chroma, red chroma (offset to [0, 1])
_COLOR = np.array([
    LUMA,
    0.564 * (np.array([0.0, 0.0, 1.0]) - LUMA),
    0.713 * (np.array([1.0, 0.0, 0.0]) - LUMA),
])
_COLOR_OFFSET = np.array([0.0, 0.5, 0.5])

GEN_KEYS = ("log_gain", "log_gamma", "bias", "tau", "glow")
DISC_KEYS = ("w", "b")


def identity_generator() -> dict[str, np.ndarray]:
    return {"log_gain": np.zeros(3), "log_gamma": np.zeros(3), "bias": np.zeros(3),
            "tau": np.array([0.8]), "glow": np.zeros(3)}


def gain_generator(gain: float) -> dict[str, np.ndarray]:
    g = identity_generator()
    g["log_gain"] = np.full(3, math.log(gain))
    return g


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class _GenCache:
    x: np.ndarray
    pw: np.ndarray
    s: np.ndarray
    m: np.ndarray
    u: np.ndarray


def generator_forward(g: dict[str, np.ndarray], x: np.ndarray) -> tuple[np.ndarray, _GenCache]:
    """y = clip(gain * x**gamma + bias + glow * blur(sigmoid(k * (lum(x) - tau))), 0, 1)."""
    gain = np.exp(g["log_gain"])
    gamma = np.exp(g["log_gamma"])
    pw = np.power(x, gamma)
    s = _sigmoid(GLOW_SHARPNESS * (luminance(x) - g["tau"][0]))
    m = gaussian_filter(s, GLOW_SIGMA, mode="constant")
    u = gain * pw + g["bias"] + g["glow"] * m[..., None]
    return np.clip(u, 0.0, 1.0), _GenCache(x, pw, s, m, u)


def generator_backward(g: dict[str, np.ndarray], c: _GenCache, dy: np.ndarray, need_dx: bool = True):
    """Gradients w.r.t. generator parameters and (optionally) its input."""
    gain = np.exp(g["log_gain"])
    gamma = np.exp(g["log_gamma"])
    du = dy * ((c.u > 0.0) & (c.u < 1.0))
    pos = c.x > 0
    logx = np.log(np.where(pos, c.x, 1.0))
    grads = {
        "log_gain": (du * c.pw).sum(axis=(0, 1)) * gain,
        "log_gamma": (du * gain * c.pw * logx).sum(axis=(0, 1)) * gamma,
        "bias": du.sum(axis=(0, 1)),
        "glow": (du * c.m[..., None]).sum(axis=(0, 1)),
    }
    dm = (du * g["glow"]).sum(axis=2)
    ds = gaussian_filter(dm, GLOW_SIGMA, mode="constant")  # zero-padded Gaussian blur is self-adjoint
    dz = ds * c.s * (1.0 - c.s) * GLOW_SHARPNESS
    grads["tau"] = np.array([-dz.sum()])
    dx = None
    if need_dx:
        dpw = np.where(pos, gamma * np.power(np.where(pos, c.x, 1.0), gamma - 1.0), 0.0)
        dx = du * gain * dpw + dz[..., None] * LUMA
    return grads, dx


def hist_features(x: np.ndarray):
    """Soft 24-bin histograms of luminance and two chroma channels, flattened to 72 values."""
    v = x.reshape(-1, 3) @ _COLOR.T + _COLOR_OFFSET  # (N, 3)
    d = (v[:, :, None] - _CENTERS) / _WIDTH  # (N, 3, B)
    k = np.exp(-0.5 * d * d)
    return k.mean(axis=0).ravel(), (v, d, k)


def hist_features_backward(cache, dphi: np.ndarray, shape) -> np.ndarray:
    v, d, k = cache
    n = v.shape[0]
    dv = (dphi.reshape(3, HIST_BINS)[None] * k * (-d / _WIDTH)).sum(axis=2) / n  # (N, 3)
    return (dv @ _COLOR).reshape(shape)


def disc_forward(dparams: dict[str, np.ndarray], x: np.ndarray):
    phi, cache = hist_features(x)
    z = float(phi @ dparams["w"] + dparams["b"][0])
    return float(_sigmoid(z)), (phi, cache)


@dataclass
class GanConfig:
    epochs: int = 200
    lr_base: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    crop: int = 64
    batch: int = 1
    loss: str = "least-squares"
    lambda_cyc: float = 10.0
    identity_weight: float = 0.0
    init_scale: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.loss not in ("least-squares", "logistic"):
            raise ValidationError(f"unknown adversarial loss {self.loss!r}")
        if self.batch != 1:
            raise ValidationError("only batch size 1 is supported")

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown translator config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TranslatorPair:
    """G: day->night, F: night->day, each judged by a histogram discriminator."""

    G: dict[str, np.ndarray]
    F: dict[str, np.ndarray]
    D_day: dict[str, np.ndarray]
    D_night: dict[str, np.ndarray]
    lambda_cyc: float = 10.0

    def copy(self) -> "TranslatorPair":
        cp = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return TranslatorPair(cp(self.G), cp(self.F), cp(self.D_day), cp(self.D_night), self.lambda_cyc)

    def equals(self, other: "TranslatorPair") -> bool:
        return all(
            np.array_equal(a[k], b[k])
            for a, b in ((self.G, other.G), (self.F, other.F), (self.D_day, other.D_day), (self.D_night, other.D_night))
            for k in a
        )

    def digest(self) -> str:
        h = hashlib.sha256(repr(self.lambda_cyc).encode())
        for net in ("G", "F", "D_day", "D_night"):
            for k, v in sorted(getattr(self, net).items()):
                h.update(f"{net}.{k}".encode())
                h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    @classmethod
    def identity(cls, lambda_cyc: float = 10.0) -> "TranslatorPair":
        zeros = lambda: {"w": np.zeros(3 * HIST_BINS), "b": np.zeros(1)}  # noqa: E731
        return cls(identity_generator(), identity_generator(), zeros(), zeros(), lambda_cyc)

    @classmethod
    def initial(cls, cfg: GanConfig) -> "TranslatorPair":
        rng = np.random.default_rng(cfg.seed)

        def gen():
            g = identity_generator()
            g["log_gain"] = rng.normal(0.0, cfg.init_scale, 3)
            g["log_gamma"] = rng.normal(0.0, cfg.init_scale, 3)
            g["bias"] = rng.normal(0.0, cfg.init_scale / 4, 3)
            return g

        def disc():
            return {"w": rng.normal(0.0, 0.01, 3 * HIST_BINS), "b": np.zeros(1)}

        return cls(gen(), gen(), disc(), disc(), cfg.lambda_cyc)


def _adv(d: float, target: float, kind: str) -> tuple[float, float]:
    """Adversarial loss and its derivative w.r.t. the discriminator output."""
    if kind == "least-squares":
        return (d - target) ** 2, 2.0 * (d - target)
    eps = 1e-12
    if target == 1.0:
        return -math.log(max(d, eps)), -1.0 / max(d, eps)
    return -math.log(max(1.0 - d, eps)), 1.0 / max(1.0 - d, eps)


def _disc_backward(dparams, phi_cache, dD: float, d: float, need_dx: bool, shape):
    phi, cache = phi_cache
    dz = dD * d * (1.0 - d)
    grads = {"w": dz * phi, "b": np.array([dz])}
    dx = hist_features_backward(cache, dz * dparams["w"], shape) if need_dx else None
    return grads, dx


def _zeros_like(d):
    return {k: np.zeros_like(v) for k, v in d.items()}


def _acc(total, add):
    for k, v in add.items():
        total[k] = total[k] + v


def gan_losses(pair: TranslatorPair, day: Sequence[np.ndarray], night: Sequence[np.ndarray], cfg: GanConfig,
               with_grads: bool = False):
    """Generator-side and discriminator-side losses on paired lists of crops.

    Returns a dict with ``adv_G``, ``adv_F``, ``cyc``, ``idt``, ``total`` (the
    generator objective) and ``D_day``, ``D_night`` (discriminator
    objectives), averaged over the batch. With ``with_grads`` a second dict
    holds gradients: ``G`` and ``F`` of ``total``, ``D_day`` and ``D_night``
    of their own objectives.
    """
    if not day or not night:
        raise ValidationError("gan_losses needs non-empty day and night batches")
    kind = cfg.loss
    lam = pair.lambda_cyc
    n = max(len(day), len(night))
    out = dict.fromkeys(("adv_G", "adv_F", "cyc", "idt", "D_day", "D_night"), 0.0)
    gG, gF = _zeros_like(pair.G), _zeros_like(pair.F)
    gDd, gDn = _zeros_like(pair.D_day), _zeros_like(pair.D_night)
    for i in range(n):
        x = day[i % len(day)]
        y = night[i % len(night)]
        fake_y, cG1 = generator_forward(pair.G, x)
        rec_x, cF1 = generator_forward(pair.F, fake_y)
        fake_x, cF2 = generator_forward(pair.F, y)
        rec_y, cG2 = generator_forward(pair.G, fake_x)

        dn_fake, pn_fake = disc_forward(pair.D_night, fake_y)
        dd_fake, pd_fake = disc_forward(pair.D_day, fake_x)
        dn_real, pn_real = disc_forward(pair.D_night, y)
        dd_real, pd_real = disc_forward(pair.D_day, x)

        a_g, da_g = _adv(dn_fake, 1.0, kind)
        a_f, da_f = _adv(dd_fake, 1.0, kind)
        cyc_x = float(np.abs(rec_x - x).mean())
        cyc_y = float(np.abs(rec_y - y).mean())
        out["adv_G"] += a_g / n
        out["adv_F"] += a_f / n
        out["cyc"] += (cyc_x + cyc_y) / n

        ln_r, dln_r = _adv(dn_real, 1.0, kind)
        ln_f, dln_f = _adv(dn_fake, 0.0, kind)
        ld_r, dld_r = _adv(dd_real, 1.0, kind)
        ld_f, dld_f = _adv(dd_fake, 0.0, kind)
        out["D_night"] += 0.5 * (ln_r + ln_f) / n
        out["D_day"] += 0.5 * (ld_r + ld_f) / n

        idt_g = idt_f = None
        if cfg.identity_weight:
            idt_y, cGi = generator_forward(pair.G, y)
            idt_x, cFi = generator_forward(pair.F, x)
            out["idt"] += (float(np.abs(idt_y - y).mean()) + float(np.abs(idt_x - x).mean())) / n
            idt_g, idt_f = (idt_y, cGi), (idt_x, cFi)

        if not with_grads:
            continue
        # generator objective
        d_rec_x = lam * np.sign(rec_x - x) / rec_x.size / n
        d_rec_y = lam * np.sign(rec_y - y) / rec_y.size / n
        g, d_fake_y = generator_backward(pair.F, cF1, d_rec_x)
        _acc(gF, g)
        g, d_fake_x = generator_backward(pair.G, cG2, d_rec_y)
        _acc(gG, g)
        _, dx = _disc_backward(pair.D_night, pn_fake, da_g / n, dn_fake, True, fake_y.shape)
        d_fake_y = d_fake_y + dx
        _, dx = _disc_backward(pair.D_day, pd_fake, da_f / n, dd_fake, True, fake_x.shape)
        d_fake_x = d_fake_x + dx
        g, _ = generator_backward(pair.G, cG1, d_fake_y, need_dx=False)
        _acc(gG, g)
        g, _ = generator_backward(pair.F, cF2, d_fake_x, need_dx=False)
        _acc(gF, g)
        if idt_g is not None:
            w = cfg.identity_weight * lam
            g, _ = generator_backward(pair.G, idt_g[1], w * np.sign(idt_g[0] - y) / y.size / n, need_dx=False)
            _acc(gG, g)
            g, _ = generator_backward(pair.F, idt_f[1], w * np.sign(idt_f[0] - x) / x.size / n, need_dx=False)
            _acc(gF, g)
        # discriminator objectives
        for dp, acc, (dval, cache, dl) in (
            (pair.D_night, gDn, (dn_real, pn_real, dln_r)), (pair.D_night, gDn, (dn_fake, pn_fake, dln_f)),
            (pair.D_day, gDd, (dd_real, pd_real, dld_r)), (pair.D_day, gDd, (dd_fake, pd_fake, dld_f)),
        ):
            g, _ = _disc_backward(dp, cache, 0.5 * dl / n, dval, False, None)
            _acc(acc, g)

    out["total"] = out["adv_G"] + out["adv_F"] + lam * out["cyc"] + cfg.identity_weight * lam * out["idt"]
    if not with_grads:
        return out
    return out, {"G": gG, "F": gF, "D_day": gDd, "D_night": gDn}


def _crop(rng: np.random.Generator, px: np.ndarray, size: int) -> np.ndarray:
    h, w, _ = px.shape
    ch, cw = min(size, h), min(size, w)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return px[y0:y0 + ch, x0:x0 + cw]


@dataclass
class TranslatorResult:
    pair: TranslatorPair
    trace: dict[str, list[float]] = field(default_factory=dict)


def _images(src) -> list[np.ndarray]:
    if isinstance(src, DatasetIndex):
        return [read_image(src.image_path(i)).pixels for i in range(len(src))]
    return [s.pixels if isinstance(s, ImageBuffer) else np.asarray(s, dtype=np.float64) for s in src]


def train_translator(day, night, cfg: GanConfig, init: TranslatorPair | None = None) -> TranslatorResult:
    """Alternate generator and discriminator Adam updates on unpaired random crops.

    An epoch visits ``max(len(day), len(night))`` steps, each pairing one
    day crop with one night crop drawn from independent seeded shuffles.
    The learning rate is constant for the first half of the epochs and
    falls linearly to 0 over the second half. Passing ``init`` continues
    training from an existing pair (refinement).
    """
    day_px, night_px = _images(day), _images(night)
    if not day_px or not night_px:
        raise ValidationError("translator training needs non-empty day and night sets")
    pair = init.copy() if init is not None else TranslatorPair.initial(cfg)
    pair.lambda_cyc = cfg.lambda_cyc
    rng = np.random.default_rng(cfg.seed + 1)
    gen_state = {k: OptimState.fresh(getattr(pair, k), cfg.lr_base, cfg.beta1, cfg.beta2) for k in ("G", "F")}
    disc_state = {k: OptimState.fresh(getattr(pair, k), cfg.lr_base, cfg.beta1, cfg.beta2) for k in ("D_day", "D_night")}
    trace: dict[str, list[float]] = {"cyc": [], "adv_G": [], "adv_F": [], "D_day": [], "D_night": []}
    steps = max(len(day_px), len(night_px))
    for epoch in range(cfg.epochs):
        lr = lr_at("linear-decay", epoch, cfg.epochs, cfg.lr_base)
        d_order = rng.permutation(len(day_px))
        n_order = rng.permutation(len(night_px))
        sums = dict.fromkeys(trace, 0.0)
        for s in range(steps):
            x = _crop(rng, day_px[d_order[s % len(day_px)]], cfg.crop)
            y = _crop(rng, night_px[n_order[s % len(night_px)]], cfg.crop)
            vals, grads = gan_losses(pair, [x], [y], cfg, with_grads=True)
            for k in ("G", "F"):
                p, gen_state[k] = adam_step(getattr(pair, k), grads[k], gen_state[k], lr)
                setattr(pair, k, p)
            for k in ("D_day", "D_night"):
                p, disc_state[k] = adam_step(getattr(pair, k), grads[k], disc_state[k], lr)
                setattr(pair, k, p)
            for k in sums:
                sums[k] += vals[k]
        for k in trace:
            trace[k].append(sums[k] / steps)
        log.debug("epoch %d cyc %.4f advG %.4f", epoch, trace["cyc"][-1], trace["adv_G"][-1])
    return TranslatorResult(pair, trace)


def translate(img: ImageBuffer, route: "TranslatorPair | NightParams") -> ImageBuffer:
    """Translate a full image (never a crop) day -> night."""
    if isinstance(route, NightParams):
        return night_transform(img, route)
    y, _ = generator_forward(route.G, img.pixels)
    return ImageBuffer(y)


def night_score(pair: TranslatorPair, img: ImageBuffer) -> float:
    """Probability assigned by the night discriminator."""
    return disc_forward(pair.D_night, img.pixels)[0]


TRANSLATOR_FORMAT = "noctis-translator"
TRANSLATOR_VERSION = 1


def save_translator(path: str | Path, pair: TranslatorPair, cfg: GanConfig | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": TRANSLATOR_FORMAT, "version": TRANSLATOR_VERSION, "lambda_cyc": pair.lambda_cyc,
            "config": None if cfg is None else asdict(cfg)}
    arrays = {f"{net}.{k}": np.asarray(v, dtype=np.float64)
              for net in ("G", "F", "D_day", "D_night") for k, v in getattr(pair, net).items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_translator(path: str | Path) -> TranslatorPair:
    try:
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("format") != TRANSLATOR_FORMAT or meta.get("version") != TRANSLATOR_VERSION:
                raise FormatError(f"{path} is not a supported translator checkpoint")
            nets = {net: {} for net in ("G", "F", "D_day", "D_night")}
            for key in z.files:
                if key == "meta":
                    continue
                net, name = key.split(".", 1)
                nets[net][name] = z[key].copy()
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read translator {path}: {exc}") from exc
    return TranslatorPair(nets["G"], nets["F"], nets["D_day"], nets["D_night"], float(meta["lambda_cyc"]))


# ---------------------------------------------------------------------------
# Dataset conversion
# ---------------------------------------------------------------------------


def subset_size(n: int, fraction: float) -> int:
    return int(math.floor(n * fraction + 0.5))


def select_subset(n: int, fraction: float, seed: int) -> list[int]:
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError("fraction must lie in [0, 1]")
    k = subset_size(n, fraction)
    return sorted(np.random.default_rng(seed).choice(n, size=k, replace=False).tolist())


def parametric_converter(params: NightParams) -> Callable[[ImageBuffer, int], ImageBuffer]:
    """Per-image noise seeds are ``params.seed + entry index``."""
    return lambda img, i: night_transform(img, replace(params, seed=params.seed + i))


def translator_converter(pair: TranslatorPair) -> Callable[[ImageBuffer, int], ImageBuffer]:
    return lambda img, i: translate(img, pair)


def convert_subset(index: DatasetIndex, fraction: float, seed: int,
                   convert: Callable[[ImageBuffer, int], ImageBuffer], out_dir: str | Path,
                   suffix: str = "night") -> DatasetIndex:
    """Replace the images of a seeded ``round(n * fraction)`` subset by converted copies.

    Converted entries point at new image files under ``out_dir`` with the
    original label path verbatim and domain ``converted``. Other entries are
    returned unchanged. Paths in the result are absolute.
    """
    out_dir = Path(out_dir)
    chosen = set(select_subset(len(index), fraction, seed))
    entries = []
    for i, e in enumerate(index.entries):
        label = None if e.label is None else str(index.resolve(e.label).resolve())
        image = str(index.image_path(i).resolve())
        if i in chosen:
            dst = (out_dir / "images" / f"{Path(e.image).stem}_{suffix}.png").resolve()
            write_image(dst, convert(read_image(image), i))
            entries.append(DatasetEntry(str(dst), label, e.split, "converted", e.source))
        else:
            entries.append(DatasetEntry(image, label, e.split, e.domain, e.source))
    return DatasetIndex(tuple(entries), seed)
