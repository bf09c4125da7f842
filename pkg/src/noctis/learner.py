"""A tiny per-pixel three-head segmenter trained from scratch with numpy.

Each pixel is described by its RGB value, the mean and standard deviation of
a small window around it and its normalized position. One shared hidden
layer feeds a semantic head (softmax), a center head (logistic) and an
offset head (linear). Gradients are derived by hand.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (ClassCatalog, DatasetIndex, FormatError, ImageBuffer, LabelMap, NumericError, Sample,
                   ValidationError, load_samples)
from .fusion import REFERENCE_PIXELS, HeadOutputs, instance_centroids

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "Ws", "bs", "Wc", "bc", "Wo", "bo")


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


def featurize(img: ImageBuffer, radius: int = 2) -> np.ndarray:
    """Per-pixel features, shape (H*W, 11), rows in row-major pixel order.

    Columns: RGB, window mean per channel, window std per channel, x/(W-1),
    y/(H-1). Windows are (2r+1)^2 with borders clamped to the edge pixel.
    """
    px = img.pixels
    h, w, _ = px.shape
    k = 2 * radius + 1
    padded = np.pad(px, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))  # (h, w, 3, k, k)
    win = win.reshape(h, w, 3, k * k)
    # Shift by the first window element so constant windows give exactly 0.
    shifted = win - win[..., :1]
    mean_s = shifted.mean(axis=-1)
    var = np.maximum((shifted * shifted).mean(axis=-1) - mean_s * mean_s, 0.0)
    mean = win[..., 0] + mean_s
    std = np.sqrt(var)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = xs / (w - 1) if w > 1 else xs * 0.0
    ys = ys / (h - 1) if h > 1 else ys * 0.0
    feats = np.concatenate([px, mean, std, xs[..., None], ys[..., None]], axis=2)
    return feats.reshape(h * w, 11)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class SegModel:
    params: dict[str, np.ndarray]
    catalog_digest: str = ""
    radius: int = 2

    @property
    def hidden(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def n_classes(self) -> int:
        return self.params["Ws"].shape[1]

    def copy(self) -> "SegModel":
        return SegModel({k: v.copy() for k, v in self.params.items()}, self.catalog_digest, self.radius)

    def equals(self, other: "SegModel") -> bool:
        return all(np.array_equal(self.params[k], other.params[k]) for k in PARAM_NAMES)

    def digest(self) -> str:
        """Content hash of the parameters (checkpoint files embed timestamps)."""
        h = hashlib.sha256(f"{self.catalog_digest}:{self.radius}".encode())
        for k in PARAM_NAMES:
            a = np.ascontiguousarray(self.params[k], dtype="<f8")
            h.update(f"{k}{a.shape}".encode())
            h.update(a.tobytes())
        return h.hexdigest()


def init_model(catalog: ClassCatalog, hidden: int = 32, seed: int = 0, radius: int = 2) -> SegModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    n = len(catalog.eval_ids)

    def glorot(fan_in, fan_out):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    params = {
        "W1": glorot(11, hidden), "b1": np.zeros(hidden),
        "Ws": glorot(hidden, n), "bs": np.zeros(n),
        "Wc": glorot(hidden, 1), "bc": np.zeros(1),
        "Wo": glorot(hidden, 2), "bo": np.zeros(2),
    }
    return SegModel(params, catalog.digest(), radius)


def _check_finite(params: dict[str, np.ndarray], what: str = "parameter") -> None:
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite {what} in block {k}")


def _forward_raw(p: dict[str, np.ndarray], x: np.ndarray):
    pre = x @ p["W1"] + p["b1"]
    hid = np.maximum(pre, 0.0)
    logits = hid @ p["Ws"] + p["bs"]
    zc = (hid @ p["Wc"] + p["bc"])[:, 0]
    off = hid @ p["Wo"] + p["bo"]
    return pre, hid, logits, zc, off


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def forward(model: SegModel, features: np.ndarray, shape: tuple[int, int]) -> HeadOutputs:
    """Run the three heads on a feature matrix for an image of ``shape`` (H, W)."""
    _check_finite(model.params)
    _, _, logits, zc, off = _forward_raw(model.params, features)
    h, w = shape
    return HeadOutputs(_softmax(logits).reshape(h, w, -1), _sigmoid(zc).reshape(h, w), off.reshape(h, w, 2))


def predict_heads(model: SegModel, img: ImageBuffer) -> HeadOutputs:
    return forward(model, featurize(img, model.radius), (img.height, img.width))


# ---------------------------------------------------------------------------
# Training configuration, targets and losses
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch: int = 1
    lr_base: float = 5e-5
    schedule: str = "poly"
    poly_power: float = 0.9
    seed: int = 0
    hidden: int = 32
    radius: int = 2
    small_area_threshold: float | None = None  # None scales 4096 px by image size
    small_weight: float = 3.0
    base_weight: float = 1.0
    topk_fraction: float = 0.15
    center_sigma: float | None = None  # None scales 8 px by sqrt of the pixel ratio
    lambda_sem: float = 1.0
    lambda_center: float = 200.0
    lambda_offset: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 0 or self.batch < 1:
            raise ValidationError("iterations must be >= 0 and batch >= 1")
        if min(self.lambda_sem, self.lambda_center, self.lambda_offset, self.small_weight, self.base_weight) < 0:
            raise ValidationError("loss weights must be non-negative")
        if not 0.0 < self.topk_fraction <= 1.0:
            raise ValidationError("topk_fraction must lie in (0, 1]")
        if self.schedule not in ("poly", "constant"):
            raise ValidationError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Targets:
    """Per-pixel training targets in row-major pixel order."""

    labels: np.ndarray  # eval channel, -1 on void
    weights: np.ndarray
    center: np.ndarray  # (N,)
    offset: np.ndarray  # (N, 2)
    thing: np.ndarray  # pixels with an instance
    shape: tuple[int, int]

    @property
    def valid(self) -> np.ndarray:
        return self.labels >= 0

    def heatmap(self) -> np.ndarray:
        return self.center.reshape(self.shape)

    def offset_field(self) -> np.ndarray:
        return self.offset.reshape(self.shape + (2,))

    def weight_map(self) -> np.ndarray:
        return self.weights.reshape(self.shape)


def scaled_sigma(shape: tuple[int, int]) -> float:
    return 8.0 * math.sqrt(shape[0] * shape[1] / REFERENCE_PIXELS)


def scaled_small_area(shape: tuple[int, int]) -> float:
    return 4096.0 * shape[0] * shape[1] / REFERENCE_PIXELS


def make_targets(gt: LabelMap, catalog: ClassCatalog, sigma: float | None = None,
                 small_area_threshold: float | None = None, small_weight: float = 3.0,
                 base_weight: float = 1.0) -> Targets:
    """Center heatmap, offsets and pixel weights for one ground-truth map.

    The heatmap is the pixelwise max of Gaussians placed at each instance's
    rounded centroid; offsets point from instance pixels to that centroid.
    """
    h, w = gt.shape
    sigma = scaled_sigma(gt.shape) if sigma is None else sigma
    small = scaled_small_area(gt.shape) if small_area_threshold is None else small_area_threshold
    lut = catalog.eval_lut()
    sem = np.where((gt.sem >= 0) & (gt.sem < len(lut)), gt.sem, catalog.void_id)
    labels = lut[sem]
    weights = np.where(labels >= 0, base_weight, 0.0)
    heat = np.zeros((h, w))
    offset = np.zeros((h, w, 2))
    thing = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    for (c, i), (cy, cx) in instance_centroids(gt, catalog).items():
        mask = (gt.sem == c) & (gt.inst == i)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        np.maximum(heat, np.exp(-d2 / (2.0 * sigma * sigma)), out=heat)
        offset[mask, 0] = cy - yy[mask]
        offset[mask, 1] = cx - xx[mask]
        thing |= mask
        if mask.sum() < small:
            weights[mask] = small_weight
    return Targets(labels.ravel(), weights.ravel(), heat.ravel(), offset.reshape(-1, 2), thing.ravel(), (h, w))


def targets_for(gt: LabelMap, catalog: ClassCatalog, cfg: TrainConfig) -> Targets:
    return make_targets(gt, catalog, cfg.center_sigma, cfg.small_area_threshold, cfg.small_weight, cfg.base_weight)


def _topk_count(n: int, fraction: float) -> int:
    return max(1, min(n, int(math.ceil(fraction * n - 1e-9))))


def _hard_pixels(wce: np.ndarray, fraction: float) -> np.ndarray:
    k = _topk_count(len(wce), fraction)
    return np.argsort(-wce, kind="stable")[:k]


def losses(heads: HeadOutputs, targets: Targets, cfg: TrainConfig) -> dict[str, float]:
    """Evaluate the three training losses on head outputs (probability space)."""
    valid = targets.valid
    probs = heads.sem_probs.reshape(-1, heads.sem_probs.shape[2])
    center = heads.center.ravel()
    off = heads.offset.reshape(-1, 2)
    out = {"sem": 0.0, "center": 0.0, "offset": 0.0}
    if valid.any():
        p_true = probs[valid, targets.labels[valid]]
        wce = targets.weights[valid] * -np.log(np.maximum(p_true, 1e-300))
        out["sem"] = float(wce[_hard_pixels(wce, cfg.topk_fraction)].mean())
        out["center"] = float(np.mean((center[valid] - targets.center[valid]) ** 2))
    if targets.thing.any():
        out["offset"] = float(np.abs(off[targets.thing] - targets.offset[targets.thing]).sum(axis=1).mean())
    out["total"] = cfg.lambda_sem * out["sem"] + cfg.lambda_center * out["center"] + cfg.lambda_offset * out["offset"]
    return out


def loss_and_grad(params: dict[str, np.ndarray], x: np.ndarray, t: Targets, cfg: TrainConfig):
    """Losses and gradients of the weighted total with respect to every parameter."""
    pre, hid, logits, zc, off = _forward_raw(params, x)
    n_pix = x.shape[0]
    valid = t.valid
    d_logits = np.zeros_like(logits)
    d_zc = np.zeros(n_pix)
    d_off = np.zeros_like(off)
    out = {"sem": 0.0, "center": 0.0, "offset": 0.0}

    if valid.any():
        vidx = np.nonzero(valid)[0]
        z = logits[vidx] - logits[vidx].max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        lab = t.labels[vidx]
        ce = lse - z[np.arange(len(vidx)), lab]
        wce = t.weights[vidx] * ce
        sel = _hard_pixels(wce, cfg.topk_fraction)
        out["sem"] = float(wce[sel].mean())
        rows = vidx[sel]
        p = _softmax(logits[rows])
        p[np.arange(len(rows)), t.labels[rows]] -= 1.0
        d_logits[rows] = cfg.lambda_sem * (t.weights[rows] / len(rows))[:, None] * p

        c = _sigmoid(zc[vidx])
        diff = c - t.center[vidx]
        out["center"] = float(np.mean(diff * diff))
        d_zc[vidx] = cfg.lambda_center * 2.0 * diff / len(vidx) * c * (1.0 - c)

    if t.thing.any():
        tidx = np.nonzero(t.thing)[0]
        r = off[tidx] - t.offset[tidx]
        out["offset"] = float(np.abs(r).sum(axis=1).mean())
        d_off[tidx] = cfg.lambda_offset * np.sign(r) / len(tidx)

    out["total"] = cfg.lambda_sem * out["sem"] + cfg.lambda_center * out["center"] + cfg.lambda_offset * out["offset"]

    grads = {
        "Ws": hid.T @ d_logits, "bs": d_logits.sum(axis=0),
        "Wc": hid.T @ d_zc[:, None], "bc": np.array([d_zc.sum()]),
        "Wo": hid.T @ d_off, "bo": d_off.sum(axis=0),
    }
    d_hid = d_logits @ params["Ws"].T + d_zc[:, None] @ params["Wc"].T + d_off @ params["Wo"].T
    d_pre = d_hid * (pre > 0)
    grads["W1"] = x.T @ d_pre
    grads["b1"] = d_pre.sum(axis=0)
    return out, grads


# ---------------------------------------------------------------------------
# Optimizer and schedules
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr_base: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], lr_base: float = 5e-5, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "OptimState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0, lr_base, beta1, beta2, eps)

    def copy(self) -> "OptimState":
        return replace(self, m={k: v.copy() for k, v in self.m.items()}, v={k: v.copy() for k, v in self.v.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
              lr: float | None = None) -> tuple[dict[str, np.ndarray], OptimState]:
    """One bias-corrected Adam update without weight decay. Inputs are not modified."""
    _check_finite(grads, "gradient")
    lr = state.lr_base if lr is None else lr
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        new_p[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, replace(state, m=new_m, v=new_v, step=t)


def lr_at(schedule: str, step: float, total: float, lr_base: float, power: float = 0.9) -> float:
    """Learning rate at ``step`` of ``total``.

    ``poly`` decays as ``(1 - step/total) ** power``; ``linear-decay`` holds
    ``lr_base`` for the first half and falls linearly to 0 at ``total``;
    ``constant`` never changes.
    """
    if step > total:
        raise ValidationError(f"step {step} beyond schedule length {total}")
    if schedule == "constant" or total <= 0:
        return lr_base
    if schedule == "poly":
        return lr_base * (1.0 - step / total) ** power
    if schedule == "linear-decay":
        half = total / 2.0
        return lr_base * (1.0 - max(0.0, step - half) / (total - half))
    raise ValidationError(f"unknown schedule {schedule!r}")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: SegModel
    state: OptimState
    trace: list[float] = field(default_factory=list)


@dataclass
class Prepared:
    features: np.ndarray
    targets: Targets


def prepare(samples: Sequence[Sample], catalog: ClassCatalog, cfg: TrainConfig) -> list[Prepared]:
    out = []
    for s in samples:
        if s.labels is None:
            raise ValidationError(f"training entry {s.entry.image} has no labels")
        out.append(Prepared(featurize(s.image, cfg.radius), targets_for(s.labels, catalog, cfg)))
    return out


def dataset_loss(model: SegModel, prepared: Sequence[Prepared], cfg: TrainConfig) -> float:
    """Mean total loss over a prepared dataset."""
    return math.fsum(loss_and_grad(model.params, p.features, p.targets, cfg)[0]["total"] for p in prepared) / len(prepared)


def train_segmenter(cfg: TrainConfig, train: DatasetIndex | Sequence[Sample], catalog: ClassCatalog,
                    init: SegModel | None = None, state: OptimState | None = None,
                    prepared: Sequence[Prepared] | None = None) -> TrainResult:
    """Train (or continue training) the segmenter with Adam and a poly schedule.

    Args:
        cfg: training configuration. ``cfg.iterations`` counts steps of this call.
        train: labelled training data.
        catalog: class definitions.
        init: warm-start model; a fresh seeded model otherwise.
        state: optimizer state to resume from; fresh moments otherwise.
        prepared: precomputed features/targets for ``train`` (optional cache).
    """
    if prepared is None:
        samples = load_samples(train, catalog) if isinstance(train, DatasetIndex) else list(train)
        if not samples:
            raise ValidationError("empty training set")
        prepared = prepare(samples, catalog, cfg)
    if not prepared:
        raise ValidationError("empty training set")
    model = init.copy() if init is not None else init_model(catalog, cfg.hidden, cfg.seed, cfg.radius)
    if model.catalog_digest and model.catalog_digest != catalog.digest():
        raise ValidationError("model was built for a different catalog")
    if state is None:
        state = OptimState.fresh(model.params, cfg.lr_base, cfg.beta1, cfg.beta2, cfg.eps)
    else:
        state = replace(state.copy(), lr_base=cfg.lr_base)
    params = model.params
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    trace = []
    for it in range(cfg.iterations):
        total = {k: np.zeros_like(v) for k, v in params.items()}
        step_loss = 0.0
        for _ in range(cfg.batch):
            if not order:
                order = rng.permutation(len(prepared)).tolist()
            p = prepared[order.pop(0)]
            vals, grads = loss_and_grad(params, p.features, p.targets, cfg)
            step_loss += vals["total"]
            for k in total:
                total[k] += grads[k]
        if cfg.batch > 1:
            total = {k: g / cfg.batch for k, g in total.items()}
            step_loss /= cfg.batch
        lr = lr_at(cfg.schedule, it, cfg.iterations, cfg.lr_base, cfg.poly_power)
        params, state = adam_step(params, total, state, lr)
        trace.append(step_loss)
        if it % 500 == 0:
            log.debug("iter %d loss %.5f lr %.2e", it, step_loss, lr)
    return TrainResult(SegModel(params, catalog.digest(), model.radius), state, trace)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "noctis-segmodel"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: SegModel, state: OptimState | None = None,
                    config: TrainConfig | None = None) -> Path:
    """Write an ``.npz`` checkpoint with float64 parameters and optimizer state."""
    import json

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
        "catalog_digest": model.catalog_digest, "radius": model.radius,
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "config": None if config is None else asdict(config),
    }
    arrays = {f"param_{k}": np.asarray(v, dtype=np.float64) for k, v in model.params.items()}
    if state is not None:
        meta["optim"] = {"step": state.step, "lr_base": state.lr_base, "beta1": state.beta1,
                         "beta2": state.beta2, "eps": state.eps}
        arrays.update({f"m_{k}": v for k, v in state.m.items()})
        arrays.update({f"v_{k}": v for k, v in state.v.items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[SegModel, OptimState | None, dict]:
    import json

    try:
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise FormatError(f"{path} is not a segmenter checkpoint")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
            params = {k: z[f"param_{k}"].copy() for k in PARAM_NAMES}
            state = None
            if "optim" in meta:
                o = meta["optim"]
                state = OptimState({k: z[f"m_{k}"].copy() for k in PARAM_NAMES},
                                   {k: z[f"v_{k}"].copy() for k in PARAM_NAMES},
                                   int(o["step"]), o["lr_base"], o["beta1"], o["beta2"], o["eps"])
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    for k, shape in meta["shapes"].items():
        if list(params[k].shape) != shape:
            raise FormatError(f"checkpoint block {k} has shape {params[k].shape}, expected {shape}")
    return SegModel(params, meta["catalog_digest"], int(meta["radius"])), state, meta
