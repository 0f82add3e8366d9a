"""Multi-scene prior data augmentation and a momentum-contrastive pretraining step.

Six views simulate the five scenes: unchanged and lighting (general), blurred
(low resolution), clothing change, occlusion and grayscale (cross modality).
All view functions take an explicit ``numpy.random.Generator`` and are pure
given it.

The clothing-change view is a stand-in: instead of a generative clothes-transfer
model it rotates the hue of a fixed torso rectangle, so colour changes but
texture does not.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import correlate1d, map_coordinates

from . import tensor as T
from .model import Branch, ModelConfig, _param, _xavier, encode, init_backbone
from .optim import SgdMomentumState, sgd_momentum_step, zero_grads
from .tensor import Tensor

LUMA = np.array([0.299, 0.587, 0.114])


class ViewKind(enum.Enum):
    UNCHANGED = "unchanged"
    LIGHTING = "lighting"
    BLURRED = "blurred"
    CLOTHING_CHANGE = "clothing_change"
    OCCLUSION = "occlusion"
    GRAYSCALE = "grayscale"


ALL_VIEWS = tuple(ViewKind)
# baseline without scene priors: geometric jitter plus lighting only
BASIC_VIEWS = (ViewKind.UNCHANGED, ViewKind.LIGHTING)


def _check_range(name: str, lo: float, hi: float) -> None:
    if not lo <= hi:
        raise ValueError(f"{name} range is empty: [{lo}, {hi}]")


@dataclass(frozen=True)
class AugConfig:
    brightness: tuple[float, float] = (0.7, 1.3)
    contrast: tuple[float, float] = (0.7, 1.3)
    blur_sigma: tuple[float, float] = (0.8, 2.0)
    occlusion_area: tuple[float, float] = (0.1, 0.4)
    hue_shift: tuple[float, float] = (60.0, 300.0)
    # torso rectangle as fractions of (height, width)
    torso_rows: tuple[float, float] = (0.3, 0.6)
    torso_cols: tuple[float, float] = (0.15, 0.85)
    crop_scale: tuple[float, float] = (0.8, 1.0)
    flip_prob: float = 0.5

    def __post_init__(self):
        for name in ("brightness", "contrast", "blur_sigma", "occlusion_area", "hue_shift",
                     "torso_rows", "torso_cols", "crop_scale"):
            _check_range(name, *getattr(self, name))
        lo, hi = self.occlusion_area
        if not (0 < lo and hi < 1):
            raise ValueError(f"occlusion area fraction must lie in (0, 1), got [{lo}, {hi}]")
        if self.blur_sigma[0] <= 0:
            raise ValueError("blur sigma must be positive")


# -- primitive image ops ----------------------------------------------------

def grayscale(image: np.ndarray) -> np.ndarray:
    y = image @ LUMA.astype(image.dtype)
    return np.repeat(y[..., None], 3, axis=-1)


def adjust_lighting(image: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    m = image.mean()
    return np.clip((image - m) * contrast + m * brightness, 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur with mirrored borders (edge pixel repeated), mass preserving."""
    k = gaussian_kernel(sigma)
    out = correlate1d(image.astype(np.float64), k, axis=0, mode="reflect")
    out = correlate1d(out, k, axis=1, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def rotate_hue(image: np.ndarray, degrees: float, rows: slice, cols: slice) -> np.ndarray:
    out = image.copy()
    region = np.clip(out[rows, cols], 0.0, 1.0)
    hsv = rgb_to_hsv(region)
    hsv[..., 0] = (hsv[..., 0] + degrees / 360.0) % 1.0
    out[rows, cols] = hsv_to_rgb(hsv)
    return np.clip(out, 0.0, 1.0)


def torso_box(shape: tuple[int, ...], cfg: AugConfig) -> tuple[slice, slice]:
    h, w = shape[:2]
    r0, r1 = (int(round(f * h)) for f in cfg.torso_rows)
    c0, c1 = (int(round(f * w)) for f in cfg.torso_cols)
    return slice(r0, max(r1, r0 + 1)), slice(c0, max(c1, c0 + 1))


def occlusion_box(shape: tuple[int, ...], area: float,
                  rng: np.random.Generator) -> tuple[int, int]:
    """Rectangle ``(rows, cols)`` covering about ``area`` of the image."""
    h, w = shape[:2]
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    bh = int(np.clip(round(math.sqrt(area * h * w * aspect)), 1, h))
    bw = int(np.clip(round(area * h * w / bh), 1, w))
    return bh, bw


def paste_occluder(image: np.ndarray, donor: np.ndarray, area: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Crop a random rectangle from ``donor`` and paste it fully inside ``image``.

    Returns the image and the destination box ``(top, left, height, width)``.
    """
    h, w = image.shape[:2]
    bh, bw = occlusion_box(image.shape, area, rng)
    sy, sx = rng.integers(0, donor.shape[0] - bh + 1), rng.integers(0, donor.shape[1] - bw + 1)
    ty, tx = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
    out = image.copy()
    out[ty:ty + bh, tx:tx + bw] = donor[sy:sy + bh, sx:sx + bw]
    return out, (int(ty), int(tx), bh, bw)


def resized_crop(image: np.ndarray, top: float, left: float, ch: float, cw: float) -> np.ndarray:
    """Bilinear resample of the crop window back to the full image size."""
    h, w = image.shape[:2]
    ys = top + (np.arange(h) + 0.5) * ch / h - 0.5
    xs = left + (np.arange(w) + 0.5) * cw / w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    chans = [map_coordinates(image[..., c], [yy, xx], order=1, mode="nearest")
             for c in range(image.shape[2])]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0).astype(image.dtype)


def geometric_jitter(image: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    s = math.sqrt(rng.uniform(*cfg.crop_scale))
    ch, cw = h * s, w * s
    top, left = rng.uniform(0, h - ch), rng.uniform(0, w - cw)
    out = resized_crop(image, top, left, ch, cw)
    if rng.random() < cfg.flip_prob:
        out = out[:, ::-1].copy()
    return out


# -- views -----------------------------------------------------------------

def generate_view(image: np.ndarray, kind: ViewKind, rng: np.random.Generator,
                  donor: np.ndarray | None = None, cfg: AugConfig = AugConfig(),
                  geometric: bool = True) -> np.ndarray:
    kind = ViewKind(kind)
    if kind is ViewKind.OCCLUSION and donor is None:
        raise ValueError("occlusion view requires a donor image")
    if kind is not ViewKind.OCCLUSION and donor is not None:
        raise ValueError(f"{kind.value} view does not take a donor image")
    out = geometric_jitter(image, cfg, rng) if geometric else image
    if kind is ViewKind.UNCHANGED:
        return out
    if kind is ViewKind.LIGHTING:
        return adjust_lighting(out, rng.uniform(*cfg.brightness), rng.uniform(*cfg.contrast))
    if kind is ViewKind.BLURRED:
        return gaussian_blur(out, rng.uniform(*cfg.blur_sigma))
    if kind is ViewKind.CLOTHING_CHANGE:
        rows, cols = torso_box(out.shape, cfg)
        return rotate_hue(out, rng.uniform(*cfg.hue_shift), rows, cols)
    if kind is ViewKind.OCCLUSION:
        return paste_occluder(out, donor, rng.uniform(*cfg.occlusion_area), rng)[0]
    return grayscale(out)


def sample_view_pair(image: np.ndarray, donor_pool: Sequence[np.ndarray],
                     rng: np.random.Generator, cfg: AugConfig = AugConfig(),
                     kinds: Sequence[ViewKind] = ALL_VIEWS,
                     counter: Counter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Two views of distinct kinds drawn uniformly without replacement."""
    if len(donor_pool) == 0:
        raise ValueError("donor pool is empty")
    picks = rng.choice(len(kinds), size=2, replace=False)
    views = []
    for i in picks:
        kind = kinds[i]
        if counter is not None:
            counter[kind] += 1
        donor = donor_pool[rng.integers(len(donor_pool))] if kind is ViewKind.OCCLUSION else None
        views.append(generate_view(image, kind, rng, donor, cfg))
    return views[0], views[1]


# -- momentum contrastive pretraining --------------------------------------

def init_encoder(config: ModelConfig, rng: np.random.Generator) -> Branch:
    """Prompt-free backbone plus a ``D -> 2D -> D`` projection head."""
    params = init_backbone(config, rng)
    d = config.dim
    params["proj.fc1.weight"] = _param(_xavier(rng, d, 2 * d), "proj.fc1.weight")
    params["proj.fc1.bias"] = _param(np.zeros(2 * d, np.float32), "proj.fc1.bias")
    params["proj.fc2.weight"] = _param(_xavier(rng, 2 * d, d), "proj.fc2.weight")
    params["proj.fc2.bias"] = _param(np.zeros(d, np.float32), "proj.fc2.bias")
    return Branch(config, params, "backbone")


def project(images: np.ndarray, enc: Branch) -> Tensor:
    P = enc.params
    f = encode(images, enc, None)
    h = T.gelu(f @ P["proj.fc1.weight"] + P["proj.fc1.bias"])
    return T.l2_normalize(h @ P["proj.fc2.weight"] + P["proj.fc2.bias"])


def info_nce(queries: Tensor, keys: Tensor, temperature: float) -> Tensor:
    """Cross-entropy of matching each query to its own key among in-batch keys."""
    b = queries.shape[0]
    logits = T.scale(queries @ T.transpose(keys), 1.0 / temperature)
    probs = T.softmax_rows(logits)
    diag = probs[np.arange(b), np.arange(b)]
    return T.scale(T.sum(T.log(T.maximum(diag, 1e-12))), -1.0 / b)


def symmetric_info_nce(q_a: Tensor, q_b: Tensor, k_a: Tensor, k_b: Tensor,
                       temperature: float) -> Tensor:
    return T.scale(info_nce(q_a, k_b, temperature) + info_nce(q_b, k_a, temperature), 0.5)


def momentum_update(encoder: Branch, momentum_encoder: Branch, m: float = 0.99) -> Branch:
    for name, p in encoder.params.items():
        q = momentum_encoder.params[name]
        if q.shape != p.shape:
            raise T.ShapeError(f"momentum update shape mismatch for {name}: {q.shape} vs {p.shape}")
        dt = q.data.dtype.type
        q.data = dt(m) * q.data + dt(1.0 - m) * p.data
    return momentum_encoder


def contrastive_step(encoder: Branch, momentum_encoder: Branch, view_a: np.ndarray,
                     view_b: np.ndarray, opt: SgdMomentumState, temperature: float = 0.2,
                     m: float = 0.99) -> float:
    """One symmetric InfoNCE update; returns the loss before the update."""
    if len(view_a) < 2:
        raise ValueError("contrastive step needs a batch of at least 2 (in-batch negatives)")
    with T.no_grad():
        k_a = project(view_a, momentum_encoder)
        k_b = project(view_b, momentum_encoder)
    zero_grads(encoder.params)
    with T.GradTape() as tape:
        loss = symmetric_info_nce(project(view_a, encoder), project(view_b, encoder),
                                  k_a, k_b, temperature)
    tape.backward(loss)
    sgd_momentum_step(encoder.params, None, opt)
    momentum_update(encoder, momentum_encoder, m)
    return float(loss.data)
