"""Multi-crop view generation for self-distillation.

Random parameters are drawn per patch from that patch's own stream, then
applied by compiled per-pixel kernels. A patch therefore gets the
same views whether it is augmented alone or inside a batch.

Images are H x W x 3 float32 in [0, 1] until normalization, which emits
C x H x W.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .rng import SplitMix


@dataclass(frozen=True)
class AugmentConfig:
    global_size: int = 224
    local_size: int = 96
    n_local: int = 8
    global_scale: tuple = (0.4, 1.0)
    local_scale: tuple = (0.05, 0.4)
    ratio: tuple = (3 / 4, 4 / 3)
    hflip_p: float = 0.5
    vflip_p: float = 0.0
    grayscale_p: float = 0.2
    brightness: float = 0.8
    contrast: float = 0.8
    saturation: float = 0.4
    hue: float = 0.2
    jitter_p: float = 0.8
    jitter_strength: float = 0.5  # scales all four jitter magnitudes
    blur_sigma: tuple = (0.1, 2.0)
    global_blur_p: tuple = (1.0, 0.1)
    local_blur_p: float = 0.5
    global_solarize_p: tuple = (0.0, 0.2)
    solarize_threshold: float = 0.5
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 1:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        probs = [self.hflip_p, self.vflip_p, self.grayscale_p, self.jitter_p, self.local_blur_p,
                 *self.global_blur_p, *self.global_solarize_p]
        if any(not 0 <= p <= 1 for p in probs):
            raise ValueError("augmentation probabilities must lie in [0, 1]")
        if self.jitter_strength < 0:
            raise ValueError("jitter_strength must be non-negative")
        if any(s <= 0 for s in self.std):
            raise ValueError("normalization std must be positive")

    @classmethod
    def desk(cls, **overrides) -> "AugmentConfig":
        """Small-image preset for a 64 px encoder."""
        kw = dict(global_size=64, local_size=32)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class ViewSet:
    globals: list
    locals: list
    patch_id: str = ""


@dataclass
class PixelParams:
    hflip: bool = False
    vflip: bool = False
    jitter: tuple | None = None  # (brightness, contrast, saturation, hue shift)
    gray: bool = False
    sigma: float | None = None
    solarize: bool = False


# --- geometry ---------------------------------------------------------------

def sample_crop_box(height: int, width: int, scale, ratio, rng: SplitMix) -> tuple[int, int, int, int]:
    """(top, left, h, w) with area fraction ~ U(scale), aspect ~ U(ratio)."""
    area = height * width
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = rng.uniform(ratio[0], ratio[1])
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = rng.integers(height - h + 1)
            left = rng.integers(width - w + 1)
            return top, left, h, w
    # center crop fallback
    side = min(height, width)
    return (height - side) // 2, (width - side) // 2, side, side


def crop_resize(images: np.ndarray, boxes: np.ndarray, out_size: int, src_index=None) -> np.ndarray:
    """Bilinear resize of per-view crop boxes (half-pixel centers, edge clamp).

    ``images`` is B x H x W x 3 uint8, ``boxes`` is n x 4 of (top, left, h, w)
    and ``src_index`` maps each box to its source image (default: identity).
    Returns n x out x out x 3 float32 in [0, 1].
    """
    boxes = np.ascontiguousarray(boxes, dtype=np.int64).reshape(-1, 4)
    if src_index is None:
        src_index = np.arange(boxes.shape[0])
    images = np.ascontiguousarray(images, dtype=np.uint8)
    out = np.empty((boxes.shape[0], out_size, out_size, 3), dtype=np.float32)
    K.crop_resize_u8(images, np.asarray(src_index, dtype=np.int64), boxes, out_size, out)
    return out


def resize(image: np.ndarray, out_size: int) -> np.ndarray:
    """Whole-image bilinear resize of one H x W x 3 image."""
    h, w = image.shape[:2]
    return crop_resize(image[None], np.array([[0, 0, h, w]]), out_size)[0]


def random_resized_crop(img: np.ndarray, out_size: int, scale_range, rng: SplitMix,
                        ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    h, w = img.shape[:2]
    box = sample_crop_box(h, w, scale_range, ratio, rng)
    return crop_resize(img[None], np.array([box]), out_size)[0]


# --- pixel transforms -------------------------------------------------------

def sample_pixel_params(cfg: AugmentConfig, rng: SplitMix, blur_p: float, solarize_p: float) -> PixelParams:
    p = PixelParams()
    p.hflip = rng.random() < cfg.hflip_p
    p.vflip = rng.random() < cfg.vflip_p
    if rng.random() < cfg.jitter_p:
        k = cfg.jitter_strength
        bs, cs, ss, hs = k * cfg.brightness, k * cfg.contrast, k * cfg.saturation, k * cfg.hue
        b = rng.uniform(max(0.0, 1 - bs), 1 + bs)
        c = rng.uniform(max(0.0, 1 - cs), 1 + cs)
        s = rng.uniform(max(0.0, 1 - ss), 1 + ss)
        h = rng.uniform(-hs, hs)
        p.jitter = (b, c, s, h)
    p.gray = rng.random() < cfg.grayscale_p
    if rng.random() < blur_p:
        p.sigma = rng.uniform(cfg.blur_sigma[0], cfg.blur_sigma[1])
    p.solarize = rng.random() < solarize_p
    return p


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps truncated at radius ceil(3 sigma)."""
    rad = int(np.ceil(3 * sigma))
    k = np.arange(-rad, rad + 1, dtype=np.float64)
    w = np.exp(-(k ** 2) / (2 * sigma ** 2))
    return (w / w.sum()).astype(np.float32)


def apply_pixel_params(x: np.ndarray, params: list, cfg: AugmentConfig) -> np.ndarray:
    """Apply per-image parameters to a batch (n x H x W x 3); returns a new array."""
    x = np.array(x, dtype=np.float32, copy=True, order="C")
    n = len(params)
    factors = np.zeros((n, 4), dtype=np.float64)
    for i, p in enumerate(params):
        if p.jitter is not None:
            factors[i] = p.jitter
    K.pixel_pipeline(
        x,
        np.array([p.hflip for p in params], dtype=np.bool_),
        np.array([p.vflip for p in params], dtype=np.bool_),
        np.array([p.jitter is not None for p in params], dtype=np.bool_),
        factors,
        np.array([p.gray for p in params], dtype=np.bool_),
        np.array([p.sigma if p.sigma is not None else 0.0 for p in params], dtype=np.float64),
        np.array([p.solarize for p in params], dtype=np.bool_),
        np.float32(cfg.solarize_threshold),
    )
    return x


def pixel_transforms(img: np.ndarray, cfg: AugmentConfig, rng: SplitMix,
                     blur_p: float | None = None, solarize_p: float = 0.0) -> np.ndarray:
    """Flip, jitter, grayscale, blur and solarize one H x W x 3 image."""
    blur_p = cfg.local_blur_p if blur_p is None else blur_p
    params = sample_pixel_params(cfg, rng, blur_p, solarize_p)
    return apply_pixel_params(img[None], [params], cfg)[0]


def normalize(img: np.ndarray, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> np.ndarray:
    """Per-channel ``(x - mean) / std`` on the trailing channel axis."""
    std = np.asarray(std, dtype=np.float32)
    if np.any(std <= 0):
        raise ValueError(f"std must be positive, got {tuple(std)}")
    mean = np.asarray(mean, dtype=np.float32)
    return (img - mean) / std


def to_chw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, -1, -3))


# --- multi-crop -------------------------------------------------------------

@dataclass
class _Plan:
    global_boxes: list = field(default_factory=list)
    global_params: list = field(default_factory=list)
    local_boxes: list = field(default_factory=list)
    local_params: list = field(default_factory=list)


def _plan(size: tuple, cfg: AugmentConfig, rng: SplitMix) -> _Plan:
    h, w = size
    plan = _Plan()
    for v in range(2):
        plan.global_boxes.append(sample_crop_box(h, w, cfg.global_scale, cfg.ratio, rng))
        plan.global_params.append(sample_pixel_params(cfg, rng, cfg.global_blur_p[v], cfg.global_solarize_p[v]))
    for _ in range(cfg.n_local):
        plan.local_boxes.append(sample_crop_box(h, w, cfg.local_scale, cfg.ratio, rng))
        plan.local_params.append(sample_pixel_params(cfg, rng, cfg.local_blur_p, 0.0))
    return plan


def multi_crop_batch(pixels: np.ndarray, cfg: AugmentConfig, rngs: list) -> tuple[np.ndarray, np.ndarray]:
    """Views for a batch of uint8 patches (B x S x S x 3), one stream per patch.

    Returns ``(globals, locals)`` shaped 2 x B x 3 x G x G and
    n_local x B x 3 x L x L.
    """
    b = pixels.shape[0]
    if pixels.shape[1] < cfg.local_size or pixels.shape[2] < cfg.local_size:
        raise ValueError(f"patch side {pixels.shape[1]} is smaller than local view size {cfg.local_size}")
    plans = [_plan(pixels.shape[1:3], cfg, r) for r in rngs]

    def views(n, size, boxes_of, params_of):
        if n == 0:
            return np.zeros((0, b, 3, size, size), dtype=np.float32)
        src = np.repeat(np.arange(b), n)
        boxes = np.array([boxes_of(p)[v] for p in plans for v in range(n)])
        params = [params_of(p)[v] for p in plans for v in range(n)]
        x = crop_resize(pixels, boxes, size, src)
        x = apply_pixel_params(x, params, cfg)
        x = normalize(x, cfg.mean, cfg.std)
        return to_chw(x).reshape(b, n, 3, size, size).swapaxes(0, 1)

    g = views(2, cfg.global_size, lambda p: p.global_boxes, lambda p: p.global_params)
    loc = views(cfg.n_local, cfg.local_size, lambda p: p.local_boxes, lambda p: p.local_params)
    return np.ascontiguousarray(g), np.ascontiguousarray(loc)


def multi_crop(patch, cfg: AugmentConfig, rng: SplitMix) -> ViewSet:
    """Two global and ``n_local`` local normalized views of one patch."""
    pixels = patch.pixels if hasattr(patch, "pixels") else patch
    g, loc = multi_crop_batch(pixels[None], cfg, [rng])
    return ViewSet(
        globals=[g[i, 0] for i in range(g.shape[0])],
        locals=[loc[i, 0] for i in range(loc.shape[0])],
        patch_id=getattr(patch, "patch_id", ""),
    )
