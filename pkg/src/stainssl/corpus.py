"""Synthetic stain slides and the tiling pipeline.

Slides are procedurally painted rasters: a white background, clustered
blob "cells" whose colour is drawn from a two-chromogen palette, and a
sinusoidal texture at a class-specific frequency. Tiling follows the usual
WSI recipe: OTSU on slide luma, a non-overlapping S x S grid, a foreground
fraction cut, then a capped uniform sample per slide.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import SplitMix, tag_of

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("patch_id", "slide_id", "class_id", "origin_x", "origin_y")


class CorpusError(RuntimeError):
    pass


class ManifestError(CorpusError, ValueError):
    """Missing or malformed corpus manifest (bad input rather than a failed run)."""


class PPMFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class StainClassSpec:
    class_id: int
    hue_pair: tuple  # two RGB triples, 0-255
    density: float  # blobs per 1e4 px^2 inside tissue fragments
    radius_range: tuple = (4.0, 9.0)
    texture_freq: float = 6.0  # cycles per slide width
    background: tuple = (242, 240, 238)
    name: str = ""

    def __post_init__(self):
        bg = self.background
        luma = (0.299 * bg[0] + 0.587 * bg[1] + 0.114 * bg[2]) / 255.0
        if luma <= 0.85:
            raise ValueError(f"background luma {luma:.3f} must exceed 0.85")
        if len(self.hue_pair) != 2:
            raise ValueError("hue_pair needs exactly two RGB triples")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius range {self.radius_range}")


# Chromogen pairs emulating common IHC / special stains.
_PALETTE = [
    ("dab-hematoxylin", ((120, 70, 30), (60, 70, 150)), 150.0, (4.0, 8.0), 3.0),
    ("trichrome", ((40, 120, 90), (170, 40, 60)), 110.0, (5.0, 10.0), 9.0),
    ("pas", ((175, 50, 140), (70, 80, 160)), 70.0, (7.0, 13.0), 5.0),
    ("giemsa", ((100, 60, 150), (190, 110, 160)), 320.0, (3.0, 6.0), 12.0),
    ("silver", ((50, 40, 35), (150, 110, 60)), 140.0, (4.0, 9.0), 7.0),
    ("congo-red", ((190, 60, 70), (70, 90, 150)), 85.0, (6.0, 11.0), 4.0),
    ("alcian-blue", ((60, 130, 170), (190, 80, 110)), 120.0, (5.0, 9.0), 10.0),
    ("toluidine", ((80, 70, 160), (140, 120, 190)), 220.0, (4.0, 7.0), 6.0),
]


def default_stain_classes(n: int = 4) -> list[StainClassSpec]:
    if not 2 <= n <= len(_PALETTE):
        raise ValueError(f"between 2 and {len(_PALETTE)} stain classes are available, got {n}")
    return [
        StainClassSpec(class_id=i, hue_pair=pair, density=dens, radius_range=rad, texture_freq=freq, name=name)
        for i, (name, pair, dens, rad, freq) in enumerate(_PALETTE[:n])
    ]


@dataclass
class SlideRecord:
    slide_id: str
    class_id: int
    raster: np.ndarray  # H x W x 3 uint8
    rng_seed: int
    tissue_fraction: float = 0.0


@dataclass
class PatchImage:
    patch_id: str
    slide_id: str
    origin: tuple  # (x, y)
    pixels: np.ndarray  # S x S x 3 uint8
    foreground_fraction: float = 1.0
    class_id: int = -1


def luma_u8(rgb: np.ndarray) -> np.ndarray:
    """Integer luma ``round(0.299 R + 0.587 G + 0.114 B)``, halves rounded up."""
    r = rgb[..., 0].astype(np.int32)
    g = rgb[..., 1].astype(np.int32)
    b = rgb[..., 2].astype(np.int32)
    return ((299 * r + 587 * g + 114 * b + 500) // 1000).astype(np.uint8)


# --- slide generation -------------------------------------------------------

MAX_ATTEMPTS = 16
TISSUE_FLOOR = 0.30


def _fragment_mask(size: int, rng: SplitMix) -> np.ndarray:
    """A few overlapping ellipses marking where cells may sit."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    mask = np.zeros((size, size), dtype=bool)
    n = 2 + rng.integers(3)
    for _ in range(n):
        cx, cy = rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)
        ax, ay = rng.uniform(0.2, 0.45), rng.uniform(0.2, 0.45)
        th = rng.uniform(0, np.pi)
        c, s = np.cos(th), np.sin(th)
        dx, dy = xx - cx, yy - cy
        u = (c * dx + s * dy) / ax
        v = (-s * dx + c * dy) / ay
        mask |= (u * u + v * v) <= 1.0
    return mask


def _render(spec: StainClassSpec, size: int, rng: SplitMix):
    frag = _fragment_mask(size, rng)
    frag_area = float(frag.sum())
    n_blobs = rng.poisson(spec.density * frag_area / 1e4)
    alpha = np.zeros((size, size), dtype=np.float32)
    colour = np.zeros((size, size, 3), dtype=np.float32)
    # per-slide stain strength and chromogen tint drift
    strength = rng.uniform(0.75, 1.0)
    tint = (rng.random(6).reshape(2, 3) - 0.5) * 40.0
    pair = np.asarray(spec.hue_pair, dtype=np.float32) + tint.astype(np.float32)
    mix = rng.uniform(0.3, 0.7)
    if n_blobs:
        fy, fx = np.nonzero(frag)
        pick = rng.integers(fy.size, n_blobs)
        jitter = rng.random(2 * n_blobs).reshape(n_blobs, 2)
        cy = fy[pick] + jitter[:, 0]
        cx = fx[pick] + jitter[:, 1]
        lo, hi = spec.radius_range
        radii = rng.uniform(lo, hi, n_blobs)
        which = rng.random(n_blobs) < mix
        opac = rng.uniform(0.55, 0.95, n_blobs) * strength
        for y, x, r, w, a in zip(cy, cx, radii, which, opac):
            y0, y1 = max(int(y - r), 0), min(int(y + r) + 2, size)
            x0, x1 = max(int(x - r), 0), min(int(x + r) + 2, size)
            if y0 >= y1 or x0 >= x1:
                continue
            gy = np.arange(y0, y1, dtype=np.float32)[:, None] - y
            gx = np.arange(x0, x1, dtype=np.float32)[None, :] - x
            inside = gy * gy + gx * gx <= r * r
            alpha[y0:y1, x0:x1][inside] = a
            colour[y0:y1, x0:x1][inside] = pair[0 if w else 1]
    tissue = alpha > 0
    # class-specific sinusoidal texture modulating stain opacity
    th = rng.uniform(0, np.pi)
    ph1, ph2 = rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi)
    k = 2 * np.pi * spec.texture_freq / size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    wave = np.sin(k * (np.cos(th) * xx + np.sin(th) * yy) + ph1) * np.sin(k * (-np.sin(th) * xx + np.cos(th) * yy) + ph2)
    a = alpha * (1.0 + 0.35 * wave)
    np.clip(a, 0.0, 1.0, out=a)
    bg = np.asarray(spec.background, dtype=np.float32)
    img = bg * (1.0 - a[..., None]) + colour * a[..., None]
    noise = (rng.random(size * size).reshape(size, size).astype(np.float32) - 0.5) * 6.0
    img += noise[..., None]
    raster = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return raster, float(tissue.mean())


def gen_slide(spec: StainClassSpec, seed: int, size: int = 1120, slide_id: str | None = None) -> SlideRecord:
    """Paint one slide; retry with the next sub-seed until 30% of it is tissue."""
    for attempt in range(MAX_ATTEMPTS):
        rng = SplitMix(seed, tag_of("slide", spec.class_id, attempt))
        raster, frac = _render(spec, size, rng)
        if frac >= TISSUE_FLOOR:
            sid = slide_id or f"c{spec.class_id}_s{seed & 0xFFFFFFFF:08x}"
            return SlideRecord(sid, spec.class_id, raster, seed, frac)
    raise CorpusError(
        f"class {spec.class_id}: tissue fraction stayed below {TISSUE_FLOOR} after {MAX_ATTEMPTS} attempts"
    )


# --- OTSU and tiling --------------------------------------------------------

def otsu_threshold(hist) -> int | None:
    """Threshold maximizing between-class variance, or None when there is no split.

    Class 0 is bins ``[0..t]`` and class 1 is ``[t+1..255]``. The comparison
    uses exact integer arithmetic: the between-class variance times
    ``N**2`` equals ``(n1*s0 - n0*s1)**2 / (n0*n1)``. Ties go to the smaller t.
    """
    h = [int(c) for c in hist]
    if len(h) != 256:
        raise ValueError(f"histogram needs 256 bins, got {len(h)}")
    total = sum(h)
    if total <= 0:
        raise ValueError("histogram is empty")
    if sum(1 for c in h if c) < 2:
        return None
    s_total = sum(i * c for i, c in enumerate(h))
    best_t, best_num, best_den = None, -1, 1
    n0 = s0 = 0
    for t in range(256):
        n0 += h[t]
        s0 += t * h[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            num, den = 0, 1
        else:
            diff = n1 * s0 - n0 * (s_total - s0)
            num, den = diff * diff, n0 * n1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def tile_slide(slide: SlideRecord, size: int = 224, keep_frac: float = 0.25) -> list[PatchImage]:
    raster = slide.raster
    h, w = raster.shape[:2]
    if size > min(h, w):
        raise ValueError(f"tile size {size} exceeds slide {h}x{w}")
    luma = luma_u8(raster)
    t = otsu_threshold(np.bincount(luma.reshape(-1), minlength=256))
    if t is None:
        return []
    fg = luma <= t
    out = []
    for gy in range(h // size):
        for gx in range(w // size):
            y, x = gy * size, gx * size
            frac = float(fg[y:y + size, x:x + size].mean())
            if frac >= keep_frac:
                out.append(PatchImage(
                    patch_id=f"{slide.slide_id}-{x:05d}-{y:05d}",
                    slide_id=slide.slide_id,
                    origin=(x, y),
                    pixels=raster[y:y + size, x:x + size].copy(),
                    foreground_fraction=frac,
                    class_id=slide.class_id,
                ))
    return out


def sample_patches(patches: list, cap: int, rng: SplitMix) -> list:
    """Uniform sample of ``min(cap, len)`` patches, kept in grid order."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if len(patches) <= cap:
        return list(patches)
    return [patches[i] for i in rng.choice(len(patches), cap)]


# --- PPM I/O ----------------------------------------------------------------

def encode_ppm(pixels: np.ndarray) -> bytes:
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 uint8, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise PPMFormatError("bad magic, expected P6", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PPMFormatError("expected a decimal header field", pos)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PPMFormatError("missing whitespace after maxval", pos)
    pos += 1
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise PPMFormatError(f"bad dimensions {w}x{h}", pos)
    if maxval != 255:
        raise PPMFormatError(f"unsupported maxval {maxval}", pos)
    need = w * h * 3
    if len(buf) - pos < need:
        raise PPMFormatError(f"truncated payload: need {need} bytes, have {len(buf) - pos}", len(buf))
    if len(buf) - pos > need:
        raise PPMFormatError("trailing bytes after payload", pos + need)
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


def write_patch(path, patch: PatchImage) -> None:
    Path(path).write_bytes(encode_ppm(patch.pixels))


def read_patch(path) -> PatchImage:
    """Read a patch; ids and origin are recovered from the corpus naming scheme."""
    path = Path(path)
    pixels = decode_ppm(path.read_bytes())
    stem = path.stem
    origin = (0, 0)
    parts = stem.rsplit("-", 2)
    if len(parts) == 3 and parts[1].isdigit() and parts[2].isdigit():
        origin = (int(parts[1]), int(parts[2]))
    return PatchImage(stem, path.parent.name, origin, pixels)


# --- corpus -----------------------------------------------------------------

@dataclass
class CorpusConfig:
    classes: int = 4
    slides_per_class: int = 50
    slide_size: int = 1120
    patch_size: int = 224
    cap: int = 25
    keep_frac: float = 0.25
    specs: list | None = field(default=None, repr=False)

    def stain_specs(self) -> list[StainClassSpec]:
        return list(self.specs) if self.specs is not None else default_stain_classes(self.classes)


@dataclass
class CorpusSummary:
    root: Path
    n_slides: int
    n_patches: int
    n_excluded: int

    def line(self) -> str:
        return (f"corpus {self.root}: {self.n_slides} slides, {self.n_patches} patches, "
                f"{self.n_excluded} slides excluded")


def _slide_job(spec: StainClassSpec, index: int, seed: int, cfg: CorpusConfig):
    slide_seed = SplitMix(seed, tag_of("corpus-slide", spec.class_id, index)).next_u64()
    sid = f"c{spec.class_id}_s{index:04d}"
    slide = gen_slide(spec, slide_seed, cfg.slide_size, slide_id=sid)
    tiles = tile_slide(slide, cfg.patch_size, cfg.keep_frac)
    picked = sample_patches(tiles, cfg.cap, SplitMix(seed, tag_of("corpus-sample", spec.class_id, index)))
    return sid, picked


def build_corpus(cfg: CorpusConfig, out_dir, seed: int = 0, workers: int = 1) -> CorpusSummary:
    """Generate slides, tile them and write ``<slide_id>/<patch_id>.ppm`` plus ``manifest.csv``."""
    specs = cfg.stain_specs()
    if len(specs) < 2:
        raise ValueError("at least two stain classes are required")
    root = Path(out_dir)
    jobs = [(spec, i) for spec in specs for i in range(cfg.slides_per_class)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_slide_job, [s for s, _ in jobs], [i for _, i in jobs],
                                  [seed] * len(jobs), [cfg] * len(jobs)))
    else:
        results = None
    rows = []
    excluded = 0
    n_slides = 0
    try:
        root.mkdir(parents=True, exist_ok=True)
        for k, (spec, i) in enumerate(jobs):
            sid, picked = results[k] if results is not None else _slide_job(spec, i, seed, cfg)
            if not picked:
                excluded += 1
                continue
            n_slides += 1
            sdir = root / sid
            sdir.mkdir(exist_ok=True)
            for p in picked:
                write_patch(sdir / f"{p.patch_id}.ppm", p)
                rows.append((p.patch_id, sid, spec.class_id, p.origin[0], p.origin[1]))
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        writer.writerows(rows)
        (root / "manifest.csv").write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"I/O failure while writing corpus; partial output left in {root}: {exc}") from exc
    summary = CorpusSummary(root, n_slides, len(rows), excluded)
    log.info(summary.line())
    return summary


@dataclass
class ManifestRow:
    patch_id: str
    slide_id: str
    class_id: int
    origin_x: int
    origin_y: int


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ManifestError(f"{path}: unexpected manifest header {reader.fieldnames}")
        return [ManifestRow(r["patch_id"], r["slide_id"], int(r["class_id"]),
                            int(r["origin_x"]), int(r["origin_y"])) for r in reader]


def load_patches(corpus_dir, rows: list[ManifestRow] | None = None) -> tuple[list[ManifestRow], np.ndarray]:
    """All manifest patches as one N x S x S x 3 uint8 array."""
    root = Path(corpus_dir)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise ManifestError(f"missing corpus manifest {manifest}")
    rows = read_manifest(manifest) if rows is None else rows
    if not rows:
        raise ManifestError(f"{manifest} lists no patches")
    first = decode_ppm((root / rows[0].slide_id / f"{rows[0].patch_id}.ppm").read_bytes())
    out = np.empty((len(rows),) + first.shape, dtype=np.uint8)
    out[0] = first
    for i, r in enumerate(rows[1:], start=1):
        out[i] = decode_ppm((root / r.slide_id / f"{r.patch_id}.ppm").read_bytes())
    return rows, out


def remove_corpus(path) -> None:
    if os.path.isdir(path):
        shutil.rmtree(path)
