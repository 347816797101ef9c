"""Synthetic nodule images with two known factors of variation.

A rendered 100x100 slice (7 cm at 0.7 mm spacing) shows a disk whose
diameter encodes the size factor ``x`` and whose texture spread encodes the
heterogeneity factor ``z``:

    diameter   d     = 8 + 32 * Phi(x)          (pixels, in (8, 40))
    fg spread  s_fg  = 0.05 + 0.45 * Phi(z)
    background         N(-0.5, 0.1**2)
    foreground         N(+0.5, s_fg**2)

The disk indicator is softened by a 3x3 box blur applied twice and used to
blend mean and spread between background and foreground.  The disk centre is
jittered uniformly within +-5 px of the canvas centre.

``measure_image`` inverts both mappings from pixels alone, giving the noisy
views (x', z') that drive nearest-neighbour matching of subjects to images.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion, uniform_filter
from scipy.special import ndtr, ndtri

from . import streams

log = logging.getLogger(__name__)

SIZE = 100
CROP = 51
MIN_DIAMETER = 8.0
DIAMETER_RANGE = 32.0
MIN_SPREAD = 0.05
SPREAD_RANGE = 0.45
BG_MEAN, BG_SD, FG_MEAN = -0.5, 0.1, 0.5
JITTER = 5.0
CLAMP_EPS = 1e-4

_ROWS, _COLS = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)


class MatchingError(LookupError):
    pass


@dataclass
class SynthImage:
    pixels: np.ndarray
    gen_x: float
    gen_z: float
    meas_x: float = float("nan")
    meas_z: float = float("nan")
    id: int = 0


def diameter(x: float) -> float:
    return MIN_DIAMETER + DIAMETER_RANGE * float(ndtr(x))


def spread(z: float) -> float:
    return MIN_SPREAD + SPREAD_RANGE * float(ndtr(z))


def box_blur2(a: np.ndarray) -> np.ndarray:
    """3x3 box blur applied twice, zero outside the canvas."""
    a = uniform_filter(np.asarray(a, dtype=np.float64), 3, mode="constant")
    return uniform_filter(a, 3, mode="constant")


def render_nodule(x: float, z: float, rng_seed: int, *, index: int = 0,
                  jitter: bool = True, blur: bool = True, image_id: int = 0) -> SynthImage:
    if not (np.isfinite(x) and np.isfinite(z)):
        raise ValueError("render_nodule: x and z must be finite")
    bg = streams.philox(rng_seed, streams.RENDER, index)
    shift = (streams.uniforms(bg, 2) * 2.0 - 1.0) * JITTER if jitter else np.zeros(2)
    noise = streams.normals(bg, SIZE * SIZE).reshape(SIZE, SIZE)
    cy, cx = (SIZE - 1) / 2.0 + shift
    r = diameter(x) / 2.0
    disk = ((_ROWS - cy) ** 2 + (_COLS - cx) ** 2 <= r * r).astype(np.float64)
    soft = box_blur2(disk) if blur else disk
    s_fg = spread(z)
    pixels = BG_MEAN + (FG_MEAN - BG_MEAN) * soft + noise * (BG_SD + (s_fg - BG_SD) * soft)
    img = SynthImage(pixels.astype(np.float32), float(x), float(z), id=image_id)
    img.meas_x, img.meas_z = measure_image(img)
    return img


def _inverse(v: float, lo: float, span: float) -> float:
    return float(ndtri(np.clip((v - lo) / span, CLAMP_EPS, 1.0 - CLAMP_EPS)))


def measure_image(img: SynthImage | np.ndarray) -> tuple[float, float]:
    """Re-measure (x', z') from pixels.

    Foreground is where the twice-blurred image is positive.  Size comes from
    the equivalent-circle diameter of that mask; heterogeneity from the pixel
    standard deviation inside the mask eroded by one pixel, which keeps the
    blended rim out of the texture estimate.
    """
    pixels = img.pixels if isinstance(img, SynthImage) else np.asarray(img)
    mask = box_blur2(pixels) > 0
    area = int(mask.sum())
    if area == 0:
        log.warning("measure_image: empty foreground mask (degenerate image)")
        return _inverse(MIN_DIAMETER - 1, MIN_DIAMETER, DIAMETER_RANGE), _inverse(0.0, MIN_SPREAD, SPREAD_RANGE)
    deq = np.sqrt(4.0 * area / np.pi)
    core = binary_erosion(mask)
    if core.sum() < 2:
        core = mask
    sd = float(np.std(pixels[core].astype(np.float64))) if core.sum() > 1 else 0.0
    return _inverse(deq, MIN_DIAMETER, DIAMETER_RANGE), _inverse(sd, MIN_SPREAD, SPREAD_RANGE)


@dataclass
class ImagePool:
    """Immutable set of rendered images plus global normalization stats."""

    pixels: np.ndarray  # (m, 100, 100) float32, raw intensities
    gen_x: np.ndarray
    gen_z: np.ndarray
    meas_x: np.ndarray
    meas_z: np.ndarray
    norm_mean: float
    norm_sd: float
    seed: int
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.gen_x))
        if len(self.gen_x) < 1:
            raise ValueError("pool must hold at least one image")
        if not self.norm_sd > 0:
            raise ValueError("norm_sd must be > 0")
        self.pixels.setflags(write=False)

    def __len__(self) -> int:
        return int(self.gen_x.size)

    def image(self, i: int) -> SynthImage:
        return SynthImage(self.pixels[i], float(self.gen_x[i]), float(self.gen_z[i]),
                          float(self.meas_x[i]), float(self.meas_z[i]), int(self.ids[i]))

    def normalize(self, a: np.ndarray) -> np.ndarray:
        return ((a - self.norm_mean) / self.norm_sd).astype(np.float32)

    def denormalize(self, a: np.ndarray) -> np.ndarray:
        return (a * self.norm_sd + self.norm_mean).astype(np.float32)

    def normalized(self) -> np.ndarray:
        return self.normalize(self.pixels)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.pixels, self.gen_x, self.gen_z, self.meas_x, self.meas_z):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def save(self, directory, stem: str = "pool") -> tuple[Path, Path]:
        """Raw little-endian float32 pixels plus a JSON sidecar."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        raw = d / f"{stem}.f32"
        side = d / f"{stem}.json"
        self.pixels.astype("<f4").tofile(raw)
        meta = {
            "width": SIZE, "height": SIZE, "count": len(self), "dtype": "float32-le",
            "ids": [int(i) for i in self.ids],
            "gen_x": [float(v) for v in self.gen_x], "gen_z": [float(v) for v in self.gen_z],
            "meas_x": [float(v) for v in self.meas_x], "meas_z": [float(v) for v in self.meas_z],
            "norm_mean": self.norm_mean, "norm_sd": self.norm_sd, "seed": self.seed,
        }
        side.write_text(json.dumps(meta) + "\n")
        return raw, side

    @classmethod
    def load(cls, directory, stem: str = "pool") -> "ImagePool":
        d = Path(directory)
        meta = json.loads((d / f"{stem}.json").read_text())
        pixels = np.fromfile(d / f"{stem}.f32", dtype="<f4").astype(np.float32)
        pixels = pixels.reshape(meta["count"], meta["height"], meta["width"])
        return cls(pixels, np.array(meta["gen_x"]), np.array(meta["gen_z"]),
                   np.array(meta["meas_x"]), np.array(meta["meas_z"]),
                   meta["norm_mean"], meta["norm_sd"], meta["seed"], np.array(meta["ids"]))


def build_pool(m: int, seed: int) -> ImagePool:
    if m < 1:
        raise ValueError(f"pool size must be >= 1, got {m}")
    factors = streams.normals(streams.philox(seed, streams.POOL_FACTORS), 2 * m).reshape(m, 2)
    pixels = np.empty((m, SIZE, SIZE), dtype=np.float32)
    meas = np.empty((m, 2))
    for i in range(m):
        img = render_nodule(factors[i, 0], factors[i, 1], seed, index=i, image_id=i)
        pixels[i] = img.pixels
        meas[i] = img.meas_x, img.meas_z
    flat = pixels.astype(np.float64)
    mean = float(flat.mean())
    sd = float(flat.std())
    return ImagePool(pixels, factors[:, 0].copy(), factors[:, 1].copy(),
                     meas[:, 0].copy(), meas[:, 1].copy(), mean, sd, seed)


def match_images(pool: ImagePool, x, z, exclude=None, chunk: int = 512) -> np.ndarray:
    """Vectorized nearest neighbour in (meas_x, meas_z); ties go to the lowest id."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    order = np.argsort(pool.ids, kind="stable")
    mx, mz, ids = pool.meas_x[order], pool.meas_z[order], pool.ids[order]
    if exclude:
        keep = ~np.isin(ids, np.fromiter(exclude, dtype=np.int64))
        mx, mz, ids = mx[keep], mz[keep], ids[keep]
    if ids.size == 0:
        raise MatchingError("every pool image is excluded")
    out = np.empty(x.size, dtype=np.int64)
    for lo in range(0, x.size, chunk):
        d = (x[lo:lo + chunk, None] - mx[None]) ** 2 + (z[lo:lo + chunk, None] - mz[None]) ** 2
        out[lo:lo + chunk] = ids[np.argmin(d, axis=1)]
    return out


def match_image(pool: ImagePool, x: float, z: float, exclude=None) -> int:
    return int(match_images(pool, [x], [z], exclude)[0])


@dataclass(frozen=True)
class CropSpec:
    size: int = CROP
    mode: str = "random"  # "random" | "center"
    mirror_h: bool = True
    mirror_v: bool = True

    def __post_init__(self):
        if not 1 <= self.size <= SIZE:
            raise ValueError(f"crop size must be in [1, {SIZE}], got {self.size}")
        if self.mode not in ("random", "center"):
            raise ValueError(f"unknown crop mode {self.mode!r}")

    @property
    def center_offset(self) -> int:
        return (SIZE - self.size) // 2


def draw_augment(u: np.ndarray, spec: CropSpec) -> np.ndarray:
    """Map uniforms (k, 4) to integer (row, col, flip_h, flip_v) per crop."""
    u = np.atleast_2d(u)
    span = SIZE - spec.size + 1
    if spec.mode == "center":
        out = np.zeros((u.shape[0], 4), dtype=np.int64)
        out[:, :2] = spec.center_offset
        return out
    off = np.minimum((u[:, :2] * span).astype(np.int64), span - 1)
    flip_h = (u[:, 2] < 0.5) & spec.mirror_h
    flip_v = (u[:, 3] < 0.5) & spec.mirror_v
    return np.column_stack([off, flip_h, flip_v]).astype(np.int64)


def apply_augment(batch: np.ndarray, params: np.ndarray, size: int) -> np.ndarray:
    """Crop and mirror each (100, 100) slice of ``batch`` per row of ``params``."""
    out = np.empty((batch.shape[0], size, size), dtype=batch.dtype)
    for k, (r, c, fh, fv) in enumerate(params):
        a = batch[k, r:r + size, c:c + size]
        if fh:
            a = a[:, ::-1]
        if fv:
            a = a[::-1, :]
        out[k] = a
    return out


def crop_and_augment(img: SynthImage | np.ndarray, spec: CropSpec, rng_seed: int) -> np.ndarray:
    pixels = img.pixels if isinstance(img, SynthImage) else np.asarray(img)
    u = streams.uniforms(streams.philox(rng_seed, streams.CROP), 4)
    params = draw_augment(u[None], spec)
    return apply_augment(pixels[None], params, spec.size)[0]


def to_pgm(pixels: np.ndarray, path) -> None:
    """8-bit binary PGM, min-max scaled."""
    a = np.asarray(pixels, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
