"""Training samples: synthetic textured-shape images and pair synthesis by
random geometric/photometric transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import TrainConfig


@dataclass
class TrainingSample:
    image: np.ndarray  # (1, 3, H, W) in [0, 1]
    mask: np.ndarray  # (1, 1, H, W) in {0, 1}
    provenance: str = "synthetic"

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[:2] != (1, 3):
            raise ValueError(f"image must be (1, 3, H, W), got {self.image.shape}")
        if self.mask.shape != (1, 1) + self.image.shape[2:]:
            raise ValueError(f"mask shape {self.mask.shape} does not match image {self.image.shape}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask values must be 0 or 1")


def _polygon_mask(h: int, w: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    # even-odd rule at pixel centres
    py, px = np.mgrid[0:h, 0:w]
    px = px + 0.0
    py = py + 0.0
    inside = np.zeros((h, w), dtype=bool)
    n = len(xs)
    for i in range(n):
        x0, y0 = xs[i], ys[i]
        x1, y1 = xs[(i + 1) % n], ys[(i + 1) % n]
        crosses = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < x_at)
    return inside


def _unit_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=(0, sigma, sigma), mode="wrap")
    noise -= noise.mean(axis=(1, 2), keepdims=True)
    return noise / (noise.std(axis=(1, 2), keepdims=True) + 1e-12)


def generate_synthetic_sample(
    rng: np.random.Generator, size: int = 160, min_area: float = 0.02, max_area: float = 0.40
) -> TrainingSample:
    """Smooth-noise background with one filled ellipse or polygon of contrasting texture."""
    h = w = size
    bg_color = rng.uniform(0.15, 0.85, 3)
    while True:
        fg_color = rng.uniform(0.05, 0.95, 3)
        if np.abs(fg_color - bg_color).max() >= 0.4:
            break
    background = bg_color[:, None, None] + 0.10 * _unit_noise(rng, (3, h, w), size / 12)
    foreground = fg_color[:, None, None] + 0.10 * _unit_noise(rng, (3, h, w), 1.0)

    for _ in range(100):
        area = rng.uniform(min_area, max_area) * h * w
        cx = w / 2 + rng.uniform(-0.12, 0.12) * w
        cy = h / 2 + rng.uniform(-0.12, 0.12) * h
        if rng.random() < 0.5:
            aspect = rng.uniform(0.5, 1.0)
            a = math.sqrt(area / (math.pi * aspect))
            b = a * aspect
            theta = rng.uniform(0, math.pi)
            py, px = np.mgrid[0:h, 0:w]
            u = (px - cx) * math.cos(theta) + (py - cy) * math.sin(theta)
            v = -(px - cx) * math.sin(theta) + (py - cy) * math.cos(theta)
            mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        else:
            n = int(rng.integers(5, 10))
            angles = np.sort(rng.uniform(0, 2 * math.pi, n))
            radii = rng.uniform(0.6, 1.0, n)
            # polygon area for unit radius scaling: 0.5 * sum r_i r_{i+1} sin(dtheta)
            dtheta = np.diff(np.append(angles, angles[0] + 2 * math.pi))
            unit_area = 0.5 * np.sum(radii * np.roll(radii, -1) * np.sin(dtheta))
            if unit_area <= 0:
                continue
            r = math.sqrt(area / unit_area)
            mask = _polygon_mask(h, w, cx + r * radii * np.cos(angles), cy + r * radii * np.sin(angles))
        frac = mask.mean()
        if min_area <= frac <= max_area:
            break
    else:
        raise RuntimeError("could not place a shape within the area bounds")

    image = np.where(mask[None], foreground, background)
    image = np.clip(image, 0.0, 1.0)
    return TrainingSample(image[None].astype(np.float32), mask[None, None].astype(np.float32))


@dataclass(frozen=True)
class ViewTransform:
    """Random view of a sample: geometry about the crop centre, then photometrics."""

    crop: int
    flip: bool = False
    scale: float = 1.0
    angle_deg: float = 0.0
    tx: float = 0.0  # pixels
    ty: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0

    @classmethod
    def draw(cls, rng: np.random.Generator, cfg: TrainConfig) -> "ViewTransform":
        # always consume the same number of draws so seeds stay aligned
        u = rng.random(7)
        lerp = lambda lo, hi, t: lo + (hi - lo) * t  # noqa: E731
        shift = cfg.translate_frac * cfg.crop_size
        return cls(
            crop=cfg.crop_size,
            flip=bool(u[0] < cfg.flip_prob),
            scale=float(lerp(cfg.scale_min, cfg.scale_max, u[1])),
            angle_deg=float(lerp(-cfg.rotation_deg, cfg.rotation_deg, u[2])),
            tx=float(lerp(-shift, shift, u[3])),
            ty=float(lerp(-shift, shift, u[4])),
            brightness=float(lerp(-cfg.brightness_delta, cfg.brightness_delta, u[5])),
            contrast=float(lerp(cfg.contrast_min, cfg.contrast_max, u[6])),
        )

    def source_coords(self, in_h: int, in_w: int) -> tuple[np.ndarray, np.ndarray]:
        """Source (row, col) sampled by every output pixel."""
        c_out = (self.crop - 1) / 2
        c_in_y = (in_h - self.crop) // 2 + c_out
        c_in_x = (in_w - self.crop) // 2 + c_out
        r, c = np.mgrid[0 : self.crop, 0 : self.crop].astype(np.float64)
        qx = c - c_out - self.tx
        qy = r - c_out - self.ty
        t = math.radians(self.angle_deg)
        cos, sin = math.cos(t), math.sin(t)
        # undo rotation, then scale, then flip
        sx = (cos * qx + sin * qy) / self.scale
        sy = (-sin * qx + cos * qy) / self.scale
        if self.flip:
            sx = -sx
        return sy + c_in_y, sx + c_in_x

    def apply_geometry(self, image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h, w = image.shape[2:]
        if h < self.crop or w < self.crop:
            raise ValueError(f"crop {self.crop} does not fit a {h}x{w} sample")
        sy, sx = self.source_coords(h, w)
        coords = np.stack([sy, sx])
        out = np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="nearest") for ch in image[0]])
        # nearest neighbour, outside the sample counts as background
        iy = np.floor(sy + 0.5).astype(int)
        ix = np.floor(sx + 0.5).astype(int)
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        m = np.zeros((self.crop, self.crop), dtype=mask.dtype)
        m[valid] = mask[0, 0][iy[valid], ix[valid]]
        return out[None].astype(image.dtype), m[None, None]

    def apply_photometric(self, image: np.ndarray) -> np.ndarray:
        # written so that contrast 1, brightness 0 is an exact identity
        mean = image.mean()
        out = image * self.contrast + (1.0 - self.contrast) * mean + self.brightness
        return np.clip(out, 0.0, 1.0).astype(image.dtype)

    def apply(self, image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        img, m = self.apply_geometry(image, mask)
        return self.apply_photometric(img), m


@dataclass
class View:
    image: np.ndarray
    mask: np.ndarray
    transform: ViewTransform


class EmptyMaskError(RuntimeError):
    pass


def _draw_view(sample: TrainingSample, rng: np.random.Generator, cfg: TrainConfig) -> View:
    for _ in range(cfg.max_mask_retries):
        t = ViewTransform.draw(rng, cfg)
        image, mask = t.apply(sample.image, sample.mask)
        if mask.any():
            return View(image, mask, t)
    raise EmptyMaskError(f"transformed mask stayed empty after {cfg.max_mask_retries} attempts")


def synthesize_pair(sample: TrainingSample, rng: np.random.Generator, cfg: TrainConfig) -> tuple[View, View]:
    """Two independently transformed views of one image, simulating a frame pair."""
    return _draw_view(sample, rng, cfg), _draw_view(sample, rng, cfg)


def synthetic_sequence(
    rng: np.random.Generator, n_frames: int = 3, n_objects: int = 1, size: tuple[int, int] = (128, 128), step: float = 4.0
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """A short clip of textured ellipses drifting over a static textured background.

    Returns (H, W, 3) frames in [0, 1] and (H, W) uint8 label maps; later
    objects occlude earlier ones.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    h, w = size
    bg = rng.uniform(0.2, 0.8, 3)[:, None, None] + 0.10 * _unit_noise(rng, (3, h, w), min(h, w) / 12)
    objects = []
    for m in range(n_objects):
        colour = rng.uniform(0.05, 0.95, 3)
        while np.abs(colour - bg.mean(axis=(1, 2))).max() < 0.4:
            colour = rng.uniform(0.05, 0.95, 3)
        objects.append(
            dict(
                tex=colour[:, None, None] + 0.08 * _unit_noise(rng, (3, h, w), 1.0),
                cx=w * (m + 1) / (n_objects + 1),
                cy=h * rng.uniform(0.35, 0.65),
                a=rng.uniform(0.10, 0.18) * w,
                b=rng.uniform(0.10, 0.18) * h,
                vel=rng.uniform(-step, step, 2),
            )
        )
    py, px = np.mgrid[0:h, 0:w]
    frames, labels = [], []
    for t in range(n_frames):
        image = bg.copy()
        lab = np.zeros((h, w), dtype=np.uint8)
        for m, ob in enumerate(objects, start=1):
            cx = ob["cx"] + t * ob["vel"][0]
            cy = ob["cy"] + t * ob["vel"][1]
            inside = ((px - cx) / ob["a"]) ** 2 + ((py - cy) / ob["b"]) ** 2 <= 1.0
            image = np.where(inside[None], ob["tex"], image)
            lab[inside] = m
        frames.append(np.clip(image, 0.0, 1.0).transpose(1, 2, 0).astype(np.float32))
        labels.append(lab)
    return frames, labels
