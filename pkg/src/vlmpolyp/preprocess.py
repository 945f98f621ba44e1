"""Resizing to the 300x300 working size and seeded augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

STANDARD_SIZE = (300, 300)


def load_image(path: str | Path) -> np.ndarray:
    """Load a PNG/JPEG as an ``HxWx3`` uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).copy()


def save_image(image: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)
    return path


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim not in (2, 3) or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError(f"image must be non-empty HxW or HxWxC, got shape {image.shape}")
    return image


def resize_standard(image: np.ndarray, size: tuple[int, int] = STANDARD_SIZE) -> np.ndarray:
    """Bilinear resize to ``size`` (width, height); already-sized images are copied through."""
    image = _check_image(image)
    w, h = size
    if image.shape[1] == w and image.shape[0] == h:
        return image.copy()
    if image.dtype != np.uint8:
        raise TypeError("resize_standard expects uint8 images")
    return np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))


def normalize_minmax(image: np.ndarray) -> np.ndarray:
    """Scale to [0, 1] float32. Only used for numeric tensor export."""
    x = np.asarray(image, dtype=np.float32)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


@dataclass(frozen=True)
class AugmentationSpec:
    hflip: bool = False
    vflip: bool = False
    brightness_delta: float = 0.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    contrast_gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not -0.5 <= self.brightness_delta <= 0.5:
            raise ValueError(f"brightness_delta must be in [-0.5, 0.5], got {self.brightness_delta}")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.5 <= self.contrast_gain <= 2.0:
            raise ValueError(f"contrast_gain must be in [0.5, 2.0], got {self.contrast_gain}")

    @property
    def is_neutral(self) -> bool:
        return (not self.hflip and not self.vflip and self.brightness_delta == 0
                and self.contrast_gain == 1 and self.blur_sigma == 0 and self.noise_sigma == 0)


def apply_augmentation(image: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    """Apply ``hflip -> vflip -> brightness -> contrast -> blur -> noise``.

    Intensities are handled on a [0, 1] scale: ``brightness_delta`` is added,
    contrast scales around mid-grey, ``noise_sigma`` is a standard deviation on
    that scale. Neutral steps are skipped, so a neutral spec returns the input
    unchanged. The result is clipped and cast back to uint8.
    """
    image = _check_image(image)
    if image.shape[:2] != STANDARD_SIZE[::-1]:
        raise ValueError(f"apply_augmentation expects a {STANDARD_SIZE[0]}x{STANDARD_SIZE[1]} image; run resize_standard first")
    out = image.copy()
    if spec.hflip:
        out = out[:, ::-1].copy()
    if spec.vflip:
        out = out[::-1, :].copy()
    if spec.brightness_delta == 0 and spec.contrast_gain == 1 and spec.blur_sigma == 0 and spec.noise_sigma == 0:
        return out

    x = out.astype(np.float64) / 255.0
    if spec.brightness_delta != 0:
        x = x + spec.brightness_delta
    if spec.contrast_gain != 1:
        x = (x - 0.5) * spec.contrast_gain + 0.5
    if spec.blur_sigma > 0:
        sigma = (spec.blur_sigma, spec.blur_sigma) + (0,) * (x.ndim - 2)
        x = gaussian_filter(x, sigma=sigma, mode="reflect")
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        x = x + rng.normal(0.0, spec.noise_sigma, size=x.shape)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
