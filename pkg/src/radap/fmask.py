"""Binary mask generation: Fourier-sampled F-masks, random rectangles and
predefined stencils (glasses, sticker, respirator).

Masks are ``uint8`` arrays of shape (H, W) holding 0 (background) and 1
(patch / occlusion).
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

PREDEFINED = ("glasses", "sticker", "respirator")


class MaskError(ValueError):
    """Invalid mask parameters, unknown stencil or malformed mask file."""


@dataclass(frozen=True)
class FMaskConfig:
    height: int = 32
    width: int = 32
    decay_power: float = 3.0
    area_range: tuple[float, float] = (0.02, 0.3)
    seed: int = 0

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise MaskError(f"mask size must be positive, got {self.height}x{self.width}")
        if not self.decay_power > 0:
            raise MaskError(f"decay_power must be > 0, got {self.decay_power}")
        a, b = self.area_range
        if not 0 <= a < b <= 1:
            raise MaskError(f"area_range must satisfy 0 <= a < b <= 1, got ({a}, {b})")
        object.__setattr__(self, "area_range", (float(a), float(b)))


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_spectrum(config: FMaskConfig, rng=None) -> np.ndarray:
    """Complex H x W field with i.i.d. standard normal real and imaginary parts."""
    rng = _as_rng(config.seed if rng is None else rng)
    shape = (config.height, config.width)
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def radial_frequencies(height: int, width: int, clamp: bool = True) -> np.ndarray:
    """Radial magnitude of the DFT sample frequencies.

    With ``clamp`` the grid is floored at ``1 / max(height, width)`` so the
    zero-frequency bin is finite under division.
    """
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    freq = np.sqrt(fy**2 + fx**2)
    if clamp:
        freq = np.maximum(freq, 1.0 / max(height, width))
    return freq


def low_pass_filter(spectrum: np.ndarray, decay_power: float) -> np.ndarray:
    if decay_power < 0:
        raise MaskError(f"decay_power must be non-negative, got {decay_power}")
    freq = radial_frequencies(*spectrum.shape)
    return spectrum / freq**decay_power


def spectrum_to_gray(spectrum: np.ndarray) -> np.ndarray:
    """Real part of the inverse DFT, min-max normalised to [0, 1].

    A constant field has no scale to normalise by and maps to all zeros.
    """
    field = np.fft.ifft2(spectrum).real
    lo, hi = field.min(), field.max()
    span = hi - lo
    if span <= 1e-12 * max(1.0, np.abs(field).max()):
        return np.zeros_like(field)
    return (field - lo) / span


def area_count(fraction: float, size: int) -> int:
    """Round-half-up of ``fraction * size``."""
    return int(np.floor(fraction * size + 0.5))


def threshold_mask(gray: np.ndarray, fraction: float) -> np.ndarray:
    """Mark entries strictly above the k-th largest value, k = round(fraction * H * W).

    For fields with distinct values this yields exactly k - 1 ones.
    """
    if not 0 <= fraction <= 1:
        raise MaskError(f"area fraction must lie in [0, 1], got {fraction}")
    k = area_count(fraction, gray.size)
    if k == 0:
        return np.zeros(gray.shape, dtype=np.uint8)
    flat = np.sort(gray, axis=None)[::-1]
    return (gray > flat[k - 1]).astype(np.uint8)


def sample_fmask(config: FMaskConfig, rng=None, return_fraction: bool = False):
    rng = _as_rng(config.seed if rng is None else rng)
    spectrum = sample_spectrum(config, rng)
    gray = spectrum_to_gray(low_pass_filter(spectrum, config.decay_power))
    fraction = float(rng.uniform(*config.area_range))
    mask = threshold_mask(gray, fraction)
    if return_fraction:
        return mask, fraction
    return mask


def draw_rectangles(height: int, width: int, rects) -> np.ndarray:
    """Union of ``(top, left, h, w)`` rectangles as a binary mask."""
    mask = np.zeros((height, width), dtype=np.uint8)
    for top, left, h, w in rects:
        if top < 0 or left < 0 or top + h > height or left + w > width:
            raise MaskError(f"rectangle {(top, left, h, w)} outside {height}x{width}")
        mask[top:top + h, left:left + w] = 1
    return mask


def default_rect_size_range(height: int, width: int) -> tuple[int, int]:
    side = min(height, width)
    return max(1, int(round(0.1 * side))), max(1, int(round(0.4 * side)))


def sample_rmask(height, width, rect_count=None, rect_size_range=None, rng=None) -> np.ndarray:
    """Union of randomly placed axis-aligned rectangles.

    ``rect_count`` defaults to a uniform draw from {1, 2, 3}; side lengths are
    drawn uniformly (in pixels, inclusive) from ``rect_size_range``, which
    defaults to 10%-40% of the shorter image side.
    """
    rng = _as_rng(rng)
    if height <= 0 or width <= 0:
        raise MaskError(f"mask size must be positive, got {height}x{width}")
    if rect_count is None:
        rect_count = int(rng.integers(1, 4))
    if rect_count < 0:
        raise MaskError(f"rect_count must be >= 0, got {rect_count}")
    lo, hi = rect_size_range or default_rect_size_range(height, width)
    if lo < 1 or lo > hi or hi > min(height, width):
        raise MaskError(f"rectangle sides {lo}..{hi} cannot be placed in {height}x{width}")
    rects = []
    for _ in range(rect_count):
        h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        rects.append((top, left, h, w))
    return draw_rectangles(height, width, rects)


def _stencil_path(name: str) -> Path:
    return Path(str(resources.files("radap") / "stencils" / f"{name}.png"))


def load_predefined_mask(name: str, height: int = 32, width: int = 32) -> np.ndarray:
    if name not in PREDEFINED:
        raise MaskError(f"unknown predefined mask {name!r}; choose from {', '.join(PREDEFINED)}")
    stencil = read_mask(_stencil_path(name))
    img = Image.fromarray(stencil * 255).resize((width, height), Image.NEAREST)
    return (np.asarray(img) > 127).astype(np.uint8)


def make_mask(kind: str, height: int, width: int, rng=None, **kwargs) -> np.ndarray:
    """Dispatch on mask kind: ``fmask``, ``rmask`` or a predefined stencil name."""
    if kind == "fmask":
        config = FMaskConfig(height=height, width=width,
                             decay_power=kwargs.get("decay_power", 3.0),
                             area_range=tuple(kwargs.get("area_range", (0.02, 0.3))))
        return sample_fmask(config, _as_rng(rng))
    if kind == "rmask":
        return sample_rmask(height, width, kwargs.get("rect_count"),
                            kwargs.get("rect_size_range"), rng)
    return load_predefined_mask(kind, height, width)


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2 or not np.isin(mask, (0, 1)).all():
        raise MaskError("mask must be a 2-D array over {0, 1}")
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    """Load a single-channel 0/255 mask image, rejecting anything else."""
    with Image.open(path) as img:
        if img.mode not in ("L", "1"):
            raise MaskError(f"{path}: expected a single-channel image, got mode {img.mode}")
        values = np.asarray(img.convert("L"))
    if not np.isin(values, (0, 255)).all():
        raise MaskError(f"{path}: mask pixels must be exactly 0 or 255")
    return (values == 255).astype(np.uint8)
