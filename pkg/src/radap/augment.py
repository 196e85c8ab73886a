"""Occlusion augmentations: Cutout (rectangles) and FCutout (F-masks)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .fmask import FMaskConfig, sample_fmask, sample_rmask

KINDS = ("none", "cutout", "fcutout")


@dataclass
class AugmentPolicy:
    kind: str = "none"
    decay_power: float = 3.0
    area_range: tuple[float, float] = (0.0, 1.0)
    rect_count: int | None = None
    rect_size_range: tuple[int, int] | None = None
    fill_value: float = 0.0
    apply_probability: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}; choose from {KINDS}")
        if not 0 <= self.apply_probability <= 1:
            raise ValueError(f"apply_probability must lie in [0, 1], got {self.apply_probability}")
        if not 0 <= self.fill_value <= 1:
            raise ValueError(f"fill_value must lie in [0, 1], got {self.fill_value}")
        self.area_range = tuple(self.area_range)

    def sample_mask(self, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "fcutout":
            config = FMaskConfig(height, width, self.decay_power, self.area_range)
            return sample_fmask(config, rng)
        if self.kind == "cutout":
            return sample_rmask(height, width, self.rect_count, self.rect_size_range, rng)
        return np.zeros((height, width), dtype=np.uint8)


def apply_occlusion(image, mask, fill: float = 0.0):
    """Replace masked pixels with ``fill``: ``image * (1 - M) + fill * M``.

    ``image`` is either an (H, W, 3) numpy array or a torch tensor laid out
    (..., C, H, W); ``mask`` is (H, W) or broadcastable to the torch layout.
    Unmasked pixels are returned bit-identical.
    """
    if isinstance(image, torch.Tensor):
        m = torch.as_tensor(mask, dtype=torch.bool, device=image.device)
        if m.shape[-2:] != image.shape[-2:]:
            raise ValueError(f"mask {tuple(m.shape)} does not match image {tuple(image.shape)}")
        return torch.where(m, torch.full_like(image, fill), image)
    image = np.asarray(image)
    mask = np.asarray(mask)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape}")
    m = mask.astype(bool)
    if image.ndim == 3:
        m = m[..., None]
    return np.where(m, np.asarray(fill, dtype=image.dtype), image)


def augment_batch(batch: torch.Tensor, policy: AugmentPolicy, rng) -> torch.Tensor:
    """Occlude each image of an (N, C, H, W) batch with its own fresh mask."""
    if policy.kind == "none" or policy.apply_probability == 0:
        return batch
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n, _, h, w = batch.shape
    masks = np.zeros((n, 1, h, w), dtype=bool)
    for i in range(n):
        if rng.random() < policy.apply_probability:
            masks[i, 0] = policy.sample_mask(h, w, rng).astype(bool)
    return apply_occlusion(batch, torch.from_numpy(masks), policy.fill_value)
