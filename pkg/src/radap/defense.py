"""Defended inference: segment, binarise, Split-and-Fill, occlude, recognise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .augment import apply_occlusion
from .models import FaceNet, batched
from .segmenter import UNet


class StageError(RuntimeError):
    """A defense stage failed; the message names the stage."""


def saf(mask, n: int, threshold: float | None = None):
    """Split-and-Fill: quantise a square mask onto an n x n grid of cells.

    Cells have side ``g = H // n``; a cell becomes all ones when its sum
    strictly exceeds ``threshold`` (default ``g``) and all zeros otherwise.
    Rows and columns beyond ``n * g`` are zeroed. Works on numpy arrays
    shaped (H, W) and tensors shaped (..., H, W).
    """
    h, w = mask.shape[-2:]
    if h != w:
        raise ValueError(f"SAF needs a square mask, got {h}x{w}")
    if not 1 <= n <= h:
        raise ValueError(f"subgrid count must lie in [1, {h}], got {n}")
    g = h // n
    tau = g if threshold is None else threshold
    lead = mask.shape[:-2]
    core = mask[..., :n * g, :n * g].reshape(*lead, n, g, n, g)
    if isinstance(mask, torch.Tensor):
        cells = core.to(torch.float64).sum(dim=(-3, -1)) > tau
        out = torch.zeros_like(mask)
        filled = cells.repeat_interleave(g, -2).repeat_interleave(g, -1)
        out[..., :n * g, :n * g] = filled.to(mask.dtype)
        return out
    cells = core.astype(np.float64).sum(axis=(-3, -1)) > tau
    out = np.zeros_like(mask)
    out[..., :n * g, :n * g] = cells.repeat(g, -2).repeat(g, -1)
    return out


def saf_any_shape(mask, n: int, threshold: float | None = None):
    """SAF for rectangular masks: zero-pad to square, apply, crop back."""
    h, w = mask.shape[-2:]
    if h == w:
        return saf(mask, n, threshold)
    side = max(h, w)
    if isinstance(mask, torch.Tensor):
        padded = torch.zeros(*mask.shape[:-2], side, side, dtype=mask.dtype)
    else:
        padded = np.zeros((*mask.shape[:-2], side, side), dtype=mask.dtype)
    padded[..., :h, :w] = mask
    return saf(padded, n, threshold)[..., :h, :w]


@dataclass
class DefensePipeline:
    """Segmenter + optional SAF + occlusion in front of a recognition model.

    ``saf_n=None`` is the plain segmenter defense (Ours(-)); an integer
    enables Split-and-Fill with that many subgrids per side (Ours(+)).
    """

    segmenter: UNet
    fr_model: FaceNet
    saf_n: int | None = 8
    fill_value: float = 0.0
    saf_threshold: float | None = None

    def __post_init__(self):
        seg_size, fr_size = self.segmenter.image_size, self.fr_model.image_size
        if seg_size != fr_size:
            raise ValueError(f"segmenter input {seg_size} and FR input {fr_size} disagree")

    @torch.no_grad()
    def masks(self, images: torch.Tensor) -> torch.Tensor:
        """Final binary masks (N, H, W) as uint8."""
        try:
            prob = batched(self.segmenter.probability_map, images)
        except Exception as exc:
            raise StageError(f"segmenter stage failed: {exc}") from exc
        m = (prob > 0.5).to(torch.uint8)
        if self.saf_n is not None:
            m = saf_any_shape(m, self.saf_n, self.saf_threshold)
        return m

    @torch.no_grad()
    def defended_inputs(self, images: torch.Tensor) -> torch.Tensor:
        return apply_occlusion(images, self.masks(images)[:, None], self.fill_value)

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        x = self.defended_inputs(images)
        try:
            return batched(self.fr_model, x)
        except Exception as exc:
            raise StageError(f"recognition stage failed: {exc}") from exc

    def bpda_forward(self, images: torch.Tensor, temperature: float = 10.0) -> torch.Tensor:
        """Differentiable pass for adaptive attacks.

        The forward value equals the real pipeline (hard threshold, SAF);
        gradients flow through ``sigmoid(temperature * (p - 0.5))`` in place of
        the threshold and straight through SAF.
        """
        prob = self.segmenter.probability_map(images)
        soft = sigmoid_surrogate(prob, temperature)
        hard = (prob > 0.5).to(prob.dtype).detach()
        if self.saf_n is not None:
            hard = saf_any_shape(hard, self.saf_n, self.saf_threshold)
        m = (hard + soft - soft.detach())[:, None]
        x = images * (1 - m) + self.fill_value * m
        return self.fr_model(x)


def sigmoid_surrogate(prob: torch.Tensor, temperature: float = 10.0) -> torch.Tensor:
    """Smooth stand-in for ``prob > 0.5``; its slope at 0.5 is ``temperature / 4``."""
    return torch.sigmoid(temperature * (prob - 0.5))


def defend_and_recognize(image: torch.Tensor, pipeline: DefensePipeline) -> torch.Tensor:
    """Run one (3, H, W) image or an (N, 3, H, W) batch through the pipeline."""
    single = image.dim() == 3
    out = pipeline(image[None] if single else image)
    return out[0] if single else out


@torch.no_grad()
def defend_with_ground_truth(image: torch.Tensor, true_mask, fr_model: FaceNet, fill: float = 0.0):
    """Occlude with the known patch mask, then recognise.

    ``true_mask`` is (H, W) for a single image or (N, H, W) for a batch.
    """
    single = image.dim() == 3
    x = image[None] if single else image
    m = torch.as_tensor(np.asarray(true_mask))
    if m.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"mask {tuple(m.shape)} does not match image {tuple(x.shape)}")
    m = m.reshape(-1, 1, *m.shape[-2:])
    out = batched(fr_model, apply_occlusion(x, m, fill))
    return out[0] if single else out
