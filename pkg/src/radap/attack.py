"""Masked-PGD adversarial patches, F-patch data generation and BPDA attacks."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledImages, save_image
from .fmask import FMaskConfig, sample_fmask, write_mask
from .models import CLOSED_SET, OPEN_SET, FaceNet
from .utils import derive_seed

log = logging.getLogger(__name__)

EVASION = "evasion"
IMPERSONATION = "impersonation"


class SurrogateRequiredError(RuntimeError):
    """The defense is not differentiable and no surrogate was requested."""


@dataclass
class AttackSpec:
    """One batched patch attack.

    ``source`` is (N, 3, H, W); ``mask`` is (H, W) shared by the batch or
    (N, H, W). ``steps`` may be an int or a length-N sequence of per-sample
    iteration counts. Closed-set attacks need ``source_labels`` (evasion) or
    ``target_labels`` (impersonation); open-set impersonation needs
    ``target`` images.

    ``random_start`` begins from a uniform draw in the eps-ball on the mask
    (seeded by ``seed``). ``None`` turns it on only for open-set evasion,
    whose objective is stationary at the source image.
    """

    source: torch.Tensor
    mask: object
    system: str = CLOSED_SET
    goal: str = EVASION
    alpha: float = 0.007
    steps: object = 100
    eps: float = 0.3
    source_labels: torch.Tensor | None = None
    target_labels: torch.Tensor | None = None
    target: torch.Tensor | None = None
    adaptive: bool = False
    temperature: float = 10.0
    flip_open_set_sign: bool = False
    random_start: bool | None = None
    seed: int = 0

    def __post_init__(self):
        if self.system not in (CLOSED_SET, OPEN_SET):
            raise ValueError(f"unknown system {self.system!r}")
        if self.goal not in (EVASION, IMPERSONATION):
            raise ValueError(f"unknown goal {self.goal!r}")
        if not (self.alpha > 0 and self.eps > 0 and self.alpha <= self.eps):
            raise ValueError(f"need 0 < alpha <= eps, got alpha={self.alpha}, eps={self.eps}")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.source.dim() == 3:
            self.source = self.source[None]
        mask = torch.as_tensor(np.asarray(self.mask)).bool()
        if mask.shape[-2:] != self.source.shape[-2:]:
            raise ValueError(f"mask {tuple(mask.shape)} does not match images {tuple(self.source.shape)}")
        self.mask = mask.reshape(-1, 1, *mask.shape[-2:])
        steps = torch.as_tensor(self.steps).reshape(-1)
        if (steps < 0).any():
            raise ValueError("steps must be >= 0")
        self.steps = steps
        if self.random_start is None:
            self.random_start = self.system == OPEN_SET and self.goal == EVASION
        if self.system == CLOSED_SET:
            labels = self.source_labels if self.goal == EVASION else self.target_labels
            if labels is None:
                raise ValueError(f"closed-set {self.goal} needs {'source' if self.goal == EVASION else 'target'}_labels")
        elif self.goal == IMPERSONATION and self.target is None:
            raise ValueError("open-set impersonation needs target images")


def attack_objective(spec: AttackSpec, output: torch.Tensor, anchor: torch.Tensor | None) -> torch.Tensor:
    """Per-sample objective that the attack ascends.

    ``anchor`` holds reference embeddings for open-set goals. Impersonation
    ascends the negated objective of its argmin formulation; open-set goals
    treat cosine similarity as a similarity (evasion lowers it, impersonation
    raises it) unless ``flip_open_set_sign`` flips both.
    """
    if spec.system == CLOSED_SET:
        if spec.goal == EVASION:
            return F.cross_entropy(output, spec.source_labels, reduction="none")
        return -F.cross_entropy(output, spec.target_labels, reduction="none")
    sim = F.cosine_similarity(output, anchor, dim=1)
    sign = -1.0 if spec.goal == EVASION else 1.0
    if spec.flip_open_set_sign:
        sign = -sign
    return sign * sim


def pgd_patch_attack(spec: AttackSpec, target_model: FaceNet, defense=None) -> torch.Tensor:
    """Sign-gradient ascent confined to the mask and an L-inf ball.

    Each step adds ``mask * alpha * sign(grad)`` and projects onto
    ``[x_s - eps, x_s + eps] & [0, 1]``. Pixels outside the mask stay
    bit-identical to the source. With ``spec.adaptive`` the gradient is taken
    through ``defense.bpda_forward``.
    """
    if defense is not None and not spec.adaptive:
        raise SurrogateRequiredError(
            "the defended pipeline thresholds its masks and has no gradient; "
            "set adaptive=True to use the sigmoid surrogate")
    if spec.adaptive and defense is None:
        raise ValueError("adaptive attacks need a defense pipeline")
    x_s = spec.source
    mask = spec.mask
    x = x_s.clone()
    steps = spec.steps
    max_steps = int(steps.max()) if len(steps) else 0
    if max_steps == 0:
        return x

    def forward(inp):
        if spec.adaptive:
            return defense.bpda_forward(inp, spec.temperature)
        return target_model(inp)

    anchor = None
    if spec.system == OPEN_SET:
        ref = x_s if spec.goal == EVASION else spec.target
        with torch.no_grad():
            anchor = target_model(ref).detach()

    lo, hi = (x_s - spec.eps).clamp(0, 1), (x_s + spec.eps).clamp(0, 1)
    if spec.random_start:
        gen = torch.Generator().manual_seed(spec.seed)
        noise = (torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1) * spec.eps
        moving = mask & (steps > 0).reshape(-1, 1, 1, 1) if len(steps) > 1 else mask
        x = torch.where(moving, torch.minimum(torch.maximum(x + noise, lo), hi), x_s)
    for t in range(max_steps):
        x.requires_grad_(True)
        objective = attack_objective(spec, forward(x), anchor).sum()
        grad, = torch.autograd.grad(objective, x)
        with torch.no_grad():
            active = (steps > t).reshape(-1, 1, 1, 1) if len(steps) > 1 else True
            update = torch.where(mask & active, spec.alpha * grad.sign(), torch.zeros_like(grad))
            x = torch.minimum(torch.maximum(x + update, lo), hi)
            x = torch.where(mask, x, x_s)
    return x.detach()


def bpda_adaptive_attack(spec: AttackSpec, defense) -> torch.Tensor:
    """Adaptive patch attack through the whole defended pipeline."""
    if not spec.adaptive:
        raise ValueError("bpda_adaptive_attack needs spec.adaptive=True")
    return pgd_patch_attack(spec, defense.fr_model, defense)


@dataclass
class FPatchSample:
    image: torch.Tensor
    mask: np.ndarray
    meta: dict = field(default_factory=dict)


def generate_fpatch_dataset(clean: LabeledImages, fr_model: FaceNet, fmask_config: FMaskConfig | None = None,
                            count: int = 500, seed: int = 0, alpha: float = 0.007, eps: float = 0.3,
                            max_steps: int = 200, batch_size: int = 250,
                            clean_fraction: float = 0.0) -> list[FPatchSample]:
    """Closed-set evasion patches on random F-masks for segmenter training.

    Sample ``i`` draws its source image, F-mask, area fraction and step
    count ``T ~ U{1..max_steps}`` from a generator seeded with
    ``derive_seed(seed, i)``, so samples do not depend on batching. Samples
    are attacked in batches of similar ``T`` and returned in index order.
    With probability ``clean_fraction`` a sample is left clean instead
    (empty mask, ``T = 0``), which teaches the segmenter to flag nothing.
    """
    if fr_model.mode != CLOSED_SET:
        raise ValueError("F-patch generation needs a closed-set model")
    if count == 0:
        return []
    if len(clean) == 0:
        raise ValueError("no clean images to attack")
    if not 0.0 <= clean_fraction <= 1.0:
        raise ValueError(f"clean_fraction must lie in [0, 1], got {clean_fraction}")
    h, w = clean.images.shape[-2:]
    cfg = fmask_config or FMaskConfig(h, w, 3.0, (0.02, 0.3))
    if (cfg.height, cfg.width) != (h, w):
        raise ValueError(f"F-mask size {cfg.height}x{cfg.width} differs from images {h}x{w}")

    plan = []
    for i in range(count):
        s = derive_seed(seed, i)
        rng = np.random.default_rng(s)
        src = int(rng.integers(len(clean)))
        mask, frac = sample_fmask(cfg, rng, return_fraction=True)
        steps = int(rng.integers(1, max_steps + 1))
        # drawn last so that clean_fraction=0 leaves every other draw unchanged
        if clean_fraction > 0 and rng.random() < clean_fraction:
            mask, frac, steps = np.zeros_like(mask), 0.0, 0
        plan.append((src, mask, {"seed": s, "source_index": src, "steps": steps, "area_fraction": frac,
                                 "label": int(clean.labels[src])}))

    # batches of similar T waste fewer steps on samples that have already stopped
    order = sorted(range(count), key=lambda i: plan[i][2]["steps"])
    samples: list[FPatchSample | None] = [None] * count
    for start in range(0, count, batch_size):
        chunk = order[start:start + batch_size]
        idx = torch.tensor([plan[i][0] for i in chunk])
        spec = AttackSpec(source=clean.images[idx], mask=np.stack([plan[i][1] for i in chunk]),
                          alpha=alpha, eps=eps, steps=[plan[i][2]["steps"] for i in chunk],
                          source_labels=clean.labels[idx])
        attacked = pgd_patch_attack(spec, fr_model)
        for img, i in zip(attacked, chunk):
            samples[i] = FPatchSample(img, plan[i][1], plan[i][2])
        log.info("generated %d/%d F-patch samples", min(start + batch_size, count), count)
    return samples


def save_fpatch_dataset(samples: list[FPatchSample], root, extra: dict | None = None) -> None:
    """Write PNG previews, exact float tensors and a JSONL manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.jsonl", "w") as fh:
        for i, s in enumerate(samples):
            save_image(s.image, root / "images" / f"{i:05d}.png")
            write_mask(root / "masks" / f"{i:05d}.png", s.mask)
            fh.write(json.dumps({"index": i, **s.meta}) + "\n")
    np.savez_compressed(root / "fpatch.npz",
                        images=np.stack([s.image.numpy() for s in samples]) if samples else np.zeros((0,)),
                        masks=np.stack([s.mask for s in samples]) if samples else np.zeros((0,)))
    if extra:
        (root / "info.json").write_text(json.dumps(extra, indent=2, default=str))


def load_fpatch_dataset(root) -> list[FPatchSample]:
    root = Path(root)
    arrays = np.load(root / "fpatch.npz")
    metas = [json.loads(line) for line in (root / "manifest.jsonl").read_text().splitlines() if line]
    return [FPatchSample(torch.from_numpy(img), m.astype(np.uint8), meta)
            for img, m, meta in zip(arrays["images"], arrays["masks"], metas)]
