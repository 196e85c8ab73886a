"""Patch segmenter: U-Net probability maps trained with edge-weighted BCE."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .models import DataError, make_optimizer, TrainConfig
from .utils import fingerprint, seed_everything

log = logging.getLogger(__name__)

SOBEL_X = torch.tensor([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]])
SOBEL_Y = torch.tensor([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])
PROB_CLAMP = 1e-12


def sobel_gradient_magnitude(mask) -> torch.Tensor | np.ndarray:
    """Sobel gradient magnitude of a mask, zero padded to the input size.

    Accepts an (H, W) numpy array (returns float64 numpy) or a tensor shaped
    (H, W) or (N, H, W) (returns a tensor of the same shape).
    """
    as_numpy = isinstance(mask, np.ndarray)
    m = torch.as_tensor(np.asarray(mask, dtype=np.float64)) if as_numpy else mask
    shape = m.shape
    x = m.reshape(-1, 1, *shape[-2:])
    kernels = torch.stack([SOBEL_X, SOBEL_Y])[:, None].to(x)
    g = F.conv2d(x, kernels, padding=1)
    sq = (g[:, 0] ** 2 + g[:, 1] ** 2).reshape(shape)
    # numpy's sqrt is correctly rounded; torch's vectorised one may differ by an ulp
    return np.sqrt(sq.numpy()) if as_numpy else torch.sqrt(sq)


def edge_weights(truth: torch.Tensor, beta: float) -> torch.Tensor:
    return torch.exp(beta * sobel_gradient_magnitude(truth.detach()))


def ebce_loss(pred: torch.Tensor, truth: torch.Tensor, beta: float = 1.0,
              edge_map: torch.Tensor | None = None) -> torch.Tensor:
    """Edge-aware BCE on probabilities, averaged over pixels (and batch).

    ``pred`` is clamped to [1e-12, 1 - 1e-12] (or the nearest representable
    values in its dtype). Edge weights ``exp(beta * grad)`` use the Sobel
    magnitude of the ground truth unless a precomputed ``edge_map`` is given.
    """
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and truth {tuple(truth.shape)} differ")
    truth = truth.to(pred.dtype)
    eps = max(PROB_CLAMP, torch.finfo(pred.dtype).eps)
    p = pred.clamp(eps, 1 - eps)
    bce = truth * torch.log(p) + (1 - truth) * torch.log1p(-p)
    weights = edge_weights(truth, beta) if edge_map is None else torch.exp(beta * edge_map.to(pred.dtype))
    return -(weights * bce).mean()


def ebce_with_logits(logits: torch.Tensor, truth: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Same loss as :func:`ebce_loss` computed from logits, without clamping."""
    truth = truth.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, truth, reduction="none")
    return (edge_weights(truth, beta) * bce).mean()


def _conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Three-level encoder-decoder with skip connections, one logit per pixel."""

    def __init__(self, width: int = 16, image_size: int = 32):
        super().__init__()
        self.width = width
        self.image_size = image_size
        w = width
        self.enc1, self.enc2, self.enc3 = _conv(3, w), _conv(w, 2 * w), _conv(2 * w, 4 * w)
        self.bottom = _conv(4 * w, 8 * w)
        self.up3, self.dec3 = nn.ConvTranspose2d(8 * w, 4 * w, 2, stride=2), _conv(8 * w, 4 * w)
        self.up2, self.dec2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2), _conv(4 * w, 2 * w)
        self.up1, self.dec1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2), _conv(2 * w, w)
        self.out = nn.Conv2d(w, 1, 1)

    def forward(self, x):
        """Logits shaped (N, H, W)."""
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        b = self.bottom(F.max_pool2d(e3, 2))
        d3 = self.dec3(torch.cat([self.up3(b), e3], 1))
        d2 = self.dec2(torch.cat([self.up2(d3), e2], 1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], 1))
        return self.out(d1)[:, 0]

    def probability_map(self, x):
        return torch.sigmoid(self(x))

    def config(self) -> dict:
        return {"width": self.width, "image_size": self.image_size}


@dataclass
class SegmenterConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    beta: float = 1.0
    loss: str = "ebce"
    flip: bool = True
    width: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if self.loss not in ("ebce", "bce"):
            raise ValueError(f"loss must be 'ebce' or 'bce', got {self.loss!r}")


def _as_tensors(dataset):
    if isinstance(dataset, tuple):
        images, masks = dataset
    else:
        images = torch.stack([s.image for s in dataset]) if len(dataset) else torch.empty(0)
        masks = torch.stack([torch.as_tensor(s.mask) for s in dataset]) if len(dataset) else torch.empty(0)
    return images, torch.as_tensor(masks).float()


def train_segmenter(dataset, config: SegmenterConfig = SegmenterConfig(), val=None):
    """Fit a :class:`UNet` to (attacked image, patch mask) pairs.

    ``dataset`` is a list of F-patch samples or an ``(images, masks)`` tuple.
    Returns ``(segmenter, history)`` with per-epoch loss (and validation IoU
    when ``val`` is given).
    """
    images, masks = _as_tensors(dataset)
    if len(images) == 0:
        raise DataError("segmenter training set is empty")
    seed_everything(config.seed)
    rng = np.random.default_rng(config.seed)
    model = UNet(config.width, images.shape[-1])
    steps = math.ceil(len(images) / config.batch_size)
    opt_config = TrainConfig(epochs=config.epochs, lr=config.lr, momentum=config.momentum,
                             weight_decay=config.weight_decay, nesterov=config.nesterov)
    opt, sched = make_optimizer(model.parameters(), opt_config, steps)
    beta = config.beta if config.loss == "ebce" else 0.0
    history = []
    for epoch in range(config.epochs):
        model.train()
        order = torch.from_numpy(rng.permutation(len(images)))
        total = 0.0
        for i in range(0, len(images), config.batch_size):
            idx = order[i:i + config.batch_size]
            x, m = images[idx], masks[idx]
            if config.flip:
                flips = torch.from_numpy(rng.random(len(idx)) < 0.5)
                x = torch.where(flips[:, None, None, None], x.flip(-1), x)
                m = torch.where(flips[:, None, None], m.flip(-1), m)
            loss = ebce_with_logits(model(x), m, beta)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        record = {"epoch": epoch, "loss": total / len(images)}
        if val is not None:
            record["val_iou"] = mask_iou(predict_masks(model, _as_tensors(val)[0]), _as_tensors(val)[1])
        log.info("segmenter epoch %d %s", epoch, record)
        history.append(record)
    model.eval()
    return model, history


@torch.no_grad()
def predict_masks(segmenter: UNet, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Binarised probability maps ``p > 0.5`` for an (N, 3, H, W) batch."""
    segmenter.eval()
    out = [segmenter.probability_map(images[i:i + batch_size]) > 0.5
           for i in range(0, len(images), batch_size)]
    return torch.cat(out).to(torch.uint8)


def binarize(prob) -> np.ndarray:
    return (np.asarray(prob) > 0.5).astype(np.uint8)


def predict_mask(segmenter: UNet, image: torch.Tensor) -> np.ndarray:
    """Binary (H, W) mask for a single (3, H, W) image."""
    return predict_masks(segmenter, image[None])[0].numpy()


def mask_iou(pred, truth) -> float:
    """Pixel IoU pooled over the whole batch."""
    pred = torch.as_tensor(pred).bool()
    truth = torch.as_tensor(truth).bool()
    union = (pred | truth).sum().item()
    return 1.0 if union == 0 else (pred & truth).sum().item() / union


def save_segmenter(model: UNet, path, config: SegmenterConfig | None = None, **extra) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    cfg = asdict(config) if config else {}
    meta = {"kind": "segmenter", "model": model.config(), "train_config": cfg,
            "fingerprint": fingerprint(cfg), **extra}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, default=str))


def load_segmenter(path) -> UNet:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    model = UNet(**meta["model"])
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model
