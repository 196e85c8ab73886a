"""Toy face-recognition models, their losses and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import AugmentPolicy, augment_batch
from .data import LabeledImages
from .utils import fingerprint, seed_everything

log = logging.getLogger(__name__)

CLOSED_SET = "closed_set"
OPEN_SET = "open_set"
LOG_CLAMP = 1e-12


class DataError(ValueError):
    """Empty or inconsistent datasets and pair lists."""


def cross_entropy(p, y) -> float:
    """``-sum(y_i * log p_i)`` with probabilities clamped at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(-(y * np.log(np.clip(p, LOG_CLAMP, 1.0))).sum())


def cosine_similarity(v1, v2) -> float:
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 == 0 or n2 == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(v1 @ v2 / (n1 * n2), -1.0, 1.0))


def _block(cin, cout, pool):
    layers = [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class FaceNet(nn.Module):
    """Four conv blocks, global pooling and a 64-d embedding.

    In ``closed_set`` mode ``forward`` returns class logits; in ``open_set``
    mode it returns the L2-normalised embedding (the classification head is
    only used as a training signal).
    """

    def __init__(self, mode: str = CLOSED_SET, num_classes: int = 10,
                 embedding_dim: int = 64, width: int = 16, image_size: int = 32):
        super().__init__()
        if mode not in (CLOSED_SET, OPEN_SET):
            raise ValueError(f"unknown model mode {mode!r}")
        self.mode = mode
        self.num_classes = num_classes
        self.embedding_dim = embedding_dim
        self.image_size = image_size
        self.width = width
        w = width
        self.trunk = nn.Sequential(_block(3, w, True), _block(w, 2 * w, True),
                                   _block(2 * w, 4 * w, True), _block(4 * w, 4 * w, False),
                                   nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.embed = nn.Linear(4 * w, embedding_dim)
        self.head = nn.Linear(embedding_dim, num_classes)

    def features(self, x):
        return self.embed(self.trunk(x))

    def logits(self, x):
        return self.head(F.relu(self.features(x)))

    def forward(self, x):
        if self.mode == CLOSED_SET:
            return self.logits(x)
        return F.normalize(self.features(x), dim=1)

    @torch.no_grad()
    def predict_proba(self, x):
        return F.softmax(self.logits(x), dim=1)

    def config(self) -> dict:
        return {"mode": self.mode, "num_classes": self.num_classes, "embedding_dim": self.embedding_dim,
                "width": self.width, "image_size": self.image_size}


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy(**self.augment)
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def make_optimizer(params, config: TrainConfig, steps_per_epoch: int):
    """SGD with Nesterov momentum and a per-step cosine-annealed learning rate."""
    opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay, nesterov=config.nesterov)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs * steps_per_epoch)
    return opt, sched


@torch.no_grad()
def batched(fn, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    return torch.cat([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def train_model(train: LabeledImages, config: TrainConfig, mode: str = CLOSED_SET,
                val: LabeledImages | None = None, **model_kwargs):
    """Train a :class:`FaceNet` with softmax cross-entropy.

    Returns ``(model, history)``; ``history`` holds one dict per epoch with
    the mean training loss, training accuracy and, when ``val`` is given, the
    validation accuracy.
    """
    if len(train) == 0:
        raise DataError("training set is empty")
    seed_everything(config.seed)
    rng = np.random.default_rng(config.seed)
    model = FaceNet(mode, num_classes=train.num_classes, image_size=train.images.shape[-1], **model_kwargs)
    steps = math.ceil(len(train) / config.batch_size)
    opt, sched = make_optimizer(model.parameters(), config, steps)
    history = []
    for epoch in range(config.epochs):
        model.train()
        order = torch.from_numpy(rng.permutation(len(train)))
        total, correct, seen = 0.0, 0, 0
        for i in range(0, len(train), config.batch_size):
            idx = order[i:i + config.batch_size]
            x, y = train.images[idx], train.labels[idx]
            if config.flip:
                flips = torch.from_numpy(rng.random(len(idx)) < 0.5)
                x = torch.where(flips[:, None, None, None], x.flip(-1), x)
            x = augment_batch(x, config.augment, rng)
            out = model.logits(x)
            loss = F.cross_entropy(out, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
            correct += (out.argmax(1) == y).sum().item()
            seen += len(idx)
        record = {"epoch": epoch, "loss": total / seen, "train_acc": 100.0 * correct / seen}
        if val is not None and len(val):
            model.eval()
            pred = batched(model.logits, val.images).argmax(1)
            record["val_acc"] = 100.0 * (pred == val.labels).float().mean().item()
        log.info("epoch %d %s", epoch, record)
        history.append(record)
    model.eval()
    return model, history


def calibrate_threshold(impostor_scores, far: float = 1e-3) -> float:
    """Smallest threshold whose false-acceptance rate is at most ``far``.

    A pair is accepted when its similarity is strictly greater than the
    threshold, so at most ``floor(far * n)`` impostor scores may exceed it.
    """
    scores = np.sort(np.asarray(impostor_scores, dtype=np.float64))[::-1]
    n = len(scores)
    if not 0 < far <= 1:
        raise ValueError(f"far must lie in (0, 1], got {far}")
    if n == 0 or n * far < 1 - 1e-9:
        raise DataError(f"need at least {math.ceil(1 / far)} impostor pairs for FAR={far}, got {n}")
    allowed = int(math.floor(far * n + 1e-9))
    if allowed >= n:
        return float(np.nextafter(scores[-1], -np.inf))
    return float(scores[allowed])


def true_accept_rate(genuine_scores, threshold: float) -> float:
    genuine_scores = np.asarray(genuine_scores)
    if len(genuine_scores) == 0:
        raise DataError("no genuine pairs")
    return float((genuine_scores > threshold).mean())


def pair_scores(embeddings: torch.Tensor, pairs) -> np.ndarray:
    e = F.normalize(embeddings.double(), dim=1)
    pairs = torch.as_tensor(np.asarray(pairs))
    return (e[pairs[:, 0]] * e[pairs[:, 1]]).sum(1).numpy()


def save_checkpoint(model: nn.Module, path, train_config: dict | None = None, kind: str = "fr", **extra) -> None:
    """Write weights to ``path`` and a JSON sidecar ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    meta = {"kind": kind, "model": model.config(), "train_config": train_config or {},
            "fingerprint": fingerprint(train_config or {}), **extra}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, default=str))


def read_sidecar(path) -> dict:
    path = Path(path)
    return json.loads(path.with_suffix(path.suffix + ".json").read_text())


def load_model(path) -> FaceNet:
    meta = read_sidecar(path)
    model = FaceNet(**meta["model"])
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
