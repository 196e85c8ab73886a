"""Toy face data: procedurally drawn identities, image-folder IO and pair lists.

Each synthetic identity is a combination of discrete facial attributes
(skin tone, hair, eyes, brows, nose, mouth, face shape, marks). Pairs of
identities differ in several attributes, so no single facial region decides
the identity on its own. Background, pose jitter, lighting and sensor noise
vary per image.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

SKIN = np.array([[0.96, 0.80, 0.69], [0.80, 0.60, 0.45], [0.55, 0.38, 0.26]])
HAIR = np.array([[0.10, 0.08, 0.06], [0.55, 0.35, 0.15], [0.90, 0.78, 0.45], [0.60, 0.60, 0.62]])
IRIS = np.array([[0.25, 0.15, 0.08], [0.20, 0.45, 0.85], [0.20, 0.60, 0.30]])
LIPS = np.array([[0.75, 0.35, 0.35], [0.55, 0.25, 0.25], [0.85, 0.15, 0.25]])

# attribute name -> number of discrete values
ATTRIBUTES = {
    "skin": 3, "hair_color": 4, "hair_style": 3, "eye_color": 3, "eye_spacing": 2,
    "brow": 2, "nose": 2, "mouth": 3, "face_shape": 2, "mark": 3, "beard": 2,
}


@dataclass
class LabeledImages:
    """Images as an (N, 3, H, W) float tensor in [0, 1] with integer labels."""

    images: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, idx):
        return LabeledImages(self.images[idx], self.labels[idx])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def sample_identities(count: int, rng: np.random.Generator, min_distance: int = 4) -> list[dict]:
    """Draw attribute vectors pairwise differing in at least ``min_distance`` attributes."""
    names = list(ATTRIBUTES)
    chosen: list[np.ndarray] = []
    for _ in range(200_000):
        if len(chosen) == count:
            break
        cand = np.array([rng.integers(ATTRIBUTES[n]) for n in names])
        if all((cand != c).sum() >= min_distance for c in chosen):
            chosen.append(cand)
    if len(chosen) < count:
        raise ValueError(f"could not draw {count} identities at distance {min_distance}")
    return [dict(zip(names, map(int, c))) for c in chosen]


def _ellipse(u, v, cx, cy, rx, ry, soft=0.06):
    d = np.sqrt(((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2)
    return np.clip((1 - d) / soft + 0.5, 0, 1)


def _paint(img, alpha, color):
    img *= 1 - alpha[..., None]
    img += alpha[..., None] * color


def render_face(attrs: dict, size: int, rng: np.random.Generator, jitter: float = 0.03) -> np.ndarray:
    """Draw one (size, size, 3) face for ``attrs`` with random nuisances.

    ``jitter`` is the standard deviation of per-image colour perturbations of
    skin and hair.
    """
    shift = rng.uniform(-0.08, 0.08, size=2)
    scale = rng.uniform(0.95, 1.05)
    coords = (np.arange(size) + 0.5) / size * 2 - 1
    v, u = np.meshgrid(coords, coords, indexing="ij")
    u = (u - shift[0]) / scale
    v = (v - shift[1]) / scale

    top, bottom = rng.uniform(0.1, 0.9, size=(2, 3))
    ramp = (v[..., None] + 1) / 2
    img = (1 - ramp) * top + ramp * bottom

    skin = np.clip(SKIN[attrs["skin"]] + rng.normal(0, jitter, 3), 0, 1)
    hair = np.clip(HAIR[attrs["hair_color"]] + rng.normal(0, jitter, 3), 0, 1)
    face_rx = (0.62, 0.74)[attrs["face_shape"]]

    if attrs["hair_style"] == 1:  # long hair behind the face
        _paint(img, _ellipse(u, v, 0, 0.05, face_rx + 0.2, 0.95) * (v > -0.7), hair)
    _paint(img, _ellipse(u, v, 0, 0.08, face_rx, 0.82), skin)
    cap = _ellipse(u, v, 0, -0.35, face_rx + 0.06, 0.55) * (v < -0.42)
    if attrs["hair_style"] == 2:  # bangs
        cap = np.maximum(cap, _ellipse(u, v, 0, -0.45, face_rx, 0.3) * (v < -0.2))
    _paint(img, cap, hair)

    dx = (0.28, 0.36)[attrs["eye_spacing"]]
    eye_y = -0.16 + rng.normal(0, 0.01)
    iris = IRIS[attrs["eye_color"]]
    brow_h = (0.035, 0.07)[attrs["brow"]]
    for side in (-1, 1):
        _paint(img, _ellipse(u, v, side * dx, eye_y, 0.14, 0.08), np.array([0.95, 0.95, 0.95]))
        _paint(img, _ellipse(u, v, side * dx, eye_y, 0.07, 0.07), iris)
        _paint(img, _ellipse(u, v, side * dx, eye_y - 0.17, 0.16, brow_h), hair * 0.8)

    nose_len, nose_w = ((0.14, 0.05), (0.22, 0.09))[attrs["nose"]]
    _paint(img, 0.6 * _ellipse(u, v, 0, 0.12, nose_w, nose_len), skin * 0.7)

    mouth_w = (0.18, 0.3, 0.24)[attrs["mouth"]]
    mouth_y = 0.47 + rng.normal(0, 0.01)
    mouth_h = (0.045, 0.045, 0.08)[attrs["mouth"]]
    _paint(img, _ellipse(u, v, 0, mouth_y, mouth_w * rng.uniform(0.9, 1.1), mouth_h), LIPS[attrs["mouth"]])

    if attrs["beard"]:
        beard = _ellipse(u, v, 0, 0.72, face_rx * 0.75, 0.2) * (1 - _ellipse(u, v, 0, mouth_y, mouth_w + 0.05, 0.1))
        _paint(img, 0.85 * beard, hair)
    if attrs["mark"]:
        side = (-1, 1)[attrs["mark"] - 1]
        _paint(img, _ellipse(u, v, side * 0.38, 0.25, 0.08, 0.08), np.array([0.25, 0.12, 0.08]))

    img = img * rng.uniform(0.8, 1.2) + rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def synthetic_faces(num_identities: int = 10, per_identity: int = 100, size: int = 32,
                    seed: int = 0, identity_seed: int | None = None,
                    min_distance: int = 3, jitter: float = 0.03) -> LabeledImages:
    """Generate a class-balanced set of toy faces.

    ``identity_seed`` fixes which identities exist (defaults to ``seed``);
    ``seed`` drives the per-image nuisances, so train and test splits share
    identities by using the same ``identity_seed`` and different ``seed``.
    """
    if num_identities < 1 or per_identity < 1:
        raise ValueError("need at least one identity and one image per identity")
    id_rng = np.random.default_rng(seed if identity_seed is None else identity_seed)
    identities = sample_identities(num_identities, id_rng, min_distance)
    rng = np.random.default_rng([seed, 7919])
    images = np.empty((num_identities * per_identity, 3, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(num_identities), per_identity)
    for i, label in enumerate(labels):
        images[i] = render_face(identities[label], size, rng, jitter).transpose(2, 0, 1)
    return LabeledImages(torch.from_numpy(images), torch.from_numpy(labels))


def load_image_folder(root, size: int | None = None) -> LabeledImages:
    """Read a directory-per-class layout; classes are indexed in sorted order."""
    root = Path(root)
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"{root}: no class directories found")
    images, labels = [], []
    for label, cls in enumerate(classes):
        for path in sorted(cls.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            with Image.open(path) as img:
                img = img.convert("RGB")
                if size is not None and img.size != (size, size):
                    img = img.resize((size, size), Image.BILINEAR)
                images.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255)
            labels.append(label)
    if not images:
        raise ValueError(f"{root}: no images found")
    return LabeledImages(torch.from_numpy(np.stack(images)), torch.tensor(labels))


def save_image_folder(data: LabeledImages, root) -> None:
    root = Path(root)
    for i, (img, label) in enumerate(zip(data.images, data.labels.tolist())):
        out = root / f"{label:04d}"
        out.mkdir(parents=True, exist_ok=True)
        save_image(img, out / f"{i:06d}.png")


def save_image(image: torch.Tensor, path) -> None:
    arr = (image.clamp(0, 1).numpy().transpose(1, 2, 0) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def make_pairs(labels, num_genuine: int, num_impostor: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Sample index pairs of equal (genuine) and differing (impostor) labels.

    Pairs are drawn without replacement from all available combinations.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    labels = np.asarray(labels)
    all_pairs = np.array(list(itertools.combinations(range(len(labels)), 2)))
    same = labels[all_pairs[:, 0]] == labels[all_pairs[:, 1]]
    genuine, impostor = all_pairs[same], all_pairs[~same]
    if len(genuine) < num_genuine or len(impostor) < num_impostor:
        raise ValueError(f"requested {num_genuine}/{num_impostor} pairs but only "
                         f"{len(genuine)}/{len(impostor)} exist")
    return (genuine[rng.choice(len(genuine), num_genuine, replace=False)],
            impostor[rng.choice(len(impostor), num_impostor, replace=False)])
