"""Seeding, fingerprints and seed derivation shared by every stage."""

from __future__ import annotations

import hashlib
import json
import random

import numpy as np
import torch

MASK64 = (1 << 64) - 1


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (1 << 32))
    torch.manual_seed(seed)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(base: int, index: int) -> int:
    """Independent 63-bit seed for item ``index`` of a run seeded with ``base``."""
    return splitmix64(splitmix64(base & MASK64) ^ (index & MASK64)) >> 1


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
