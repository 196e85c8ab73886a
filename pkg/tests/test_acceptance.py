"""Acceptance suite: one test per numbered criterion, each at its stated tolerance.

Every oracle here is written independently of the library code it checks
(double loops, argsort, closed forms, finite differences). Trend criteria
share one set of trained models built by session fixtures; their budgets are
stated next to each fixture.
"""

import itertools
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy.stats import wilcoxon

from radap.attack import AttackSpec, generate_fpatch_dataset, pgd_patch_attack
from radap.augment import AugmentPolicy
from radap.data import synthetic_faces
from radap.defense import DefensePipeline, defend_with_ground_truth, saf
from radap.evalkit import tar_at_far
from radap.fmask import (FMaskConfig, load_predefined_mask, low_pass_filter, sample_fmask, sample_spectrum,
                         spectrum_to_gray, threshold_mask)
from radap.models import TrainConfig, batched, train_model
from radap.segmenter import SegmenterConfig, ebce_loss, sobel_gradient_magnitude, train_segmenter


# --------------------------------------------------------------------------- independent oracles

def sobel_loops(mask):
    kx = [[1, 0, -1], [2, 0, -2], [1, 0, -1]]
    ky = [[1, 2, 1], [0, 0, 0], [-1, -2, -1]]
    h, w = mask.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            gx = gy = 0.0
            for a in range(3):
                for b in range(3):
                    r, c = i + a - 1, j + b - 1
                    if 0 <= r < h and 0 <= c < w:
                        gx += kx[a][b] * float(mask[r, c])
                        gy += ky[a][b] * float(mask[r, c])
            out[i, j] = math.sqrt(gx * gx + gy * gy)
    return out


def saf_loops(mask, n):
    """Split-and-Fill by explicit loops: row bound g_h, column bound g_w, strict > g."""
    h = mask.shape[0]
    g = h // n
    out = np.zeros_like(mask)
    for i in range(n):
        for j in range(n):
            gh, gw = (i + 1) * g, (j + 1) * g
            total = sum(int(mask[x, y]) for x in range(i * g, gh) for y in range(j * g, gw))
            if total > g:
                for x in range(i * g, gh):
                    for y in range(j * g, gw):
                        out[x, y] = 1
    return out


def bce_mean(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


def tar_sort_count(genuine, impostor, far):
    imp = sorted(impostor, reverse=True)
    thr = imp[math.floor(far * len(imp))]
    return 100.0 * sum(g > thr for g in genuine) / len(genuine)


# --------------------------------------------------------------------------- 1-8, 12: properties

def test_c01_fmask_area_law(note):
    h = w = 64
    lam = 0.1  # 409.6 -> 410 ones-threshold, 409 ones
    cfg = FMaskConfig(h, w, 3.0, (0.02, 0.3))
    start = time.perf_counter()
    checked = 0
    for seed in range(1000):
        gray = spectrum_to_gray(low_pass_filter(sample_spectrum(cfg, np.random.default_rng(seed)), 3.0))
        mask = threshold_mask(gray, lam)
        if len(np.unique(gray)) != gray.size:
            continue
        k = math.floor(lam * h * w + 0.5)
        oracle = np.zeros(h * w, dtype=np.uint8)
        oracle[np.argsort(-gray, axis=None, kind="stable")[:k - 1]] = 1
        assert mask.sum() == k - 1
        np.testing.assert_array_equal(mask.reshape(-1), oracle)
        checked += 1
    elapsed = time.perf_counter() - start
    note(f"{checked} distinct-valued draws, {elapsed:.1f}s")
    assert checked >= 990
    assert elapsed < 30


def test_c02_fmask_smoothness(note):
    h = w = 32
    cfg = FMaskConfig(h, w, 3.0, (0.02, 0.3))
    smooth, rough = [], []
    for seed in range(200):
        rng = np.random.default_rng(seed)
        spectrum = sample_spectrum(cfg, rng)
        lam = rng.uniform(0.02, 0.3)
        for delta, bucket in ((3.0, smooth), (1.0, rough)):
            mask = threshold_mask(spectrum_to_gray(low_pass_filter(spectrum, delta)), lam)
            bucket.append(sobel_loops(mask).mean())
    p = wilcoxon(smooth, rough, alternative="less").pvalue
    note(f"mean Sobel {np.mean(smooth):.3f} vs {np.mean(rough):.3f}, p={p:.2e}")
    assert np.mean(smooth) < np.mean(rough)
    assert p < 0.01


def test_c03_ebce_beta_zero_is_bce(note):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        truth = (rng.random((16, 16)) < rng.random()).astype(np.float64)
        pred = rng.uniform(1e-6, 1 - 1e-6, (16, 16))
        got = ebce_loss(torch.from_numpy(pred), torch.from_numpy(truth), beta=0.0).item()
        worst = max(worst, abs(got - bce_mean(pred, truth)))
    note(f"max |diff| = {worst:.1e}")
    assert worst < 1e-9


def test_c04_ebce_closed_form(note):
    edge = torch.zeros(4, 4, dtype=torch.float64)
    edge[1, 2] = 4.0
    pred = torch.full((4, 4), 0.5, dtype=torch.float64)
    expected = (1 / 16) * math.log(2) * (15 + math.exp(4))
    worst = 0.0
    for truth in (torch.zeros(4, 4), torch.ones(4, 4), torch.eye(4)):
        got = ebce_loss(pred, truth.double(), beta=1.0, edge_map=edge).item()
        worst = max(worst, abs(got - expected))
    note(f"expected {expected:.12f}, max |diff| = {worst:.1e}")
    assert worst < 1e-9


def test_c05_sobel_oracle(note):
    rng = np.random.default_rng(5)
    for _ in range(500):
        mask = (rng.random((16, 16)) < rng.random()).astype(np.uint8)
        np.testing.assert_array_equal(sobel_gradient_magnitude(mask), sobel_loops(mask))
    note("500/500 exact")


def test_c06_saf(note):
    rng = np.random.default_rng(6)
    for _ in range(1000):
        n = int(rng.choice([1, 2, 4, 8]))
        side = int(rng.integers(n, 33))
        mask = (rng.random((side, side)) < rng.random()).astype(np.uint8)
        out = saf(mask, n)
        np.testing.assert_array_equal(out, saf_loops(mask, n))
        np.testing.assert_array_equal(saf(out, n), out)
    masks = np.array(list(itertools.product((0, 1), repeat=16)), dtype=np.uint8).reshape(-1, 4, 4)
    batch = saf(masks, 2)
    for m, o in zip(masks, batch):
        np.testing.assert_array_equal(o, saf_loops(m, 2))
    # strict threshold: tau = g = 4 on 8x8 with n = 2
    at_tau = np.zeros((8, 8), np.uint8)
    at_tau[0, :4] = 1
    above = at_tau.copy()
    above[1, 0] = 1
    assert saf(at_tau, 2).sum() == 0
    assert saf(above, 2)[:4, :4].all() and saf(above, 2).sum() == 16
    note("1000 random + 65536 exhaustive exact")


def ebce_analytic_vs_fd(pred, truth, beta, h=1e-6):
    p = pred.clone().requires_grad_(True)
    grad, = torch.autograd.grad(ebce_loss(p, truth, beta), p)
    fd = torch.zeros_like(pred)
    for idx in itertools.product(*map(range, pred.shape)):
        up, down = pred.clone(), pred.clone()
        up[idx] += h
        down[idx] -= h
        fd[idx] = (ebce_loss(up, truth, beta) - ebce_loss(down, truth, beta)) / (2 * h)
    return grad, fd


def test_c08_ebce_gradient(note):
    rng = np.random.default_rng(8)
    worst = 0.0
    for trial in range(20):
        truth = torch.from_numpy((rng.random((8, 8)) < 0.4).astype(np.float64))
        pred = torch.from_numpy(rng.uniform(0.05, 0.95, (8, 8)))
        grad, fd = ebce_analytic_vs_fd(pred, truth, beta=float(trial % 3))
        worst = max(worst, ((grad - fd).norm() / fd.norm()).item())
    note(f"max relative error {worst:.1e}")
    assert worst < 1e-4


def test_c12_tar_counting_oracle(note):
    rng = np.random.default_rng(12)
    for shift in (0.0, 0.5, 2.0):
        genuine = rng.normal(shift, 1.0, 10_000)
        impostor = rng.normal(0.0, 1.0, 10_000)
        for far in (1e-3, 1e-2):
            assert tar_at_far(genuine, impostor, far) == tar_sort_count(genuine, impostor, far)
    # ties at the threshold are rejected
    tied = np.r_[np.full(9_990, 0.2), np.full(10, 0.9)]
    assert tar_at_far([0.9, 0.91, 0.2], tied, 1e-3) == tar_sort_count([0.9, 0.91, 0.2], tied, 1e-3)
    note("exact on 6 list pairs of 10^4")


# --------------------------------------------------------------------------- 7, 9-11, 13: trained models
#
# Desk-scale setup shared by the trend criteria:
#   faces     10 identities, 200 train / 50 test images each, 32x32
#   FR        30 epochs, batch 64, SGD 0.1 cosine; Vanilla / Cutout / FCutout, seeds 0-2
#   pipeline  FCutout seed-0 FR; 3000 F-patch samples (T ~ U{1..200}, 20% left clean);
#             segmenter 30 epochs, EBCE beta=1; SAF n=8
#   attacks   alpha=0.007, T=100, eps=0.3, evasion of the true label; BPDA temperature 10

FACE_KW = dict(identity_seed=0, min_distance=2, jitter=0.08)
REGIMES = ("none", "cutout", "fcutout")
FAMILIES = ("glasses", "sticker", "respirator")


@pytest.fixture(scope="session")
def desk_faces():
    torch.set_num_threads(1)
    return synthetic_faces(10, 200, 32, seed=1, **FACE_KW), synthetic_faces(10, 50, 32, seed=2, **FACE_KW)


@pytest.fixture(scope="session")
def fr_models(desk_faces):
    train, _ = desk_faces
    cache = {}

    def get(kind, seed):
        if (kind, seed) not in cache:
            cfg = TrainConfig(epochs=30, batch_size=64, augment=AugmentPolicy(kind), seed=seed)
            cache[kind, seed] = train_model(train, cfg)[0]
        return cache[kind, seed]
    return get


@pytest.fixture(scope="session")
def pipeline(desk_faces, fr_models):
    train, _ = desk_faces
    fr = fr_models("fcutout", 0)
    samples = generate_fpatch_dataset(train, fr, count=3000, seed=0, max_steps=200, clean_fraction=0.2)
    seg, _ = train_segmenter(samples, SegmenterConfig(epochs=30, beta=1.0))
    return fr, DefensePipeline(seg, fr, saf_n=None), DefensePipeline(seg, fr, saf_n=8)


@pytest.fixture(scope="session")
def family_runs(desk_faces, pipeline):
    """Accuracy (%) per stencil family: undefended and defended, plain PGD and BPDA."""
    _, test = desk_faces
    fr, minus, plus = pipeline
    x, y = test.images, test.labels
    cache = {}

    def acc(f, images):
        return (f(images).argmax(1) == y).float().mean().item() * 100

    def get(name):
        if name not in cache:
            mask = load_predefined_mask(name)
            keep = torch.from_numpy(mask == 0)
            plain = pgd_patch_attack(AttackSpec(x, mask, source_labels=y), fr)
            bpda_minus = pgd_patch_attack(AttackSpec(x, mask, source_labels=y, adaptive=True), fr, minus)
            bpda_plus = pgd_patch_attack(AttackSpec(x, mask, source_labels=y, adaptive=True), fr, plus)
            for adv in (plain, bpda_minus, bpda_plus):
                assert torch.equal(adv[..., keep], x[..., keep])
                assert (adv - x).abs().max().item() <= 0.3 + 1e-6
            cache[name] = {"clean": acc(lambda z: batched(fr, z), x), "undefended": acc(lambda z: batched(fr, z), plain),
                           "minus": acc(minus, plain), "plus": acc(plus, plain),
                           "bpda_minus": acc(minus, bpda_minus), "bpda_plus": acc(plus, bpda_plus)}
        return cache[name]
    return get


def test_c07_pgd_confinement(note, desk_faces, fr_models):
    _, test = desk_faces
    fr = fr_models("fcutout", 0)
    cfg = FMaskConfig(32, 32, 3.0, (0.02, 0.3))
    picks, masks = [], []
    for trial in range(100):
        rng = np.random.default_rng(7000 + trial)
        picks.append(int(rng.integers(len(test))))
        masks.append(sample_fmask(cfg, rng))
    x, y, masks = test.images[picks], test.labels[picks], np.stack(masks)
    adv = pgd_patch_attack(AttackSpec(x, masks, alpha=0.007, steps=100, eps=0.3, source_labels=y), fr)
    outside = torch.from_numpy(masks == 0)[:, None].expand_as(x)
    confined = torch.equal(adv[outside], x[outside])
    linf = (adv - x).abs().max().item()
    before = F.cross_entropy(batched(fr, x), y, reduction="none")
    after = F.cross_entropy(batched(fr, adv), y, reduction="none")
    increased = int((after > before).sum())
    note(f"outside-M identical={confined}, Linf={linf:.6f}, CE increased in {increased}/100")
    assert confined
    assert linf <= 0.3 + 1e-6
    assert increased >= 95


def test_c09_occlusion_robustness_trend(note, desk_faces, fr_models):
    _, test = desk_faces
    cfg = FMaskConfig(32, 32, 3.0, (0.02, 0.3))
    rng = np.random.default_rng(123)
    masks = np.stack([sample_fmask(cfg, rng) for _ in range(len(test))])
    acc = {k: [] for k in REGIMES}
    for seed in range(3):
        for kind in REGIMES:
            out = defend_with_ground_truth(test.images, masks, fr_models(kind, seed))
            acc[kind].append((out.argmax(1) == test.labels).float().mean().item() * 100)
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    note(", ".join(f"{k} {mean[k]:.2f} ({'/'.join(f'{a:.1f}' for a in acc[k])})" for k in REGIMES))
    assert mean["fcutout"] - mean["cutout"] > 2
    assert mean["cutout"] - mean["none"] > 2


def test_c10_defense_efficacy(note, family_runs):
    r = family_runs("sticker")
    note(f"clean {r['clean']:.1f}, undefended {r['undefended']:.1f}, Ours(-) {r['minus']:.1f}")
    assert r["undefended"] < 0.2 * r["clean"]
    assert r["minus"] > 0.7 * r["clean"]


def test_c11_adaptive_robustness(note, family_runs):
    runs = {name: family_runs(name) for name in FAMILIES}
    for name, r in runs.items():
        note(f"{name}: BPDA Ours(-) {r['bpda_minus']:.1f}, Ours(+) {r['bpda_plus']:.1f}, "
             f"Ours(+) non-adaptive {r['plus']:.1f}")
    wins = sum(r["bpda_plus"] - r["bpda_minus"] > 10 for r in runs.values())
    assert wins >= 2
    for r in runs.values():
        assert abs(r["plus"] - r["bpda_plus"]) <= 15


def test_c13_clean_accuracy_preserved(note, desk_faces, pipeline):
    _, test = desk_faces
    fr, minus, plus = pipeline
    acc = {name: (f(test.images).argmax(1) == test.labels).float().mean().item() * 100
           for name, f in (("FR", lambda z: batched(fr, z)), ("Ours(-)", minus), ("Ours(+)", plus))}
    note(", ".join(f"{k} {v:.1f}" for k, v in acc.items()))
    assert abs(acc["Ours(+)"] - acc["FR"]) <= 2
