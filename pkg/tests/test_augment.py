import numpy as np
import pytest
import torch

from radap.augment import AugmentPolicy, apply_occlusion, augment_batch


@pytest.fixture
def image():
    return np.random.default_rng(0).random((6, 7, 3)).astype(np.float32)


def test_zero_mask_is_identity(image):
    np.testing.assert_array_equal(apply_occlusion(image, np.zeros((6, 7), np.uint8)), image)


def test_full_mask_black(image):
    assert (apply_occlusion(image, np.ones((6, 7), np.uint8), 0.0) == 0).all()


def test_single_pixel(image):
    mask = np.zeros((6, 7), np.uint8)
    mask[2, 3] = 1
    out = apply_occlusion(image, mask, 0.0)
    changed = np.argwhere(out != image)
    assert sorted(map(tuple, changed)) == [(2, 3, 0), (2, 3, 1), (2, 3, 2)]
    assert (out[2, 3] == 0).all()


def test_idempotent(image):
    mask = (np.random.default_rng(1).random((6, 7)) > 0.5).astype(np.uint8)
    once = apply_occlusion(image, mask, 0.3)
    np.testing.assert_array_equal(apply_occlusion(once, mask, 0.3), once)


def test_shape_mismatch(image):
    with pytest.raises(ValueError):
        apply_occlusion(image, np.zeros((7, 6), np.uint8))


def test_torch_layout_matches_numpy(image):
    mask = (np.random.default_rng(2).random((6, 7)) > 0.5).astype(np.uint8)
    chw = torch.from_numpy(image.transpose(2, 0, 1).copy())
    out = apply_occlusion(chw, torch.from_numpy(mask), 0.0).numpy().transpose(1, 2, 0)
    np.testing.assert_array_equal(out, apply_occlusion(image, mask, 0.0))


@pytest.fixture
def batch():
    return torch.rand(8, 3, 16, 16, generator=torch.Generator().manual_seed(0))


def test_zero_probability_unchanged(batch):
    out = augment_batch(batch, AugmentPolicy("fcutout", apply_probability=0.0), 0)
    assert torch.equal(out, batch)


def test_cutout_changes_every_image(batch):
    out = augment_batch(batch, AugmentPolicy("cutout", apply_probability=1.0), 0)
    for a, b in zip(out, batch):
        assert not torch.equal(a, b)


def test_fcutout_outside_mask_untouched(batch):
    out = augment_batch(batch, AugmentPolicy("fcutout"), 3)
    assert ((out == batch) | (out == 0)).all()
    assert not torch.equal(out, batch)


def test_batch_reproducible(batch):
    pol = AugmentPolicy("fcutout")
    assert torch.equal(augment_batch(batch, pol, 7), augment_batch(batch, pol, 7))


def test_fcutout_default_area_is_full_range():
    assert AugmentPolicy("fcutout").area_range == (0.0, 1.0)


@pytest.mark.parametrize("kwargs", [dict(kind="mixup"), dict(apply_probability=1.5), dict(fill_value=2)])
def test_invalid_policy(kwargs):
    with pytest.raises(ValueError):
        AugmentPolicy(**kwargs)
