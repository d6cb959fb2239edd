from __future__ import annotations

import numpy as np
import pytest
import torch

from nucdet.denoise import NoiseConfig, cdn_group_mask, gen_noised_annotations
from nucdet.errors import ConfigError


def _gen(cfg=None, n=4, seed=0, image=(96, 96), n_classes=3):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(10, 80, size=(n, 2))
    classes = rng.integers(0, n_classes, size=n)
    noised = gen_noised_annotations(coords, classes, n_classes, image, cfg or NoiseConfig(), rng)
    return coords, classes, noised


def test_config_validation():
    with pytest.raises(ConfigError):
        NoiseConfig(lambda1=5.0, lambda2=5.0)
    with pytest.raises(ConfigError):
        NoiseConfig(lambda1=0.0)
    with pytest.raises(ConfigError):
        NoiseConfig(gamma=1.5)
    with pytest.raises(ConfigError):
        NoiseConfig(n_groups=0)


def test_zero_nuclei_skips_denoising():
    rng = np.random.default_rng(0)
    assert gen_noised_annotations(np.zeros((0, 2)), np.zeros(0), 3, (64, 64), NoiseConfig(), rng) is None


def test_counts_and_alignment():
    coords, classes, noised = _gen(cfg=NoiseConfig(n_groups=2), n=3)
    assert noised.n_groups == 2 and noised.n_gt == 3
    assert noised.queries_per_group == 6
    assert noised.total_queries == 12
    assert noised.flat_coords().shape == (12, 2)
    assert noised.flat_classes().shape == (12,)


def test_gamma_zero_keeps_labels():
    _, classes, noised = _gen(cfg=NoiseConfig(gamma=0.0), n=6)
    assert (noised.pos_classes == classes[None, :]).all()
    assert (noised.neg_classes == classes[None, :]).all()


def test_gamma_one_flips_every_label():
    _, classes, noised = _gen(cfg=NoiseConfig(gamma=1.0), n=6)
    assert (noised.pos_classes != classes[None, :]).all()
    assert (noised.neg_classes != classes[None, :]).all()
    assert (noised.pos_classes < 3).all() and (noised.pos_classes >= 0).all()


def test_offset_bounds_hand_case():
    cfg = NoiseConfig(lambda1=2.0, lambda2=4.0, gamma=0.0, n_groups=50)
    rng = np.random.default_rng(1)
    coords = np.array([[10.0, 10.0]])
    noised = gen_noised_annotations(coords, np.array([0]), 2, (96, 96), cfg, rng)
    pos_d = np.abs(noised.pos_coords - coords[None, :, :])
    neg_d = np.abs(noised.neg_coords - coords[None, :, :])
    assert (pos_d < 2.0).all() and (pos_d > 0.0).all()
    assert (neg_d > 2.0).all() and (neg_d < 4.0).all()


def test_positive_negative_separation_invariant():
    cfg = NoiseConfig(lambda1=3.0, lambda2=7.0, n_groups=20)
    coords, _, noised = _gen(cfg=cfg, n=5, image=(1000, 1000))  # huge image: no clamping
    assert not noised.clamped.any()
    pos_max = np.abs(noised.pos_coords - coords[None, :, :]).max(axis=2)
    neg_max = np.abs(noised.neg_coords - coords[None, :, :]).max(axis=2)
    assert (pos_max < 3.0).all()
    assert (neg_max >= 3.0).all()


def test_clamping_flags_and_bounds():
    cfg = NoiseConfig(lambda1=4.0, lambda2=8.0, n_groups=20)
    rng = np.random.default_rng(2)
    coords = np.array([[0.5, 0.5], [63.0, 63.0]])  # at the borders
    noised = gen_noised_annotations(coords, np.array([0, 1]), 2, (64, 64), cfg, rng)
    assert noised.clamped.any()
    assert (noised.pos_coords >= 0).all() and (noised.pos_coords <= 63).all()
    assert (noised.neg_coords >= 0).all() and (noised.neg_coords <= 63).all()


def test_empirical_flip_rate():
    gamma = 0.3
    n_draws = 10_000
    cfg = NoiseConfig(gamma=gamma, n_groups=n_draws // 10)
    rng = np.random.default_rng(3)
    coords = rng.uniform(20, 70, size=(10, 2))
    classes = rng.integers(0, 4, size=10)
    noised = gen_noised_annotations(coords, classes, 4, (96, 96), cfg, rng)
    flips = (noised.pos_classes != classes[None, :]).mean()
    sigma = np.sqrt(gamma * (1 - gamma) / noised.pos_classes.size)
    assert abs(flips - gamma) < 3 * sigma


def test_single_class_dataset_cannot_flip():
    cfg = NoiseConfig(gamma=1.0)
    rng = np.random.default_rng(4)
    noised = gen_noised_annotations(np.array([[10.0, 10.0]]), np.array([0]), 1, (64, 64), cfg, rng)
    assert (noised.pos_classes == 0).all()


def test_determinism_per_stream():
    a = _gen(seed=42)[2]
    b = _gen(seed=42)[2]
    assert np.array_equal(a.pos_coords, b.pos_coords)
    assert np.array_equal(a.neg_classes, b.neg_classes)


# ------------------------------------------------------------------ masking


def test_single_group_mask_is_block_diagonal():
    m = cdn_group_mask(4, 1, 3)
    assert m.shape == (7, 7)
    assert (m[:4, :4] == 0).all()
    assert (m[4:, 4:] == 0).all()
    assert (m[:4, 4:] < 0).all()
    assert (m[4:, :4] < 0).all()


def test_no_fully_masked_rows():
    m = cdn_group_mask(6, 3, 5)
    assert ((m == 0).sum(dim=1) >= 1).all()


def test_groups_isolated_from_each_other():
    m = cdn_group_mask(2, 3, 2)
    for gi in range(3):
        for gj in range(3):
            block = m[gi * 2 : gi * 2 + 2, gj * 2 : gj * 2 + 2]
            if gi == gj:
                assert (block == 0).all()
            else:
                assert (block < 0).all()


def test_content_and_denoising_mutually_blind():
    m = cdn_group_mask(2, 2, 3)
    assert (m[4:, :4] < 0).all()  # content cannot see denoising queries
    assert (m[:4, 4:] < 0).all()  # denoising queries cannot see content
    assert m.dtype == torch.float32
