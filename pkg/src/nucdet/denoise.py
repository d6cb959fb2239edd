"""Denoising queries for training: noised copies of the ground truth, in
groups, with an attention mask that isolates each group.

Positive copies are shifted by per-axis offsets with magnitude below the
inner bound and must reconstruct their annotation; negative copies sit in the
ring between the two bounds and must be predicted as no-object. Labels are
flipped to a random different class with the configured probability on both
branches. Only location noise is applied — annotations are centroids, there
is no box geometry to jitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError

__all__ = ["NoiseConfig", "NoisedAnnotations", "gen_noised_annotations", "cdn_group_mask"]

MASK_NEG = -1e9


@dataclass(frozen=True)
class NoiseConfig:
    """Offset bounds (pixels), label-flip probability, and group count."""

    lambda1: float = 4.0
    lambda2: float = 8.0
    gamma: float = 0.2
    n_groups: int = 5

    def __post_init__(self):
        if not 0 < self.lambda1 < self.lambda2:
            raise ConfigError(f"need 0 < lambda1 < lambda2, got {self.lambda1}, {self.lambda2}")
        if not 0 <= self.gamma <= 1:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.n_groups < 1:
            raise ConfigError(f"n_groups must be >= 1, got {self.n_groups}")


@dataclass
class NoisedAnnotations:
    """Noised copies aligned index-wise with the ground truth.

    Arrays are (n_groups, n_gt, ...); within each group, copy j derives from
    annotation j. ``clamped`` flags copies whose coordinates hit the image
    border clamp.
    """

    pos_coords: np.ndarray
    pos_classes: np.ndarray
    neg_coords: np.ndarray
    neg_classes: np.ndarray
    clamped: np.ndarray
    image_size: tuple[int, int]  # (W, H)

    @property
    def n_groups(self) -> int:
        return self.pos_coords.shape[0]

    @property
    def n_gt(self) -> int:
        return self.pos_coords.shape[1]

    @property
    def queries_per_group(self) -> int:
        return 2 * self.n_gt

    @property
    def total_queries(self) -> int:
        return self.n_groups * self.queries_per_group

    def flat_coords(self) -> np.ndarray:
        """(total, 2) in group order, positives before negatives inside a group."""
        per_group = np.concatenate([self.pos_coords, self.neg_coords], axis=1)
        return per_group.reshape(-1, 2)

    def flat_classes(self) -> np.ndarray:
        per_group = np.concatenate([self.pos_classes, self.neg_classes], axis=1)
        return per_group.reshape(-1)


def _open_uniform(rng: np.random.Generator, low: float, high: float, shape) -> np.ndarray:
    """Uniform draw on the open interval (low, high); endpoint hits are redrawn."""
    out = rng.uniform(low, high, size=shape)
    bad = (out <= low) | (out >= high)
    while bad.any():
        out[bad] = rng.uniform(low, high, size=int(bad.sum()))
        bad = (out <= low) | (out >= high)
    return out


def _flip_labels(classes: np.ndarray, n_classes: int, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Switch each label to a uniformly random different class with prob gamma."""
    flipped = classes.copy()
    if n_classes < 2 or gamma == 0.0:
        return flipped
    do_flip = rng.random(classes.shape) < gamma
    # draw from the other n_classes - 1 labels by skipping the original
    draws = rng.integers(0, n_classes - 1, size=classes.shape)
    alternatives = np.where(draws >= classes, draws + 1, draws)
    flipped[do_flip] = alternatives[do_flip]
    return flipped


def gen_noised_annotations(
    centroids: np.ndarray,
    classes: np.ndarray,
    n_classes: int,
    image_size: tuple[int, int],
    cfg: NoiseConfig,
    rng: np.random.Generator,
) -> NoisedAnnotations | None:
    """Build the noised copies for one image; None when it has no annotations."""
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    n = len(centroids)
    if n == 0:
        return None
    w, h = image_size
    g = cfg.n_groups
    shape = (g, n, 2)

    pos_mag = _open_uniform(rng, 0.0, cfg.lambda1, shape)
    pos_sign = rng.choice([-1.0, 1.0], size=shape)
    neg_mag = _open_uniform(rng, cfg.lambda1, cfg.lambda2, shape)
    neg_sign = rng.choice([-1.0, 1.0], size=shape)

    pos_raw = centroids[None, :, :] + pos_sign * pos_mag
    neg_raw = centroids[None, :, :] + neg_sign * neg_mag
    bounds = np.array([w - 1.0, h - 1.0])
    pos_coords = np.clip(pos_raw, 0.0, bounds)
    neg_coords = np.clip(neg_raw, 0.0, bounds)
    clamped = np.concatenate(
        [(pos_coords != pos_raw).any(axis=2), (neg_coords != neg_raw).any(axis=2)], axis=1
    )

    pos_classes = _flip_labels(np.broadcast_to(classes, (g, n)), n_classes, cfg.gamma, rng)
    neg_classes = _flip_labels(np.broadcast_to(classes, (g, n)), n_classes, cfg.gamma, rng)

    return NoisedAnnotations(
        pos_coords=pos_coords,
        pos_classes=pos_classes,
        neg_coords=neg_coords,
        neg_classes=neg_classes,
        clamped=clamped,
        image_size=(w, h),
    )


def cdn_group_mask(
    n_per_group: int,
    n_groups: int,
    n_content: int,
    *,
    device=None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Additive self-attention mask over [group_0, ..., group_{G-1}, content].

    Denoising queries attend only within their own group; content queries and
    denoising queries cannot see each other in either direction.
    """
    total = n_groups * n_per_group + n_content
    mask = torch.full((total, total), MASK_NEG, device=device, dtype=dtype)
    for gi in range(n_groups):
        lo = gi * n_per_group
        hi = lo + n_per_group
        mask[lo:hi, lo:hi] = 0.0
    mask[n_groups * n_per_group :, n_groups * n_per_group :] = 0.0
    return mask
