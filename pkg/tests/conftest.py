from __future__ import annotations

import numpy as np
import pytest
import torch

from nucdet.data import SynthDatasetSpec, SynthSpec, synth_generate
from nucdet.registry import DatasetDescriptor, build_preset_registry, build_registry
from nucdet.train import RunConfig


@pytest.fixture(scope="session")
def paper_registry():
    return build_preset_registry()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small two-dataset synthetic corpus for trainer and CLI tests."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    spec = SynthSpec(
        datasets=(
            SynthDatasetSpec(
                name="miniA", classes=("round", "spindle", "ring"), n_images=6,
                image_size=64, nuclei_range=(2, 4), radius_range=(4.0, 6.0),
            ),
            SynthDatasetSpec(
                name="miniB", classes=("round", "dark"), n_images=6,
                image_size=64, nuclei_range=(2, 4), radius_range=(4.0, 6.0),
            ),
        ),
        seed=3,
    )
    return synth_generate(spec, out)


def tiny_train_config(manifest, iterations=10, **kwargs) -> RunConfig:
    """Throwaway training settings: small trunk, one 64 px scale."""
    cfg = RunConfig()
    cfg.seed = 0
    cfg.model.dim = 64
    cfg.model.num_queries = 10
    cfg.model.n_heads = 4
    cfg.model.ffn_dim = 128
    cfg.model.backbone_channels = (8, 16, 16, 24)
    cfg.dpm.n_ctx = 2
    cfg.dpm.seq_len = 8
    cfg.cdn.n_groups = 2
    cfg.data.train_manifests = (str(manifest),)
    cfg.data.patch_size = 64
    cfg.data.train_sizes = (64,)
    cfg.optim.iterations = iterations
    cfg.optim.batch_size = 2
    cfg.optim.lr = 1e-3
    cfg.optim.lr_backbone = 1e-3
    cfg.optim.clip_norm = 5.0
    for key, value in kwargs.items():
        section, _, name = key.partition(".")
        if name:
            setattr(getattr(cfg, section), name, value)
        else:
            setattr(cfg, section, value)
    return cfg.validate()


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_corpus, tmp_path_factory):
    from nucdet.train import train

    wd = tmp_path_factory.mktemp("tiny_run")
    ckpt = train(tiny_train_config(tiny_corpus, iterations=25), wd)
    return ckpt, wd


@pytest.fixture()
def two_dataset_registry():
    """Two synthetic datasets sharing one class name (C = 3 + 4 - 1 = 6)."""
    return build_registry(
        [
            DatasetDescriptor(0, "cultureA", ("round", "spindle", "ring"), 6.0),
            DatasetDescriptor(1, "cultureB", ("round", "dark", "halo", "speck"), 6.0),
        ]
    )


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(1234)


def finite_difference_grad(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of scalar f() w.r.t. tensor x (modified in place)."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def random_uint8_image(rng: np.random.Generator, size: int = 96) -> np.ndarray:
    return rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
