"""Optimization loop binding the model, prompt conditioning, denoising
queries, and the composite loss over a mixed multi-dataset patch stream;
plus checkpoint evaluation and the ablation driver.

Every run is fully determined by (seed, config, data): sampling, augmentation
and noise all draw from per-step streams seeded by (seed, step, slot), model
initialization from torch's global seed, and the metrics log carries no
wall-clock state.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import SliceSpec, augment, load_annotations, slice_patches, sliding_window_infer
from .denoise import NoiseConfig, gen_noised_annotations
from .errors import ConfigError, DataError, NumericalError
from .losses import LossWeights, total_loss
from .metrics import CSV_HEADER, EvalReport, evaluate_batch
from .model import NucleusDetector
from .prompts import PromptConditioner
from .registry import AnnotatedSample, CategoryRegistry
from .vocab_build import VOCAB_SIZE

__all__ = [
    "RunConfig",
    "ModelConfig",
    "PromptConfig",
    "CdnConfig",
    "LossConfig",
    "DataConfig",
    "OptimConfig",
    "load_config",
    "build_model",
    "train",
    "evaluate_checkpoint",
    "ablate",
    "ABLATION_AXES",
]


# ------------------------------------------------------------- configuration


@dataclass
class ModelConfig:
    dim: int = 256
    num_queries: int = 900
    encoder_layers: int = 3
    decoder_layers: int = 3
    n_heads: int = 8
    ffn_dim: int = 1024
    backbone_channels: tuple[int, int, int, int] = (32, 64, 128, 192)
    window_radius: int | None = 3
    cross_locality_sigma: float | None = 0.2


@dataclass
class PromptConfig:
    mode: str = "feature"  # feature | query | off
    use_memory_bank: bool = True
    use_dataset_prompt: bool = True
    n_ctx: int = 16
    n_layers: int = 3
    seq_len: int = 77
    pooling: str = "mean"
    vocab_size: int = VOCAB_SIZE


@dataclass
class CdnConfig:
    enabled: bool = True
    lambda1: float = 4.0
    lambda2: float = 8.0
    gamma: float = 0.2
    n_groups: int = 5

    def to_noise_config(self) -> NoiseConfig:
        return NoiseConfig(self.lambda1, self.lambda2, self.gamma, self.n_groups)


@dataclass
class LossConfig:
    cls_weight: float = 1.0
    l1_weight: float = 5.0
    match_cls_weight: float = 2.0
    match_l1_weight: float = 5.0
    focal_alpha: float | None = 0.25
    focal_gamma: float = 2.0
    l1_mode: str = "l1"

    def to_weights(self) -> LossWeights:
        return LossWeights(**dataclasses.asdict(self))


@dataclass
class DataConfig:
    registry: str = ""
    train_manifests: tuple[str, ...] = ()
    eval_manifests: tuple[str, ...] = ()
    patch_size: int = 96
    overlap: float = 0.25
    train_sizes: tuple[int, ...] = (96, 128, 160)
    crop_scale: tuple[float, float] = (0.7, 1.0)
    flip_prob: float = 0.5
    augment: bool = True

    def slice_spec(self) -> SliceSpec:
        return SliceSpec(patch_size=self.patch_size, overlap=self.overlap)


@dataclass
class OptimConfig:
    iterations: int = 500
    batch_size: int = 4
    lr: float = 1e-5
    lr_backbone: float = 1e-4
    weight_decay: float = 1e-4
    clip_norm: float = 0.1
    checkpoint_interval: int = 0  # 0 = final checkpoint only


@dataclass
class RunConfig:
    seed: int = 0
    device: str = "cpu"
    confidence_threshold: float = 0.5
    model: ModelConfig = field(default_factory=ModelConfig)
    dpm: PromptConfig = field(default_factory=PromptConfig)
    cdn: CdnConfig = field(default_factory=CdnConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def validate(self) -> "RunConfig":
        if self.dpm.mode not in ("feature", "query", "off"):
            raise ConfigError(f"dpm.mode must be feature/query/off, got {self.dpm.mode!r}")
        if self.data.patch_size % 32:
            raise ConfigError(f"data.patch_size must be divisible by 32, got {self.data.patch_size}")
        for s in self.data.train_sizes:
            if s % 32:
                raise ConfigError(f"train size {s} not divisible by 32")
        self.cdn.to_noise_config()
        self.loss.to_weights()
        if self.optim.iterations < 0 or self.optim.batch_size < 1:
            raise ConfigError("optim.iterations must be >= 0 and batch_size >= 1")
        return self

    def to_dict(self) -> dict:
        def clean(obj):
            if isinstance(obj, tuple):
                return [clean(x) for x in obj]
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            return obj

        return clean(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _dataclass_from_dict(cls, doc, prefix="").validate()

    def with_overrides(self, overrides: list[tuple[str, str]]) -> "RunConfig":
        doc = self.to_dict()
        for key, raw in overrides:
            node = doc
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node, dict) or p not in node:
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if not isinstance(node, dict) or parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                node[parts[-1]] = yaml.safe_load(raw)
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse value for {key!r}: {exc}") from exc
        return RunConfig.from_dict(doc)


def _coerce(value, ftype, key: str):
    origin = typing.get_origin(ftype)
    if origin is typing.Union or origin is types.UnionType:
        args = typing.get_args(ftype)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{key}: null not allowed")
        ftype = next(a for a in args if a is not type(None))
        origin = typing.get_origin(ftype)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        args = typing.get_args(ftype)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], key) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{key}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported config type {ftype}")


def _dataclass_from_dict(cls, doc: dict, prefix: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {prefix or '<root>'} must be a mapping, got {doc!r}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(prefix + k for k in unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in doc:
            continue
        ftype = hints[f.name]
        key = prefix + f.name
        if dataclasses.is_dataclass(ftype):
            kwargs[f.name] = _dataclass_from_dict(ftype, doc[f.name], key + ".")
        else:
            kwargs[f.name] = _coerce(doc[f.name], ftype, key)
    return cls(**kwargs)


def flat_config_keys() -> list[tuple[str, object]]:
    """Every dotted config key with its default, for the CLI help text."""
    out: list[tuple[str, object]] = []

    def walk(cls, prefix):
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            ftype = hints[f.name]
            if dataclasses.is_dataclass(ftype):
                walk(ftype, prefix + f.name + ".")
            else:
                default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
                out.append((prefix + f.name, default))

    walk(RunConfig, "")
    return out


def load_config(path: str | Path) -> RunConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    if doc is None:
        doc = {}
    return RunConfig.from_dict(doc)


def paper_preset_config() -> RunConfig:
    """Full-scale settings for the real benchmarks (not exercised at desk scale)."""
    cfg = RunConfig()
    cfg.model.num_queries = 900
    cfg.optim.iterations = 160_000
    cfg.optim.lr = 1e-5
    cfg.optim.lr_backbone = 1e-4
    cfg.data.patch_size = 800
    cfg.data.train_sizes = (608, 672, 736, 800)
    return cfg


# ------------------------------------------------------------------ training


def build_model(config: RunConfig, registry: CategoryRegistry) -> NucleusDetector:
    prompt = None
    if config.dpm.mode != "off":
        prompt = PromptConditioner(
            registry,
            dim=config.model.dim,
            n_ctx=config.dpm.n_ctx,
            seq_len=config.dpm.seq_len,
            n_layers=config.dpm.n_layers,
            use_memory_bank=config.dpm.use_memory_bank,
            use_dataset_prompt=config.dpm.use_dataset_prompt,
            pooling=config.dpm.pooling,
            vocab_size=config.dpm.vocab_size,
        )
    return NucleusDetector(
        registry,
        dim=config.model.dim,
        num_queries=config.model.num_queries,
        encoder_layers=config.model.encoder_layers,
        decoder_layers=config.model.decoder_layers,
        n_heads=config.model.n_heads,
        ffn_dim=config.model.ffn_dim,
        backbone_channels=config.model.backbone_channels,
        window_radius=config.model.window_radius,
        cross_locality_sigma=config.model.cross_locality_sigma,
        prompt_mode=config.dpm.mode,
        prompt=prompt,
    )


def _resolve_registry(config: RunConfig) -> CategoryRegistry:
    if config.data.registry:
        return CategoryRegistry.load(config.data.registry)
    if not config.data.train_manifests:
        raise ConfigError("config needs data.registry or at least one data.train_manifests entry")
    return CategoryRegistry.load(Path(config.data.train_manifests[0]).parent / "registry.json")


def _patch_pool(config: RunConfig, registry: CategoryRegistry) -> list[AnnotatedSample]:
    samples: list[AnnotatedSample] = []
    for manifest in config.data.train_manifests:
        samples.extend(load_annotations(manifest, registry))
    if not samples:
        raise DataError("no training samples found in the configured manifests")
    spec = config.data.slice_spec()
    pool = [patch for s in samples for patch, _ in slice_patches(s, spec)]
    return pool


def optimizer_param_groups(model: NucleusDetector, config: RunConfig) -> list[dict]:
    """Two groups: backbone at its own rate, everything else at the base rate."""
    backbone = model.backbone_parameters()
    rest = model.non_backbone_parameters()
    return [
        {"params": backbone, "lr": config.optim.lr_backbone},
        {"params": rest, "lr": config.optim.lr},
    ]


def _min_token_count(sizes: tuple[int, ...]) -> int:
    s = min(sizes)
    return (s // 8) ** 2 + (s // 16) ** 2 + (s // 32) ** 2


def save_checkpoint(path: Path, model: NucleusDetector, registry: CategoryRegistry, config: RunConfig) -> None:
    torch.save(
        {"model": model.state_dict(), "registry": registry.to_json_dict(), "config": config.to_dict()},
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[NucleusDetector, CategoryRegistry, RunConfig]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise DataError(f"{path}: cannot load checkpoint ({exc})") from exc
    registry = CategoryRegistry.from_json_dict(payload["registry"])
    config = RunConfig.from_dict(payload["config"])
    torch.manual_seed(config.seed)
    model = build_model(config, registry)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, registry, config


def train(config: RunConfig, workdir: str | Path) -> Path:
    """Run the optimization loop; returns the final checkpoint path.

    The metrics log (``metrics.jsonl``) gets one line per iteration with the
    raw loss breakdown summed over the batch.
    """
    config.validate()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    device = torch.device(config.device)

    registry = _resolve_registry(config)
    pool = _patch_pool(config, registry)
    sizes = config.data.train_sizes if config.data.augment else (config.data.patch_size,)
    if _min_token_count(sizes) < config.model.num_queries:
        raise ConfigError(
            f"num_queries={config.model.num_queries} exceeds the {_min_token_count(sizes)} encoder "
            f"tokens of the smallest training size"
        )

    torch.manual_seed(config.seed)
    model = build_model(config, registry).to(device)
    model.train()
    optimizer = torch.optim.AdamW(
        optimizer_param_groups(model, config), weight_decay=config.optim.weight_decay, foreach=True
    )
    weights = config.loss.to_weights()
    noise_cfg = config.cdn.to_noise_config()

    log_path = workdir / "metrics.jsonl"
    ckpt_path = workdir / "checkpoint.pt"
    with open(log_path, "w") as log:
        for step in range(config.optim.iterations):
            step_rng = np.random.default_rng([config.seed, step])
            indices = step_rng.integers(0, len(pool), size=config.optim.batch_size)
            optimizer.zero_grad(set_to_none=True)
            totals: list[torch.Tensor] = []
            batch_parts: dict[str, float] = {}
            # one prompt graph per step; sample losses fold into one backward
            prompt_cache = model.prompt.cache_keys_values() if model.prompt is not None else nullcontext()
            with prompt_cache:
                for slot, idx in enumerate(indices):
                    rng = np.random.default_rng([config.seed, step, slot])
                    sample = pool[int(idx)]
                    if config.data.augment:
                        sample = augment(
                            sample,
                            rng,
                            sizes=config.data.train_sizes,
                            crop_scale=config.data.crop_scale,
                            flip_prob=config.data.flip_prob,
                        )
                    noised = None
                    if config.cdn.enabled and sample.num_nuclei > 0:
                        noised = gen_noised_annotations(
                            sample.centroids,
                            sample.classes,
                            registry.datasets[sample.dataset_id].num_classes,
                            (sample.width, sample.height),
                            noise_cfg,
                            rng,
                        )
                    outputs = model.forward_train(sample.image, sample.dataset_id, noised)
                    gt_coords = torch.as_tensor(
                        sample.centroids / np.array([sample.width, sample.height]),
                        dtype=torch.float32,
                        device=device,
                    )
                    gt_classes = torch.as_tensor(sample.classes, device=device)
                    breakdown = total_loss(outputs, gt_coords, gt_classes, sample.dataset_id, registry, weights)
                    totals.append(breakdown.total)
                    for name, value in breakdown.parts.items():
                        batch_parts[name] = batch_parts.get(name, 0.0) + value
                batch_total = torch.stack(totals).sum()
                if not torch.isfinite(batch_total):
                    raise NumericalError(f"training diverged: non-finite loss at step {step}")
                batch_total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.optim.clip_norm)
            optimizer.step()
            log.write(
                json.dumps({"step": step, "total": float(batch_total.detach()), **batch_parts}, sort_keys=True) + "\n"
            )
            if config.optim.checkpoint_interval and (step + 1) % config.optim.checkpoint_interval == 0:
                save_checkpoint(workdir / f"checkpoint_{step + 1:06d}.pt", model, registry, config)
    save_checkpoint(ckpt_path, model, registry, config)
    return ckpt_path


# ---------------------------------------------------------------- evaluation


def evaluate_checkpoint(
    checkpoint: str | Path,
    manifests: list[str | Path],
    *,
    out_dir: str | Path | None = None,
    confidence_threshold: float | None = None,
) -> dict[str, EvalReport]:
    """Sliding-window inference over every manifest sample, one report per dataset."""
    model, registry, config = load_checkpoint(checkpoint)
    threshold = config.confidence_threshold if confidence_threshold is None else confidence_threshold
    samples: list[AnnotatedSample] = []
    for manifest in manifests:
        samples.extend(load_annotations(manifest, registry))
    spec = config.data.slice_spec()
    by_dataset: dict[int, list[tuple[list, AnnotatedSample]]] = {}
    for sample in samples:
        preds = sliding_window_infer(
            model, sample.image, sample.dataset_id, spec, confidence_threshold=threshold
        )
        by_dataset.setdefault(sample.dataset_id, []).append((preds, sample))
    reports = {}
    for d, pairs in sorted(by_dataset.items()):
        report = evaluate_batch(pairs, registry, d)
        reports[registry.datasets[d].name] = report
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = [CSV_HEADER]
        for name, report in reports.items():
            report.save(out / f"report_{name.lower()}.json")
            rows.extend(report.csv_rows())
        (out / "summary.csv").write_text("\n".join(rows) + "\n")
    return reports


# ------------------------------------------------------------------ ablation

ABLATION_AXES = ("dpm", "memory_bank", "dataset_prompt", "enhance_mode", "L_sweep")


def _axis_variants(config: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    def variant(name: str, **dpm_updates) -> tuple[str, RunConfig]:
        doc = config.to_dict()
        doc["dpm"].update(dpm_updates)
        return name, RunConfig.from_dict(doc)

    if axis == "dpm":
        return [variant("feature", mode="feature"), variant("off", mode="off")]
    if axis == "memory_bank":
        return [variant("with_bank", use_memory_bank=True), variant("without_bank", use_memory_bank=False)]
    if axis == "dataset_prompt":
        return [variant("with_prompt", use_dataset_prompt=True), variant("without_prompt", use_dataset_prompt=False)]
    if axis == "enhance_mode":
        return [variant("feature", mode="feature"), variant("query", mode="query")]
    if axis == "L_sweep":
        return [variant(f"L{n}", n_layers=n) for n in (1, 2, 3, 4)]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def ablate(config: RunConfig, axis: str, workdir: str | Path) -> list[dict]:
    """Train and evaluate each variant of one ablation axis under shared
    seeds; writes a side-by-side table (CSV + markdown) and returns the rows."""
    workdir = Path(workdir)
    rows: list[dict] = []
    for name, variant_cfg in _axis_variants(config, axis):
        run_dir = workdir / f"{axis}_{name}"
        ckpt = train(variant_cfg, run_dir)
        manifests = variant_cfg.data.eval_manifests or variant_cfg.data.train_manifests
        reports = evaluate_checkpoint(ckpt, list(manifests))
        for ds_name, report in reports.items():
            rows.append(
                {
                    "variant": name,
                    "dataset": ds_name,
                    "f_d": round(report.f_d, 6),
                    "mean_f_c": round(report.mean_f_c, 6),
                }
            )
    header = "variant,dataset,f_d,mean_f_c"
    csv_lines = [header] + [f"{r['variant']},{r['dataset']},{r['f_d']},{r['mean_f_c']}" for r in rows]
    (workdir / f"ablation_{axis}.csv").write_text("\n".join(csv_lines) + "\n")
    md = ["| variant | dataset | F_d | mean F_c |", "| --- | --- | --- | --- |"]
    md += [f"| {r['variant']} | {r['dataset']} | {r['f_d']:.4f} | {r['mean_f_c']:.4f} |" for r in rows]
    (workdir / f"ablation_{axis}.md").write_text("\n".join(md) + "\n")
    return rows
