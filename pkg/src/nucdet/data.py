"""Annotation I/O, augmentation, patch slicing, sliding-window inference
stitching, and the synthetic multi-dataset generator used for desk-scale
end-to-end verification.

On-disk layout produced by the generator (and consumed by training):

    out/
      registry.json
      manifest.json            {"samples": ["annotations/<name>.json", ...]}
      images/<name>.png
      annotations/<name>.json  {"image_path", "dataset", "points", "labels"}

Coordinates are pixels, origin top-left, u = column, v = row.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .registry import AnnotatedSample, CategoryRegistry, DatasetDescriptor, build_registry, validate_sample

__all__ = [
    "SliceSpec",
    "SynthDatasetSpec",
    "SynthSpec",
    "load_annotations",
    "save_dataset",
    "hflip",
    "vflip",
    "random_crop",
    "resize",
    "augment",
    "slice_patches",
    "dedup_points",
    "sliding_window_infer",
    "synth_generate",
    "CLASS_PALETTE",
]


@dataclass(frozen=True)
class SliceSpec:
    patch_size: int = 96
    overlap: float = 0.25
    pad_mode: str = "edge"

    def __post_init__(self):
        if self.patch_size <= 0:
            raise ConfigError(f"patch_size must be > 0, got {self.patch_size}")
        if not 0 <= self.overlap < 1:
            raise ConfigError(f"overlap must be in [0, 1), got {self.overlap}")

    @property
    def stride(self) -> int:
        return max(1, int(round(self.patch_size * (1 - self.overlap))))


# ------------------------------------------------------------------ file I/O


def _load_image(path: Path) -> np.ndarray:
    if path.suffix.lower() != ".png":
        raise DataError(f"{path}: only PNG images are supported")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _parse_annotation(path: Path, doc: dict, registry: CategoryRegistry) -> AnnotatedSample:
    for key in ("image_path", "dataset", "points", "labels"):
        if key not in doc:
            raise DataError(f"{path}: missing field {key!r}")
    ds = registry.dataset_by_name(doc["dataset"])
    points = doc["points"]
    labels = doc["labels"]
    if not isinstance(points, list) or not isinstance(labels, list):
        raise DataError(f"{path}: 'points' and 'labels' must be arrays")
    if len(points) != len(labels):
        raise DataError(f"{path}: {len(points)} points but {len(labels)} labels")
    for i, pt in enumerate(points):
        if not (isinstance(pt, list) and len(pt) == 2):
            raise DataError(f"{path}: points[{i}] must be [u, v], got {pt!r}")
    image = _load_image((path.parent / doc["image_path"]).resolve())
    sample = AnnotatedSample(
        image=image,
        dataset_id=ds.id,
        centroids=np.asarray(points, dtype=np.float64).reshape(-1, 2),
        classes=np.asarray(labels, dtype=np.int64),
        source=str(path),
    )
    problems = validate_sample(sample, registry)
    if problems:
        raise DataError("; ".join(problems))
    return sample


def load_annotations(manifest_path: str | Path, registry: CategoryRegistry | None = None) -> list[AnnotatedSample]:
    """Load every sample listed in a manifest; entries resolve relative to it.

    With ``registry=None`` the sibling ``registry.json`` is used.
    """
    manifest_path = Path(manifest_path)
    if registry is None:
        registry = CategoryRegistry.load(manifest_path.parent / "registry.json")
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{manifest_path}: cannot read manifest ({exc})") from exc
    if "samples" not in doc or not isinstance(doc["samples"], list):
        raise DataError(f"{manifest_path}: manifest needs a 'samples' array")
    samples = []
    for rel in doc["samples"]:
        ann_path = manifest_path.parent / rel
        try:
            ann_doc = json.loads(ann_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{ann_path}: cannot read annotation ({exc})") from exc
        samples.append(_parse_annotation(ann_path, ann_doc, registry))
    return samples


def save_dataset(out_dir: str | Path, registry: CategoryRegistry, samples: list[AnnotatedSample]) -> Path:
    """Write images, per-sample annotations, the registry, and the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    registry.save(out / "registry.json")
    entries = []
    for i, sample in enumerate(samples):
        ds = registry.datasets[sample.dataset_id]
        stem = f"{ds.name.lower()}_{i:04d}"
        Image.fromarray(sample.image).save(out / "images" / f"{stem}.png")
        ann = {
            "image_path": f"../images/{stem}.png",
            "dataset": ds.name,
            "points": [[float(u), float(v)] for u, v in sample.centroids],
            "labels": [int(c) for c in sample.classes],
        }
        (out / "annotations" / f"{stem}.json").write_text(json.dumps(ann, indent=2) + "\n")
        entries.append(f"annotations/{stem}.json")
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"samples": entries}, indent=2) + "\n")
    return manifest


# -------------------------------------------------------------- augmentation


def hflip(sample: AnnotatedSample) -> AnnotatedSample:
    w = sample.width
    coords = sample.centroids.copy()
    coords[:, 0] = (w - 1) - coords[:, 0]
    return AnnotatedSample(sample.image[:, ::-1].copy(), sample.dataset_id, coords, sample.classes.copy())


def vflip(sample: AnnotatedSample) -> AnnotatedSample:
    h = sample.height
    coords = sample.centroids.copy()
    coords[:, 1] = (h - 1) - coords[:, 1]
    return AnnotatedSample(sample.image[::-1].copy(), sample.dataset_id, coords, sample.classes.copy())


def random_crop(sample: AnnotatedSample, crop_size: int, rng: np.random.Generator) -> AnnotatedSample:
    """Square crop at a random offset; nuclei outside it are dropped."""
    h, w = sample.height, sample.width
    crop_size = min(crop_size, h, w)
    ou = int(rng.integers(0, w - crop_size + 1))
    ov = int(rng.integers(0, h - crop_size + 1))
    image = sample.image[ov : ov + crop_size, ou : ou + crop_size].copy()
    if sample.num_nuclei:
        u, v = sample.centroids[:, 0], sample.centroids[:, 1]
        keep = (u >= ou) & (u < ou + crop_size) & (v >= ov) & (v < ov + crop_size)
        coords = sample.centroids[keep] - np.array([ou, ov], dtype=np.float64)
        classes = sample.classes[keep]
    else:
        coords, classes = sample.centroids, sample.classes
    return AnnotatedSample(image, sample.dataset_id, coords, classes)


def resize(sample: AnnotatedSample, target: int) -> AnnotatedSample:
    h, w = sample.height, sample.width
    img = Image.fromarray(sample.image).resize((target, target), Image.BILINEAR)
    coords = sample.centroids * np.array([target / w, target / h])
    return AnnotatedSample(np.asarray(img), sample.dataset_id, coords, sample.classes.copy())


def augment(
    sample: AnnotatedSample,
    rng: np.random.Generator,
    *,
    sizes: tuple[int, ...] = (96, 128, 160),
    crop_scale: tuple[float, float] = (0.7, 1.0),
    flip_prob: float = 0.5,
) -> AnnotatedSample:
    """Random flips, random square crop, and multi-scale resize."""
    if rng.random() < flip_prob:
        sample = hflip(sample)
    if rng.random() < flip_prob:
        sample = vflip(sample)
    scale = rng.uniform(*crop_scale)
    crop = max(8, int(round(min(sample.height, sample.width) * scale)))
    sample = random_crop(sample, crop, rng)
    target = int(sizes[rng.integers(0, len(sizes))])
    return resize(sample, target)


# ------------------------------------------------------------------- slicing


def _grid_offsets(size: int, patch: int, stride: int) -> list[int]:
    if size <= patch:
        return [0]
    n = math.ceil((size - patch) / stride) + 1
    return [i * stride for i in range(n)]


def slice_patches(sample: AnnotatedSample, spec: SliceSpec) -> list[tuple[AnnotatedSample, tuple[int, int]]]:
    """Cut a sample into fixed-size overlapping patches; edge patches are
    padded. Each patch keeps the annotations it contains, translated."""
    p = spec.patch_size
    out = []
    for ov in _grid_offsets(sample.height, p, spec.stride):
        for ou in _grid_offsets(sample.width, p, spec.stride):
            tile = sample.image[ov : ov + p, ou : ou + p]
            if tile.shape[0] != p or tile.shape[1] != p:
                tile = np.pad(
                    tile,
                    ((0, p - tile.shape[0]), (0, p - tile.shape[1]), (0, 0)),
                    mode=spec.pad_mode,
                )
            if sample.num_nuclei:
                u, v = sample.centroids[:, 0], sample.centroids[:, 1]
                keep = (u >= ou) & (u < ou + p) & (v >= ov) & (v < ov + p)
                coords = sample.centroids[keep] - np.array([ou, ov], dtype=np.float64)
                classes = sample.classes[keep]
            else:
                coords, classes = sample.centroids, sample.classes
            out.append(
                (AnnotatedSample(tile.copy(), sample.dataset_id, coords, classes), (ou, ov))
            )
    return out


# ----------------------------------------------------------------- inference


def dedup_points(preds: list[tuple[float, float, int, float]], radius: float) -> list[tuple[float, float, int, float]]:
    """Greedy confidence-ordered suppression: keep a point unless a
    higher-confidence kept point lies strictly within ``radius``."""
    ordered = sorted(preds, key=lambda p: (-p[3], p[0], p[1], p[2]))
    kept: list[tuple[float, float, int, float]] = []
    for u, v, c, s in ordered:
        if all((u - ku) ** 2 + (v - kv) ** 2 >= radius**2 for ku, kv, _, _ in kept):
            kept.append((u, v, c, s))
    return kept


def sliding_window_infer(
    model,
    image: np.ndarray,
    d: int,
    spec: SliceSpec,
    *,
    merge_radius: float | None = None,
    confidence_threshold: float = 0.5,
    k: int | None = None,
) -> list[tuple[float, float, int, float]]:
    """Tile the image, predict per patch, translate back, then deduplicate
    across overlaps. The merge radius defaults to the dataset's matching radius."""
    if merge_radius is None:
        merge_radius = model.registry.descriptor(d).radius_px
    h, w = image.shape[:2]
    p = spec.patch_size
    collected: list[tuple[float, float, int, float]] = []
    for ov in _grid_offsets(h, p, spec.stride):
        for ou in _grid_offsets(w, p, spec.stride):
            tile = image[ov : ov + p, ou : ou + p]
            if tile.shape[0] != p or tile.shape[1] != p:
                tile = np.pad(tile, ((0, p - tile.shape[0]), (0, p - tile.shape[1]), (0, 0)), mode=spec.pad_mode)
            for u, v, c, s in model.predict(tile, d, confidence_threshold, k=k):
                au, av = u + ou, v + ov
                if au < w and av < h:
                    collected.append((au, av, c, s))
    return dedup_points(collected, merge_radius)


# ----------------------------------------------------------------- synthesis

CLASS_PALETTE: tuple[tuple[int, int, int], ...] = (
    (215, 55, 55),
    (55, 115, 210),
    (60, 170, 80),
    (225, 175, 45),
    (150, 70, 195),
    (235, 120, 45),
    (50, 190, 190),
    (200, 80, 160),
    (120, 120, 50),
    (85, 85, 215),
    (150, 215, 55),
)


@dataclass(frozen=True)
class SynthDatasetSpec:
    name: str
    classes: tuple[str, ...]
    n_images: int = 40
    image_size: int = 96
    nuclei_range: tuple[int, int] = (3, 8)
    radius_range: tuple[float, float] = (4.0, 7.0)
    radius_px: float = 6.0
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.nuclei_range[0] > self.nuclei_range[1] or self.nuclei_range[0] < 0:
            raise ConfigError(f"bad nuclei_range {self.nuclei_range}")
        if not 0 < self.radius_range[0] <= self.radius_range[1]:
            raise ConfigError(f"bad radius_range {self.radius_range}")
        if self.class_weights is not None and len(self.class_weights) != len(self.classes):
            raise ConfigError("class_weights length must match classes")


@dataclass(frozen=True)
class SynthSpec:
    datasets: tuple[SynthDatasetSpec, ...]
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        try:
            datasets = tuple(
                SynthDatasetSpec(
                    name=entry["name"],
                    classes=tuple(entry["classes"]),
                    n_images=int(entry.get("n_images", 40)),
                    image_size=int(entry.get("image_size", 96)),
                    nuclei_range=tuple(entry.get("nuclei_range", (3, 8))),
                    radius_range=tuple(entry.get("radius_range", (4.0, 7.0))),
                    radius_px=float(entry.get("radius_px", 6.0)),
                    class_weights=tuple(entry["class_weights"]) if "class_weights" in entry else None,
                )
                for entry in doc["datasets"]
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed synthesis spec: {exc}") from exc
        return cls(datasets=datasets, seed=int(doc.get("seed", 0)))


def _paint_blob(image: np.ndarray, cu: float, cv: float, r: float, color: np.ndarray, rng: np.random.Generator):
    h, w = image.shape[:2]
    y, x = np.ogrid[:h, :w]
    dist = np.sqrt((x - cu) ** 2 + (y - cv) ** 2)
    body = dist <= r
    rim = (dist <= r) & (dist >= r - 1.5)
    noise = rng.normal(0, 8, size=(int(body.sum()), 3))
    image[body] = np.clip(color[None, :] + noise, 0, 255).astype(np.uint8)
    image[rim] = np.clip(color * 0.55, 0, 255).astype(np.uint8)


def _synth_image(
    ds_spec: SynthDatasetSpec,
    dataset_id: int,
    palette: dict[str, np.ndarray],
    rng: np.random.Generator,
) -> AnnotatedSample:
    size = ds_spec.image_size
    image = np.clip(rng.normal(228, 6, size=(size, size, 3)), 0, 255).astype(np.uint8)
    n_target = int(rng.integers(ds_spec.nuclei_range[0], ds_spec.nuclei_range[1] + 1))
    weights = ds_spec.class_weights
    probs = None if weights is None else np.asarray(weights, dtype=np.float64) / sum(weights)
    centers: list[tuple[float, float, float]] = []
    coords, classes = [], []
    for _ in range(n_target):
        placed = False
        for _attempt in range(200):
            r = rng.uniform(*ds_spec.radius_range)
            cu = rng.uniform(r + 1, size - r - 1)
            cv = rng.uniform(r + 1, size - r - 1)
            if all((cu - pu) ** 2 + (cv - pv) ** 2 >= (r + pr + 3) ** 2 for pu, pv, pr in centers):
                placed = True
                break
        if not placed:
            raise DataError(
                f"cannot place {n_target} non-overlapping blobs of radius {ds_spec.radius_range} "
                f"in a {size}x{size} image"
            )
        c = int(rng.choice(len(ds_spec.classes), p=probs))
        _paint_blob(image, cu, cv, r, palette[ds_spec.classes[c]], rng)
        centers.append((cu, cv, r))
        coords.append((cu, cv))
        classes.append(c)
    return AnnotatedSample(
        image=image,
        dataset_id=dataset_id,
        centroids=np.asarray(coords, dtype=np.float64).reshape(-1, 2),
        classes=np.asarray(classes, dtype=np.int64),
    )


def synth_registry(spec: SynthSpec) -> CategoryRegistry:
    descriptors = [
        DatasetDescriptor(id=i, name=ds.name, category_names=ds.classes, radius_px=ds.radius_px)
        for i, ds in enumerate(spec.datasets)
    ]
    return build_registry(descriptors)


def synth_generate(spec: SynthSpec, out_dir: str | Path, n_images: int | None = None) -> Path:
    """Generate the synthetic datasets to disk; returns the manifest path.

    Blob colors are assigned per canonical class name, so a class shared by
    two datasets renders identically in both. Deterministic per spec.seed.
    """
    registry = synth_registry(spec)
    palette = {
        name: np.asarray(CLASS_PALETTE[g % len(CLASS_PALETTE)], dtype=np.float64)
        for g, name in enumerate(registry.global_names)
    }
    samples: list[AnnotatedSample] = []
    for di, ds_spec in enumerate(spec.datasets):
        count = ds_spec.n_images if n_images is None else n_images
        for i in range(count):
            rng = np.random.default_rng([spec.seed, di, i])
            samples.append(_synth_image(ds_spec, di, palette, rng))
    return save_dataset(out_dir, registry, samples)
