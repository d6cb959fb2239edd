"""Multi-dataset data model: dataset descriptors, the union category space,
per-dataset visibility sets, and annotation validation.

Category names are normalized through a small synonym table shipped as data
(``resources/synonyms.json``) so that the same concept annotated under a
plural or verbose form ("lymphocytes", "connective tissue cells") collapses
to one canonical name. Distinct names stay distinct; any cross-name merging
is a preset choice, never done implicitly here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

__all__ = [
    "DatasetDescriptor",
    "CategoryRegistry",
    "AnnotatedSample",
    "canonical_name",
    "build_registry",
    "build_preset_registry",
    "validate_sample",
    "PRESET_DATASETS",
]


@lru_cache(maxsize=1)
def _synonym_table() -> dict[str, str]:
    text = resources.files("nucdet.resources").joinpath("synonyms.json").read_text()
    return json.loads(text)


def canonical_name(name: str) -> str:
    """Lowercase, collapse whitespace, and resolve known synonyms."""
    norm = " ".join(name.strip().lower().split())
    return _synonym_table().get(norm, norm)


@dataclass(frozen=True)
class DatasetDescriptor:
    """One annotated data source: its label set, matching radius, and loss weight."""

    id: int
    name: str
    category_names: tuple[str, ...]
    radius_px: float
    loss_weight: float = 1.0

    def __post_init__(self):
        canon = tuple(canonical_name(c) for c in self.category_names)
        object.__setattr__(self, "category_names", canon)
        if len(canon) == 0:
            raise DataError(f"dataset {self.name!r}: empty category list")
        if len(set(canon)) != len(canon):
            raise DataError(f"dataset {self.name!r}: duplicate category names after normalization: {canon}")
        if self.radius_px <= 0:
            raise DataError(f"dataset {self.name!r}: radius_px must be > 0, got {self.radius_px}")
        if self.loss_weight < 0:
            raise DataError(f"dataset {self.name!r}: loss_weight must be >= 0, got {self.loss_weight}")

    @property
    def num_classes(self) -> int:
        return len(self.category_names)


@dataclass(frozen=True)
class CategoryRegistry:
    """The union category space over a list of datasets.

    ``global_names`` is the deduplicated union in first-seen order;
    ``visible_sets[d]`` holds the global indices annotated in dataset d;
    ``local_to_global_maps[d][c]`` maps a local class index to its global index.
    """

    datasets: tuple[DatasetDescriptor, ...]
    global_names: tuple[str, ...]
    visible_sets: tuple[frozenset[int], ...]
    local_to_global_maps: tuple[tuple[int, ...], ...]
    _global_to_local: tuple[dict[int, int], ...] = field(repr=False, default=())

    @property
    def num_datasets(self) -> int:
        return len(self.datasets)

    @property
    def num_categories(self) -> int:
        return len(self.global_names)

    def descriptor(self, d: int) -> DatasetDescriptor:
        if not 0 <= d < self.num_datasets:
            raise DataError(f"unknown dataset id {d} (have {self.num_datasets} datasets)")
        return self.datasets[d]

    def dataset_by_name(self, name: str) -> DatasetDescriptor:
        wanted = name.strip().lower()
        for ds in self.datasets:
            if ds.name.lower() == wanted:
                return ds
        raise DataError(f"unknown dataset {name!r}; registry has {[d.name for d in self.datasets]}")

    def local_to_global(self, d: int, c: int) -> int:
        ds = self.descriptor(d)
        if not 0 <= c < ds.num_classes:
            raise DataError(f"dataset {ds.name!r}: local class {c} out of range [0, {ds.num_classes})")
        return self.local_to_global_maps[d][c]

    def global_to_local(self, d: int, g: int) -> int:
        self.descriptor(d)
        try:
            return self._global_to_local[d][g]
        except KeyError:
            raise DataError(
                f"global class {g} ({self.global_names[g] if 0 <= g < self.num_categories else '?'}) "
                f"is not visible in dataset {self.datasets[d].name!r}"
            ) from None

    def class_names(self, d: int) -> tuple[str, ...]:
        return self.descriptor(d).category_names

    def to_json_dict(self) -> dict:
        return {
            "datasets": [
                {
                    "id": ds.id,
                    "name": ds.name,
                    "categories": list(ds.category_names),
                    "radius_px": ds.radius_px,
                    "loss_weight": ds.loss_weight,
                }
                for ds in self.datasets
            ],
            "global_names": list(self.global_names),
            "visible_sets": [sorted(s) for s in self.visible_sets],
            "local_to_global": [list(m) for m in self.local_to_global_maps],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "CategoryRegistry":
        try:
            descriptors = [
                DatasetDescriptor(
                    id=entry["id"],
                    name=entry["name"],
                    category_names=tuple(entry["categories"]),
                    radius_px=entry["radius_px"],
                    loss_weight=entry.get("loss_weight", 1.0),
                )
                for entry in doc["datasets"]
            ]
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed registry document: missing field {exc}") from exc
        registry = build_registry(descriptors)
        stored = doc.get("global_names")
        if stored is not None and tuple(stored) != registry.global_names:
            raise DataError(
                "registry document is inconsistent: stored global order "
                f"{stored} != rebuilt order {list(registry.global_names)}"
            )
        return registry

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CategoryRegistry":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_json_dict(doc)


def build_registry(descriptors: Sequence[DatasetDescriptor]) -> CategoryRegistry:
    """Build the union category space. Global order is first-seen across descriptors."""
    if not descriptors:
        raise DataError("build_registry: descriptor list is empty")
    names = [d.name for d in descriptors]
    if len(set(n.lower() for n in names)) != len(names):
        raise DataError(f"duplicate dataset names: {names}")
    for i, d in enumerate(descriptors):
        if d.id != i:
            raise DataError(f"dataset ids must be contiguous 0..D-1 in order; got id {d.id} at position {i}")

    global_names: list[str] = []
    index_of: dict[str, int] = {}
    for ds in descriptors:
        for cat in ds.category_names:
            if cat not in index_of:
                index_of[cat] = len(global_names)
                global_names.append(cat)

    maps = tuple(tuple(index_of[c] for c in ds.category_names) for ds in descriptors)
    visible = tuple(frozenset(m) for m in maps)
    inverse = tuple({g: c for c, g in enumerate(m)} for m in maps)
    return CategoryRegistry(
        datasets=tuple(descriptors),
        global_names=tuple(global_names),
        visible_sets=visible,
        local_to_global_maps=maps,
        _global_to_local=inverse,
    )


# Matching radii: 15 px for OCELOT, 6 px for the other three benchmarks.
PRESET_DATASETS: dict[str, dict] = {
    "consep": {
        "name": "CoNSeP",
        "categories": ("inflammatory", "epithelial", "stromal"),
        "radius_px": 6.0,
    },
    "monusac": {
        "name": "MoNuSAC",
        "categories": ("epithelial", "lymphocyte", "neutrophil", "macrophage"),
        "radius_px": 6.0,
    },
    "lizard": {
        "name": "Lizard",
        "categories": ("epithelial", "connective", "lymphocyte", "plasma", "neutrophil", "eosinophil"),
        "radius_px": 6.0,
    },
    "ocelot": {
        "name": "OCELOT",
        "categories": ("background-cell", "tumor-cell"),
        "radius_px": 15.0,
    },
}


def build_preset_registry(names: Iterable[str] | None = None) -> CategoryRegistry:
    """Registry over the bundled benchmark presets (all four by default)."""
    keys = [n.lower() for n in names] if names is not None else list(PRESET_DATASETS)
    descriptors = []
    for i, key in enumerate(keys):
        if key not in PRESET_DATASETS:
            raise DataError(f"unknown preset {key!r}; available: {sorted(PRESET_DATASETS)}")
        preset = PRESET_DATASETS[key]
        descriptors.append(
            DatasetDescriptor(
                id=i,
                name=preset["name"],
                category_names=preset["categories"],
                radius_px=preset["radius_px"],
            )
        )
    return build_registry(descriptors)


@dataclass
class AnnotatedSample:
    """An image with centroid annotations in its dataset's local class space.

    Coordinates are pixels, origin top-left, u = column, v = row.
    """

    image: np.ndarray
    dataset_id: int
    centroids: np.ndarray
    classes: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 2)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)

    @property
    def num_nuclei(self) -> int:
        return len(self.centroids)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def validate_sample(sample: AnnotatedSample, registry: CategoryRegistry) -> list[str]:
    """Check all AnnotatedSample invariants; returns diagnostics, never raises on data errors."""
    problems: list[str] = []
    tag = sample.source or "<sample>"
    if sample.image.ndim != 3 or sample.image.shape[2] != 3:
        problems.append(f"{tag}: image must be HxWx3, got shape {sample.image.shape}")
        return problems
    if sample.image.dtype != np.uint8:
        problems.append(f"{tag}: image dtype must be uint8, got {sample.image.dtype}")
    if not 0 <= sample.dataset_id < registry.num_datasets:
        problems.append(f"{tag}: dataset_id {sample.dataset_id} not in [0, {registry.num_datasets})")
        return problems
    ds = registry.datasets[sample.dataset_id]
    if len(sample.centroids) != len(sample.classes):
        problems.append(
            f"{tag}: {len(sample.centroids)} centroids but {len(sample.classes)} class labels"
        )
    h, w = sample.image.shape[:2]
    for j, (u, v) in enumerate(sample.centroids):
        if not (0 <= u < w and 0 <= v < h):
            problems.append(f"{tag}: centroid {j} at ({u}, {v}) outside [0,{w})x[0,{h})")
        if not (np.isfinite(u) and np.isfinite(v)):
            problems.append(f"{tag}: centroid {j} has non-finite coordinates")
    for j, c in enumerate(sample.classes):
        if not 0 <= c < ds.num_classes:
            problems.append(f"{tag}: class index {c} at position {j} not in [0, {ds.num_classes})")
    return problems
