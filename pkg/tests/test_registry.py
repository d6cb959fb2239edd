from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nucdet.errors import DataError
from nucdet.registry import (
    AnnotatedSample,
    CategoryRegistry,
    DatasetDescriptor,
    build_preset_registry,
    build_registry,
    canonical_name,
    validate_sample,
)


def test_single_dataset_identity():
    reg = build_registry([DatasetDescriptor(0, "solo", ("inflammatory", "epithelial", "stromal"), 6.0)])
    assert reg.num_categories == 3
    assert reg.visible_sets[0] == frozenset({0, 1, 2})
    assert reg.local_to_global(0, 0) == 0


def test_two_datasets_share_one_name():
    reg = build_registry(
        [
            DatasetDescriptor(0, "a", ("epithelial", "lymphocyte"), 6.0),
            DatasetDescriptor(1, "b", ("epithelial", "tumor-cell"), 6.0),
        ]
    )
    assert reg.num_categories == 3
    assert reg.visible_sets[0] == frozenset({0, 1})
    assert reg.visible_sets[1] == frozenset({0, 2})


def test_paper_presets_union_is_eleven(paper_registry):
    # hand union of the four benchmark label lists under identity normalization
    names = set()
    for ds in paper_registry.datasets:
        names |= set(ds.category_names)
    assert len(names) == 11
    assert paper_registry.num_categories == 11
    # shared names resolve to one global index
    monusac = paper_registry.dataset_by_name("MoNuSAC")
    consep = paper_registry.dataset_by_name("CoNSeP")
    g_mon = paper_registry.local_to_global(monusac.id, monusac.category_names.index("epithelial"))
    g_con = paper_registry.local_to_global(consep.id, consep.category_names.index("epithelial"))
    assert g_mon == g_con


def test_lizard_connective_not_visible_in_consep(paper_registry):
    lizard = paper_registry.dataset_by_name("Lizard")
    g = paper_registry.local_to_global(lizard.id, lizard.category_names.index("connective"))
    consep = paper_registry.dataset_by_name("CoNSeP")
    assert g not in paper_registry.visible_sets[consep.id]


def test_ocelot_radius_is_fifteen(paper_registry):
    assert paper_registry.dataset_by_name("OCELOT").radius_px == 15.0
    assert paper_registry.dataset_by_name("CoNSeP").radius_px == 6.0


def test_canonical_name_synonyms():
    assert canonical_name("Lymphocytes") == "lymphocyte"
    assert canonical_name("  Connective Tissue Cells ") == "connective"
    assert canonical_name("stromal") == "stromal"
    # distinct concepts stay distinct
    assert canonical_name("stromal") != canonical_name("connective")


def test_duplicate_dataset_names_rejected():
    with pytest.raises(DataError, match="duplicate dataset names"):
        build_registry(
            [
                DatasetDescriptor(0, "same", ("epithelial",), 6.0),
                DatasetDescriptor(1, "same", ("stromal",), 6.0),
            ]
        )


def test_empty_category_list_rejected():
    with pytest.raises(DataError, match="empty category list"):
        DatasetDescriptor(0, "bad", (), 6.0)


def test_noncontiguous_ids_rejected():
    with pytest.raises(DataError, match="contiguous"):
        build_registry([DatasetDescriptor(3, "a", ("epithelial",), 6.0)])


names_strategy = st.lists(
    st.sampled_from("alpha beta gamma delta epsilon zeta eta theta".split()),
    min_size=1,
    max_size=6,
    unique=True,
)


@settings(max_examples=60, deadline=None)
@given(st.lists(names_strategy, min_size=1, max_size=4))
def test_round_trip_and_counting_invariants(category_lists):
    descriptors = [
        DatasetDescriptor(i, f"d{i}", tuple(cats), 6.0) for i, cats in enumerate(category_lists)
    ]
    reg = build_registry(descriptors)
    for d, ds in enumerate(reg.datasets):
        assert len(reg.visible_sets[d]) == ds.num_classes
        for c in range(ds.num_classes):
            g = reg.local_to_global(d, c)
            assert g in reg.visible_sets[d]
            assert reg.global_to_local(d, g) == c
    # every global index appears in at least one visible set
    covered = set().union(*reg.visible_sets)
    assert covered == set(range(reg.num_categories))
    assert sum(len(s) for s in reg.visible_sets) >= reg.num_categories
    assert sum(len(s) for s in reg.visible_sets) == sum(ds.num_classes for ds in reg.datasets)


def test_build_registry_deterministic_in_descriptor_order():
    descriptors = [
        DatasetDescriptor(0, "a", ("epithelial", "lymphocyte"), 6.0),
        DatasetDescriptor(1, "b", ("tumor-cell", "epithelial"), 6.0),
    ]
    assert build_registry(descriptors).global_names == build_registry(descriptors).global_names
    assert build_registry(descriptors).global_names == ("epithelial", "lymphocyte", "tumor-cell")


def test_registry_json_round_trip(tmp_path, paper_registry):
    path = tmp_path / "registry.json"
    paper_registry.save(path)
    loaded = CategoryRegistry.load(path)
    assert loaded.global_names == paper_registry.global_names
    assert loaded.visible_sets == paper_registry.visible_sets
    assert loaded.datasets == paper_registry.datasets


def _sample(image_size=32, centroids=(), classes=(), dataset_id=0):
    return AnnotatedSample(
        image=np.zeros((image_size, image_size, 3), dtype=np.uint8),
        dataset_id=dataset_id,
        centroids=np.asarray(centroids, dtype=np.float64).reshape(-1, 2),
        classes=np.asarray(classes, dtype=np.int64),
    )


def test_validate_sample_empty_is_ok(two_dataset_registry):
    assert validate_sample(_sample(), two_dataset_registry) == []


def test_validate_sample_out_of_bounds(two_dataset_registry):
    sample = _sample(centroids=[(35.0, 5.0)], classes=[0])
    problems = validate_sample(sample, two_dataset_registry)
    assert len(problems) == 1 and "outside" in problems[0]


def test_validate_sample_class_range(two_dataset_registry):
    sample = _sample(centroids=[(5.0, 5.0)], classes=[3])  # t_d = 3 for dataset 0
    problems = validate_sample(sample, two_dataset_registry)
    assert len(problems) == 1 and "class index" in problems[0]
