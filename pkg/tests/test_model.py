from __future__ import annotations

import numpy as np
import pytest
import torch

from nucdet.denoise import NoiseConfig, gen_noised_annotations
from nucdet.errors import ConfigError, DataError
from nucdet.model import (
    ConvBackbone,
    HeadOutput,
    MultiScaleFeatures,
    NucleusDetector,
    WindowedLevelAttention,
    sine_position_encoding,
)
from nucdet.prompts import PromptConditioner
from nucdet.registry import build_preset_registry


def tiny_model(registry, *, decoder_layers=2, prompt_mode="feature", num_queries=20, window=2):
    prompt = None
    if prompt_mode != "off":
        prompt = PromptConditioner(registry, dim=32, n_ctx=2, seq_len=8, n_layers=1)
    return NucleusDetector(
        registry,
        dim=32,
        num_queries=num_queries,
        encoder_layers=2,
        decoder_layers=decoder_layers,
        n_heads=4,
        ffn_dim=64,
        backbone_channels=(8, 16, 16, 24),
        window_radius=window,
        prompt_mode=prompt_mode,
        prompt=prompt,
    )


def _image(rng, size=64):
    return rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)


# ----------------------------------------------------------------- backbone


def test_backbone_stride_arithmetic(two_dataset_registry):
    model = tiny_model(two_dataset_registry)
    image = model.prepare_image(_image(np.random.default_rng(0), 256))
    feats = model.backbone_forward(image)
    assert feats.level_sizes == [(8, 8), (16, 16), (32, 32)]  # coarse to fine
    assert feats.num_tokens == 64 + 256 + 1024
    assert feats.tokens.shape[1] == 32


def test_backbone_rejects_bad_sizes(two_dataset_registry):
    model = tiny_model(two_dataset_registry)
    with pytest.raises(DataError, match="divisible"):
        model.backbone_forward(torch.zeros(1, 3, 96, 100))
    with pytest.raises(DataError, match="smaller"):
        model.backbone_forward(torch.zeros(1, 3, 16, 16))


def test_backbone_deterministic_under_seed(two_dataset_registry):
    torch.manual_seed(7)
    m1 = tiny_model(two_dataset_registry)
    torch.manual_seed(7)
    m2 = tiny_model(two_dataset_registry)
    img = _image(np.random.default_rng(1))
    t = m1.prepare_image(img)
    assert torch.equal(m1.backbone_forward(t).tokens, m2.backbone_forward(t).tokens)


def test_gradient_reaches_first_conv_stage(two_dataset_registry):
    model = tiny_model(two_dataset_registry)
    t = model.prepare_image(_image(np.random.default_rng(2)))
    feats = model.backbone_forward(t)
    feats.tokens.sum().backward()
    first_conv = model.backbone.stage1[0]
    assert first_conv.weight.grad is not None
    assert first_conv.weight.grad.abs().sum() > 0


def test_flatten_unflatten_round_trip(two_dataset_registry):
    model = tiny_model(two_dataset_registry)
    t = model.prepare_image(_image(np.random.default_rng(3)))
    feats = model.backbone_forward(t)
    for lvl, (h, w) in enumerate(feats.level_sizes):
        grid = feats.unflatten(lvl)
        assert grid.shape == (h, w, 32)
        sel = feats.level_ids == lvl
        assert torch.equal(grid.reshape(-1, 32), feats.tokens[sel])


# ------------------------------------------------------------------ encoder


def test_encoder_preserves_token_count(two_dataset_registry):
    model = tiny_model(two_dataset_registry)
    t = model.prepare_image(_image(np.random.default_rng(4)))
    feats = model.backbone_forward(t)
    out = model.encoder_forward(feats)
    assert out.shape == feats.tokens.shape
    assert not torch.allclose(out, feats.tokens)  # non-identity


def test_encoder_equivariant_to_level_permutation(two_dataset_registry):
    model = tiny_model(two_dataset_registry)
    t = model.prepare_image(_image(np.random.default_rng(5)))
    feats = model.backbone_forward(t)
    perm = torch.randperm(feats.num_tokens)
    permuted = MultiScaleFeatures(
        tokens=feats.tokens[perm],
        centers=feats.centers[perm],
        level_ids=feats.level_ids[perm],
        grid_rows=feats.grid_rows[perm],
        grid_cols=feats.grid_cols[perm],
        level_sizes=feats.level_sizes,
    )
    out = model.encoder_forward(feats)
    out_perm = model.encoder_forward(permuted)
    assert torch.allclose(out[perm], out_perm, atol=1e-5)


def test_window_mask_structure(two_dataset_registry):
    model = tiny_model(two_dataset_registry, window=1)
    t = model.prepare_image(_image(np.random.default_rng(6)))
    feats = model.backbone_forward(t)
    mask = WindowedLevelAttention(1).build_mask(feats)
    lvl = feats.level_ids
    cross = lvl[:, None] != lvl[None, :]
    assert (mask[cross] == 0).all()  # cross-level exchange unrestricted
    far = (feats.grid_rows[:, None] - feats.grid_rows[None, :]).abs() > 1
    assert (mask[far & ~cross] < 0).all()
    assert WindowedLevelAttention(None).build_mask(feats) is None


# ------------------------------------------------------------- first stage


def test_first_stage_topk_matches_sort_oracle(two_dataset_registry):
    model = tiny_model(two_dataset_registry)
    t = model.prepare_image(_image(np.random.default_rng(7)))
    feats = model.backbone_forward(t)
    memory = model.encoder_forward(feats)
    selected, refs = model.first_stage_select(memory, feats, d=0, k=15)
    assert len(selected) == 15
    assert refs.shape == (15, 2)
    # independent recompute of the ranking
    head = model.first_stage_heads[0]
    with torch.no_grad():
        full = head(memory, feats.centers)
        scores = torch.softmax(full.logits, dim=-1)[:, : head.n_classes].max(dim=-1).values
    oracle = np.sort(scores.numpy())[::-1][:15]
    chosen = np.sort(torch.softmax(selected.logits, -1)[:, : head.n_classes].max(-1).values.detach().numpy())[::-1]
    assert np.allclose(oracle, chosen, atol=1e-7)


def test_first_stage_ranking_shift_invariant(two_dataset_registry):
    model = tiny_model(two_dataset_registry)
    t = model.prepare_image(_image(np.random.default_rng(8)))
    feats = model.backbone_forward(t)
    memory = model.encoder_forward(feats)
    _, refs_before = model.first_stage_select(memory, feats, d=0, k=10)
    with torch.no_grad():
        model.first_stage_heads[0].cls.bias += 3.0  # constant shift on every logit
    _, refs_after = model.first_stage_select(memory, feats, d=0, k=10)
    assert torch.equal(refs_before, refs_after)


def test_first_stage_k_too_large(two_dataset_registry):
    model = tiny_model(two_dataset_registry)
    t = model.prepare_image(_image(np.random.default_rng(9)))
    feats = model.backbone_forward(t)
    memory = model.encoder_forward(feats)
    with pytest.raises(ConfigError, match="exceeds"):
        model.first_stage_select(memory, feats, d=0, k=feats.num_tokens + 1)


# ------------------------------------------------------------------ decoder


def test_zero_init_offsets_keep_reference_points(two_dataset_registry):
    model = tiny_model(two_dataset_registry, decoder_layers=1)
    refs = torch.rand(6, 2) * 0.8 + 0.1
    content = torch.randn(6, 32)
    memory = torch.randn(40, 32)
    memory_pos = torch.randn(40, 32)
    outputs = model.decoder_forward(content, refs, memory, memory_pos, d=0)
    # offset branches are zero-initialized, so layer-1 coordinates equal the inputs
    assert torch.allclose(outputs[0].coords, refs, atol=1e-6)


def test_decoder_emits_one_output_per_layer(two_dataset_registry):
    model = tiny_model(two_dataset_registry, decoder_layers=3)
    outputs = model.decoder_forward(torch.randn(5, 32), torch.rand(5, 2), torch.randn(30, 32), torch.randn(30, 32), 0)
    assert len(outputs) == 3


def test_refined_coordinates_stay_in_unit_square(two_dataset_registry):
    model = tiny_model(two_dataset_registry, decoder_layers=3)
    # break the zero offset init so refinement actually moves
    for heads in model.decoder_heads:
        for h in heads:
            torch.nn.init.normal_(h.coord.layers[-1].weight, std=0.5)
            torch.nn.init.normal_(h.coord.layers[-1].bias, std=0.5)
    rng = np.random.default_rng(10)
    for _ in range(40):
        refs = torch.rand(8, 2)
        outputs = model.decoder_forward(
            torch.randn(8, 32), refs, torch.randn(25, 32), torch.randn(25, 32), int(rng.integers(0, 2))
        )
        for out in outputs:
            assert (out.coords >= 0).all() and (out.coords <= 1).all()


# -------------------------------------------------------------------- heads


def test_head_width_matches_dataset(paper_registry):
    model = tiny_model(paper_registry)
    consep = paper_registry.dataset_by_name("CoNSeP")
    head = model.first_stage_heads[consep.id]
    assert head.cls.out_features == 4  # three classes + no-object
    monusac = paper_registry.dataset_by_name("MoNuSAC")
    assert model.decoder_heads[0][monusac.id].cls.out_features == 5


def test_head_parameter_isolation(two_dataset_registry):
    model = tiny_model(two_dataset_registry)
    img = _image(np.random.default_rng(11), 64)
    with torch.no_grad():
        before = model.forward_train(img, 1, None)["layers"][-1]["candidates"]
        # perturb every dataset-0 head
        for head in [model.first_stage_heads[0]] + [hs[0] for hs in model.decoder_heads]:
            for p in head.parameters():
                p.add_(1.0)
        after = model.forward_train(img, 1, None)["layers"][-1]["candidates"]
    assert torch.equal(before.coords, after.coords)
    assert torch.equal(before.logits, after.logits)


def test_deep_supervision_heads_differ_across_layers(two_dataset_registry):
    model = tiny_model(two_dataset_registry, decoder_layers=2)
    x = torch.randn(5, 32)
    refs = torch.rand(5, 2)
    out0 = model.decoder_heads[0][0](x, refs)
    out1 = model.decoder_heads[1][0](x, refs)
    assert not torch.allclose(out0.logits, out1.logits)


def test_head_count_contract(two_dataset_registry):
    model = tiny_model(two_dataset_registry, decoder_layers=3)
    heads = model.head_modules()
    d = two_dataset_registry.num_datasets
    assert len(heads) == d * (1 + 3)
    branches = [m for h in heads for m in (h.cls, h.coord)]
    assert len(branches) == 2 * d * (1 + 3)
    # disjoint parameters across heads
    ids = [id(p) for h in heads for p in h.parameters()]
    assert len(ids) == len(set(ids))


# ------------------------------------------------------------------ predict


def test_predict_threshold_above_one_is_empty(two_dataset_registry):
    model = tiny_model(two_dataset_registry)
    preds = model.predict(_image(np.random.default_rng(12)), 0, confidence_threshold=1.01)
    assert preds == []


def test_predict_threshold_zero_returns_k(two_dataset_registry):
    model = tiny_model(two_dataset_registry, num_queries=12)
    preds = model.predict(_image(np.random.default_rng(13)), 0, confidence_threshold=0.0)
    assert len(preds) == 12
    for u, v, c, conf in preds:
        assert 0 <= u < 64 and 0 <= v < 64
        assert 0 <= c < 3  # no-object never emitted
        assert 0 <= conf <= 1


def test_predict_pads_arbitrary_sizes(two_dataset_registry):
    model = tiny_model(two_dataset_registry, num_queries=12)
    image = np.random.default_rng(14).integers(0, 255, size=(70, 50, 3), dtype=np.uint8)
    preds = model.predict(image, 0, confidence_threshold=0.0)
    for u, v, _, _ in preds:
        assert 0 <= u < 50 and 0 <= v < 70


def test_inference_path_has_no_denoising_queries(two_dataset_registry):
    model = tiny_model(two_dataset_registry, num_queries=10)
    out = model.forward_train(_image(np.random.default_rng(15)), 0, noised=None)
    assert out["n_cdn"] == 0
    for entry in out["layers"]:
        assert "cdn_pos" not in entry
        assert len(entry["candidates"]) == 10


# ----------------------------------------------------------- wiring / grads


def test_cdn_queries_join_training_pass(two_dataset_registry):
    rng = np.random.default_rng(16)
    model = tiny_model(two_dataset_registry, num_queries=10)
    coords = rng.uniform(10, 50, size=(3, 2))
    classes = rng.integers(0, 3, size=3)
    noised = gen_noised_annotations(coords, classes, 3, (64, 64), NoiseConfig(n_groups=2), rng)
    out = model.forward_train(_image(rng), 0, noised)
    assert out["n_cdn"] == 12
    entry = out["layers"][0]
    assert len(entry["cdn_pos"]) == 6
    assert len(entry["cdn_neg"]) == 6
    assert len(entry["candidates"]) == 10


def test_query_mode_leaves_features_untouched(two_dataset_registry):
    torch.manual_seed(42)
    model_q = tiny_model(two_dataset_registry, prompt_mode="query")
    img = _image(np.random.default_rng(17))
    t = model_q.prepare_image(img)
    feats = model_q.backbone_forward(t)
    memory = model_q.encoder_forward(feats)
    # in query mode the trunk memory is exactly the encoder output
    out = model_q.forward_train(img, 0, None)
    assert out is not None
    enhanced = model_q.prompt(model_q.content_queries, 0)
    assert not torch.allclose(enhanced, model_q.content_queries)
    assert torch.equal(memory, model_q.encoder_forward(feats))


def test_end_to_end_gradient_reachability(two_dataset_registry):
    from nucdet.losses import LossWeights, total_loss

    rng = np.random.default_rng(18)
    model = tiny_model(two_dataset_registry, num_queries=10)
    coords = rng.uniform(10, 50, size=(2, 2))
    classes = np.array([0, 1])
    noised = gen_noised_annotations(coords, classes, 3, (64, 64), NoiseConfig(n_groups=1), rng)
    out = model.forward_train(_image(rng), 0, noised)
    gt = torch.tensor(coords / 64.0, dtype=torch.float32)
    breakdown = total_loss(out, gt, torch.tensor(classes), 0, two_dataset_registry, LossWeights())
    breakdown.total.backward()
    assert model.backbone.stage1[0].weight.grad.abs().sum() > 0
    assert model.prompt.tables.ctx_dataset.grad.abs().sum() > 0
    assert model.content_queries.grad.abs().sum() > 0
    assert model.label_embeddings[0].weight.grad.abs().sum() > 0


def test_sine_position_encoding_shape_and_range():
    coords = torch.rand(10, 2)
    pe = sine_position_encoding(coords, 32)
    assert pe.shape == (10, 32)
    assert (pe >= -1).all() and (pe <= 1).all()
