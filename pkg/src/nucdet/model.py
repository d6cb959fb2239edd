"""Detection trunk: a small convolutional pyramid backbone, a multi-scale
transformer encoder, two-stage top-k query selection, a decoder with
iterative centroid refinement and deep supervision, and per-dataset
detection/classification heads.

Everything except the heads is shared across datasets. Attention over the
multi-scale tokens uses a dense fallback with per-level locality windows and
full cross-level exchange; the mask builder is a seam where sparse sampling
strategies can be substituted without touching the rest of the trunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
from torch import nn

from .denoise import NoisedAnnotations, cdn_group_mask
from .errors import ConfigError, DataError
from .prompts import PromptConditioner
from .registry import CategoryRegistry

__all__ = [
    "MultiScaleFeatures",
    "HeadOutput",
    "ConvBackbone",
    "WindowedLevelAttention",
    "NucleusDetector",
    "sine_position_encoding",
    "inverse_sigmoid",
]

COARSEST_STRIDE = 32


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=eps, max=1 - eps)
    return torch.log(x / (1 - x))


def sine_position_encoding(coords: torch.Tensor, dim: int, temperature: float = 20.0) -> torch.Tensor:
    """Sine/cosine encoding of (n, 2) normalized coordinates into (n, dim)."""
    if dim % 4 != 0:
        raise ConfigError(f"position encoding dim must be divisible by 4, got {dim}")
    half = dim // 2
    freq = torch.arange(half // 2, dtype=coords.dtype, device=coords.device)
    freq = temperature ** (2 * freq / half)
    out = []
    for axis in range(2):
        angles = coords[:, axis : axis + 1] * (2 * math.pi) / freq
        out.append(torch.sin(angles))
        out.append(torch.cos(angles))
    return torch.cat(out, dim=1)


@dataclass
class MultiScaleFeatures:
    """Flattened multi-scale tokens with per-token geometry metadata.

    Levels are ordered coarse to fine; each level is flattened row-major.
    """

    tokens: torch.Tensor  # (n, E)
    centers: torch.Tensor  # (n, 2) normalized (u, v)
    level_ids: torch.Tensor  # (n,)
    grid_rows: torch.Tensor  # (n,)
    grid_cols: torch.Tensor  # (n,)
    level_sizes: list[tuple[int, int]]  # (H_s, W_s) per level

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    def unflatten(self, level: int) -> torch.Tensor:
        h, w = self.level_sizes[level]
        sel = self.level_ids == level
        return self.tokens[sel].reshape(h, w, -1)


@dataclass
class HeadOutput:
    """Per-query predictions: normalized coordinates and t_d + 1 logits."""

    coords: torch.Tensor  # (n, 2) in [0, 1]
    logits: torch.Tensor  # (n, t_d + 1), last = no-object

    def __len__(self) -> int:
        return self.coords.shape[0]

    def slice(self, lo: int, hi: int) -> "HeadOutput":
        return HeadOutput(self.coords[lo:hi], self.logits[lo:hi])


class ConvBackbone(nn.Module):
    """Four-stage convolutional pyramid at strides 4/8/16/32; the top three
    stages are exposed."""

    def __init__(self, channels: tuple[int, int, int, int] = (32, 64, 128, 192)):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.out_channels = (c2, c3, c4)

        def block(cin, cout, stride):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
                nn.GroupNorm(8, cout),
                nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False),
                nn.GroupNorm(8, cout),
                nn.ReLU(inplace=True),
            )

        self.stage1 = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1, bias=False),
            nn.GroupNorm(8, c1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, c1, 3, stride=2, padding=1, bias=False),
            nn.GroupNorm(8, c1),
            nn.ReLU(inplace=True),
        )
        self.stage2 = block(c1, c2, 2)
        self.stage3 = block(c2, c3, 2)
        self.stage4 = block(c3, c4, 2)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        """(1, 3, H, W) -> maps at strides 8, 16, 32 (fine to coarse order here)."""
        x1 = self.stage1(image)
        x2 = self.stage2(x1)
        x3 = self.stage3(x2)
        x4 = self.stage4(x3)
        return [x2, x3, x4]


class AttentionMaskStrategy(Protocol):
    def build_mask(self, features: MultiScaleFeatures) -> torch.Tensor | None: ...


class WindowedLevelAttention:
    """Dense attention restricted to a Chebyshev window within each level,
    with unrestricted cross-level exchange. ``window_radius=None`` disables
    the restriction entirely."""

    def __init__(self, window_radius: int | None = 3):
        self.window_radius = window_radius

    def build_mask(self, features: MultiScaleFeatures) -> torch.Tensor | None:
        if self.window_radius is None:
            return None
        lvl = features.level_ids
        rows = features.grid_rows
        cols = features.grid_cols
        same_level = lvl[:, None] == lvl[None, :]
        near = (rows[:, None] - rows[None, :]).abs() <= self.window_radius
        near &= (cols[:, None] - cols[None, :]).abs() <= self.window_radius
        allowed = ~same_level | near
        mask = torch.zeros(allowed.shape, dtype=features.tokens.dtype, device=features.tokens.device)
        mask[~allowed] = -1e9
        return mask


class _EncoderLayer(nn.Module):
    """Pre-norm self-attention layer (stable without a warmup schedule)."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, pos: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        h = self.norm1(x)
        q = k = (h + pos).unsqueeze(0)
        attn_out, _ = self.attn(q, k, h.unsqueeze(0), attn_mask=mask, need_weights=False)
        x = x + attn_out.squeeze(0)
        x = x + self.ffn(self.norm2(x))
        return x


class _DecoderLayer(nn.Module):
    """Pre-norm decoder layer: masked self-attention among queries, then
    cross-attention to the memory tokens, then the feed-forward block."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, dim))
        self.norm3 = nn.LayerNorm(dim)

    def forward(
        self,
        x: torch.Tensor,
        query_pos: torch.Tensor,
        memory: torch.Tensor,
        memory_pos: torch.Tensor,
        self_mask: torch.Tensor | None,
        cross_bias: torch.Tensor | None = None,
    ) -> torch.Tensor:
        h = self.norm1(x)
        q = k = (h + query_pos).unsqueeze(0)
        sa, _ = self.self_attn(q, k, h.unsqueeze(0), attn_mask=self_mask, need_weights=False)
        x = x + sa.squeeze(0)
        h = self.norm2(x)
        ca, _ = self.cross_attn(
            (h + query_pos).unsqueeze(0),
            (memory + memory_pos).unsqueeze(0),
            memory.unsqueeze(0),
            attn_mask=cross_bias,
            need_weights=False,
        )
        x = x + ca.squeeze(0)
        x = x + self.ffn(self.norm3(x))
        return x


class _Mlp(nn.Module):
    def __init__(self, dim: int, out_dim: int, n_layers: int = 3, zero_last: bool = True):
        super().__init__()
        dims = [dim] * n_layers + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(n_layers))
        if zero_last:
            nn.init.zeros_(self.layers[-1].weight)
            nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


class PredictionHead(nn.Module):
    """Two parallel branches for one dataset: coordinate offsets and class logits."""

    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        self.n_classes = n_classes
        self.cls = nn.Linear(dim, n_classes + 1)
        self.coord = _Mlp(dim, 2, n_layers=3, zero_last=True)

    def forward(self, x: torch.Tensor, refs: torch.Tensor) -> HeadOutput:
        """Refine ``refs`` (n, 2) in inverse-squashed space; emit logits."""
        offsets = self.coord(x)
        coords = torch.sigmoid(inverse_sigmoid(refs) + offsets)
        return HeadOutput(coords=coords, logits=self.cls(x))


class NucleusDetector(nn.Module):
    def __init__(
        self,
        registry: CategoryRegistry,
        *,
        dim: int = 256,
        num_queries: int = 900,
        encoder_layers: int = 3,
        decoder_layers: int = 3,
        n_heads: int = 8,
        ffn_dim: int = 1024,
        backbone_channels: tuple[int, int, int, int] = (32, 64, 128, 192),
        window_radius: int | None = 3,
        cross_locality_sigma: float | None = 0.2,
        attention_strategy: AttentionMaskStrategy | None = None,
        prompt_mode: str = "feature",
        prompt: PromptConditioner | None = None,
    ):
        super().__init__()
        if prompt_mode not in ("feature", "query", "off"):
            raise ConfigError(f"prompt_mode must be feature/query/off, got {prompt_mode!r}")
        self.registry = registry
        self.dim = dim
        self.num_queries = num_queries
        self.prompt_mode = prompt_mode
        self.prompt = prompt
        if prompt_mode != "off" and prompt is None:
            raise ConfigError("prompt module required unless prompt_mode is 'off'")

        self.cross_locality_sigma = cross_locality_sigma
        self.backbone = ConvBackbone(backbone_channels)
        self.input_proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, dim, 1), nn.GroupNorm(8, dim)) for c in self.backbone.out_channels
        )
        self.level_embed = nn.Parameter(torch.zeros(3, dim))
        nn.init.normal_(self.level_embed, std=0.02)
        self.attention_strategy = attention_strategy or WindowedLevelAttention(window_radius)

        self.encoder = nn.ModuleList(_EncoderLayer(dim, n_heads, ffn_dim) for _ in range(encoder_layers))
        self.encoder_norm = nn.LayerNorm(dim)
        self.decoder = nn.ModuleList(_DecoderLayer(dim, n_heads, ffn_dim) for _ in range(decoder_layers))
        self.decoder_norm = nn.LayerNorm(dim)

        widths = [ds.num_classes for ds in registry.datasets]
        self.first_stage_heads = nn.ModuleList(PredictionHead(dim, t) for t in widths)
        self.decoder_heads = nn.ModuleList(
            nn.ModuleList(PredictionHead(dim, t) for t in widths) for _ in range(decoder_layers)
        )
        self.content_queries = nn.Parameter(torch.empty(num_queries, dim))
        nn.init.normal_(self.content_queries, std=0.02)
        self.label_embeddings = nn.ModuleList(nn.Embedding(t + 1, dim) for t in widths)

    # ------------------------------------------------------------------ trunk

    def prepare_image(self, image: np.ndarray) -> torch.Tensor:
        """HxWx3 uint8 -> (1, 3, H, W) float in [-0.5, 0.5]."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise DataError(f"expected HxWx3 image, got shape {image.shape}")
        t = torch.from_numpy(np.ascontiguousarray(image).copy()).to(self.level_embed.dtype)
        return (t / 255.0 - 0.5).permute(2, 0, 1).unsqueeze(0)

    def backbone_forward(self, image: torch.Tensor) -> MultiScaleFeatures:
        _, _, h, w = image.shape
        if h < COARSEST_STRIDE or w < COARSEST_STRIDE:
            raise DataError(f"image {w}x{h} smaller than the coarsest stride {COARSEST_STRIDE}")
        if h % COARSEST_STRIDE or w % COARSEST_STRIDE:
            raise DataError(f"image sides must be divisible by {COARSEST_STRIDE}, got {w}x{h}")
        maps = self.backbone(image)
        maps = [proj(m) for proj, m in zip(self.input_proj, maps)]
        maps = maps[::-1]  # coarse to fine

        tokens, centers, level_ids, rows, cols, sizes = [], [], [], [], [], []
        for lvl, fmap in enumerate(maps):
            _, e, hs, ws = fmap.shape
            sizes.append((hs, ws))
            flat = fmap.squeeze(0).permute(1, 2, 0).reshape(-1, e)
            r = torch.arange(hs, device=fmap.device).repeat_interleave(ws)
            c = torch.arange(ws, device=fmap.device).repeat(hs)
            cu = (c.to(flat.dtype) + 0.5) / ws
            cv = (r.to(flat.dtype) + 0.5) / hs
            tokens.append(flat)
            centers.append(torch.stack([cu, cv], dim=1))
            level_ids.append(torch.full((hs * ws,), lvl, dtype=torch.long, device=fmap.device))
            rows.append(r)
            cols.append(c)
        return MultiScaleFeatures(
            tokens=torch.cat(tokens),
            centers=torch.cat(centers),
            level_ids=torch.cat(level_ids),
            grid_rows=torch.cat(rows),
            grid_cols=torch.cat(cols),
            level_sizes=sizes,
        )

    def token_pos(self, features: MultiScaleFeatures) -> torch.Tensor:
        pe = sine_position_encoding(features.centers, self.dim)
        return pe + self.level_embed[features.level_ids]

    def encoder_forward(self, features: MultiScaleFeatures) -> torch.Tensor:
        mask = self.attention_strategy.build_mask(features)
        pos = self.token_pos(features)
        x = features.tokens
        for layer in self.encoder:
            x = layer(x, pos, mask)
        return self.encoder_norm(x)

    # ---------------------------------------------------------------- queries

    def first_stage_select(
        self, memory: torch.Tensor, features: MultiScaleFeatures, d: int, k: int | None = None
    ) -> tuple[HeadOutput, torch.Tensor]:
        """Rank tokens by max real-class probability; return the top-k head
        output and the selected coordinates as decoder reference points."""
        k = self.num_queries if k is None else k
        if k > memory.shape[0]:
            raise ConfigError(f"k={k} exceeds the {memory.shape[0]} available tokens")
        head = self.first_stage_heads[d]
        out = head(memory, features.centers)
        probs = torch.softmax(out.logits, dim=-1)
        scores = probs[:, : head.n_classes].max(dim=-1).values
        top = torch.topk(scores, k, sorted=True).indices
        selected = HeadOutput(coords=out.coords[top], logits=out.logits[top])
        return selected, selected.coords.detach()

    def embed_noise_queries(self, noised: NoisedAnnotations, d: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Content from the per-class label table; reference points from the
        noised coordinates, normalized."""
        classes = torch.from_numpy(noised.flat_classes()).long()
        content = self.label_embeddings[d](classes)
        w, h = noised.image_size
        coords = torch.from_numpy(noised.flat_coords()).to(content.dtype)
        refs = coords / torch.tensor([w, h], dtype=content.dtype)
        return content, refs

    def decoder_forward(
        self,
        content: torch.Tensor,
        refs: torch.Tensor,
        memory: torch.Tensor,
        memory_pos: torch.Tensor,
        d: int,
        self_mask: torch.Tensor | None = None,
        memory_centers: torch.Tensor | None = None,
    ) -> list[HeadOutput]:
        """Run all decoder layers; every layer's head output is returned for
        deep supervision. Reference points are refined layer by layer.

        With token centers given, cross-attention logits carry a Gaussian
        locality bias around each query's current reference point (the dense
        stand-in for reference-guided sparse sampling)."""
        outputs: list[HeadOutput] = []
        x = content
        for layer, heads in zip(self.decoder, self.decoder_heads):
            query_pos = sine_position_encoding(refs, self.dim)
            cross_bias = None
            if memory_centers is not None and self.cross_locality_sigma is not None:
                sq_dist = ((refs[:, None, :] - memory_centers[None, :, :]) ** 2).sum(-1)
                cross_bias = -sq_dist / (2 * self.cross_locality_sigma**2)
            x = layer(x, query_pos, memory, memory_pos, self_mask, cross_bias)
            out = heads[d](self.decoder_norm(x), refs)
            outputs.append(out)
            refs = out.coords.detach()
        return outputs

    # ---------------------------------------------------------------- passes

    def forward_train(
        self, image: np.ndarray, d: int, noised: NoisedAnnotations | None, k: int | None = None
    ) -> dict:
        """Full training pass for one sample. Returns the first-stage output,
        per-layer candidate outputs, and per-layer denoising splits."""
        self.registry.descriptor(d)
        tensor = self.prepare_image(image)
        features = self.backbone_forward(tensor)
        memory = self.encoder_forward(features)
        if self.prompt_mode == "feature":
            memory = self.prompt(memory, d)
        memory_pos = self.token_pos(features)

        fs_out, refs = self.first_stage_select(memory, features, d, k)
        content = self.content_queries[: refs.shape[0]]
        if self.prompt_mode == "query":
            content = self.prompt(content, d)

        self_mask = None
        n_cdn = 0
        if noised is not None:
            cdn_content, cdn_refs = self.embed_noise_queries(noised, d)
            n_cdn = noised.total_queries
            self_mask = cdn_group_mask(
                noised.queries_per_group,
                noised.n_groups,
                content.shape[0],
                device=content.device,
                dtype=content.dtype,
            )
            content = torch.cat([cdn_content, content], dim=0)
            refs = torch.cat([cdn_refs, refs], dim=0)

        layer_outputs = self.decoder_forward(
            content, refs, memory, memory_pos, d, self_mask, memory_centers=features.centers
        )

        layers = []
        for out in layer_outputs:
            entry = {"candidates": out.slice(n_cdn, len(out))}
            if noised is not None:
                npg = noised.queries_per_group
                n_gt = noised.n_gt
                pos_rows, neg_rows = [], []
                for gi in range(noised.n_groups):
                    lo = gi * npg
                    pos_rows.extend(range(lo, lo + n_gt))
                    neg_rows.extend(range(lo + n_gt, lo + npg))
                entry["cdn_pos"] = HeadOutput(out.coords[pos_rows], out.logits[pos_rows])
                entry["cdn_neg"] = HeadOutput(out.coords[neg_rows], out.logits[neg_rows])
            layers.append(entry)
        return {"first_stage": fs_out, "layers": layers, "n_cdn": n_cdn}

    @torch.no_grad()
    def predict(
        self, image: np.ndarray, d: int, confidence_threshold: float = 0.5, k: int | None = None
    ) -> list[tuple[float, float, int, float]]:
        """Inference on one image: only content queries, final layer only.

        Returns (u, v, local class, confidence) tuples in pixel coordinates.
        The no-object column never appears: class is the argmax over real
        classes and confidence is that class's probability.
        """
        was_training = self.training
        self.eval()
        try:
            h, w = image.shape[:2]
            pad_h = (-h) % COARSEST_STRIDE
            pad_w = (-w) % COARSEST_STRIDE
            padded = image
            if pad_h or pad_w:
                padded = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
            result = self.forward_train(padded, d, noised=None, k=k)
            out: HeadOutput = result["layers"][-1]["candidates"]
            probs = torch.softmax(out.logits, dim=-1)
            t_d = self.registry.descriptor(d).num_classes
            conf, cls = probs[:, :t_d].max(dim=-1)
            keep = conf >= confidence_threshold
            coords = out.coords[keep]
            ph, pw = padded.shape[:2]
            us = (coords[:, 0] * pw).tolist()
            vs = (coords[:, 1] * ph).tolist()
            preds = [
                (u, v, int(c), float(s))
                for u, v, c, s in zip(us, vs, cls[keep].tolist(), conf[keep].tolist())
                if u < w and v < h
            ]
            return preds
        finally:
            self.train(was_training)

    # ------------------------------------------------------------- utilities

    def head_modules(self) -> list[nn.Module]:
        mods: list[nn.Module] = list(self.first_stage_heads)
        for layer_heads in self.decoder_heads:
            mods.extend(layer_heads)
        return mods

    def backbone_parameters(self) -> list[nn.Parameter]:
        return list(self.backbone.parameters())

    def non_backbone_parameters(self) -> list[nn.Parameter]:
        backbone_ids = {id(p) for p in self.backbone_parameters()}
        return [p for p in self.parameters() if id(p) not in backbone_ids]
