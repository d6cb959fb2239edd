"""Prompt conditioning: learnable dataset prompts, a per-category token
memory bank, masked localized attention that specializes the active dataset's
prompt against its visible categories, and the cross-attention block that
enhances image features (or content queries) with the result.

Each dataset's sentence is ``[V_1]..[V_T][name]`` where the V_t are learnable
context vectors shared across all datasets (and, separately, across all
categories). Sentences are tokenized, embedded through one learnable token
table, and either pooled to a single vector (dataset prompts, D x E) or kept
per-token (category bank, C x L x E).
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .registry import CategoryRegistry
from .tokenizer import PAD_ID, get_tokenizer
from .vocab_build import VOCAB_SIZE

__all__ = [
    "NEG_MASK",
    "PromptTables",
    "visibility_mask",
    "MaskedAttentionLayer",
    "AttentionBlock",
    "PromptConditioner",
]

NEG_MASK = -1e9  # additive mask value; finite so softmax stays defined


class PromptTables(nn.Module):
    """Learnable embedding tables behind the dataset prompts and category bank."""

    def __init__(
        self,
        registry: CategoryRegistry,
        *,
        n_ctx: int = 16,
        seq_len: int = 77,
        dim: int = 256,
        vocab_size: int = VOCAB_SIZE,
        pooling: str = "mean",
    ):
        super().__init__()
        if n_ctx < 0:
            raise ConfigError(f"n_ctx must be >= 0, got {n_ctx}")
        if seq_len - n_ctx < 3:
            raise ConfigError(f"seq_len {seq_len} leaves no room for markers after {n_ctx} context tokens")
        if pooling not in ("mean", "eos"):
            raise ConfigError(f"pooling must be 'mean' or 'eos', got {pooling!r}")
        self.n_ctx = n_ctx
        self.seq_len = seq_len
        self.dim = dim
        self.vocab_size = vocab_size
        self.pooling = pooling
        self.num_datasets = registry.num_datasets
        self.num_categories = registry.num_categories

        tok = get_tokenizer()
        if vocab_size != tok.vocab_size:
            raise ConfigError(f"vocab_size {vocab_size} != bundled vocabulary {tok.vocab_size}")
        name_len = seq_len - n_ctx
        ds_ids = np.stack([tok.tokenize(ds.name, name_len).ids for ds in registry.datasets])
        cat_ids = np.stack([tok.tokenize(name, name_len).ids for name in registry.global_names])
        self.register_buffer("dataset_ids", torch.from_numpy(ds_ids))
        self.register_buffer("category_ids", torch.from_numpy(cat_ids))
        all_ids = torch.cat([self.dataset_ids.reshape(-1), self.category_ids.reshape(-1)])

        # The table logically spans the whole vocabulary, but only ids that
        # occur in the registry's tokenized names are reachable by any
        # forward pass, so only those rows are stored and trained. The rest
        # would keep their init forever; they are materialized on demand.
        used, remapped = torch.unique(all_ids, return_inverse=True)
        self.register_buffer("used_ids", used)
        self.register_buffer("_all_ids_compact", remapped)
        self.token_embedding_active = nn.Parameter(torch.empty(len(used), dim))
        self.ctx_dataset = nn.Parameter(torch.empty(n_ctx, dim))
        self.ctx_category = nn.Parameter(torch.empty(n_ctx, dim))
        nn.init.normal_(self.token_embedding_active, std=0.02)
        nn.init.normal_(self.ctx_dataset, std=0.02)
        nn.init.normal_(self.ctx_category, std=0.02)

    @property
    def token_embedding(self) -> torch.Tensor:
        """Full-vocabulary view, (vocab_size, dim); unreachable rows carry a
        deterministic placeholder init. For introspection, not the hot path."""
        gen = torch.Generator().manual_seed(20240131)
        full = torch.normal(0.0, 0.02, (self.vocab_size, self.dim), generator=gen)
        full = full.to(self.token_embedding_active.dtype)
        full[self.used_ids] = self.token_embedding_active.detach()
        return full

    def _name_embeddings(self, which: str) -> torch.Tensor:
        d = self.dataset_ids.numel()
        flat = self.token_embedding_active[self._all_ids_compact]
        if which == "dataset":
            return flat[:d].reshape(*self.dataset_ids.shape, self.dim)
        return flat[d:].reshape(*self.category_ids.shape, self.dim)

    def _sentences(self, ids: torch.Tensor, emb: torch.Tensor, ctx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Insert the shared context vectors after the start marker.

        Returns (n, seq_len, dim) embeddings and the (n, seq_len) non-pad mask.
        """
        n = ids.shape[0]
        ctx_rows = ctx.unsqueeze(0).expand(n, -1, -1)
        full = torch.cat([emb[:, :1], ctx_rows, emb[:, 1:]], dim=1)
        pad_part = ids != PAD_ID
        nonpad = torch.cat(
            [
                pad_part[:, :1],
                torch.ones(n, self.n_ctx, dtype=torch.bool, device=ids.device),
                pad_part[:, 1:],
            ],
            dim=1,
        )
        return full, nonpad

    def dataset_prompts(self) -> torch.Tensor:
        """One pooled E-vector per dataset, (D, E)."""
        emb, nonpad = self._sentences(self.dataset_ids, self._name_embeddings("dataset"), self.ctx_dataset)
        if self.pooling == "mean":
            w = nonpad.to(emb.dtype).unsqueeze(-1)
            return (emb * w).sum(dim=1) / w.sum(dim=1)
        eos_pos = nonpad.long().sum(dim=1) - 1  # last non-pad slot holds the end marker
        return emb[torch.arange(emb.shape[0]), eos_pos]

    def category_bank(self) -> torch.Tensor:
        """Unpooled per-token category embeddings, (C, seq_len, E)."""
        emb, _ = self._sentences(self.category_ids, self._name_embeddings("category"), self.ctx_category)
        return emb


def visibility_mask(
    registry: CategoryRegistry,
    d: int,
    seq_len: int,
    *,
    device=None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Additive mask over the flattened bank for dataset d, length C * seq_len.

    Token position j belongs to category j // seq_len; positions of categories
    outside the dataset's visible set are masked. Only the active dataset's
    row is materialized: rows for other datasets would be fully masked, which
    softmax cannot represent.
    """
    visible = registry.visible_sets[registry.descriptor(d).id]
    mask = torch.full((registry.num_categories * seq_len,), NEG_MASK, device=device, dtype=dtype)
    for g in visible:
        mask[g * seq_len : (g + 1) * seq_len] = 0.0
    return mask


class MaskedAttentionLayer(nn.Module):
    """One localized attention layer:

        out = FFN(LN(softmax(M + (QWq)(KWk)^T / sqrt(E)) . (VWv))) + Q

    Single-head, with a residual around the whole block. FFN biases start at
    zero so a zeroed value projection reduces the layer to the identity.
    """

    def __init__(self, dim: int, *, ffn_ratio: int = 4, ln_eps: float = 1e-5):
        super().__init__()
        self.dim = dim
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.norm = nn.LayerNorm(dim, eps=ln_eps)
        self.ffn1 = nn.Linear(dim, ffn_ratio * dim)
        self.ffn2 = nn.Linear(ffn_ratio * dim, dim)
        nn.init.zeros_(self.ffn1.bias)
        nn.init.zeros_(self.ffn2.bias)

    def attention_weights(self, q, k, mask=None) -> torch.Tensor:
        scores = self.wq(q) @ self.wk(k).transpose(-1, -2) / math.sqrt(self.dim)
        if mask is not None:
            if not (mask > NEG_MASK / 2).any(dim=-1).all():
                raise ValueError("attention mask has a fully-masked row")
            scores = scores + mask
        return torch.softmax(scores, dim=-1)

    def forward(self, q, k, v, mask=None) -> torch.Tensor:
        attn = self.attention_weights(q, k, mask)
        out = attn @ self.wv(v)
        return self.ffn2(torch.relu(self.ffn1(self.norm(out)))) + q


class AttentionBlock(nn.Module):
    """A stack of masked attention layers; keys/values stay fixed across layers."""

    def __init__(self, dim: int, n_layers: int, *, ffn_ratio: int = 4):
        super().__init__()
        if n_layers < 1:
            raise ConfigError(f"attention block needs >= 1 layer, got {n_layers}")
        self.layers = nn.ModuleList(MaskedAttentionLayer(dim, ffn_ratio=ffn_ratio) for _ in range(n_layers))

    def forward(self, q, kv, mask=None) -> torch.Tensor:
        for layer in self.layers:
            q = layer(q, kv, kv, mask)
        return q


class PromptConditioner(nn.Module):
    """End-to-end prompt path for one forward pass:

    visibility mask -> specialize the dataset prompt over the bank ->
    concatenate with visible bank rows -> cross-attend the inputs against it.

    With the dataset prompt disabled the visible bank rows alone serve as
    keys/values; with the bank disabled the raw dataset prompt does.
    """

    def __init__(
        self,
        registry: CategoryRegistry,
        *,
        dim: int = 256,
        n_ctx: int = 16,
        seq_len: int = 77,
        n_layers: int = 3,
        use_memory_bank: bool = True,
        use_dataset_prompt: bool = True,
        pooling: str = "mean",
        vocab_size: int = VOCAB_SIZE,
    ):
        super().__init__()
        if not use_memory_bank and not use_dataset_prompt:
            raise ConfigError("prompt conditioning needs the memory bank or the dataset prompt; disable the module instead")
        self.registry = registry
        self.seq_len = seq_len
        self.use_memory_bank = use_memory_bank
        self.use_dataset_prompt = use_dataset_prompt
        self.tables = PromptTables(
            registry, n_ctx=n_ctx, seq_len=seq_len, dim=dim, vocab_size=vocab_size, pooling=pooling
        )
        self.localize = AttentionBlock(dim, n_layers) if (use_memory_bank and use_dataset_prompt) else None
        self.enhance_block = AttentionBlock(dim, n_layers)
        self._kv_cache: dict[int, torch.Tensor] | None = None

    def visibility_mask(self, d: int, *, device=None, dtype=torch.float32) -> torch.Tensor:
        return visibility_mask(self.registry, d, self.seq_len, device=device, dtype=dtype)

    def specialize(self, d: int, prompts: torch.Tensor | None = None, bank: torch.Tensor | None = None) -> torch.Tensor:
        """Run the localized attention block for dataset d; returns (1, E)."""
        prompts = self.tables.dataset_prompts() if prompts is None else prompts
        bank = self.tables.category_bank() if bank is None else bank
        flat = bank.reshape(-1, bank.shape[-1])
        mask = self.visibility_mask(d, device=flat.device, dtype=flat.dtype)
        return self.localize(prompts[d : d + 1], flat, mask)

    def _visible_rows(self, bank: torch.Tensor, d: int) -> torch.Tensor:
        visible = sorted(self.registry.visible_sets[d])
        return bank[visible].reshape(-1, bank.shape[-1])

    def assemble_kv(self, specialized: torch.Tensor, d: int, bank: torch.Tensor | None = None) -> torch.Tensor:
        """Specialized prompt on row 0, then visible bank slices in global order."""
        bank = self.tables.category_bank() if bank is None else bank
        return torch.cat([specialized, self._visible_rows(bank, d)], dim=0)

    def keys_values(self, d: int) -> torch.Tensor:
        if self._kv_cache is not None and d in self._kv_cache:
            return self._kv_cache[d]
        if self.use_memory_bank and self.use_dataset_prompt:
            prompts = self.tables.dataset_prompts()
            bank = self.tables.category_bank()
            kv = self.assemble_kv(self.specialize(d, prompts, bank), d, bank)
        elif self.use_memory_bank:
            kv = self._visible_rows(self.tables.category_bank(), d)
        else:
            kv = self.tables.dataset_prompts()[d : d + 1]
        if self._kv_cache is not None:
            self._kv_cache[d] = kv
        return kv

    @contextmanager
    def cache_keys_values(self):
        """Reuse one prompt graph for every sample inside the context.

        Valid while the parameters do not change and every loss inside is
        folded into a single backward pass (the trainer's batching contract).
        """
        self._kv_cache = {}
        try:
            yield
        finally:
            self._kv_cache = None

    def forward(self, inputs: torch.Tensor, d: int) -> torch.Tensor:
        """Enhance an (n, E) sequence for dataset d; shape-preserving."""
        self.registry.descriptor(d)
        return self.enhance_block(inputs, self.keys_values(d), None)
