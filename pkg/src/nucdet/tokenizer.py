"""Lower-cased byte-pair tokenizer over the bundled 49,408-entry vocabulary.

Sequences are wrapped in start/end markers and padded or truncated to a fixed
length. Every byte has a base token, so arbitrary text always encodes; the
merge table only compacts known fragments. The vocabulary file is pinned by
checksum — the learnable embeddings downstream only require a deterministic
id partition, not any particular external tokenizer's ids.
"""

from __future__ import annotations

import gzip
import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import DataError
from .vocab_build import N_BASE, VOCAB_SIZE, base_tokens, bytes_to_unicode

__all__ = ["TokenSequence", "BpeTokenizer", "get_tokenizer", "tokenize"]

MERGES_SHA256 = "24995803fb09a439de66987b1e0b370da22fdbda33343c4a11b690f8c0b91f27"

SOS_TOKEN = "<|startoftext|>"
EOS_TOKEN = "<|endoftext|>"
PAD_ID = 0  # byte-0 base token; never produced by real text

_WORD_PATTERN = re.compile(r"[a-z]+|[0-9]+|[^\sa-z0-9]")


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length id array: [SOS] content [EOS] padding."""

    ids: np.ndarray
    source_text: str

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def nonpad_mask(self) -> np.ndarray:
        return self.ids != PAD_ID


class BpeTokenizer:
    def __init__(self, merges: list[tuple[str, str]]):
        tokens = base_tokens()
        tokens += [a + b for a, b in merges]
        tokens += [SOS_TOKEN, EOS_TOKEN]
        if len(tokens) != VOCAB_SIZE:
            raise DataError(f"vocabulary has {len(tokens)} entries, expected {VOCAB_SIZE}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self.vocab_size = VOCAB_SIZE
        self.encoder = {t: i for i, t in enumerate(tokens)}
        self.ranks = {pair: i for i, pair in enumerate(merges)}
        self.sos_id = self.encoder[SOS_TOKEN]
        self.eos_id = self.encoder[EOS_TOKEN]
        self._b2u = bytes_to_unicode()
        self._cache: dict[str, list[str]] = {}

    def _bpe(self, word: str) -> list[str]:
        if word in self._cache:
            return self._cache[word]
        symbols = [self._b2u[b] for b in word.encode("utf-8")]
        symbols[-1] = symbols[-1] + "</w>"
        while len(symbols) > 1:
            pairs = set(zip(symbols, symbols[1:]))
            best = min(pairs, key=lambda p: self.ranks.get(p, float("inf")))
            if best not in self.ranks:
                break
            merged = best[0] + best[1]
            out: list[str] = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            symbols = out
        self._cache[word] = symbols
        return symbols

    def encode(self, text: str) -> list[int]:
        """Content ids only, no markers or padding."""
        ids: list[int] = []
        for word in _WORD_PATTERN.findall(text.lower().strip()):
            ids.extend(self.encoder[s] for s in self._bpe(word))
        return ids

    def tokenize(self, text: str, seq_len: int) -> TokenSequence:
        """Wrap, cap, and pad to ``seq_len``; the end marker survives truncation."""
        if seq_len < 3:
            raise DataError(f"seq_len must be >= 3 to hold markers and content, got {seq_len}")
        if not text.strip():
            raise DataError("cannot tokenize empty text")
        content = self.encode(text)[: seq_len - 2]
        ids = np.full(seq_len, PAD_ID, dtype=np.int64)
        ids[0] = self.sos_id
        ids[1 : 1 + len(content)] = content
        ids[1 + len(content)] = self.eos_id
        return TokenSequence(ids=ids, source_text=text)


def _load_merges() -> list[tuple[str, str]]:
    blob = resources.files("nucdet.resources").joinpath("bpe_merges.txt.gz").read_bytes()
    raw = gzip.decompress(blob)
    digest = hashlib.sha256(raw).hexdigest()
    if digest != MERGES_SHA256:
        raise DataError(
            f"merge table checksum mismatch: {digest[:12]}... != pinned {MERGES_SHA256[:12]}..."
        )
    merges = []
    for line in raw.decode("utf-8").splitlines():
        a, b = line.split(" ")
        merges.append((a, b))
    return merges


@lru_cache(maxsize=1)
def get_tokenizer() -> BpeTokenizer:
    return BpeTokenizer(_load_merges())


def tokenize(text: str, seq_len: int) -> TokenSequence:
    return get_tokenizer().tokenize(text, seq_len)
