"""Builder for the bundled byte-pair merge table.

The tokenizer needs a fixed 49,408-entry vocabulary: 512 byte-level base
tokens (plain and end-of-word variants), 48,894 merge results, and the two
sequence markers. The first merges are trained on an embedded word list so
that domain names tokenize compactly; the remainder are generated from a
seeded stream of valid pair combinations. Everything is deterministic, which
is the only property the downstream embeddings rely on.

Run ``python -m nucdet.vocab_build`` to regenerate ``resources/bpe_merges.txt.gz``.
"""

from __future__ import annotations

import gzip
import hashlib
from collections import Counter
from pathlib import Path

import numpy as np

N_BASE = 512
N_SPECIAL = 2
VOCAB_SIZE = 49408
N_MERGES = VOCAB_SIZE - N_BASE - N_SPECIAL

# Word -> weight. Domain vocabulary is weighted up so its merges are learned
# first; the tail is generic glue so short English fragments merge sensibly.
_CORPUS: dict[str, int] = {
    # cell types and close variants
    "epithelial": 60, "lymphocyte": 60, "neutrophil": 60, "macrophage": 60,
    "eosinophil": 60, "plasma": 60, "connective": 60, "stromal": 60,
    "inflammatory": 60, "tumor": 60, "background": 60, "cell": 80, "cells": 40,
    "nucleus": 50, "nuclei": 50, "centroid": 40, "centroids": 20,
    # data sources
    "consep": 30, "monusac": 30, "lizard": 30, "ocelot": 30, "dataset": 40,
    # tissue and imaging vocabulary
    "tissue": 30, "colon": 20, "breast": 20, "lung": 20, "kidney": 20,
    "prostate": 20, "stomach": 20, "histology": 25, "pathology": 25,
    "biopsy": 15, "stain": 15, "stained": 10, "hematoxylin": 15, "eosin": 15,
    "gland": 15, "mucosa": 15, "carcinoma": 20, "adenoma": 15, "lesion": 15,
    "malignant": 15, "benign": 15, "organ": 15, "patch": 20, "image": 30,
    "slide": 15, "whole": 10, "section": 15, "sample": 20, "annotation": 20,
    "detection": 25, "classification": 25, "segmentation": 15, "boundary": 10,
    "marker": 10, "type": 25, "label": 20, "class": 20, "category": 25,
    "prompt": 20, "token": 15, "feature": 20, "query": 15, "blob": 10,
    "round": 15, "spindle": 15, "ring": 15, "dark": 15, "halo": 15,
    "speck": 15, "oval": 10, "granular": 10, "dense": 10, "pale": 10,
    "culture": 15, "synthetic": 15, "micro": 10, "macro": 10,
    # generic english glue
    "the": 40, "of": 30, "and": 30, "in": 25, "to": 20, "a": 20, "is": 15,
    "for": 15, "with": 15, "on": 12, "as": 12, "are": 12, "from": 12,
    "that": 10, "this": 10, "by": 10, "an": 10, "be": 10, "or": 10,
    "it": 8, "at": 8, "which": 6, "their": 6, "each": 6, "one": 8, "two": 8,
    "three": 6, "four": 6, "five": 6, "six": 6, "seven": 4, "eight": 4,
    "nine": 4, "ten": 4, "red": 6, "green": 6, "blue": 6, "gray": 6,
    "white": 6, "black": 6, "small": 6, "large": 6, "high": 6, "low": 6,
    "count": 6, "grade": 6, "score": 6, "test": 6, "train": 6, "set": 6,
    "point": 6, "pixel": 8, "radius": 8, "color": 6, "shape": 6, "size": 6,
    "region": 6, "area": 6, "left": 4, "right": 4, "top": 4, "bottom": 4,
    "first": 4, "second": 4, "third": 4, "inner": 4, "outer": 4, "middle": 4,
    "normal": 6, "healthy": 4, "disease": 6, "cancer": 10, "grading": 4,
    "analysis": 6, "model": 8, "layer": 6, "deep": 4, "learning": 6,
    "network": 6, "visual": 4, "attention": 6, "memory": 6, "bank": 6,
    "source": 6, "domain": 6, "universal": 6, "unified": 6, "shared": 6,
    "mixed": 4, "joint": 4, "single": 4, "multi": 8, "cross": 6, "within": 4,
}


def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable-unicode map (standard byte-level BPE base)."""
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


def _word_symbols(word: str, b2u: dict[int, str]) -> tuple[str, ...]:
    chars = [b2u[b] for b in word.encode("utf-8")]
    chars[-1] = chars[-1] + "</w>"
    return tuple(chars)


def train_corpus_merges(corpus: dict[str, int]) -> list[tuple[str, str]]:
    """Greedy pair-frequency BPE training; ties broken lexicographically."""
    b2u = bytes_to_unicode()
    vocab: Counter = Counter()
    for word, freq in corpus.items():
        vocab[_word_symbols(word.lower(), b2u)] += freq
    merges: list[tuple[str, str]] = []
    while True:
        pair_counts: Counter = Counter()
        for symbols, freq in vocab.items():
            for a, b in zip(symbols, symbols[1:]):
                pair_counts[(a, b)] += freq
        if not pair_counts:
            break
        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        best = min(p for p, c in pair_counts.items() if c == best_count)
        merges.append(best)
        merged = best[0] + best[1]
        new_vocab: Counter = Counter()
        for symbols, freq in vocab.items():
            out: list[str] = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            new_vocab[tuple(out)] += freq
        vocab = new_vocab
    return merges


def base_tokens() -> list[str]:
    b2u = bytes_to_unicode()
    chars = [b2u[b] for b in range(256)]
    return chars + [c + "</w>" for c in chars]


def build_merges(seed: int = 20240131) -> list[tuple[str, str]]:
    """Corpus-trained merges followed by seeded filler pairs, N_MERGES total."""
    tokens = base_tokens()
    token_set = set(tokens)
    merges = train_corpus_merges(_CORPUS)
    for left, right in merges:
        merged = left + right
        tokens.append(merged)
        token_set.add(merged)

    rng = np.random.default_rng(seed)
    while len(merges) < N_MERGES:
        n = len(tokens)
        i = int(rng.random() ** 3 * n)
        j = int(rng.random() ** 3 * n)
        left, right = tokens[i], tokens[j]
        if left.endswith("</w>"):
            continue
        merged = left + right
        if len(merged.replace("</w>", "")) > 20:
            continue
        if merged in token_set:
            continue
        merges.append((left, right))
        tokens.append(merged)
        token_set.add(merged)
    return merges


def write_merge_file(path: Path, merges: list[tuple[str, str]]) -> str:
    """Write the gzipped merge table; returns the sha256 of the raw text."""
    text = "\n".join(f"{a} {b}" for a, b in merges) + "\n"
    raw = text.encode("utf-8")
    digest = hashlib.sha256(raw).hexdigest()
    path.parent.mkdir(parents=True, exist_ok=True)
    # mtime=0 keeps the compressed bytes reproducible
    with open(path, "wb") as fh:
        with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
            gz.write(raw)
    return digest


def main() -> None:
    out = Path(__file__).parent / "resources" / "bpe_merges.txt.gz"
    merges = build_merges()
    assert len(merges) == N_MERGES, len(merges)
    digest = write_merge_file(out, merges)
    print(f"wrote {out} ({len(merges)} merges)")
    print(f"sha256 {digest}")


if __name__ == "__main__":
    main()
