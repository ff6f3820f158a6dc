"""Corpus-level BLEU and sequence accuracy."""

from __future__ import annotations

import math
from collections import Counter
from typing import List, Sequence


def ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: List[Sequence], references: List[Sequence], max_n: int = 4) -> float:
    """Geometric mean of clipped n-gram precisions times brevity penalty.

    Corpus-level, unsmoothed: a zero precision at any order gives 0.0.
    """
    if not candidates or not references:
        raise ValueError("BLEU needs a non-empty corpus")
    if len(candidates) != len(references):
        raise ValueError(
            f"candidate/reference count mismatch: {len(candidates)} vs {len(references)}"
        )
    matches = [0] * max_n
    guesses = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand = list(cand)
        ref = list(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cgrams = ngram_counts(cand, n)
            rgrams = ngram_counts(ref, n)
            guesses[n - 1] += sum(cgrams.values())
            matches[n - 1] += sum((cgrams & rgrams).values())
    if cand_len == 0:
        return 0.0
    log_precision = 0.0
    for m, g in zip(matches, guesses):
        if m == 0 or g == 0:
            return 0.0
        log_precision += math.log(m / g) / max_n
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision)


def exact_match(candidates: List[Sequence], references: List[Sequence]) -> float:
    if not candidates or len(candidates) != len(references):
        raise ValueError("exact_match needs equal-length non-empty corpora")
    hits = sum(list(c) == list(r) for c, r in zip(candidates, references))
    return hits / len(candidates)
