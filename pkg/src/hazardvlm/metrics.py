"""Text-overlap and localization metrics: BLEU-4, ROUGE-1/2/L, pixel MSE.

All text metrics operate on token sequences and depend only on token
equality. ROUGE scores are reported as F1. BLEU uses clipped n-gram
precision with a brevity penalty; zero counts are smoothed Lin-Och style
(half count) unless smoothing is disabled.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

Token = str | int
Tokens = Sequence[Token]


@dataclass
class MetricsReport:
    bleu4: float
    rouge1: float
    rouge2: float
    rougeL: float
    mse_pixels: float
    count: int

    def __post_init__(self):
        for name in ("bleu4", "rouge1", "rouge2", "rougeL"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.mse_pixels < 0:
            raise ValueError("mse_pixels must be non-negative")
        if self.count < 1:
            raise ValueError("report needs at least one sample")

    def as_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    def as_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _clipped_overlap(cand: Counter, refs: Sequence[Counter]) -> int:
    # multi-reference clipping: candidate counts capped by the max count
    # over references
    total = 0
    for gram, count in cand.items():
        cap = max((ref[gram] for ref in refs), default=0)
        total += min(count, cap)
    return total


def bleu4(candidate: Tokens, reference: Tokens | Sequence[Tokens], smooth: bool = True) -> float:
    """Geometric mean of clipped 1..4-gram precisions times brevity penalty."""
    refs = _as_reference_list(reference)
    if not refs or all(len(r) == 0 for r in refs):
        raise ValueError("bleu4 requires a non-empty reference")
    if len(candidate) == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        cand_grams = _ngrams(candidate, n)
        total = sum(cand_grams.values())
        overlap = _clipped_overlap(cand_grams, [_ngrams(r, n) for r in refs])
        if overlap > 0:
            p = overlap / total
        elif smooth:
            p = 1.0 / (2.0 * max(total, 1))
        else:
            return 0.0
        log_sum += math.log(p)
    # closest reference length, ties to the shorter
    ref_len = min((abs(len(r) - len(candidate)), len(r)) for r in refs)[1]
    bp = min(1.0, math.exp(1.0 - ref_len / len(candidate)))
    return bp * math.exp(log_sum / 4.0)


def _as_reference_list(reference) -> list[Tokens]:
    if reference and isinstance(reference[0], (list, tuple)):
        return list(reference)
    return [reference]


def _f1(overlap: float, cand_total: int, ref_total: int) -> float:
    if overlap == 0 or cand_total == 0 or ref_total == 0:
        return 0.0
    precision = overlap / cand_total
    recall = overlap / ref_total
    return 2.0 * precision * recall / (precision + recall)


def rouge_n(candidate: Tokens, reference: Tokens, n: int) -> float:
    """F1 of clipped n-gram overlap; 0 when either side has no n-grams."""
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    overlap = _clipped_overlap(cand, [ref])
    return _f1(overlap, sum(cand.values()), sum(ref.values()))


def rouge_l(candidate: Tokens, reference: Tokens) -> float:
    """F1 based on longest-common-subsequence length."""
    m, n = len(candidate), len(reference)
    if m == 0 or n == 0:
        return 0.0
    # classic O(m*n) DP, rolling rows
    prev = [0] * (n + 1)
    for i in range(1, m + 1):
        cur = [0] * (n + 1)
        ci = candidate[i - 1]
        for j in range(1, n + 1):
            if ci == reference[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    lcs = prev[n]
    return _f1(lcs, m, n)


def pixel_mse(preds: Sequence, truths: Sequence) -> float:
    """Mean squared Euclidean distance between point pairs, pixel space."""
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} predictions, {len(truths)} truths")
    if not preds:
        raise ValueError("pixel_mse over an empty list")
    total = 0.0
    for p, t in zip(preds, truths):
        total += (p.x - t.x) ** 2 + (p.y - t.y) ** 2
    return total / len(preds)


def corpus_report(
    references: Sequence[Tokens],
    truth_points: Sequence,
    candidates: Sequence[Tokens],
    pred_points: Sequence,
    max_samples: int | None = None,
) -> MetricsReport:
    """Macro-average of per-sample metrics over aligned lists."""
    if not (len(references) == len(truth_points) == len(candidates) == len(pred_points)):
        raise ValueError("misaligned metric inputs")
    n = len(references)
    if max_samples is not None and max_samples > 0:
        n = min(n, max_samples)
    if n == 0:
        raise ValueError("corpus_report over an empty corpus")
    b = r1 = r2 = rl = 0.0
    for ref, cand in zip(references[:n], candidates[:n]):
        b += bleu4(cand, ref)
        r1 += rouge_n(cand, ref, 1)
        r2 += rouge_n(cand, ref, 2)
        rl += rouge_l(cand, ref)
    return MetricsReport(
        bleu4=b / n,
        rouge1=r1 / n,
        rouge2=r2 / n,
        rougeL=rl / n,
        mse_pixels=pixel_mse(pred_points[:n], truth_points[:n]),
        count=n,
    )
