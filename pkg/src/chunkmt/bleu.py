"""Corpus-level BLEU with clipped n-gram counts and brevity penalty.

Single reference, case-sensitive over whatever tokens are supplied, no
smoothing: the geometric mean runs over the orders that have any candidate
n-grams and is zero as soon as one of those precisions is zero.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass


@dataclass
class BleuReport:
    bleu: float                   # fraction in [0, 1]
    precisions: list              # modified p_1..p_max_n (None where no candidate n-grams)
    brevity_penalty: float
    hyp_tokens: int
    ref_tokens: int
    max_n: int

    VARIANT = "case-sensitive, single-reference, no smoothing, corpus-level"

    @property
    def percent(self) -> float:
        return 100.0 * self.bleu

    def lines(self):
        yield f"# variant: {self.VARIANT}"
        yield f"bleu={self.bleu:.6f}"
        yield f"bleu_percent={self.percent:.2f}"
        for n, p in enumerate(self.precisions, start=1):
            yield f"p{n}={'-' if p is None else f'{p:.6f}'}"
        yield f"brevity_penalty={self.brevity_penalty:.6f}"
        yield f"hyp_tokens={self.hyp_tokens}"
        yield f"ref_tokens={self.ref_tokens}"

    def to_json(self) -> str:
        return json.dumps(
            {
                "variant": self.VARIANT,
                "bleu": self.bleu,
                "bleu_percent": self.percent,
                "precisions": self.precisions,
                "brevity_penalty": self.brevity_penalty,
                "hyp_tokens": self.hyp_tokens,
                "ref_tokens": self.ref_tokens,
                "max_n": self.max_n,
            },
            sort_keys=True,
        )


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n: int = 4) -> BleuReport:
    """Corpus BLEU over token lists, one reference per hypothesis."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"bleu: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not hypotheses:
        raise ValueError("bleu: empty corpus")

    matches = [0] * max_n
    candidates = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cand = _ngrams(hyp, n)
            if not cand:
                continue
            refc = _ngrams(ref, n)
            candidates[n - 1] += sum(cand.values())
            matches[n - 1] += sum(min(c, refc[g]) for g, c in cand.items())

    precisions = [
        (matches[k] / candidates[k]) if candidates[k] else None for k in range(max_n)
    ]
    counted = [p for p in precisions if p is not None]

    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0

    if not counted or any(p == 0.0 for p in counted):
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in counted) / len(counted))

    return BleuReport(
        bleu=score,
        precisions=precisions,
        brevity_penalty=bp,
        hyp_tokens=hyp_len,
        ref_tokens=ref_len,
        max_n=max_n,
    )
