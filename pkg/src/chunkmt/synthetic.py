"""Seeded synthetic parallel corpora for quantitative end-to-end runs.

Source sentences are random tokens from a generated inventory; the target
applies a token reorder rule (identity, reverse, or swap-halves) and maps
every character through a deterministic substitution cipher.  The same
spec and seed always produce the same corpus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REORDER_RULES = ("identity", "reverse", "swap_halves")


def shift_cipher(alphabet: str, shift: int) -> dict:
    """Rotate an alphabet: with shift 1, a->b, ..., last->first."""
    n = len(alphabet)
    return {c: alphabet[(i + shift) % n] for i, c in enumerate(alphabet)}


@dataclass
class SyntheticSpec:
    vocab_size: int = 50
    n_sentences: int = 1000
    len_range: tuple = (3, 8)
    rule: str = "identity"
    cipher: dict | None = None     # None: identity cipher
    seed: int = 0
    alphabet: str = "abcdefghij"
    token_len_range: tuple = (2, 4)

    def __post_init__(self):
        if self.rule not in REORDER_RULES:
            raise ValueError(f"unknown reorder rule {self.rule!r}")
        if self.vocab_size < 1 or self.n_sentences < 0:
            raise ValueError("vocab_size must be >= 1 and n_sentences >= 0")
        lo, hi = self.len_range
        tlo, thi = self.token_len_range
        if not (1 <= lo <= hi) or not (1 <= tlo <= thi):
            raise ValueError("length ranges must be 1 <= lo <= hi")


def _reorder(tokens, rule: str):
    if rule == "identity":
        return list(tokens)
    if rule == "reverse":
        return list(reversed(tokens))
    mid = len(tokens) // 2
    return list(tokens[mid:]) + list(tokens[:mid])


def _apply_cipher(token: str, cipher: dict | None) -> str:
    if cipher is None:
        return token
    return "".join(cipher.get(c, c) for c in token)


def token_inventory(spec: SyntheticSpec, rng) -> list[str]:
    """vocab_size distinct random tokens over the alphabet."""
    tlo, thi = spec.token_len_range
    alphabet = list(spec.alphabet)
    max_tokens = sum(len(alphabet) ** l for l in range(tlo, thi + 1))
    if spec.vocab_size > max_tokens:
        raise ValueError(
            f"cannot draw {spec.vocab_size} distinct tokens of length "
            f"{tlo}..{thi} over {len(alphabet)} characters"
        )
    tokens: list[str] = []
    seen = set()
    while len(tokens) < spec.vocab_size:
        length = int(rng.integers(tlo, thi + 1))
        tok = "".join(rng.choice(alphabet, size=length))
        if tok not in seen:
            seen.add(tok)
            tokens.append(tok)
    return tokens


def gen_synthetic(spec: SyntheticSpec):
    """Parallel corpus as (source token lists, target token lists)."""
    rng = np.random.default_rng(spec.seed)
    inventory = token_inventory(spec, rng)
    lo, hi = spec.len_range
    sources = []
    targets = []
    for _ in range(spec.n_sentences):
        length = int(rng.integers(lo, hi + 1))
        src = [inventory[int(k)] for k in rng.integers(0, len(inventory), size=length)]
        tgt = [_apply_cipher(t, spec.cipher) for t in _reorder(src, spec.rule)]
        sources.append(src)
        targets.append(tgt)
    return sources, targets
