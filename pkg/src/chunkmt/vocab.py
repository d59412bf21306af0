"""Character vocabulary with reserved control symbols.

Index 0..3 are reserved: end-of-token, unknown, padding, and the
empty-chunk symbol (the character-sequence stand-in for a zero-length
chunk).  Real characters follow in sorted order, so a vocabulary built
from the same corpus is always identical.
"""

from __future__ import annotations

from typing import Iterable

EOT = 0
UNK = 1
PAD = 2
EMPTY = 3
RESERVED = ("<eot>", "<unk>", "<pad>", "<empty>")


class CharVocab:
    def __init__(self, chars: Iterable[str]):
        chars = list(chars)
        for c in chars:
            if len(c) != 1:
                raise ValueError(f"vocabulary characters must be single chars: {c!r}")
        self.symbols: tuple[str, ...] = RESERVED + tuple(chars)
        self._index = {c: i + len(RESERVED) for i, c in enumerate(chars)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "CharVocab":
        chars = set()
        for text in texts:
            chars.update(text)
        return cls(sorted(chars))

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def n_emissible(self) -> int:
        """Decoder output classes: everything except padding and empty."""
        return len(self.symbols) - 2

    def encode(self, text: str) -> list[int]:
        """Character ids for a string; unknown characters map to UNK."""
        return [self._index.get(c, UNK) for c in text]

    def char(self, idx: int) -> str:
        return self.symbols[idx]

    def chars(self) -> list[str]:
        """The non-reserved characters, for serialization."""
        return list(self.symbols[len(RESERVED) :])

    def __eq__(self, other) -> bool:
        return isinstance(other, CharVocab) and self.symbols == other.symbols
