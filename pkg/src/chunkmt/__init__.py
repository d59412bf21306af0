"""chunkmt: low-resource character-level translation with insertion-based
reordering, plus the alignment pipeline, trainer, and BLEU evaluation that
exercise it end to end."""

__version__ = "0.1.0"
