"""Corpus ingestion, deterministic splitting, minibatch training with early
stopping, and run configuration.

Training is plain single-worker SGD-style minibatching: sentences are
bucketed by source length, per-sentence gradients are summed, the global
gradient norm is clipped, and Adam applies the update.  Held-out
cross-entropy (mean nats per output symbol) drives early stopping.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from . import align as al
from . import autodiff as ad
from . import nn
from . import model as mdl
from .checkpoint import save_checkpoint
from .vocab import CharVocab

log = logging.getLogger(__name__)

GRAD_CLIP_NORM = 5.0


class CorpusError(ValueError):
    """Unreadable or inconsistent parallel corpus."""


class TrainingError(RuntimeError):
    """Training diverged or hit an unusable batch."""


@dataclass
class RunConfig:
    hidden_dim: int = 256
    char_embed_dim: int = 64
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    tau: float = 0.1
    alpha: float = 0.01
    em_iterations: int = 5
    max_chunk_chars: int = 32
    patience: int = 3
    eval_interval: int = 1
    seed: int = 1
    lowercase: bool = True
    max_epochs: int = 50

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and not isinstance(v, bool) and v < 0:
                raise ValueError(f"config field {f.name} must be nonnegative, got {v}")
        for name in ("hidden_dim", "char_embed_dim", "batch_size", "learning_rate",
                     "em_iterations", "max_chunk_chars", "patience", "eval_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")

    def model_config(self) -> mdl.ModelConfig:
        return mdl.ModelConfig(
            hidden_dim=self.hidden_dim,
            char_embed_dim=self.char_embed_dim,
            max_chunk_chars=self.max_chunk_chars,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        """Flat key=value text; keys must match RunConfig field names."""
        values = {}
        types = {f.name: f.type for f in fields(cls)}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if key not in types:
                    raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
                if types[key] == "bool":
                    values[key] = value.lower() in ("1", "true", "yes", "on")
                elif types[key] == "int":
                    values[key] = int(value)
                else:
                    values[key] = float(value)
        return cls(**values)

    def override(self, **kwargs) -> "RunConfig":
        updates = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **updates)


# ---------------------------------------------------------------------------
# corpus handling
# ---------------------------------------------------------------------------


def _read_lines(path) -> list[str]:
    lines = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                lines.append(raw.decode("utf-8").rstrip("\r\n"))
            except UnicodeDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: undecodable byte sequence ({exc})") from exc
    return lines


def ingest_corpus(src_path, tgt_path, config: RunConfig):
    """Whitespace-tokenized parallel pairs; optional lowercasing.

    Pairs where either side is empty are dropped.  Returns (pairs, dropped).
    """
    src_lines = _read_lines(src_path)
    tgt_lines = _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(
            f"line counts differ: {src_path} has {len(src_lines)}, "
            f"{tgt_path} has {len(tgt_lines)}"
        )
    pairs = []
    dropped = 0
    for s, t in zip(src_lines, tgt_lines):
        if config.lowercase:
            s, t = s.lower(), t.lower()
        st, tt = s.split(), t.split()
        if not st or not tt:
            dropped += 1
            continue
        pairs.append((st, tt))
    if dropped:
        log.warning("ingest_corpus: dropped %d empty-line pair(s)", dropped)
    return pairs, dropped


def split_corpus(corpus, heldout_n: int, seed: int):
    """Seeded held-out sample without replacement; order-stable remainder."""
    if heldout_n >= len(corpus):
        raise ValueError(
            f"heldout size {heldout_n} must be smaller than corpus size {len(corpus)}"
        )
    if heldout_n == 0:
        return list(corpus), []
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(corpus), size=heldout_n, replace=False).tolist())
    train = [x for i, x in enumerate(corpus) if i not in chosen]
    heldout = [corpus[i] for i in sorted(chosen)]
    return train, heldout


# ---------------------------------------------------------------------------
# loss bookkeeping
# ---------------------------------------------------------------------------


def count_symbols(pair) -> int:
    """Output symbols: every chunk's characters plus its end-of-token, plus
    one position decision per non-empty chunk."""
    total = 0
    for chunk in pair.chunks:
        total += len(chunk) + 1
        if chunk != "":
            total += 1
    return total


def heldout_xent(params: mdl.ModelParams, pairs, cache: dict | None = None) -> float:
    """Mean nats per output symbol over a held-out set."""
    if not pairs:
        raise ValueError("heldout_xent requires a nonempty set")
    if cache is None:
        cache = {}
    total_loss = 0.0
    total_symbols = 0
    for pair in pairs:
        total_loss += float(mdl.sentence_loss(params, pair, cache).value)
        total_symbols += count_symbols(pair)
    return total_loss / total_symbols


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: mdl.ModelParams
    adam: nn.AdamState
    epoch: int = 0
    best_xent: float = float("inf")
    evals_since_improvement: int = 0
    # epoch-level rng is derived as default_rng([seed, epoch]); (seed, epoch)
    # therefore fully determines the shuffling state.
    seed: int = 0


@dataclass
class TrainResult:
    params: mdl.ModelParams          # best checkpoint (falls back to last)
    trajectory: list                 # (epoch, heldout xent) per evaluation
    best_xent: float
    epochs_run: int
    train_xent_history: list         # mean train nats/symbol per epoch
    checkpoint_path: str | None = None

    @property
    def final_train_xent(self) -> float:
        return self.train_xent_history[-1] if self.train_xent_history else float("nan")


def _bucketed_batches(pairs, batch_size: int, rng) -> list[list[int]]:
    """Indices grouped into batches of similar source length.

    Sentences are bucketed by source length, shuffled within buckets, cut
    into batches, and the batch order is shuffled; the multiset of
    sentences per epoch is preserved.
    """
    buckets: dict[int, list[int]] = {}
    for i, p in enumerate(pairs):
        buckets.setdefault(len(p.source_tokens), []).append(i)
    batches = []
    for length in sorted(buckets):
        idx = buckets[length]
        order = rng.permutation(len(idx))
        shuffled = [idx[k] for k in order]
        for start in range(0, len(shuffled), batch_size):
            batches.append(shuffled[start : start + batch_size])
    batch_order = rng.permutation(len(batches))
    return [batches[k] for k in batch_order]


def _snapshot(params: mdl.ModelParams) -> dict:
    return {name: arr.copy() for name, arr in params.arrays().items()}


def train(
    config: RunConfig,
    train_pairs,
    heldout_pairs,
    out_dir: str | None = None,
) -> TrainResult:
    """Minibatch Adam training with early stopping on held-out cross-entropy.

    Vocabularies are built from the training pairs.  The best-scoring
    checkpoint is kept (and written to out_dir when given); training stops
    after ``patience`` evaluations without improvement or at max_epochs.
    With an empty held-out set no evaluations run and the final parameters
    are returned.
    """
    if not train_pairs:
        raise ValueError("train requires a nonempty training set")
    for pair in train_pairs:
        pair.validate()

    src_vocab = CharVocab.build(tok for p in train_pairs for tok in p.source_tokens)
    trg_vocab = CharVocab.build(chunk for p in train_pairs for chunk in p.chunks)
    params = mdl.ModelParams.init(config.model_config(), src_vocab, trg_vocab, config.seed)
    adam = nn.AdamState.for_params(
        params.arrays(),
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.adam_epsilon,
    )
    state = TrainState(params=params, adam=adam, seed=config.seed)

    checkpoint_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = os.path.join(out_dir, "best.ckpt")
        write_manifest(os.path.join(out_dir, "manifest.json"), "train", config.to_dict())

    best_arrays = _snapshot(params)
    trajectory: list = []
    train_hist: list = []

    def save_best():
        nonlocal best_arrays
        best_arrays = _snapshot(params)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, params)

    if config.max_epochs == 0 and checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params)

    for epoch in range(config.max_epochs):
        state.epoch = epoch
        rng = np.random.default_rng([config.seed, epoch])
        epoch_loss = 0.0
        epoch_symbols = 0
        for batch_no, batch in enumerate(_bucketed_batches(train_pairs, config.batch_size, rng)):
            params.zero_grads()
            cache: dict = {}
            for idx in batch:
                pair = train_pairs[idx]
                loss = mdl.sentence_loss(params, pair, cache)
                if not np.isfinite(loss.value):
                    raise TrainingError(
                        f"non-finite loss {float(loss.value)} at epoch {epoch}, "
                        f"batch {batch_no}, source {' '.join(pair.source_tokens)!r}"
                    )
                ad.backward(loss)
                epoch_loss += float(loss.value)
                epoch_symbols += count_symbols(pair)
            grads = params.grads()
            nn.clip_grads(grads, GRAD_CLIP_NORM)
            nn.adam_step(state.adam, params.arrays(), grads)
        train_hist.append(epoch_loss / max(epoch_symbols, 1))

        if heldout_pairs and (epoch + 1) % config.eval_interval == 0:
            xent = heldout_xent(params, heldout_pairs)
            trajectory.append((epoch + 1, xent))
            log.info("epoch %d: heldout %.4f nats/symbol", epoch + 1, xent)
            if xent < state.best_xent:
                state.best_xent = xent
                state.evals_since_improvement = 0
                save_best()
            else:
                state.evals_since_improvement += 1
                if state.evals_since_improvement >= config.patience:
                    break

    if not heldout_pairs:
        # no early-stopping signal: final parameters are the result
        save_best()

    best = mdl.ModelParams.from_arrays(config.model_config(), src_vocab, trg_vocab, best_arrays)
    return TrainResult(
        params=best,
        trajectory=trajectory,
        best_xent=state.best_xent,
        epochs_run=state.epoch + 1 if config.max_epochs else 0,
        train_xent_history=train_hist,
        checkpoint_path=checkpoint_path,
    )


def train_from_corpus(
    config: RunConfig,
    corpus,
    heldout_n: int,
    out_dir: str | None = None,
    posteriors=None,
) -> TrainResult:
    """Full pipeline from raw token pairs: align (unless posteriors are
    supplied), build chunked sequences, split, and train."""
    if posteriors is None:
        posteriors = al.align_corpus(corpus, config.em_iterations, config.alpha)
    sequences, dropped = al.build_training_corpus(corpus, posteriors, config.tau)
    if not sequences:
        raise TrainingError("no alignable sentences in the corpus")
    train_seqs, heldout_seqs = split_corpus(sequences, heldout_n, config.seed)
    return train(config, train_seqs, heldout_seqs, out_dir)


def write_manifest(path, command: str, settings: dict) -> None:
    """Reproducibility record written next to any produced artifact."""
    payload = {"tool": "chunkmt", "command": command, "settings": settings}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
