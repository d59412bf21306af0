"""Alignment-driven supervision: lexical-translation EM, confident 1-to-1
link extraction, and construction of same-length chunked training pairs.

Link posteriors are estimated per direction with an IBM-Model-1-style
lexical model (EM with additive Dirichlet-mean smoothing and an optional
NULL source), or imported from an external aligner via a small text
interchange format.  From a posterior pair we greedily extract the most
confident consistent 1-to-1 links and rewrite the target sentence as one
(possibly empty, possibly multi-word) chunk per source token, together
with the insertion positions that replay the original target order.

Pair indices are 0-based throughout the Python API; the interchange file
format and the gold_* fields are 1-based.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-6

# Unit separator: joins the words of a multi-word chunk in the chunked
# sequence file so that columns stay tab-separated.
US = "\x1f"


class PosteriorFormatError(ValueError):
    """Malformed or invalid posterior interchange file."""


@dataclass
class AlignmentPosteriors:
    """Link posteriors for one sentence pair, both directions.

    forward[i, j] = P(source position i links to target position j);
    backward[j, i] is the same for the reverse model.  Rows are
    subdistributions: the missing mass is the NULL (unaligned) probability.
    """

    forward: np.ndarray  # (N, M)
    backward: np.ndarray  # (M, N)

    def validate(self) -> None:
        n, m = self.forward.shape
        if self.backward.shape != (m, n):
            raise ValueError(
                f"posterior shapes disagree: forward {self.forward.shape}, "
                f"backward {self.backward.shape}"
            )
        for name, mat in (("forward", self.forward), ("backward", self.backward)):
            if mat.size == 0:
                continue
            if mat.min() < 0.0 or mat.max() > 1.0 + ROW_SUM_TOL:
                raise ValueError(f"{name} posterior entries outside [0, 1]")
            if mat.shape[1] and (mat.sum(axis=1) > 1.0 + ROW_SUM_TOL).any():
                raise ValueError(f"{name} posterior row sums exceed 1")


# ---------------------------------------------------------------------------
# posterior estimation (IBM Model 1 stand-in)
# ---------------------------------------------------------------------------

_NULL = object()  # sentinel column, cannot collide with a real token


def estimate_posteriors(
    pairs, iterations: int = 5, alpha: float = 0.01, use_null: bool = True
) -> list[np.ndarray]:
    """Per-sentence link posteriors for one direction.

    Each pair is (row_tokens, col_tokens); row tokens are modelled as
    generated by col tokens (plus NULL).  EM with add-alpha smoothing on
    the lexical table; returned matrices have shape (len(rows), len(cols))
    with the NULL mass left out, so each row sums to at most 1.  Empty
    sentences are skipped (zero-size posterior) with a warning count.
    """
    if not pairs:
        raise ValueError("estimate_posteriors requires a nonempty corpus")
    if iterations < 1:
        raise ValueError("iterations must be positive")

    trainable = [(rows, cols) for rows, cols in pairs if rows and cols]
    skipped = len(pairs) - len(trainable)
    if skipped:
        log.warning("estimate_posteriors: skipped %d empty sentence pair(s)", skipped)
    if not trainable:
        raise ValueError("estimate_posteriors: no nonempty sentence pairs")

    row_vocab = {w for rows, _ in trainable for w in rows}
    v = len(row_vocab)
    uniform = 1.0 / v
    t: dict = defaultdict(lambda: uniform)

    def columns(cols):
        return list(cols) + [_NULL] if use_null else list(cols)

    for _ in range(iterations):
        counts: dict = defaultdict(float)
        totals: dict = defaultdict(float)
        for rows, cols in trainable:
            cs = columns(cols)
            for r in rows:
                probs = [t[(r, c)] for c in cs]
                denom = sum(probs)
                for c, p in zip(cs, probs):
                    inc = p / denom
                    counts[(r, c)] += inc
                    totals[c] += inc
        t = defaultdict(lambda: uniform)
        for (r, c), cnt in counts.items():
            t[(r, c)] = (cnt + alpha) / (totals[c] + alpha * v)

    out = []
    for rows, cols in pairs:
        if not rows or not cols:
            out.append(np.zeros((len(rows), len(cols))))
            continue
        cs = columns(cols)
        mat = np.zeros((len(rows), len(cols)))
        for i, r in enumerate(rows):
            probs = np.array([t[(r, c)] for c in cs])
            mat[i] = (probs / probs.sum())[: len(cols)]
        out.append(mat)
    return out


def align_corpus(
    pairs, iterations: int = 5, alpha: float = 0.01, use_null: bool = True
) -> list[AlignmentPosteriors]:
    """Estimate both directions and bundle them per sentence."""
    fwd = estimate_posteriors(pairs, iterations, alpha, use_null)
    swapped = [(tgt, src) for src, tgt in pairs]
    bwd = estimate_posteriors(swapped, iterations, alpha, use_null)
    out = []
    for f, b in zip(fwd, bwd):
        post = AlignmentPosteriors(forward=f, backward=b)
        post.validate()
        out.append(post)
    return out


# ---------------------------------------------------------------------------
# posterior interchange format
# ---------------------------------------------------------------------------


def export_posteriors(matrices, path) -> None:
    """One record per sentence: header "N M", then "i j p" lines (1-based),
    records separated by a blank line."""
    with open(path, "w", encoding="utf-8") as fh:
        for mat in matrices:
            n, m = mat.shape
            fh.write(f"{n} {m}\n")
            for i in range(n):
                for j in range(m):
                    if mat[i, j] != 0.0:
                        # repr of a Python float round-trips exactly
                        fh.write(f"{i + 1} {j + 1} {float(mat[i, j])!r}\n")
            fh.write("\n")


def import_posteriors(path) -> list[np.ndarray]:
    """Parse and validate a posterior interchange file."""
    matrices = []
    mat = None
    n = m = 0
    record_line = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                if mat is not None:
                    _validate_rows(mat, record_line)
                    matrices.append(mat)
                    mat = None
                continue
            parts = line.split()
            if mat is None:
                if len(parts) != 2:
                    raise PosteriorFormatError(
                        f"{path}:{lineno}: expected header 'N M', got {line!r}"
                    )
                try:
                    n, m = int(parts[0]), int(parts[1])
                except ValueError:
                    raise PosteriorFormatError(
                        f"{path}:{lineno}: non-integer header {line!r}"
                    ) from None
                if n < 0 or m < 0:
                    raise PosteriorFormatError(f"{path}:{lineno}: negative size")
                mat = np.zeros((n, m))
                record_line = lineno
            else:
                if len(parts) != 3:
                    raise PosteriorFormatError(
                        f"{path}:{lineno}: expected 'i j p', got {line!r}"
                    )
                try:
                    i, j, p = int(parts[0]), int(parts[1]), float(parts[2])
                except ValueError:
                    raise PosteriorFormatError(
                        f"{path}:{lineno}: malformed entry {line!r}"
                    ) from None
                if not (1 <= i <= n and 1 <= j <= m):
                    raise PosteriorFormatError(
                        f"{path}:{lineno}: index ({i},{j}) outside {n}x{m} record"
                    )
                if not (0.0 <= p <= 1.0 + ROW_SUM_TOL):
                    raise PosteriorFormatError(
                        f"{path}:{lineno}: probability {p} outside [0, 1]"
                    )
                mat[i - 1, j - 1] = p
    if mat is not None:
        _validate_rows(mat, record_line)
        matrices.append(mat)
    return matrices


def _validate_rows(mat, record_line) -> None:
    if mat.shape[1] and (mat.sum(axis=1) > 1.0 + ROW_SUM_TOL).any():
        bad = int(np.argmax(mat.sum(axis=1)))
        raise PosteriorFormatError(
            f"record at line {record_line}: row {bad + 1} sums to "
            f"{mat[bad].sum():.6f} > 1"
        )


def load_posterior_pairs(forward_path, backward_path) -> list[AlignmentPosteriors]:
    fwd = import_posteriors(forward_path)
    bwd = import_posteriors(backward_path)
    if len(fwd) != len(bwd):
        raise PosteriorFormatError(
            f"direction files disagree: {len(fwd)} vs {len(bwd)} records"
        )
    out = []
    for f, b in zip(fwd, bwd):
        post = AlignmentPosteriors(forward=f, backward=b)
        post.validate()
        out.append(post)
    return out


# ---------------------------------------------------------------------------
# confident 1-to-1 extraction
# ---------------------------------------------------------------------------


def link_scores(post: AlignmentPosteriors) -> np.ndarray:
    """s[i, j] = P_f(a_i = j) * P_b(a_j = i)."""
    return post.forward * post.backward.T


def extract_one_to_one(post: AlignmentPosteriors, tau: float = 0.1) -> set:
    """Greedy maximal matching by descending link score with floor tau.

    Repeatedly takes the highest-scoring unused (i, j) with s(i, j) >= tau,
    never reusing a source or target position.  Ties break on (i, j) order.
    Returns a set of 0-based (i, j) pairs; the empty set is valid.
    """
    s = link_scores(post)
    n, m = s.shape
    candidates = [
        (i, j) for i in range(n) for j in range(m) if s[i, j] >= tau
    ]
    candidates.sort(key=lambda ij: (-s[ij], ij))
    used_i: set[int] = set()
    used_j: set[int] = set()
    pairs = set()
    for i, j in candidates:
        if i in used_i or j in used_j:
            continue
        pairs.add((i, j))
        used_i.add(i)
        used_j.add(j)
    return pairs


# ---------------------------------------------------------------------------
# chunked training sequences
# ---------------------------------------------------------------------------


@dataclass
class AlignedSentencePair:
    """Source tokens with an equal-length list of target chunks.

    chunks[i] is the (possibly empty, possibly multi-word) target text
    generated by source token i.  For non-empty chunks, gold_target_index
    holds the chunk's 1-based order in the reference target and
    gold_insertion the 1-based slot at which it enters the growing
    hypothesis; both are None for empty chunks.
    """

    source_tokens: list[str]
    chunks: list[str]
    gold_target_index: list
    gold_insertion: list

    def validate(self) -> None:
        n = len(self.source_tokens)
        if not (len(self.chunks) == len(self.gold_target_index) == len(self.gold_insertion) == n):
            raise ValueError("aligned pair field lengths disagree")
        seen = set()
        inserted = 0
        for chunk, rank, ins in zip(self.chunks, self.gold_target_index, self.gold_insertion):
            if chunk == "":
                if rank is not None or ins is not None:
                    raise ValueError("empty chunk with gold annotations")
                continue
            if rank is None or ins is None:
                raise ValueError("non-empty chunk missing gold annotations")
            if rank in seen:
                raise ValueError(f"duplicate gold target index {rank}")
            seen.add(rank)
            if not (1 <= ins <= inserted + 1):
                raise ValueError(f"insertion position {ins} out of range")
            inserted += 1

    def target_text(self) -> str:
        """The aligned-and-merged reference target."""
        ordered = sorted(
            (rank, chunk)
            for chunk, rank in zip(self.chunks, self.gold_target_index)
            if chunk != ""
        )
        return " ".join(chunk for _, chunk in ordered)


def derive_gold_insertions(gold_ranks) -> list:
    """Insertion positions from target-order ranks, in source order.

    Simulates left-to-right generation: each non-empty chunk is inserted
    so that previously inserted chunks with a smaller rank stay to its
    left, i.e. at slot 1 + count of smaller already-inserted ranks.
    Entries that are None (empty chunks) get None.
    """
    placed: list[int] = []
    out = []
    for rank in gold_ranks:
        if rank is None:
            out.append(None)
            continue
        if rank in placed:
            raise ValueError(f"duplicate gold target index {rank}")
        out.append(1 + sum(1 for q in placed if q < rank))
        placed.append(rank)
    return out


def replay_insertions(chunks, insertions) -> list[str]:
    """Rebuild the target chunk order by applying the insertion positions."""
    result: list[str] = []
    for chunk, ins in zip(chunks, insertions):
        if chunk == "":
            continue
        if ins is None or not (1 <= ins <= len(result) + 1):
            raise ValueError(f"invalid insertion position {ins}")
        result.insert(ins - 1, chunk)
    return result


def build_training_sequence(source_tokens, target_tokens, pairs) -> AlignedSentencePair:
    """Rewrite a target sentence as one chunk per source token.

    Unaligned source tokens generate the empty string.  A source token
    aligned to target position j generates target_tokens[j] followed by
    the immediately following unaligned target tokens; target tokens
    before the first aligned position are prepended to that first chunk,
    so every target token lands in exactly one chunk.
    """
    if not pairs:
        raise ValueError("cannot build a training sequence without alignment links")
    n, m = len(source_tokens), len(target_tokens)
    aligned = sorted(pairs, key=lambda ij: ij[1])
    seen_i: set[int] = set()
    for i, j in aligned:
        if not (0 <= i < n and 0 <= j < m):
            raise ValueError(f"alignment pair ({i},{j}) out of range for {n}x{m}")
        if i in seen_i:
            raise ValueError(f"source position {i} aligned twice")
        seen_i.add(i)
    if len({j for _, j in aligned}) != len(aligned):
        raise ValueError("target position aligned twice")

    chunks = [""] * n
    ranks: list = [None] * n
    for k, (i, j) in enumerate(aligned):
        start = 0 if k == 0 else j
        end = m if k == len(aligned) - 1 else aligned[k + 1][1]
        chunks[i] = " ".join(target_tokens[start:end])
        ranks[i] = k + 1
    pair = AlignedSentencePair(
        source_tokens=list(source_tokens),
        chunks=chunks,
        gold_target_index=ranks,
        gold_insertion=derive_gold_insertions(ranks),
    )
    pair.validate()
    return pair


def build_training_corpus(corpus, posteriors, tau: float = 0.1):
    """Chunked sequences for every sentence with at least one link.

    Returns (pairs, dropped): sentences whose extraction produced no links
    are dropped and counted.
    """
    if len(corpus) != len(posteriors):
        raise ValueError("corpus and posterior counts disagree")
    out = []
    dropped = 0
    for (src, tgt), post in zip(corpus, posteriors):
        links = extract_one_to_one(post, tau) if post.forward.size else set()
        if not links:
            dropped += 1
            continue
        out.append(build_training_sequence(src, tgt, links))
    if dropped:
        log.warning("build_training_corpus: dropped %d unalignable sentence(s)", dropped)
    return out, dropped


# ---------------------------------------------------------------------------
# chunked sequence file format
# ---------------------------------------------------------------------------


def write_chunked_sequences(pairs, path) -> None:
    """Tab-separated: source token, unit-separator-joined chunk, gold target
    index or '-'; one token per line, blank line between sentences."""
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            for tok, chunk, rank in zip(pair.source_tokens, pair.chunks, pair.gold_target_index):
                rank_s = "-" if rank is None else str(rank)
                fh.write(f"{tok}\t{chunk.replace(' ', US)}\t{rank_s}\n")
            fh.write("\n")


def read_chunked_sequences(path) -> list[AlignedSentencePair]:
    pairs = []
    tokens: list[str] = []
    chunks: list[str] = []
    ranks: list = []

    def flush(lineno):
        if not tokens:
            return
        pair = AlignedSentencePair(
            source_tokens=list(tokens),
            chunks=list(chunks),
            gold_target_index=list(ranks),
            gold_insertion=derive_gold_insertions(ranks),
        )
        try:
            pair.validate()
        except ValueError as exc:
            raise ValueError(f"{path}: sentence ending at line {lineno}: {exc}") from exc
        pairs.append(pair)
        tokens.clear()
        chunks.clear()
        ranks.clear()

    with open(path, encoding="utf-8") as fh:
        lineno = 0
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush(lineno)
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            tok, chunk, rank_s = parts
            tokens.append(tok)
            chunks.append(chunk.replace(US, " "))
            ranks.append(None if rank_s == "-" else int(rank_s))
        flush(lineno)
    return pairs
