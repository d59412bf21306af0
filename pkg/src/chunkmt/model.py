"""Token-by-token chunk translation with learned insertion reordering.

The model walks the source sentence one token at a time.  Each step
combines the encoded source position with the previously produced target
chunk into a target state h_i, decodes a (possibly empty) character chunk
conditioned on h_i, and, when the chunk is non-empty, inserts it into the
partial hypothesis at a slot scored by a two-layer feedforward network
over the neighbouring states.

Components: a character-level BiLSTM token encoder and a sentence-level
BiLSTM on the source side, a BiLSTM target-token encoder, a unidirectional
target-state LSTM, a character LSTM decoder whose every input is
concatenated with h_i, and the position network.  Hidden layers share one
width; character embeddings have their own.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Node
from .vocab import EMPTY, EOT, PAD, UNK, CharVocab

NEG_INF = -1e30


@dataclass
class ModelConfig:
    hidden_dim: int = 256
    char_embed_dim: int = 64
    max_chunk_chars: int = 32


@dataclass
class PartialHypothesis:
    """Ordered (chunk text, originating source index) entries plus the
    insertion history that produced them."""

    entries: list = field(default_factory=list)
    history: list = field(default_factory=list)  # (source index, slot)

    def text(self) -> str:
        return " ".join(chunk for chunk, _ in self.entries)


def apply_insertion(
    hypothesis: PartialHypothesis, chunk: str, slot: int, source_index: int = -1
) -> PartialHypothesis:
    """New hypothesis with ``chunk`` as entry number ``slot`` (1-based)."""
    if chunk == "":
        raise ValueError("cannot insert an empty chunk")
    m = len(hypothesis.entries)
    if not (1 <= slot <= m + 1):
        raise ValueError(f"insertion slot {slot} outside [1, {m + 1}]")
    entries = list(hypothesis.entries)
    entries.insert(slot - 1, (chunk, source_index))
    return PartialHypothesis(entries, hypothesis.history + [(source_index, slot)])


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

_LSTM_INPUTS = {
    "src_tok_fwd": "E",
    "src_tok_bwd": "E",
    "src_enc_fwd": "2H",
    "src_enc_bwd": "2H",
    "trg_tok_fwd": "E",
    "trg_tok_bwd": "E",
    "trg_enc": "4H",  # encoded previous chunk (2H) || encoded source position (2H)
    "dec": "EH",  # previous character embedding || h_i
}


def param_shapes(config: ModelConfig, n_src_symbols: int, n_trg_symbols: int):
    """Every trainable tensor's name and shape, in a fixed order."""
    h, e = config.hidden_dim, config.char_embed_dim
    size = {"E": e, "2H": 2 * h, "4H": 4 * h, "EH": e + h}
    shapes: dict[str, tuple] = {
        "src_embed": (n_src_symbols, e),
        "trg_embed": (n_trg_symbols, e),
    }
    for name, key in _LSTM_INPUTS.items():
        shapes[f"{name}.w_in"] = (size[key], 4 * h)
        shapes[f"{name}.w_rec"] = (h, 4 * h)
        shapes[f"{name}.b"] = (4 * h,)
    shapes.update(
        {
            "dec_out_w": (h, n_trg_symbols),
            "dec_out_b": (n_trg_symbols,),
            "dec_h0_w": (h, h),
            "dec_h0_b": (h,),
            "dec_c0_w": (h, h),
            "dec_c0_b": (h,),
            "pos_w1": (3 * h, h),
            "pos_b1": (h,),
            "pos_w2": (h, 1),
            "pos_b2": (1,),
            "boundary": (h,),
            "start_tok": (2 * h,),
        }
    )
    return shapes


class ModelParams:
    """All trainable tensors, the vocabularies, and the size configuration."""

    def __init__(self, config: ModelConfig, src_vocab: CharVocab, trg_vocab: CharVocab, tensors: dict):
        expected = param_shapes(config, len(src_vocab), len(trg_vocab))
        if set(tensors) != set(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise ValueError(f"parameter names mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if tuple(tensors[name].value.shape) != shape:
                raise ValueError(
                    f"parameter {name!r} has shape {tensors[name].value.shape}, expected {shape}"
                )
        self.config = config
        self.src_vocab = src_vocab
        self.trg_vocab = trg_vocab
        self._tensors = {name: tensors[name] for name in expected}

        def lstm(prefix):
            return nn.LstmParams(
                w_in=tensors[f"{prefix}.w_in"],
                w_rec=tensors[f"{prefix}.w_rec"],
                b=tensors[f"{prefix}.b"],
                hidden_size=config.hidden_dim,
            )

        self.src_embed = tensors["src_embed"]
        self.trg_embed = tensors["trg_embed"]
        self.src_tok_fwd = lstm("src_tok_fwd")
        self.src_tok_bwd = lstm("src_tok_bwd")
        self.src_enc_fwd = lstm("src_enc_fwd")
        self.src_enc_bwd = lstm("src_enc_bwd")
        self.trg_tok_fwd = lstm("trg_tok_fwd")
        self.trg_tok_bwd = lstm("trg_tok_bwd")
        self.trg_enc = lstm("trg_enc")
        self.dec = lstm("dec")
        for name in (
            "dec_out_w", "dec_out_b", "dec_h0_w", "dec_h0_b", "dec_c0_w",
            "dec_c0_b", "pos_w1", "pos_b1", "pos_w2", "pos_b2", "boundary",
            "start_tok",
        ):
            setattr(self, name, tensors[name])

    @property
    def dtype(self):
        return self.src_embed.value.dtype

    def named_tensors(self) -> dict:
        return dict(self._tensors)

    def arrays(self) -> dict:
        return {name: node.value for name, node in self._tensors.items()}

    def grads(self) -> dict:
        """Accumulated gradients (copies, safe to scale in place); zeros for
        tensors no backward pass reached."""
        return {
            name: (node.grad.copy() if node.grad is not None else np.zeros_like(node.value))
            for name, node in self._tensors.items()
        }

    def zero_grads(self) -> None:
        ad.zero_grads(self._tensors.values())

    @classmethod
    def from_arrays(cls, config, src_vocab, trg_vocab, arrays: dict) -> "ModelParams":
        return cls(config, src_vocab, trg_vocab, {k: ad.leaf(v) for k, v in arrays.items()})

    @classmethod
    def init(cls, config, src_vocab, trg_vocab, seed: int, dtype=np.float32) -> "ModelParams":
        """Seeded initialization: uniform [-0.1, 0.1] weights, zero biases,
        forget-gate biases 1.0."""
        rng = np.random.default_rng(seed)
        h = config.hidden_dim
        zero_biases = {"dec_out_b", "dec_h0_b", "dec_c0_b", "pos_b1", "pos_b2"}
        arrays = {}
        for name, shape in param_shapes(config, len(src_vocab), len(trg_vocab)).items():
            if name.endswith(".b"):
                b = np.zeros(shape, dtype=dtype)
                b[h : 2 * h] = 1.0
                arrays[name] = b
            elif name in zero_biases:
                arrays[name] = np.zeros(shape, dtype=dtype)
            else:
                arrays[name] = nn.uniform_init(rng, shape, dtype)
        return cls.from_arrays(config, src_vocab, trg_vocab, arrays)

    @classmethod
    def zeros(cls, config, src_vocab, trg_vocab, dtype=np.float32) -> "ModelParams":
        """All-zero parameters: a uniform model, handy for analytic tests."""
        arrays = {
            name: np.zeros(shape, dtype=dtype)
            for name, shape in param_shapes(config, len(src_vocab), len(trg_vocab)).items()
        }
        return cls.from_arrays(config, src_vocab, trg_vocab, arrays)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


def encode_source_token(params: ModelParams, token: str, cache: dict | None = None) -> Node:
    """Fixed-size vector (2*hidden) for one source token's characters."""
    if token == "":
        raise ValueError("source tokens must be nonempty")
    key = ("src_tok", token)
    if cache is not None and key in cache:
        return cache[key]
    xs = [ad.embedding_lookup(params.src_embed, i) for i in params.src_vocab.encode(token)]
    out = nn.final_state(params.src_tok_fwd, params.src_tok_bwd, xs)
    if cache is not None:
        cache[key] = out
    return out


def encode_source_sentence(params: ModelParams, tokens, cache: dict | None = None) -> list[Node]:
    """Two-level encoding: per-token vectors fed to the sentence BiLSTM."""
    if not tokens:
        raise ValueError("encode_source_sentence requires a nonempty sentence")
    token_vecs = [encode_source_token(params, t, cache) for t in tokens]
    return nn.bilstm_encode(params.src_enc_fwd, params.src_enc_bwd, token_vecs)


def encode_target_token(params: ModelParams, chunk: str, cache: dict | None = None) -> Node:
    """Fixed-size vector for a target chunk; "" encodes the reserved
    empty-chunk symbol, spaces are ordinary characters."""
    key = ("trg_tok", chunk)
    if cache is not None and key in cache:
        return cache[key]
    ids = [EMPTY] if chunk == "" else params.trg_vocab.encode(chunk)
    xs = [ad.embedding_lookup(params.trg_embed, i) for i in ids]
    out = nn.final_state(params.trg_tok_fwd, params.trg_tok_bwd, xs)
    if cache is not None:
        cache[key] = out
    return out


def target_state_step(
    params: ModelParams, s_i: Node, prev_chunk, state=None, cache: dict | None = None
):
    """One step of the target-state LSTM on (encoded previous chunk || s_i).

    ``prev_chunk`` is the previous position's chunk string, or None at the
    first position, where the learned start-of-sentence embedding is used
    instead.  Returns (h_i, new recurrent state).
    """
    e_t = params.start_tok if prev_chunk is None else encode_target_token(params, prev_chunk, cache)
    x = ad.concat([e_t, s_i])
    if state is None:
        state = nn.lstm_zero_state(params.trg_enc, x.dtype)
    h, c = nn.lstm_step(params.trg_enc, x, *state)
    return h, (h, c)


# ---------------------------------------------------------------------------
# character decoder
# ---------------------------------------------------------------------------


def _decoder_start(params: ModelParams, h_i: Node):
    h0 = ad.add(ad.matmul(h_i, params.dec_h0_w), params.dec_h0_b)
    c0 = ad.add(ad.matmul(h_i, params.dec_c0_w), params.dec_c0_b)
    return h0, c0


def _logit_mask(params: ModelParams, generation: bool) -> np.ndarray:
    # Padding and the empty-chunk symbol are never valid emissions; at
    # generation time the unknown symbol is suppressed as well.
    mask = np.zeros(len(params.trg_vocab), dtype=params.dtype)
    mask[PAD] = NEG_INF
    mask[EMPTY] = NEG_INF
    if generation:
        mask[UNK] = NEG_INF
    return mask


def _decoder_logits(params: ModelParams, h: Node, mask: Node) -> Node:
    return ad.add(ad.add(ad.matmul(h, params.dec_out_w), params.dec_out_b), mask)


def chunk_nll_terms(params: ModelParams, h_i: Node, chunk: str) -> list[Node]:
    """Per-symbol negative log probabilities for the chunk's characters
    followed by end-of-token.  The end-of-token symbol doubles as the
    start-of-chunk input, and h_i is concatenated to every input."""
    targets = params.trg_vocab.encode(chunk) + [EOT]
    mask = ad.leaf(_logit_mask(params, generation=False))
    h, c = _decoder_start(params, h_i)
    prev = EOT
    terms = []
    for tgt in targets:
        x = ad.concat([ad.embedding_lookup(params.trg_embed, prev), h_i])
        h, c = nn.lstm_step(params.dec, x, h, c)
        terms.append(ad.cross_entropy(_decoder_logits(params, h, mask), tgt))
        prev = tgt
    return terms


def _sum_terms(terms) -> Node:
    if len(terms) == 1:
        return terms[0]
    return ad.sum_all(ad.stack(terms))


def chunk_nll(params: ModelParams, h_i: Node, chunk: str) -> Node:
    return _sum_terms(chunk_nll_terms(params, h_i, chunk))


def chunk_log_prob(params: ModelParams, h_i: Node, chunk: str) -> Node:
    """log P(chunk | h_i), summed over characters plus end-of-token."""
    return ad.neg(chunk_nll(params, h_i, chunk))


def greedy_decode_chunk(params: ModelParams, h_i: Node, max_chars: int) -> str:
    """Argmax character decoding until end-of-token or the length cap."""
    mask_arr = _logit_mask(params, generation=True)
    mask = ad.leaf(mask_arr)
    h, c = _decoder_start(params, h_i)
    prev = EOT
    chars: list[str] = []
    for _ in range(max_chars):
        x = ad.concat([ad.embedding_lookup(params.trg_embed, prev), h_i])
        h, c = nn.lstm_step(params.dec, x, h, c)
        nxt = int(np.argmax(_decoder_logits(params, h, mask).value))
        if nxt == EOT:
            break
        chars.append(params.trg_vocab.char(nxt))
        prev = nxt
    return "".join(chars)


# ---------------------------------------------------------------------------
# position predictor
# ---------------------------------------------------------------------------


def position_scores(params: ModelParams, h_i: Node, hypothesis: PartialHypothesis, target_states) -> Node:
    """Unnormalized slot scores, one per insertion point 1..m+1.

    Slot j makes the new chunk the j-th entry; its feature is the state of
    the left neighbour (entry j-1), the state of the current occupant of
    position j, and h_i, with the learned boundary vector standing in for
    a missing neighbour at either end.  Entry states are looked up by the
    originating source position.
    """
    m = len(hypothesis.entries)
    rows = []
    for slot in range(1, m + 2):
        left = params.boundary if slot == 1 else target_states[hypothesis.entries[slot - 2][1]]
        right = params.boundary if slot == m + 1 else target_states[hypothesis.entries[slot - 1][1]]
        rows.append(ad.concat([left, right, h_i]))
    return nn.feedforward2_rows(
        params.pos_w1, params.pos_b1, params.pos_w2, params.pos_b2, ad.stack(rows)
    )


def position_distribution(params: ModelParams, h_i: Node, hypothesis: PartialHypothesis, target_states) -> Node:
    """Probabilities over the m+1 insertion slots."""
    return ad.softmax(position_scores(params, h_i, hypothesis, target_states))


# ---------------------------------------------------------------------------
# training loss and greedy translation
# ---------------------------------------------------------------------------


def sentence_loss(params: ModelParams, pair, cache: dict | None = None) -> Node:
    """Teacher-forced negative log likelihood of one aligned pair.

    Sums the character losses of every chunk and, for non-empty chunks
    after the first, the negative log probability of the gold insertion
    slot against the gold partial hypothesis.  The first insertion has a
    single slot (probability one) and contributes no position loss.
    """
    states = encode_source_sentence(params, pair.source_tokens, cache)
    state = None
    hypothesis = PartialHypothesis()
    target_states: list[Node] = []
    terms: list[Node] = []
    for i, chunk in enumerate(pair.chunks):
        prev = pair.chunks[i - 1] if i > 0 else None
        h_i, state = target_state_step(params, states[i], prev, state, cache)
        target_states.append(h_i)
        terms.extend(chunk_nll_terms(params, h_i, chunk))
        if chunk != "":
            slot = pair.gold_insertion[i]
            if hypothesis.entries:
                scores = position_scores(params, h_i, hypothesis, target_states)
                terms.append(ad.cross_entropy(scores, slot - 1))
            hypothesis = apply_insertion(hypothesis, chunk, slot, i)
    return _sum_terms(terms)


def translate_greedy(
    params: ModelParams,
    source_tokens,
    max_chunk_chars: int | None = None,
    oracle=None,
    cache: dict | None = None,
) -> str:
    """Greedy decoding: one chunk per source token, inserted at the argmax
    slot, feeding back the generated (not gold) chunk.

    ``oracle``, when given, is a sequence of (chunk, slot) decisions (slot
    ignored for empty chunks) overriding the model's predictions; the
    insertion machinery still runs, which makes the generation loop
    checkable independently of trained weights.
    """
    if not source_tokens:
        raise ValueError("translate_greedy requires a nonempty source")
    cap = max_chunk_chars if max_chunk_chars is not None else params.config.max_chunk_chars
    states = encode_source_sentence(params, source_tokens, cache)
    state = None
    hypothesis = PartialHypothesis()
    target_states: list[Node] = []
    prev_chunk = None
    for i in range(len(source_tokens)):
        h_i, state = target_state_step(params, states[i], prev_chunk, state, cache)
        target_states.append(h_i)
        if oracle is not None:
            chunk, slot = oracle[i]
        else:
            chunk = greedy_decode_chunk(params, h_i, cap)
            slot = None
        if chunk != "":
            if slot is None:
                if hypothesis.entries:
                    dist = position_distribution(params, h_i, hypothesis, target_states)
                    slot = int(np.argmax(dist.value)) + 1
                else:
                    slot = 1
            hypothesis = apply_insertion(hypothesis, chunk, slot, i)
        prev_chunk = chunk
    return hypothesis.text()
