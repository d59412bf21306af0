"""Model semantics: encoder unrolls, decoder probabilities against exhaustive
enumeration, position distribution, the generation walkthrough fixture, loss
analytics, greedy decoding, and checkpoint round-trips."""

import itertools
import math

import numpy as np
import pytest

from chunkmt import align as al
from chunkmt import autodiff as ad
from chunkmt import model as mdl
from chunkmt import nn
from chunkmt import verification as vf
from chunkmt.align import AlignedSentencePair
from chunkmt.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from chunkmt.vocab import EMPTY, CharVocab


def make_params(seed=0, hidden=3, embed=2, src_texts=("ab", "cd"), trg_texts=("xy", "z w"), dtype=np.float64, zeros=False):
    config = mdl.ModelConfig(hidden_dim=hidden, char_embed_dim=embed, max_chunk_chars=6)
    sv, tv = CharVocab.build(src_texts), CharVocab.build(trg_texts)
    if zeros:
        return mdl.ModelParams.zeros(config, sv, tv, dtype=dtype)
    return mdl.ModelParams.init(config, sv, tv, seed=seed, dtype=dtype)


def rand_params(rng, hidden=3, embed=2, src_texts=("ab", "cd"), trg_texts=("xy", "z w"), scale=0.4):
    config = mdl.ModelConfig(hidden_dim=hidden, char_embed_dim=embed, max_chunk_chars=6)
    sv, tv = CharVocab.build(src_texts), CharVocab.build(trg_texts)
    shapes = mdl.param_shapes(config, len(sv), len(tv))
    arrays = {n: scale * rng.standard_normal(s) for n, s in shapes.items()}
    return mdl.ModelParams.from_arrays(config, sv, tv, arrays)


class TestSourceEncoders:
    def test_token_vector_dimension_fixed(self):
        p = make_params(hidden=4)
        for token in ("a", "ab", "abab"):
            assert mdl.encode_source_token(p, token).value.shape == (8,)

    def test_identical_tokens_identical_vectors(self):
        p = make_params()
        a = mdl.encode_source_token(p, "ab").value
        b = mdl.encode_source_token(p, "ab").value
        np.testing.assert_array_equal(a, b)

    def test_empty_token_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            mdl.encode_source_token(make_params(), "")

    def test_single_char_matches_direct_composition(self):
        p = make_params(seed=3)
        got = mdl.encode_source_token(p, "a").value
        ids = p.src_vocab.encode("a")
        xs = [ad.embedding_lookup(p.src_embed, i) for i in ids]
        expected = nn.final_state(p.src_tok_fwd, p.src_tok_bwd, xs).value
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_unknown_characters_map_to_unk(self):
        p = make_params()
        np.testing.assert_array_equal(
            mdl.encode_source_token(p, "Q").value, mdl.encode_source_token(p, "Z").value
        )

    def test_sentence_encoding_length_and_degenerate_case(self):
        p = make_params(seed=5)
        assert len(mdl.encode_source_sentence(p, ["ab"])) == 1
        assert len(mdl.encode_source_sentence(p, ["ab", "cd", "a"])) == 3
        with pytest.raises(ValueError):
            mdl.encode_source_sentence(p, [])

    def test_sentence_matches_manual_two_level_unroll(self):
        p = make_params(seed=6)
        tokens = ["ab", "cd", "d"]
        got = [s.value for s in mdl.encode_source_sentence(p, tokens)]
        token_vecs = [mdl.encode_source_token(p, t) for t in tokens]
        expected = [s.value for s in nn.bilstm_encode(p.src_enc_fwd, p.src_enc_bwd, token_vecs)]
        for g, e in zip(got, expected):
            np.testing.assert_allclose(g, e, atol=1e-12)


class TestTargetEncoder:
    def test_empty_chunk_uses_reserved_symbol(self):
        p = make_params(seed=7)
        got = mdl.encode_target_token(p, "").value
        xs = [ad.embedding_lookup(p.trg_embed, EMPTY)]
        expected = nn.final_state(p.trg_tok_fwd, p.trg_tok_bwd, xs).value
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_space_is_an_ordinary_character(self):
        p = make_params(seed=8)
        ids = p.trg_vocab.encode("y z")
        assert len(ids) == 3
        assert p.trg_vocab.char(ids[1]) == " "

    def test_matches_manual_unroll(self):
        p = make_params(seed=9)
        got = mdl.encode_target_token(p, "xy").value
        xs = [ad.embedding_lookup(p.trg_embed, i) for i in p.trg_vocab.encode("xy")]
        expected = nn.final_state(p.trg_tok_fwd, p.trg_tok_bwd, xs).value
        np.testing.assert_allclose(got, expected, atol=1e-12)


class TestTargetState:
    def test_dimension_is_hidden(self):
        p = make_params(hidden=5, embed=2)
        s = mdl.encode_source_sentence(p, ["ab"])[0]
        h, _ = mdl.target_state_step(p, s, None)
        assert h.value.shape == (5,)

    def test_first_step_uses_start_embedding(self):
        p = make_params(seed=10)
        s = mdl.encode_source_sentence(p, ["ab"])[0]
        h_start, _ = mdl.target_state_step(p, s, None)
        h_empty, _ = mdl.target_state_step(p, s, "")
        assert not np.allclose(h_start.value, h_empty.value)
        x = ad.concat([p.start_tok, s])
        h0, c0 = nn.lstm_zero_state(p.trg_enc, np.float64)
        expected, _ = nn.lstm_step(p.trg_enc, x, h0, c0)
        np.testing.assert_allclose(h_start.value, expected.value, atol=1e-12)

    def test_two_steps_match_manual_unroll(self):
        p = make_params(seed=11)
        states = mdl.encode_source_sentence(p, ["ab", "cd"])
        h1, st = mdl.target_state_step(p, states[0], None)
        h2, _ = mdl.target_state_step(p, states[1], "xy", st)

        x1 = ad.concat([p.start_tok, states[0]])
        hh, cc = nn.lstm_zero_state(p.trg_enc, np.float64)
        hh, cc = nn.lstm_step(p.trg_enc, x1, hh, cc)
        np.testing.assert_allclose(h1.value, hh.value, atol=1e-12)
        x2 = ad.concat([mdl.encode_target_token(p, "xy"), states[1]])
        hh2, _ = nn.lstm_step(p.trg_enc, x2, hh, cc)
        np.testing.assert_allclose(h2.value, hh2.value, atol=1e-12)


class TestChunkProbabilities:
    def test_uniform_model_analytic_log_prob(self):
        p = make_params(zeros=True)
        v_eff = p.trg_vocab.n_emissible
        h = ad.leaf(np.zeros(3))
        for chunk in ("x", "xy", "z w"):
            got = float(mdl.chunk_log_prob(p, h, chunk).value)
            assert got == pytest.approx(-(len(chunk) + 1) * math.log(v_eff), abs=1e-9)

    def test_uniform_model_empty_chunk(self):
        p = make_params(zeros=True)
        got = float(mdl.chunk_log_prob(p, ad.leaf(np.zeros(3)), "").value)
        assert got == pytest.approx(-math.log(p.trg_vocab.n_emissible), abs=1e-9)

    def test_short_chunk_mass_below_one_with_remainder_in_longer_chunks(self):
        # 3-character vocabulary; '?' stands in for the unknown symbol, the
        # one extra emissible non-end class, so the enumeration space is the
        # decoder's whole sample space.
        rng = np.random.default_rng(12)
        p = rand_params(rng, trg_texts=("abc",), src_texts=("ab",))
        h = ad.leaf(rng.standard_normal(3))
        alphabet = ["a", "b", "c", "?"]
        mass_short = sum(
            math.exp(float(mdl.chunk_log_prob(p, h, "".join(s)).value))
            for length in range(3)
            for s in itertools.product(alphabet, repeat=length)
        )
        assert mass_short < 1.0
        prefix_mass = 0.0
        for s in itertools.product(alphabet, repeat=3):
            terms = mdl.chunk_nll_terms(p, h, "".join(s))
            prefix_mass += math.exp(-sum(float(t.value) for t in terms[:-1]))
        assert mass_short + prefix_mass == pytest.approx(1.0, abs=1e-9)

    def test_total_mass_splits_between_chunks_and_cap_boundary(self):
        # 2-character vocabulary with a length cap: everything decodable
        # within the cap plus the mass of still-open prefixes is 1.
        rng = np.random.default_rng(13)
        p = rand_params(rng, trg_texts=("ab",), src_texts=("ab",))
        h = ad.leaf(rng.standard_normal(3))
        cap = 3
        alphabet = ["a", "b", "?"]
        total = sum(
            math.exp(float(mdl.chunk_log_prob(p, h, "".join(s)).value))
            for length in range(cap + 1)
            for s in itertools.product(alphabet, repeat=length)
        )
        cap_mass = 0.0
        for s in itertools.product(alphabet, repeat=cap + 1):
            terms = mdl.chunk_nll_terms(p, h, "".join(s))
            cap_mass += math.exp(-sum(float(t.value) for t in terms[:-1]))
        assert total + cap_mass == pytest.approx(1.0, abs=1e-6)
        assert total == pytest.approx(1.0 - cap_mass, abs=1e-6)

    def test_gradients_match_finite_differences(self):
        assert vf._check_chunk_nll(np.random.default_rng(14)) < 1e-4


class TestPositionDistribution:
    def test_empty_hypothesis_single_certain_slot(self):
        rng = np.random.default_rng(15)
        p = rand_params(rng)
        h = ad.leaf(rng.standard_normal(3))
        dist = mdl.position_distribution(p, h, mdl.PartialHypothesis(), [h])
        np.testing.assert_allclose(dist.value, [1.0])

    def test_zero_network_is_uniform(self):
        p = make_params(zeros=True)
        h = ad.leaf(np.zeros(3))
        hyp = mdl.PartialHypothesis()
        states = []
        for k, chunk in enumerate(["x", "y", "z"]):
            states.append(h)
            hyp = mdl.apply_insertion(hyp, chunk, k + 1, k)
        dist = mdl.position_distribution(p, h, hyp, states + [h])
        np.testing.assert_allclose(dist.value, np.full(4, 0.25), atol=1e-12)

    def test_distribution_sums_to_one(self):
        rng = np.random.default_rng(16)
        for trial in range(10):
            p = rand_params(rng)
            m = int(rng.integers(0, 5))
            states = [ad.leaf(rng.standard_normal(3)) for _ in range(m + 1)]
            hyp = mdl.PartialHypothesis()
            for k in range(m):
                hyp = mdl.apply_insertion(hyp, "x", int(rng.integers(1, k + 2)), k)
            dist = mdl.position_distribution(p, states[-1], hyp, states)
            assert dist.value.shape == (m + 1,)
            assert (dist.value >= 0).all()
            assert float(dist.value.sum()) == pytest.approx(1.0, abs=1e-6)

    def test_generation_walkthrough_slot_count_and_gold(self):
        # at the final reordered step the hypothesis has four entries, so
        # five slots, and the gold insertion is slot 3
        pair = AlignedSentencePair(
            ["I", "can", "not", "do", "that"],
            ["ich", "kann", "nicht", "tun", "das"],
            [1, 2, 4, 5, 3],
            al.derive_gold_insertions([1, 2, 4, 5, 3]),
        )
        assert pair.gold_insertion == [1, 2, 3, 4, 3]
        p = make_params(src_texts=pair.source_tokens, trg_texts=pair.chunks)
        states = mdl.encode_source_sentence(p, pair.source_tokens)
        hyp = mdl.PartialHypothesis()
        target_states = []
        state = None
        for i, chunk in enumerate(pair.chunks):
            h, state = mdl.target_state_step(p, states[i], pair.chunks[i - 1] if i else None, state)
            target_states.append(h)
            if i == 4:
                dist = mdl.position_distribution(p, h, hyp, target_states)
                assert dist.value.shape == (5,)
            hyp = mdl.apply_insertion(hyp, chunk, pair.gold_insertion[i], i)
        assert hyp.text() == "ich kann das nicht tun"


class TestSentenceLoss:
    def _pair(self):
        return AlignedSentencePair(["ab", "cd"], ["z w", "xy"], [2, 1], [1, 1])

    def test_uniform_model_analytic_value(self):
        p = make_params(zeros=True)
        pair = self._pair()
        v_eff = p.trg_vocab.n_emissible
        expected = sum((len(c) + 1) * math.log(v_eff) for c in pair.chunks)
        # position terms: first insertion ln(1)=0, second ln(2)
        expected += math.log(2)
        got = float(mdl.sentence_loss(p, pair).value)
        assert got == pytest.approx(expected, abs=1e-9)

    def test_uniform_model_with_empty_chunks(self):
        p = make_params(zeros=True)
        pair = AlignedSentencePair(["ab", "cd"], ["xy", ""], [1, None], [1, None])
        v_eff = p.trg_vocab.n_emissible
        expected = (3 + 1) * math.log(v_eff)  # "xy"+eot and ""+eot
        got = float(mdl.sentence_loss(p, pair).value)
        assert got == pytest.approx(expected, abs=1e-9)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(17)
        for seed in range(5):
            p = rand_params(np.random.default_rng(seed))
            assert float(mdl.sentence_loss(p, self._pair()).value) >= 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(18)
        for name in vf._LOSS_CHECK_TENSORS:
            assert vf._check_sentence_loss(rng, name) < 1e-4

    def test_cache_does_not_change_loss_or_gradients(self):
        p = make_params(seed=19)
        pair = self._pair()
        plain = mdl.sentence_loss(p, pair)
        ad.backward(plain)
        g_plain = {k: v.copy() for k, v in p.grads().items()}
        p.zero_grads()
        cached = mdl.sentence_loss(p, pair, cache={})
        ad.backward(cached)
        np.testing.assert_array_equal(plain.value, cached.value)
        for k, v in p.grads().items():
            np.testing.assert_allclose(v, g_plain[k], atol=1e-12)


class TestApplyInsertion:
    def test_insert_into_empty(self):
        hyp = mdl.apply_insertion(mdl.PartialHypothesis(), "ich", 1, 0)
        assert hyp.entries == [("ich", 0)]
        assert hyp.history == [(0, 1)]

    def test_generation_walkthrough_insertion(self):
        hyp = mdl.PartialHypothesis()
        for k, chunk in enumerate(["ich", "kann", "nicht", "tun"]):
            hyp = mdl.apply_insertion(hyp, chunk, k + 1, k)
        hyp = mdl.apply_insertion(hyp, "das", 3, 4)
        assert hyp.text() == "ich kann das nicht tun"

    def test_append_slot(self):
        hyp = mdl.apply_insertion(mdl.PartialHypothesis(), "a", 1, 0)
        hyp = mdl.apply_insertion(hyp, "b", 2, 1)
        assert hyp.text() == "a b"

    def test_out_of_range_slot_rejected(self):
        hyp = mdl.apply_insertion(mdl.PartialHypothesis(), "a", 1, 0)
        with pytest.raises(ValueError, match="slot"):
            mdl.apply_insertion(hyp, "b", 0, 1)
        with pytest.raises(ValueError, match="slot"):
            mdl.apply_insertion(hyp, "b", 3, 1)

    def test_empty_chunk_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            mdl.apply_insertion(mdl.PartialHypothesis(), "", 1, 0)

    def test_history_replays_to_entries(self):
        rng = np.random.default_rng(20)
        for _ in range(30):
            hyp = mdl.PartialHypothesis()
            for k in range(int(rng.integers(1, 8))):
                slot = int(rng.integers(1, len(hyp.entries) + 2))
                hyp = mdl.apply_insertion(hyp, f"c{k}", slot, k)
            replay = mdl.PartialHypothesis()
            chunks = {idx: c for c, idx in hyp.entries}
            for idx, slot in hyp.history:
                replay = mdl.apply_insertion(replay, chunks[idx], slot, idx)
            assert replay.entries == hyp.entries


class TestTeacherForcedReplay:
    def test_gold_insertions_reproduce_reference(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            src = [f"s{k}" for k in range(n)]
            tgt = [f"t{k}" for k in range(m)]
            k = int(rng.integers(1, min(n, m) + 1))
            links = set(zip(rng.choice(n, k, replace=False).tolist(),
                            rng.choice(m, k, replace=False).tolist()))
            pair = al.build_training_sequence(src, tgt, links)
            hyp = mdl.PartialHypothesis()
            for i, chunk in enumerate(pair.chunks):
                if chunk != "":
                    hyp = mdl.apply_insertion(hyp, chunk, pair.gold_insertion[i], i)
            assert hyp.text() == " ".join(tgt)


class TestTranslateGreedy:
    def test_zero_model_emits_nothing(self):
        p = make_params(zeros=True)
        assert mdl.translate_greedy(p, ["ab", "cd"]) == ""

    def test_deterministic(self):
        rng = np.random.default_rng(22)
        p = rand_params(rng)
        out1 = mdl.translate_greedy(p, ["ab", "cd", "a"])
        out2 = mdl.translate_greedy(p, ["ab", "cd", "a"])
        out3 = mdl.translate_greedy(p, ["ab", "cd", "a"], cache={})
        assert out1 == out2 == out3

    def test_output_bounded_by_cap(self):
        rng = np.random.default_rng(23)
        for seed in range(5):
            p = rand_params(np.random.default_rng(seed), scale=2.0)
            tokens = ["ab", "cd", "a", "d"]
            out = mdl.translate_greedy(p, tokens, max_chunk_chars=5)
            assert len(out) <= len(tokens) * 5 + (len(tokens) - 1)

    def test_empty_source_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            mdl.translate_greedy(make_params(), [])

    def test_oracle_replays_generation_walkthrough(self):
        p = make_params(
            zeros=True,
            src_texts=("i", "can", "not", "do", "that"),
            trg_texts=("ich", "kann", "nicht", "tun", "das"),
        )
        oracle = [("ich", 1), ("kann", 2), ("nicht", 3), ("tun", 4), ("das", 3)]
        out = mdl.translate_greedy(p, ["i", "can", "not", "do", "that"], oracle=oracle)
        assert out == "ich kann das nicht tun"

    def test_oracle_empty_chunks_skip_insertion(self):
        p = make_params(zeros=True)
        oracle = [("xy", 1), ("", None)]
        assert mdl.translate_greedy(p, ["ab", "cd"], oracle=oracle) == "xy"


class TestParams:
    def test_init_reproducible_from_seed(self):
        a = make_params(seed=33, dtype=np.float32)
        b = make_params(seed=33, dtype=np.float32)
        for (n1, t1), (n2, t2) in zip(a.named_tensors().items(), b.named_tensors().items()):
            assert n1 == n2
            np.testing.assert_array_equal(t1.value, t2.value)

    def test_different_seeds_differ(self):
        a, b = make_params(seed=1), make_params(seed=2)
        assert any(
            not np.array_equal(a.named_tensors()[n].value, b.named_tensors()[n].value)
            for n in a.named_tensors()
        )

    def test_shape_validation(self):
        p = make_params()
        arrays = p.arrays()
        arrays["boundary"] = np.zeros(7)
        with pytest.raises(ValueError, match="shape"):
            mdl.ModelParams.from_arrays(p.config, p.src_vocab, p.trg_vocab, arrays)
        arrays = p.arrays()
        del arrays["boundary"]
        with pytest.raises(ValueError, match="mismatch"):
            mdl.ModelParams.from_arrays(p.config, p.src_vocab, p.trg_vocab, arrays)

    def test_every_parameter_reachable_from_some_loss(self):
        # two sentences: one with reordering (position net), one with an
        # empty chunk; together they must touch every tensor
        p = make_params(seed=34)
        pairs = [
            AlignedSentencePair(["ab", "cd"], ["z w", "xy"], [2, 1], [1, 1]),
            AlignedSentencePair(["ab", "cd"], ["xy", ""], [1, None], [1, None]),
        ]
        for pair in pairs:
            ad.backward(mdl.sentence_loss(p, pair))
        untouched = [n for n, t in p.named_tensors().items() if t.grad is None]
        assert untouched == []


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        p = make_params(seed=35, dtype=np.float32)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, p)
        loaded = load_checkpoint(path)
        assert loaded.src_vocab == p.src_vocab
        assert loaded.trg_vocab == p.trg_vocab
        assert loaded.config == p.config
        for name, arr in p.arrays().items():
            np.testing.assert_array_equal(loaded.arrays()[name], arr)

    def test_save_load_save_is_byte_identical(self, tmp_path):
        p = make_params(seed=36, dtype=np.float32)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, p)
        save_checkpoint(p2, load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_translation_identical_after_reload(self, tmp_path):
        rng = np.random.default_rng(37)
        p = rand_params(rng)
        arrays32 = {k: v.astype(np.float32) for k, v in p.arrays().items()}
        p32 = mdl.ModelParams.from_arrays(p.config, p.src_vocab, p.trg_vocab, arrays32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, p32)
        loaded = load_checkpoint(path)
        src = ["ab", "cd"]
        assert mdl.translate_greedy(loaded, src) == mdl.translate_greedy(p32, src)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)
