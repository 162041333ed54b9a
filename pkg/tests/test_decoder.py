import math
import random

import numpy as np
import pytest

from cape.core import Corpus, Triplet, conservative_set
from cape.decoder import (
    DecodeConfig,
    DecodeError,
    LengthNorm,
    ScoreKind,
    StepScores,
    apply_penalty,
    batch_decode,
    beam_decode,
    log_softmax,
)

from conftest import HashScorer, make_vocab, random_triplet


def reference_beam_search(scorer, triplet, vocab, beam_size, max_len):
    """Vanilla beam search, written independently of the decoder module.

    Expands every hypothesis over the full vocabulary (minus PAD/BOS),
    scores with plain log-softmax when given logits, and breaks ties by
    (score desc, token sequence asc). No penalty anywhere.
    """
    beams = [((vocab.bos_id,), 0.0, False)]
    for _ in range(max_len):
        if all(done for _, _, done in beams):
            break
        candidates = [b for b in beams if b[2]]
        for tokens, score, done in beams:
            if done:
                continue
            raw = scorer.score_step(triplet.src, triplet.mt, tokens)
            values = np.asarray(raw.values, dtype=np.float64)
            if raw.kind is ScoreKind.LOGITS:
                m = values.max()
                values = values - (m + math.log(np.exp(values - m).sum()))
            for tok in range(len(vocab)):
                if tok in (vocab.pad_id, vocab.bos_id):
                    continue
                candidates.append(
                    (tokens + (tok,), score + float(values[tok]), tok == vocab.eos_id)
                )
        candidates.sort(key=lambda b: (-b[1], b[0]))
        beams = candidates[:beam_size]
    best = min(beams, key=lambda b: (-b[1], b[0]))
    tokens = best[0][1:]
    if tokens and tokens[-1] == vocab.eos_id:
        tokens = tokens[:-1]
    return tokens, best[1]


def reference_greedy(scorer, triplet, vocab, cfg):
    """Separately implemented greedy argmax loop under the penalized scores."""
    vc = conservative_set(triplet, vocab)
    prefix = (vocab.bos_id,)
    score = 0.0
    out = []
    for _ in range(cfg.max_output_len(len(triplet.mt))):
        raw = scorer.score_step(triplet.src, triplet.mt, prefix)
        values = np.asarray(raw.values, dtype=np.float64)
        if cfg.apply_at is ScoreKind.LOGITS:
            penalized = values.copy()
            for tok in range(len(values)):
                if tok not in vc.ids and tok not in vc.always_allowed:
                    penalized[tok] -= cfg.c
            m = penalized.max()
            step = penalized - (m + math.log(np.exp(penalized - m).sum()))
        else:
            m = values.max()
            step = values - (m + math.log(np.exp(values - m).sum()))
            for tok in range(len(step)):
                if tok not in vc.ids and tok not in vc.always_allowed:
                    step[tok] -= cfg.c
                    if cfg.c < 0:
                        step[tok] = min(step[tok], 0.0)
        step[vocab.pad_id] = step[vocab.bos_id] = -np.inf
        tok = int(np.argmax(step))  # argmax takes the lowest index on ties
        score += float(step[tok])
        if tok == vocab.eos_id:
            return tuple(out), score
        out.append(tok)
        prefix = prefix + (tok,)
    return tuple(out), score


class TestApplyPenalty:
    def test_direct_arithmetic(self):
        s = StepScores(np.array([0.5, -1.0, 2.0]), ScoreKind.LOGITS)
        vc = conservative_set_from_ids({0})
        out = apply_penalty(s, vc, 1.5)
        np.testing.assert_allclose(out.values, [0.5, -2.5, 0.5])

    def test_zero_penalty_is_identity(self, rng):
        for _ in range(20):
            values = np.array([rng.uniform(-5, 5) for _ in range(10)])
            s = StepScores(values, ScoreKind.LOGITS)
            out = apply_penalty(s, conservative_set_from_ids({1, 2}), 0.0)
            np.testing.assert_array_equal(out.values, values)

    def test_negative_penalty_clamped_for_logprobs(self):
        s = StepScores(np.array([-0.1, -2.4]), ScoreKind.LOGPROBS)
        out = apply_penalty(s, conservative_set_from_ids({0}), -0.5)
        np.testing.assert_allclose(out.values, [-0.1, -1.9])
        # clamp engages when the reward would push a logprob above 0
        s2 = StepScores(np.array([-0.1, -0.3]), ScoreKind.LOGPROBS)
        out2 = apply_penalty(s2, conservative_set_from_ids({0}), -0.5)
        np.testing.assert_allclose(out2.values, [-0.1, 0.0])

    def test_no_clamp_for_logits(self):
        s = StepScores(np.array([-0.1, -0.3]), ScoreKind.LOGITS)
        out = apply_penalty(s, conservative_set_from_ids({0}), -0.5)
        np.testing.assert_allclose(out.values, [-0.1, 0.2])

    def test_locality_and_magnitude(self, rng):
        for _ in range(20):
            values = np.array([rng.uniform(-3, 3) for _ in range(12)])
            keep = {rng.randrange(12) for _ in range(4)}
            c = rng.uniform(-2, 2)
            s = StepScores(values, ScoreKind.LOGITS)
            out = apply_penalty(s, conservative_set_from_ids(keep, always={2}), c)
            for i in range(12):
                if i in keep or i == 2:
                    assert out.values[i] == values[i]
                else:
                    assert out.values[i] == pytest.approx(values[i] - c)

    def test_out_of_range_ids_rejected(self):
        s = StepScores(np.zeros(3), ScoreKind.LOGITS)
        with pytest.raises(ValueError):
            apply_penalty(s, conservative_set_from_ids({5}), 1.0)

    def test_input_not_mutated(self):
        values = np.array([1.0, 2.0, 3.0])
        s = StepScores(values, ScoreKind.LOGITS)
        apply_penalty(s, conservative_set_from_ids({0}), 2.0)
        np.testing.assert_array_equal(s.values, [1.0, 2.0, 3.0])


def conservative_set_from_ids(ids, always=()):
    from cape.core import ConservativeSet

    return ConservativeSet(ids=frozenset(ids), always_allowed=frozenset(always))


class TestStepScores:
    def test_must_be_one_dimensional(self):
        with pytest.raises(ValueError):
            StepScores(np.zeros((2, 2)), ScoreKind.LOGITS)

    def test_normalization_check(self):
        good = StepScores(log_softmax(np.array([0.3, -1.0, 2.0])), ScoreKind.LOGPROBS)
        good.assert_normalized()
        bad = StepScores(np.array([-0.5, -0.5]), ScoreKind.LOGPROBS)
        with pytest.raises(ValueError):
            bad.assert_normalized()
        # logits make no normalization promise
        StepScores(np.array([3.0, 4.0]), ScoreKind.LOGITS).assert_normalized()


class TestDecodeConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            DecodeConfig(beam_size=0)
        with pytest.raises(ValueError):
            DecodeConfig(max_len_factor=0.0)

    def test_length_cap(self):
        cfg = DecodeConfig(max_len_factor=1.5, slack=5)
        assert cfg.max_output_len(4) == 11


class TestBeamDecode:
    def test_zero_penalty_matches_vanilla_beam_search(self, vocab):
        rng = random.Random(42)
        for trial in range(40):
            for apply_at in (ScoreKind.LOGITS, ScoreKind.LOGPROBS):
                scorer = HashScorer(len(vocab), seed=trial)
                t = random_triplet(rng, vocab)
                cfg = DecodeConfig(beam_size=4, c=0.0, apply_at=apply_at)
                got = beam_decode(scorer, t, vocab, cfg)
                want_tokens, want_score = reference_beam_search(
                    scorer, t, vocab, 4, cfg.max_output_len(len(t.mt))
                )
                assert got.tokens == want_tokens
                assert got.score == pytest.approx(want_score, abs=1e-9)

    def test_saturation_restricts_output_to_conservative_ids(self, vocab):
        rng = random.Random(7)
        for trial in range(30):
            scorer = HashScorer(len(vocab), seed=trial, scale=100.0)
            t = random_triplet(rng, vocab)
            vc = conservative_set(t, vocab)
            for apply_at in (ScoreKind.LOGITS, ScoreKind.LOGPROBS):
                cfg = DecodeConfig(beam_size=4, c=1e6, apply_at=apply_at)
                result = beam_decode(scorer, t, vocab, cfg)
                assert set(result.tokens) <= (vc.ids | vc.always_allowed)

    def test_beam_one_equals_greedy(self, vocab):
        rng = random.Random(99)
        for trial in range(50):
            scorer = HashScorer(len(vocab), seed=trial)
            t = random_triplet(rng, vocab)
            c = rng.choice([0.0, 0.5, 1.5, 3.0])
            apply_at = rng.choice([ScoreKind.LOGITS, ScoreKind.LOGPROBS])
            cfg = DecodeConfig(beam_size=1, c=c, apply_at=apply_at)
            got = beam_decode(scorer, t, vocab, cfg)
            want_tokens, want_score = reference_greedy(scorer, t, vocab, cfg)
            assert got.tokens == want_tokens
            assert got.score == pytest.approx(want_score, abs=1e-9)

    def test_determinism(self, vocab):
        scorer = HashScorer(len(vocab), seed=5)
        t = Triplet(src=(6, 7), mt=(8, 9))
        cfg = DecodeConfig(beam_size=4, c=1.0)
        first = beam_decode(scorer, t, vocab, cfg)
        for _ in range(3):
            again = beam_decode(scorer, t, vocab, cfg)
            assert again == first

    def test_terminates_within_cap(self, vocab):
        class EverywhereScorer:
            def score_step(self, src, mt, prefix):
                values = np.zeros(len(vocab))
                values[vocab.eos_id] = -100.0  # EOS strongly discouraged
                return StepScores(values, ScoreKind.LOGITS)

        t = Triplet(src=(5,), mt=(6, 7))
        cfg = DecodeConfig(beam_size=2, c=0.0)
        result = beam_decode(EverywhereScorer(), t, vocab, cfg)
        assert len(result.tokens) <= cfg.max_output_len(len(t.mt))

    def test_scorer_length_mismatch_rejected(self, vocab):
        class ShortScorer:
            def score_step(self, src, mt, prefix):
                return StepScores(np.zeros(3), ScoreKind.LOGITS)

        t = Triplet(src=(5,), mt=(6,))
        with pytest.raises(DecodeError):
            beam_decode(ShortScorer(), t, vocab, DecodeConfig())

    def test_length_norm_changes_selection_score(self, vocab):
        scorer = HashScorer(len(vocab), seed=11)
        t = Triplet(src=(5, 6), mt=(7, 8))
        plain = beam_decode(scorer, t, vocab, DecodeConfig(beam_size=4))
        normed = beam_decode(
            scorer, t, vocab, DecodeConfig(beam_size=4, length_norm=LengthNorm.BY_LENGTH)
        )
        if normed.tokens == plain.tokens:
            assert normed.score == pytest.approx(
                plain.score / max(1, len(plain.tokens) + 1)
            )

    def test_logits_penalty_keeps_distribution_normalized(self, vocab):
        # penalty on logits, then log-softmax: still a log-distribution
        rng = random.Random(3)
        for _ in range(20):
            values = np.array([rng.uniform(-4, 4) for _ in range(len(vocab))])
            vc = conservative_set(random_triplet(rng, vocab), vocab)
            penalized = apply_penalty(StepScores(values, ScoreKind.LOGITS), vc, 2.5)
            lp = log_softmax(penalized.values)
            total = np.exp(lp).sum()
            assert math.log(total) == pytest.approx(0.0, abs=1e-4)


class TestBatchDecode:
    def test_singleton_batch_matches_single(self, vocab):
        scorer = HashScorer(len(vocab), seed=21)
        t = Triplet(src=(5, 6), mt=(7,))
        corpus = Corpus(items=(t,), provenance=("in-domain",))
        cfg = DecodeConfig(beam_size=3, c=0.7)
        assert batch_decode(scorer, corpus, vocab, cfg) == [
            beam_decode(scorer, t, vocab, cfg)
        ]

    def test_permutation_equivariance(self, vocab):
        rng = random.Random(31)
        scorer = HashScorer(len(vocab), seed=31)
        items = tuple(random_triplet(rng, vocab) for _ in range(6))
        cfg = DecodeConfig(beam_size=3, c=1.2)
        fwd = batch_decode(
            scorer, Corpus(items, ("x",) * 6), vocab, cfg
        )
        rev = batch_decode(
            scorer, Corpus(items[::-1], ("x",) * 6), vocab, cfg
        )
        assert fwd == rev[::-1]

    def test_per_item_conservative_sets(self, vocab):
        # token 6 is conservative for B but not for A; tie the scorer's
        # preference to token 6 so the penalty decides the outputs
        class BiasedScorer:
            def score_step(self, src, mt, prefix):
                values = np.full(len(vocab), -8.0)
                values[6] = 2.0
                values[5] = 1.0
                values[2] = 0.0 if len(prefix) < 3 else 9.0
                return StepScores(values, ScoreKind.LOGITS)

        a = Triplet(src=(5,), mt=(5,))
        b = Triplet(src=(6,), mt=(6,))
        corpus = Corpus(items=(a, b), provenance=("x", "x"))
        cfg = DecodeConfig(beam_size=2, c=50.0)
        scorer = BiasedScorer()
        batched = batch_decode(scorer, corpus, vocab, cfg)
        assert batched[0] == beam_decode(scorer, a, vocab, cfg)
        assert batched[1] == beam_decode(scorer, b, vocab, cfg)
        assert 6 not in batched[0].tokens
        assert set(batched[1].tokens) <= {6, vocab.eos_id}

    def test_errors_carry_item_index(self, vocab):
        class FailingScorer:
            def score_step(self, src, mt, prefix):
                if src == (9,):
                    raise RuntimeError("boom")
                return StepScores(np.zeros(len(vocab)), ScoreKind.LOGITS)

        corpus = Corpus(
            items=(Triplet(src=(5,), mt=(5,)), Triplet(src=(9,), mt=(5,))),
            provenance=("x", "x"),
        )
        with pytest.raises(DecodeError, match="item 1"):
            batch_decode(FailingScorer(), corpus, vocab, DecodeConfig())
