"""Shared test fixtures: toy vocabularies, triplets, and scorers."""

import random
import zlib

import numpy as np
import pytest

from cape.core import Triplet, Vocabulary, build_vocabulary
from cape.decoder import ScoreKind, StepScores


def make_vocab(n_tokens: int = 20) -> Vocabulary:
    line = [f"w{i}" for i in range(n_tokens)]
    return build_vocabulary([[line]])


def random_triplet(rng: random.Random, vocab: Vocabulary, max_len: int = 6) -> Triplet:
    def seq():
        return tuple(
            rng.randrange(5, len(vocab)) for _ in range(rng.randint(1, max_len))
        )

    return Triplet(src=seq(), mt=seq())


class HashScorer:
    """Deterministic pseudo-random scorer: a pure function of its inputs.

    Scores are bounded in [-scale, scale], which makes penalty-saturation
    arguments exact.
    """

    def __init__(self, vocab_size: int, seed: int = 0, scale: float = 4.0,
                 kind: ScoreKind = ScoreKind.LOGITS):
        self.vocab_size = vocab_size
        self.seed = seed
        self.scale = scale
        self.kind = kind

    def score_step(self, src, mt, prefix) -> StepScores:
        key = repr((self.seed, tuple(src), tuple(mt), tuple(prefix))).encode()
        rng = np.random.default_rng(zlib.crc32(key))
        values = rng.uniform(-self.scale, self.scale, size=self.vocab_size)
        if self.kind is ScoreKind.LOGPROBS:
            values = values - (
                np.max(values) + np.log(np.sum(np.exp(values - np.max(values))))
            )
        return StepScores(values=values, kind=self.kind)


@pytest.fixture
def vocab():
    return make_vocab()


@pytest.fixture
def rng():
    return random.Random(1234)
