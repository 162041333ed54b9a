"""Beam search over a pluggable step scorer with a per-instance edit penalty.

At every decoding step the scores of all candidate tokens outside the
instance's conservative set (the tokens of its src and mt, plus EOS) are
lowered by a constant c. Positive c discourages edits, negative c
encourages them. The penalty can be applied to raw logits (before the
log-softmax, so scores are implicitly renormalized) or to log
probabilities (no renormalization afterwards).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Protocol, Sequence

import numpy as np

from .core import ConservativeSet, Corpus, Triplet, Vocabulary, conservative_set


class ScoreKind(enum.Enum):
    LOGITS = "logits"
    LOGPROBS = "logprobs"


@dataclass(frozen=True)
class StepScores:
    """Scores over the full vocabulary for one hypothesis at one step."""

    values: np.ndarray
    kind: ScoreKind

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError(f"step scores must be 1-D, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def assert_normalized(self, tol: float = 1e-4) -> None:
        """Check the LOGPROBS normalization contract (pre-penalty only)."""
        if self.kind is not ScoreKind.LOGPROBS:
            return
        lse = _logsumexp(self.values)
        if abs(lse) > tol:
            raise ValueError(f"log probabilities not normalized: logsumexp={lse:.6g}")


class Scorer(Protocol):
    """Produces next-token scores for a decoder prefix.

    Implementations must be deterministic for fixed parameters and must
    not mutate shared state during scoring, so batch items can run
    concurrently.
    """

    def score_step(
        self,
        src: Sequence[int],
        mt: Sequence[int],
        prefix: Sequence[int],
    ) -> StepScores: ...


class LengthNorm(enum.Enum):
    OFF = "off"
    BY_LENGTH = "by-length"


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 4
    c: float = 0.0
    apply_at: ScoreKind = ScoreKind.LOGPROBS
    max_len_factor: float = 1.5
    slack: int = 5
    length_norm: LengthNorm = LengthNorm.OFF

    def __post_init__(self) -> None:
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len_factor <= 0:
            raise ValueError("max_len_factor must be > 0")
        if self.slack < 0:
            raise ValueError("slack must be >= 0")

    def max_output_len(self, mt_len: int) -> int:
        return math.ceil(self.max_len_factor * mt_len) + self.slack


@dataclass(frozen=True)
class Hypothesis:
    """A partial output: BOS-initiated token ids and cumulative score."""

    tokens: tuple[int, ...]
    score: float
    finished: bool = False


@dataclass(frozen=True)
class DecodeResult:
    """Output tokens (BOS/EOS stripped) and the selected hypothesis score."""

    tokens: tuple[int, ...]
    score: float


class DecodeError(Exception):
    """Decoding failed; for batches the message names the item index."""


def _logsumexp(values: np.ndarray) -> float:
    m = float(np.max(values))
    if math.isinf(m):
        return m
    return m + math.log(float(np.sum(np.exp(values - m))))


def log_softmax(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values - _logsumexp(values)


def apply_penalty(scores: StepScores, vc: ConservativeSet, c: float) -> StepScores:
    """Lower by c the scores of every token outside vc and its always-allowed set.

    Conservative coordinates are untouched. For negative c in LOGPROBS
    mode the rewarded coordinates are truncated at the upper bound 0 so
    they stay valid log probabilities; no renormalization is performed in
    LOGPROBS mode.
    """
    allowed = vc.ids | vc.always_allowed
    size = len(scores.values)
    out_of_range = [i for i in allowed if not 0 <= i < size]
    if out_of_range:
        raise ValueError(
            f"conservative ids {sorted(out_of_range)} out of range for "
            f"score vector of length {size}"
        )
    if c == 0.0:
        return scores
    values = scores.values.copy()
    mask = np.ones(size, dtype=bool)
    if allowed:
        mask[np.fromiter(allowed, dtype=np.int64)] = False
    values[mask] -= c
    if scores.kind is ScoreKind.LOGPROBS and c < 0.0:
        values[mask] = np.minimum(values[mask], 0.0)
    return StepScores(values=values, kind=scores.kind)


def _penalized_step_logprobs(
    raw: StepScores, vc: ConservativeSet, cfg: DecodeConfig
) -> np.ndarray:
    """Convert raw scorer output into the per-step scores the beam sums.

    LOGITS application: penalize first, then log-softmax (implicit
    renormalization). LOGPROBS application: normalize first if needed,
    then penalize without renormalizing.
    """
    if cfg.apply_at is ScoreKind.LOGITS:
        penalized = apply_penalty(StepScores(raw.values, ScoreKind.LOGITS), vc, cfg.c)
        return log_softmax(penalized.values)
    if raw.kind is ScoreKind.LOGPROBS:
        logprobs = raw.values
    else:
        logprobs = log_softmax(raw.values)
    return apply_penalty(StepScores(logprobs, ScoreKind.LOGPROBS), vc, cfg.c).values


def _selection_key(hyp: Hypothesis, cfg: DecodeConfig):
    score = hyp.score
    if cfg.length_norm is LengthNorm.BY_LENGTH:
        score /= max(1, len(hyp.tokens) - 1)  # generated tokens, BOS excluded
    return (-score, hyp.tokens)


def beam_decode(
    scorer: Scorer, t: Triplet, v: Vocabulary, cfg: DecodeConfig
) -> DecodeResult:
    """Penalized beam search for one triplet.

    Finished hypotheses keep their slot and score; unfinished ones expand
    over all candidate tokens except PAD and BOS. Ties break toward lower
    token ids, then shorter hypotheses, so repeated runs are identical.
    Hypotheses still alive at the length cap are force-finished.
    """
    vc = conservative_set(t, v)
    vocab_size = len(v)
    max_len = cfg.max_output_len(len(t.mt))
    never_emitted = (v.pad_id, v.bos_id)
    beams = [Hypothesis(tokens=(v.bos_id,), score=0.0)]
    for _ in range(max_len):
        if all(h.finished for h in beams):
            break
        candidates = [h for h in beams if h.finished]
        for hyp in beams:
            if hyp.finished:
                continue
            raw = scorer.score_step(t.src, t.mt, hyp.tokens)
            if len(raw) != vocab_size:
                raise DecodeError(
                    f"scorer returned {len(raw)} scores for |V|={vocab_size}"
                )
            raw.assert_normalized()
            step = _penalized_step_logprobs(raw, vc, cfg).copy()
            step[list(never_emitted)] = -np.inf
            # top beam_size per hypothesis is lossless for the global top
            # beam_size; the stable sort keeps ties in token-id order
            order = np.argsort(-step, kind="stable")[: cfg.beam_size]
            for token in order.tolist():
                candidates.append(
                    Hypothesis(
                        tokens=hyp.tokens + (token,),
                        score=hyp.score + float(step[token]),
                        finished=token == v.eos_id,
                    )
                )
        candidates.sort(key=lambda h: (-h.score, h.tokens))
        beams = candidates[: cfg.beam_size]
    beams = [h if h.finished else replace(h, finished=True) for h in beams]
    best = min(beams, key=lambda h: _selection_key(h, cfg))
    tokens = best.tokens[1:]
    if tokens and tokens[-1] == v.eos_id:
        tokens = tokens[:-1]
    score = best.score
    if cfg.length_norm is LengthNorm.BY_LENGTH:
        score /= max(1, len(best.tokens) - 1)
    return DecodeResult(tokens=tokens, score=score)


def batch_decode(
    scorer: Scorer, corpus: Corpus, v: Vocabulary, cfg: DecodeConfig
) -> list[DecodeResult]:
    """Decode every corpus item with its own conservative set."""
    results = []
    for i, item in enumerate(corpus):
        try:
            results.append(beam_decode(scorer, item, v, cfg))
        except Exception as exc:
            raise DecodeError(f"item {i}: {exc}") from exc
    return results
