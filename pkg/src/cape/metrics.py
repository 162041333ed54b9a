"""Edit-rate and n-gram overlap metrics over pre-tokenized sequences.

TER here is the classic shift-then-edit formulation: hill-climb on block
shifts (each costing one edit) until no shift lowers the word-level edit
distance, then add the remaining Levenshtein distance. A brute-force
oracle over bounded shift sequences makes the greedy approximation
testable on small instances.

Tokens are compared exactly and case-sensitively; any hashable token type
works (strings, ids).
"""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass
from typing import Hashable, Iterator, Sequence

Tokens = Sequence[Hashable]

#: Longest block a single shift may move, per the usual TER restriction.
MAX_SHIFT_BLOCK = 10

#: The oracle enumerates shift sequences up to this depth.
ORACLE_MAX_SHIFTS = 3

#: The oracle's exhaustive search is only tractable for short sequences.
ORACLE_MAX_LEN = 8


@dataclass(frozen=True)
class TerResult:
    edits: int
    ref_len: int
    score: float


@dataclass(frozen=True)
class BleuResult:
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    score: float


def levenshtein(a: Tokens, b: Tokens) -> int:
    """Word-level edit distance with unit-cost insert/delete/substitute."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, tok_a in enumerate(a, start=1):
        cur = [i]
        for j, tok_b in enumerate(b, start=1):
            cost = 0 if tok_a == tok_b else 1
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[-1]


def _ref_spans(ref: tuple) -> dict[int, set[tuple]]:
    """All contiguous spans of the reference, grouped by length."""
    spans: dict[int, set[tuple]] = {}
    max_len = min(MAX_SHIFT_BLOCK, len(ref))
    for n in range(1, max_len + 1):
        spans[n] = {tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)}
    return spans


def _legal_shifts(
    seq: tuple, ref: tuple, ref_spans: dict[int, set[tuple]]
) -> Iterator[tuple[int, int, int, tuple]]:
    """Yield (origin, block_len, destination, shifted_seq) for legal shifts.

    A shift moves a contiguous block that exactly matches some reference
    span and is currently misaligned (the reference does not carry the
    same block at the same absolute position). Destination equals the
    insertion index in the sequence with the block removed; the no-op
    destination is skipped.
    """
    max_len = min(MAX_SHIFT_BLOCK, len(seq), len(ref))
    for length in range(1, max_len + 1):
        candidates = ref_spans.get(length, ())
        for i in range(len(seq) - length + 1):
            block = seq[i : i + length]
            if block not in candidates:
                continue
            if ref[i : i + length] == block:
                continue  # already in place
            rest = seq[:i] + seq[i + length :]
            for j in range(len(rest) + 1):
                if j == i:
                    continue
                yield i, length, j, rest[:j] + block + rest[j:]


def ter(hyp: Tokens, ref: Tokens) -> TerResult:
    """Greedy-shift TER of a hypothesis against one reference.

    Repeatedly applies the block shift that most reduces the edit
    distance (ties: longer block, then leftmost origin, then leftmost
    destination), one edit per shift, then adds the final Levenshtein
    distance. The score is edits / ref_len and may exceed 1.
    """
    ref = tuple(ref)
    if not ref:
        raise ValueError("TER reference must be non-empty")
    cur = tuple(hyp)
    spans = _ref_spans(ref)
    shifts = 0
    cur_dist = levenshtein(cur, ref)
    while cur_dist > 0:
        best_key = None
        best_seq = None
        for i, length, j, shifted in _legal_shifts(cur, ref, spans):
            dist = levenshtein(shifted, ref)
            if dist >= cur_dist:
                continue
            key = (dist, -length, i, j)
            if best_key is None or key < best_key:
                best_key = key
                best_seq = shifted
        if best_seq is None:
            break
        cur = best_seq
        cur_dist = best_key[0]
        shifts += 1
    edits = shifts + cur_dist
    return TerResult(edits=edits, ref_len=len(ref), score=edits / len(ref))


def _multiset_distance_floor(hyp: tuple, ref: tuple) -> int:
    """Lower bound on Levenshtein distance that shifts cannot change.

    Shifts only permute tokens, so the surplus/deficit token counts are
    invariant; one substitution can cancel at most one of each.
    """
    hyp_counts = collections.Counter(hyp)
    ref_counts = collections.Counter(ref)
    missing = sum((ref_counts - hyp_counts).values())
    surplus = sum((hyp_counts - ref_counts).values())
    return max(missing, surplus)


def ter_oracle(hyp: Tokens, ref: Tokens) -> TerResult:
    """Exact minimum of the shift-edit model for small instances.

    Breadth-first enumeration of every sequence of up to ORACLE_MAX_SHIFTS
    legal shifts, each followed by Levenshtein distance. Limited to
    sequences of length <= ORACLE_MAX_LEN.
    """
    hyp = tuple(hyp)
    ref = tuple(ref)
    if not ref:
        raise ValueError("TER reference must be non-empty")
    if len(hyp) > ORACLE_MAX_LEN or len(ref) > ORACLE_MAX_LEN:
        raise ValueError(
            f"oracle restricted to sequences of length <= {ORACLE_MAX_LEN}"
        )
    spans = _ref_spans(ref)
    best = levenshtein(hyp, ref)
    floor = _multiset_distance_floor(hyp, ref)
    frontier = {hyp}
    seen = {hyp}
    depth = 0
    while frontier and depth < ORACLE_MAX_SHIFTS and depth + 1 + floor < best:
        depth += 1
        next_frontier = set()
        for seq in frontier:
            for _, _, _, shifted in _legal_shifts(seq, ref, spans):
                if shifted in seen:
                    continue
                seen.add(shifted)
                best = min(best, depth + levenshtein(shifted, ref))
                next_frontier.add(shifted)
        frontier = next_frontier
    return TerResult(edits=best, ref_len=len(ref), score=best / len(ref))


def corpus_ter(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> TerResult:
    """Corpus TER: pooled edit counts divided by pooled reference length."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    edits = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        result = ter(hyp, ref)
        edits += result.edits
        ref_len += result.ref_len
    return TerResult(edits=edits, ref_len=ref_len, score=edits / ref_len)


def _ngram_counts(tokens: tuple, n: int) -> collections.Counter:
    return collections.Counter(
        tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)
    )


def bleu(
    hyps: Sequence[Tokens], refs: Sequence[Tokens], smooth_add_one: bool = False
) -> BleuResult:
    """Corpus-level BLEU-4 with the standard brevity penalty.

    Clipped n-gram counts are pooled over the whole corpus before the
    precisions are formed. `smooth_add_one` adds one to the numerator and
    denominator of the n >= 2 precisions; default off, which matches
    shared-task corpus scoring but yields 0 on corpora with no 4-gram
    matches.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    correct = [0, 0, 0, 0]
    total = [0, 0, 0, 0]
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp = tuple(hyp)
        ref = tuple(ref)
        if not ref:
            raise ValueError("BLEU references must be non-empty")
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            hyp_ngrams = _ngram_counts(hyp, n)
            if not hyp_ngrams:
                continue
            ref_ngrams = _ngram_counts(ref, n)
            total[n - 1] += sum(hyp_ngrams.values())
            correct[n - 1] += sum(
                min(count, ref_ngrams[gram]) for gram, count in hyp_ngrams.items()
            )
    precisions = []
    for n in range(1, 5):
        c, t = correct[n - 1], total[n - 1]
        if smooth_add_one and n >= 2:
            c, t = c + 1, t + 1
        precisions.append(c / t if t > 0 else 0.0)
    if hyp_len >= ref_len:
        brevity_penalty = 1.0
    elif hyp_len > 0:
        brevity_penalty = math.exp(1.0 - ref_len / hyp_len)
    else:
        brevity_penalty = 0.0
    if all(p > 0.0 for p in precisions):
        log_mean = sum(math.log(p) for p in precisions) / 4.0
        score = 100.0 * brevity_penalty * math.exp(log_mean)
    else:
        score = 0.0
    return BleuResult(
        precisions=tuple(precisions), brevity_penalty=brevity_penalty, score=score
    )
