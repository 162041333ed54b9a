"""Shared domain types: vocabularies, APE triplets, conservative sets, corpora.

Everything here is immutable after construction and safe to share across
threads. Text I/O assumes pre-tokenized input: one sentence per line,
tokens separated by single spaces, UTF-8.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD = "[PAD]"
BOS = "[BOS]"
EOS = "[EOS]"
SEP = "[SEP]"
UNK = "[UNK]"

#: Special tokens in id order; they always occupy ids 0..4.
SPECIALS = (PAD, BOS, EOS, SEP, UNK)


class DataError(Exception):
    """Malformed or inconsistent input data (files, line counts, ids)."""


@dataclass(frozen=True)
class Vocabulary:
    """Dense token <-> id bijection with the five specials at ids 0..4."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with the specials {SPECIALS}")
        if not self.index:
            object.__setattr__(
                self, "index", {tok: i for i, tok in enumerate(self.tokens)}
            )
        if len(self.index) != len(self.tokens):
            dupes = [t for t, n in collections.Counter(self.tokens).items() if n > 1]
            raise ValueError(f"duplicate tokens in vocabulary: {dupes}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    @property
    def unk_id(self) -> int:
        return 4

    def id_of(self, token: str) -> int:
        """Exact lookup; raises KeyError for unknown tokens."""
        return self.index[token]

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise IndexError(f"token id {idx} out of range [0, {len(self.tokens)})")
        return self.tokens[idx]

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        """Map tokens to ids, substituting UNK for out-of-vocabulary tokens."""
        unk = self.unk_id
        return tuple(self.index.get(t, unk) for t in tokens)

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.token_of(i) for i in ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        tokens = tuple(line for line in text.split("\n") if line)
        if len(tokens) < len(SPECIALS):
            raise DataError(f"vocabulary file {path} is truncated")
        return cls(tokens=tokens)


def build_vocabulary(corpora: Iterable[Sequence[Sequence[str]]]) -> Vocabulary:
    """Build a vocabulary over every token observed in the given corpora.

    Each corpus is a sequence of token lines. Ordering is deterministic:
    specials first, then tokens by descending frequency, ties broken
    lexicographically. Tokens spelled like a special are ignored (the
    special already owns its id).
    """
    counts: collections.Counter[str] = collections.Counter()
    saw_line = False
    for corpus in corpora:
        for line in corpus:
            if line:
                saw_line = True
            counts.update(line)
    if not saw_line:
        raise ValueError("cannot build a vocabulary from empty input")
    for special in SPECIALS:
        counts.pop(special, None)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(tokens=SPECIALS + tuple(tok for tok, _ in ordered))


@dataclass(frozen=True)
class Triplet:
    """One APE instance: source ids, MT ids, optional post-edit reference ids.

    Sequences never contain PAD/BOS/EOS; consumers add those as needed.
    """

    src: tuple[int, ...]
    mt: tuple[int, ...]
    pe: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "src", tuple(self.src))
        object.__setattr__(self, "mt", tuple(self.mt))
        if self.pe is not None:
            object.__setattr__(self, "pe", tuple(self.pe))
        if not self.src or not self.mt:
            raise ValueError("triplet src and mt must be non-empty")
        reserved = {0, 1, 2}  # PAD, BOS, EOS
        for name, seq in (("src", self.src), ("mt", self.mt), ("pe", self.pe or ())):
            hit = reserved.intersection(seq)
            if hit:
                raise ValueError(f"triplet {name} contains reserved ids {sorted(hit)}")


@dataclass(frozen=True)
class ConservativeSet:
    """Per-instance set of token ids that may be emitted without penalty."""

    ids: frozenset[int]
    always_allowed: frozenset[int]

    def permits(self, token_id: int) -> bool:
        return token_id in self.ids or token_id in self.always_allowed


def conservative_set(t: Triplet, v: Vocabulary) -> ConservativeSet:
    """Union of the triplet's src and mt token ids; EOS is always allowed.

    EOS must stay unpenalized so decoding can terminate at any penalty.
    """
    ids = set(t.src) | set(t.mt)
    bad = [i for i in ids if not 0 <= i < len(v)]
    if bad:
        raise ValueError(f"triplet ids {sorted(bad)} not valid for |V|={len(v)}")
    return ConservativeSet(ids=frozenset(ids), always_allowed=frozenset({v.eos_id}))


@dataclass(frozen=True)
class Corpus:
    """A list of triplets with one provenance tag per item."""

    items: tuple[Triplet, ...]
    provenance: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "provenance", tuple(self.provenance))
        if len(self.items) != len(self.provenance):
            raise ValueError(
                f"{len(self.items)} items but {len(self.provenance)} provenance tags"
            )

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


def read_token_lines(path: str | Path) -> list[list[str]]:
    """Read one whitespace-tokenized sentence per line."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if text.endswith("\n"):
        text = text[:-1]
    if text == "":
        return []
    return [line.split() for line in text.split("\n")]


def write_token_lines(path: str | Path, lines: Iterable[Sequence[str]]) -> None:
    Path(path).write_text(
        "".join(" ".join(line) + "\n" for line in lines), encoding="utf-8"
    )


def load_corpus(
    src_path: str | Path,
    mt_path: str | Path,
    pe_path: str | Path | None,
    vocab: Vocabulary,
    provenance: str = "in-domain",
) -> Corpus:
    """Load parallel src/mt (and optionally pe) files into a Corpus.

    Unknown tokens map to UNK. Empty src/mt/pe lines are rejected: empty
    machine output is only dropped inside the synthesis pipeline, never
    silently accepted from input files.
    """
    src_lines = read_token_lines(src_path)
    mt_lines = read_token_lines(mt_path)
    pe_lines = read_token_lines(pe_path) if pe_path is not None else None
    if len(src_lines) != len(mt_lines):
        raise DataError(
            f"line count mismatch: {src_path} has {len(src_lines)}, "
            f"{mt_path} has {len(mt_lines)}"
        )
    if pe_lines is not None and len(pe_lines) != len(src_lines):
        raise DataError(
            f"line count mismatch: {pe_path} has {len(pe_lines)}, "
            f"expected {len(src_lines)}"
        )
    if not src_lines:
        raise DataError(f"corpus {src_path} is empty")
    items = []
    for i, (src, mt) in enumerate(zip(src_lines, mt_lines)):
        pe = pe_lines[i] if pe_lines is not None else None
        if not src or not mt or (pe is not None and not pe):
            raise DataError(f"empty line at {i + 1} in corpus {src_path}")
        try:
            items.append(
                Triplet(
                    src=vocab.encode(src),
                    mt=vocab.encode(mt),
                    pe=vocab.encode(pe) if pe is not None else None,
                )
            )
        except ValueError as exc:
            raise DataError(f"line {i + 1} in {src_path}: {exc}") from exc
    return Corpus(items=tuple(items), provenance=(provenance,) * len(items))
