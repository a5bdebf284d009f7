"""Candidate concept mining.

Captions are tokenized by two injected tokenizer backends (a fine-grained one
and a compound-phrase one), their outputs are merged as a multiset, word
frequencies and POS tags are accumulated, and four rule-based filters select
the candidate concepts:

1. POS filter: the dominant tag must be a noun tag.
2. Frequency filter: total count >= ``min_freq``.
3. Length filter: surface length (Unicode scalar values) <= ``max_len``.
4. Per-class compound rule, keyed on (script, dominant tag):
   latin "n" and native "nz" surfaces pass; latin "nz" surfaces pass only
   inside the top-k by frequency; native "ns"/"nt"/"nw" surfaces need their
   per-tag frequency thresholds; everything else in those classes is dropped.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .errors import TokenizerFailure

logger = logging.getLogger(__name__)

TokenizerFn = Callable[[str], list[tuple[str, str]]]


class TokenizerSource(str, Enum):
    FINE = "FINE"
    COMPOUND = "COMPOUND"


class Language(str, Enum):
    LATIN = "latin"
    NATIVE = "native"


@dataclass(frozen=True)
class Token:
    surface: str
    pos: str
    source: TokenizerSource

    def __post_init__(self):
        if not self.surface:
            raise ValueError("token surface must be non-empty")


def classify_language(surface: str) -> Language:
    """A surface is latin-script iff every character is ASCII."""
    return Language.LATIN if surface.isascii() else Language.NATIVE


class LexiconTokenizer:
    """Deterministic greedy longest-match tokenizer over a fixed lexicon.

    Stands in for the real segmenters: scanning left to right, the longest
    lexicon entry starting at the cursor is emitted with its POS tag;
    positions covered by no entry are skipped one character at a time.
    """

    def __init__(self, lexicon: dict[str, str]):
        if not lexicon:
            raise ValueError("lexicon must not be empty")
        self.lexicon = dict(lexicon)
        self._max_len = max(len(w) for w in lexicon)

    @classmethod
    def from_tsv(cls, path: str | Path) -> "LexiconTokenizer":
        lexicon: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                surface, _, pos = line.partition("\t")
                lexicon[surface] = pos or "n"
        return cls(lexicon)

    def tokenize(self, text: str) -> list[tuple[str, str]]:
        out: list[tuple[str, str]] = []
        i = 0
        while i < len(text):
            match = None
            for length in range(min(self._max_len, len(text) - i), 0, -1):
                cand = text[i : i + length]
                if cand in self.lexicon:
                    match = cand
                    break
            if match is None:
                i += 1
                continue
            out.append((match, self.lexicon[match]))
            i += len(match)
        return out


def tokenize_dual(text: str, tokenizer_fine: TokenizerFn, tokenizer_compound: TokenizerFn) -> list[Token]:
    """Run both tokenizers and return the multiset union, tagged by source.

    A failing backend is logged and skipped as long as the other one
    succeeds; TokenizerFailure is raised only when both backends fail.
    """
    tokens: list[Token] = []
    failed: list[str] = []
    for source, fn in ((TokenizerSource.FINE, tokenizer_fine), (TokenizerSource.COMPOUND, tokenizer_compound)):
        try:
            pairs = fn(text)
        except Exception:
            logger.warning("tokenizer %s failed on text %r", source.value, text[:40], exc_info=True)
            failed.append(source.value)
            continue
        tokens.extend(Token(surface=s, pos=p, source=source) for s, p in pairs)
    if len(failed) == 2:
        raise TokenizerFailure(failed)
    return tokens


@dataclass
class SurfaceStats:
    count: int = 0
    pos_tags: Counter = field(default_factory=Counter)
    language: Language = Language.NATIVE

    def dominant_pos(self) -> str:
        """Most frequent tag; ties break lexicographically."""
        best = min(self.pos_tags.items(), key=lambda kv: (-kv[1], kv[0]))
        return best[0]


class FrequencyTable:
    """Per-surface counts and POS multisets; merging is a commutative monoid."""

    def __init__(self):
        self.entries: dict[str, SurfaceStats] = {}
        self.total = 0

    def add(self, token: Token) -> None:
        stats = self.entries.get(token.surface)
        if stats is None:
            stats = SurfaceStats(language=classify_language(token.surface))
            self.entries[token.surface] = stats
        stats.count += 1
        stats.pos_tags[token.pos] += 1
        self.total += 1

    def merge(self, other: "FrequencyTable") -> "FrequencyTable":
        merged = FrequencyTable()
        for table in (self, other):
            for surface, stats in table.entries.items():
                tgt = merged.entries.get(surface)
                if tgt is None:
                    tgt = SurfaceStats(language=stats.language)
                    merged.entries[surface] = tgt
                tgt.count += stats.count
                tgt.pos_tags.update(stats.pos_tags)
        merged.total = self.total + other.total
        return merged

    def __len__(self) -> int:
        return len(self.entries)


def accumulate(tokens: Iterable[Token]) -> FrequencyTable:
    table = FrequencyTable()
    for token in tokens:
        table.add(token)
    return table


DEFAULT_NOUN_TAGS = frozenset({"n", "nz", "ns", "nt", "nw"})


@dataclass(frozen=True)
class MiningConfig:
    min_freq: int = 15
    max_len: int = 5
    latin_nz_top_k: int = 50
    compound_thresholds: dict = field(default_factory=lambda: {"ns": 3000, "nt": 400, "nw": 300})
    noun_tags: frozenset = DEFAULT_NOUN_TAGS

    def __post_init__(self):
        if self.min_freq < 0 or self.max_len < 0 or self.latin_nz_top_k < 0:
            raise ValueError("thresholds must be >= 0")
        if any(v < 0 for v in self.compound_thresholds.values()):
            raise ValueError("compound thresholds must be >= 0")


@dataclass(frozen=True, order=True)
class CandidateConcept:
    surface: str
    freq: int
    dominant_pos: str


def filter_candidates(table: FrequencyTable, cfg: MiningConfig = MiningConfig()) -> set[CandidateConcept]:
    """Apply the four mining filters to a finalized frequency table.

    The latin-"nz" top-k is ranked over all latin surfaces whose dominant tag
    is "nz", ordered by (-frequency, surface).
    """
    latin_nz = sorted(
        (
            (surface, stats.count)
            for surface, stats in table.entries.items()
            if stats.language is Language.LATIN and stats.dominant_pos() == "nz"
        ),
        key=lambda kv: (-kv[1], kv[0]),
    )
    latin_nz_kept = {surface for surface, _ in latin_nz[: cfg.latin_nz_top_k]}

    kept: set[CandidateConcept] = set()
    for surface, stats in table.entries.items():
        pos = stats.dominant_pos()
        if pos not in cfg.noun_tags:
            continue
        if stats.count < cfg.min_freq:
            continue
        if len(surface) > cfg.max_len:
            continue
        if not _compound_rule(surface, pos, stats, cfg, latin_nz_kept):
            continue
        kept.add(CandidateConcept(surface=surface, freq=stats.count, dominant_pos=pos))
    return kept


def _compound_rule(
    surface: str,
    pos: str,
    stats: SurfaceStats,
    cfg: MiningConfig,
    latin_nz_kept: set[str],
) -> bool:
    latin = stats.language is Language.LATIN
    if pos == "n":
        return True
    if pos == "nz":
        return surface in latin_nz_kept if latin else True
    if pos in cfg.compound_thresholds:
        return (not latin) and stats.count >= cfg.compound_thresholds[pos]
    return True


def write_candidates(candidates: set[CandidateConcept], path: str | Path) -> None:
    """TSV output ``surface<TAB>freq<TAB>dominant_pos``, sorted by (-freq, surface)."""
    rows = sorted(candidates, key=lambda c: (-c.freq, c.surface))
    with open(path, "w", encoding="utf-8") as fh:
        for c in rows:
            fh.write(f"{c.surface}\t{c.freq}\t{c.dominant_pos}\n")


def read_candidates(path: str | Path) -> list[CandidateConcept]:
    out: list[CandidateConcept] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            surface, freq, pos = line.split("\t")
            out.append(CandidateConcept(surface=surface, freq=int(freq), dominant_pos=pos))
    return out


def mine_corpus(
    texts: Iterator[str],
    tokenizer_fine: TokenizerFn,
    tokenizer_compound: TokenizerFn,
    cfg: MiningConfig = MiningConfig(),
    jobs: int = 1,
) -> set[CandidateConcept]:
    """Full mining pass: dual tokenization, accumulation, filtering.

    With ``jobs > 1`` the texts are dealt round-robin into shards that
    accumulate concurrently and merge; the merge is a commutative monoid,
    so the result is identical to the serial pass.
    """

    def shard_table(shard: list[str]) -> FrequencyTable:
        table = FrequencyTable()
        for text in shard:
            for token in tokenize_dual(text, tokenizer_fine, tokenizer_compound):
                table.add(token)
        return table

    if jobs <= 1:
        merged = shard_table(list(texts))
    else:
        from concurrent.futures import ThreadPoolExecutor

        shards: list[list[str]] = [[] for _ in range(jobs)]
        for i, text in enumerate(texts):
            shards[i % jobs].append(text)
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            tables = list(pool.map(shard_table, shards))
        merged = tables[0]
        for table in tables[1:]:
            merged = merged.merge(table)
    return filter_candidates(merged, cfg)
