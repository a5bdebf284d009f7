"""Per-pair cross-modal symbol grounding.

For each image-text pair: extract the concept mentions shared with the
candidate set, build a concept-activated weighted image per mention, keep it
only when the concept wins a strict argmax over its co-mentions on that
weighted image (the double-check), then pick the best-matching encyclopedia
sense for the survivor or mark it unmatched.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

from .corpus import EncyclopediaEntry, ImageTextPair
from .errors import BackendUnavailable, MissingImage, ShapeViolation
from .mining import TokenizerFn, tokenize_dual
from .relevance import (
    AttentionStack,
    PropagationMode,
    WeightedImage,
    blend,
    extract_patch_relevance,
    normalize,
    propagate,
    reduce_heads,
    upsample_bilinear,
)
from .backends.base import GroundingBackend, grounding_prompt, validate_result

logger = logging.getLogger(__name__)

ProvenanceSink = Callable[[dict], None]


@dataclass(frozen=True)
class GroundingConfig:
    mode: PropagationMode = PropagationMode.HADAMARD
    gain: float = 0.5
    tau_desc: float = 0.2
    jobs: int = 1


@dataclass(frozen=True)
class ConceptMentionSet:
    pair_id: str
    concepts: tuple[str, ...]  # deduplicated, first-occurrence order


@dataclass(frozen=True)
class SemiGroundedPair:
    concept: str
    pair_id: str
    weighted_image: WeightedImage
    match_score: float


@dataclass(frozen=True)
class SenseGrounding:
    concept: str
    sense_index: int | None  # 1-based; None means unmatched
    score: float | None

    @property
    def unmatched(self) -> bool:
        return self.sense_index is None


@dataclass
class GroundingRecord:
    """One retained concept from one pair, with its sense decision."""

    pair: SemiGroundedPair
    sense: SenseGrounding


def extract_mentions(
    pair: ImageTextPair,
    candidates: set[str],
    tokenizer_fine: TokenizerFn,
    tokenizer_compound: TokenizerFn,
) -> ConceptMentionSet:
    """Caption tokens intersected with the candidate set, order-stable."""
    seen: list[str] = []
    for token in tokenize_dual(pair.text, tokenizer_fine, tokenizer_compound):
        if token.surface in candidates and token.surface not in seen:
            seen.append(token.surface)
    return ConceptMentionSet(pair_id=pair.id, concepts=tuple(seen))


def visual_ground(
    pair: ImageTextPair,
    mentions: ConceptMentionSet,
    backend: GroundingBackend,
    cfg: GroundingConfig,
    provenance: ProvenanceSink | None = None,
) -> list[tuple[str, WeightedImage]]:
    """Build a concept-activated weighted image for every mention.

    A single concept's backend failure is logged and skipped; it does not
    abort the rest of the pair.
    """
    image = pair.load_image()
    out: list[tuple[str, WeightedImage]] = []
    for concept in mentions.concepts:
        try:
            result = backend.ground(image, grounding_prompt(concept))
            validate_result(result, backend.descriptor)
        except (BackendUnavailable, ShapeViolation) as exc:
            logger.warning("grounding failed for concept %r on pair %s: %s", concept, pair.id, exc)
            _emit(provenance, pair.id, concept, "visual", "error", None)
            continue
        attention = result.attention
        reduced = reduce_heads(attention) if isinstance(attention, AttentionStack) else attention
        relevance = propagate(reduced, cfg.mode)
        grid = extract_patch_relevance(relevance, backend.descriptor.patch_grid)
        raw = upsample_bilinear(grid, image.width, image.height)
        weighted = blend(image, normalize(raw), gain=cfg.gain, source_concept=concept)
        _emit(provenance, pair.id, concept, "visual", "weighted", result.score)
        out.append((concept, weighted))
    return out


def double_check(
    weighted: WeightedImage,
    concept: str,
    mentions: ConceptMentionSet,
    backend: GroundingBackend,
) -> tuple[bool, float]:
    """Score every co-mention against this weighted image.

    Retained iff the activating concept is the unique argmax; exact ties
    drop the pair (strictness favors precision).
    """
    if concept not in mentions.concepts:
        raise ValueError(f"{concept!r} is not among the pair's mentions")
    scores = {c: backend.score_pair(weighted, grounding_prompt(c)) for c in mentions.concepts}
    own = scores[concept]
    retained = all(own > s for c, s in scores.items() if c != concept)
    return retained, own


def semantic_ground(
    weighted: WeightedImage,
    entry: EncyclopediaEntry,
    backend: GroundingBackend,
    tau_desc: float,
) -> SenseGrounding:
    """Pick the best-scoring sense if it clears the threshold, else unmatched.

    Ties resolve to the lowest sense index; backend failures degrade to
    unmatched with a warning.
    """
    try:
        scores = [backend.score_pair(weighted, sense) for sense in entry.senses]
    except BackendUnavailable as exc:
        logger.warning("sense scoring failed for %r: %s", entry.concept_surface, exc)
        return SenseGrounding(concept=entry.concept_surface, sense_index=None, score=None)
    best_index = max(range(len(scores)), key=lambda i: (scores[i], -i))
    if scores[best_index] >= tau_desc:
        return SenseGrounding(concept=entry.concept_surface, sense_index=best_index + 1, score=scores[best_index])
    return SenseGrounding(concept=entry.concept_surface, sense_index=None, score=None)


def _emit(provenance: ProvenanceSink | None, pair_id: str, concept: str, stage: str, outcome: str, score) -> None:
    if provenance is not None:
        provenance({"pair_id": pair_id, "concept": concept, "stage": stage, "outcome": outcome, "score": score})


def _process_pair(
    pair: ImageTextPair,
    candidates: set[str],
    encyclopedia: dict[str, EncyclopediaEntry],
    backend: GroundingBackend,
    tokenizer_fine: TokenizerFn,
    tokenizer_compound: TokenizerFn,
    cfg: GroundingConfig,
) -> tuple[list[GroundingRecord], list[dict]]:
    events: list[dict] = []
    sink = events.append
    records: list[GroundingRecord] = []

    mentions = extract_mentions(pair, candidates, tokenizer_fine, tokenizer_compound)
    if not mentions.concepts:
        _emit(sink, pair.id, "", "mention", "empty", None)
        return records, events
    try:
        grounded = visual_ground(pair, mentions, backend, cfg, provenance=sink)
    except MissingImage as exc:
        logger.warning("pair %s skipped: %s", pair.id, exc)
        _emit(sink, pair.id, "", "visual", "missing_image", None)
        return records, events

    for concept, weighted in grounded:
        try:
            retained, score = double_check(weighted, concept, mentions, backend)
        except BackendUnavailable as exc:
            logger.warning("double-check failed for %r on pair %s: %s", concept, pair.id, exc)
            _emit(sink, pair.id, concept, "double_check", "unverified_dropped", None)
            continue
        if not retained:
            _emit(sink, pair.id, concept, "double_check", "dropped", score)
            continue
        _emit(sink, pair.id, concept, "double_check", "retained", score)
        semi = SemiGroundedPair(concept=concept, pair_id=pair.id, weighted_image=weighted, match_score=score)

        entry = encyclopedia.get(concept)
        if entry is None:
            sense = SenseGrounding(concept=concept, sense_index=None, score=None)
            _emit(sink, pair.id, concept, "semantic", "no_entry", None)
        else:
            sense = semantic_ground(weighted, entry, backend, cfg.tau_desc)
            outcome = "unmatched" if sense.unmatched else f"sense_{sense.sense_index}"
            _emit(sink, pair.id, concept, "semantic", outcome, sense.score)
        records.append(GroundingRecord(pair=semi, sense=sense))
    return records, events


def run_grounding(
    corpus: Iterable[ImageTextPair],
    candidates: set[str],
    encyclopedia: dict[str, EncyclopediaEntry],
    backend: GroundingBackend,
    tokenizer_fine: TokenizerFn,
    tokenizer_compound: TokenizerFn,
    cfg: GroundingConfig = GroundingConfig(),
    provenance: ProvenanceSink | None = None,
) -> Iterator[GroundingRecord]:
    """Ground every pair, yielding records in corpus order.

    Pairs are independent work units; worker counts above one are clamped to
    the backend's declared in-flight limit, and results are yielded in input
    order regardless of completion order, so output is deterministic for any
    job count. Per-pair failures are logged and skipped.
    """
    try:
        limit = backend.descriptor.max_in_flight
    except Exception:
        limit = 1  # descriptor unknown until the first call; stay serial
    workers = max(1, min(cfg.jobs, limit))

    def work(pair: ImageTextPair):
        return _process_pair(pair, candidates, encyclopedia, backend, tokenizer_fine, tokenizer_compound, cfg)

    def drain(results):
        for records, events in results:
            if provenance is not None:
                for event in events:
                    provenance(event)
            yield from records

    if workers == 1:
        yield from drain(map(work, corpus))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from drain(pool.map(work, corpus))


class ProvenanceWriter:
    """Append provenance events as newline-delimited JSON."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8")

    def __call__(self, event: dict) -> None:
        self._fh.write(json.dumps(event, ensure_ascii=False, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
