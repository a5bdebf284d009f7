"""Downstream harnesses: vector retrieval, prompt assembly, and metrics.

The retrieval index holds unit-norm embeddings of up to ten images per
concept; recognition queries return the label of the nearest entry by cosine.
Prompt builders are pure string templates covered by golden files. Metrics
are exact-match accuracy, the standard annotator-agreement soft accuracy
(``min(matches / 3, 1)``), and win/lose/tie rates, all reported as
percentages rounded half-up to one decimal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import RasterImage
from .errors import BackendUnavailable, EmptyIndex, EmptyInput, LengthMismatch
from .kb import ConceptNode, ImageRecord, read_weight_map
from .relevance import WeightedImage, blend
from .backends.base import GroundingBackend

import logging

logger = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-6
GOLD_ANNOTATIONS = 10

VCR_PROMPT_TEMPLATE = "The retrieved result shows a {concept} in the image. What is it?"

VCKDG_PROMPT_TEMPLATE = (
    "According to the retrieved conceptual knowledge: {concept}: {description}. "
    "Please provide a detailed introduction to the background knowledge related "
    "to the visual concept."
)

OKVQA_PROMPT_TEMPLATE = """Your task is to reanswer the following question based on the original answer:
- Question: {question}
- Original Answer: {answer}
Here is some concept knowledge you can refer to:
- The answer contains the following concepts: {answer_concepts}
- The question contains the following concepts: {question_concepts}
Hint: If you think the original answer is incorrect based on the concept knowledge, try to give the correct answer directly. If it is correct, just repeat the original answer.
Output Format: A short answer, no explanation, no other output.
Your Answer:"""


@dataclass(frozen=True)
class IndexEntry:
    embedding: np.ndarray
    concept_label: str
    image_ref: str


@dataclass
class VectorIndex:
    entries: list[IndexEntry]

    def __post_init__(self):
        dims = {e.embedding.shape for e in self.entries}
        if len(dims) > 1:
            raise ValueError(f"mixed embedding shapes in index: {dims}")
        for e in self.entries:
            if abs(np.linalg.norm(e.embedding) - 1.0) > UNIT_NORM_TOL:
                raise ValueError(f"entry for {e.concept_label!r} is not unit norm")


@dataclass(frozen=True)
class VqaSample:
    question: str
    gold_annotations: tuple[str, ...]
    image_tags: tuple[str, ...]
    original_answer: str

    def __post_init__(self):
        if len(self.gold_annotations) != GOLD_ANNOTATIONS:
            raise ValueError(f"expected {GOLD_ANNOTATIONS} gold annotations, got {len(self.gold_annotations)}")


@dataclass(frozen=True)
class EvalResult:
    metric: str
    value: float  # percentage, one decimal
    n: int

    def __post_init__(self):
        if not 0.0 <= self.value <= 100.0:
            raise ValueError("metric value must be a percentage")

    def to_dict(self) -> dict:
        return {"metric": self.metric, "value": self.value, "n": self.n}


# -- index construction and retrieval ----------------------------------------


def build_index(
    nodes: Iterable[ConceptNode],
    backend: GroundingBackend,
    load_image: Callable[[str, ImageRecord], RasterImage | WeightedImage],
    max_images_per_concept: int = 10,
) -> VectorIndex:
    """Embed up to ``max_images_per_concept`` images per concept.

    Images are chosen by descending match score (pair id breaks ties);
    per-image backend errors are logged and the image skipped.
    """
    entries: list[IndexEntry] = []
    for node in sorted(nodes, key=lambda n: n.surface):
        ranked = sorted(node.images, key=lambda i: (-i.match_score, i.pair_id))
        for record in ranked[:max_images_per_concept]:
            try:
                image = load_image(node.surface, record)
                vec = backend.embed_image(image)
            except (BackendUnavailable, OSError) as exc:
                logger.warning("skipping %s/%s: %s", node.surface, record.pair_id, exc)
                continue
            entries.append(IndexEntry(embedding=vec, concept_label=node.surface, image_ref=record.image_ref))
    return VectorIndex(entries=entries)


def kb_image_loader(kb_dir: str | Path, gain: float = 0.5) -> Callable[[str, ImageRecord], WeightedImage]:
    """Reconstruct a stored weighted image from its raster and weight map."""
    kb_dir = Path(kb_dir)

    def load(concept: str, record: ImageRecord) -> WeightedImage:
        from .corpus import ImageTextPair

        raster = ImageTextPair(id=record.pair_id, image_ref=record.image_ref, text="-").load_image()
        weight_map = read_weight_map(kb_dir / record.weight_map_ref)
        return blend(raster, weight_map, gain=gain, source_concept=concept)

    return load


def retrieve_concept(index: VectorIndex, query_image: RasterImage | WeightedImage, backend: GroundingBackend) -> str:
    """Label of the max-cosine entry; exact ties go to the smallest label."""
    if not index.entries:
        raise EmptyIndex("cannot query an empty index")
    query = backend.embed_image(query_image)
    sims = np.array([float(e.embedding @ query) for e in index.entries])
    best = sims.max()
    return min(e.concept_label for e, s in zip(index.entries, sims) if s == best)


def save_index(index: VectorIndex, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in index.entries:
            fh.write(
                json.dumps(
                    {"concept_label": e.concept_label, "embedding": e.embedding.tolist(), "image_ref": e.image_ref},
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )


def load_index(path: str | Path) -> VectorIndex:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            entries.append(
                IndexEntry(
                    embedding=np.asarray(obj["embedding"], dtype=np.float64),
                    concept_label=obj["concept_label"],
                    image_ref=obj["image_ref"],
                )
            )
    return VectorIndex(entries=entries)


# -- prompt builders ----------------------------------------------------------


def build_vcr_prompt(concept: str) -> str:
    return VCR_PROMPT_TEMPLATE.format(concept=concept)


def build_vckdg_prompt(concept: str, description: str) -> str:
    return VCKDG_PROMPT_TEMPLATE.format(concept=concept, description=description)


def _concept_block(concepts: Sequence[tuple[str, str]]) -> str:
    if not concepts:
        return "(none)"
    return "; ".join(f"{concept}: {description}" for concept, description in concepts)


def build_okvqa_prompt(
    question: str,
    original_answer: str,
    answer_concept_descs: Sequence[tuple[str, str]],
    question_concept_descs: Sequence[tuple[str, str]],
) -> str:
    return OKVQA_PROMPT_TEMPLATE.format(
        question=question,
        answer=original_answer,
        answer_concepts=_concept_block(answer_concept_descs),
        question_concepts=_concept_block(question_concept_descs),
    )


# -- concept lookup -----------------------------------------------------------


def lookup_concepts(text: str, kb_lexicon: dict[str, str]) -> list[tuple[str, str]]:
    """Greedy longest-match scan of the text against KB concept surfaces.

    Matching is case-insensitive over raw characters (no word-boundary
    logic, captions may be unsegmented); each concept is reported once, in
    first-occurrence order, with its first sense's description.
    """
    folded_map: dict[str, str] = {}
    for surface in sorted(kb_lexicon):
        folded_map.setdefault(surface.casefold(), surface)
    if not folded_map:
        return []
    max_len = max(len(s) for s in folded_map)
    folded_text = text.casefold()

    found: list[str] = []
    i = 0
    while i < len(folded_text):
        match = None
        for length in range(min(max_len, len(folded_text) - i), 0, -1):
            cand = folded_text[i : i + length]
            if cand in folded_map:
                match = cand
                break
        if match is None:
            i += 1
            continue
        surface = folded_map[match]
        if surface not in found:
            found.append(surface)
        i += len(match)
    return [(surface, kb_lexicon[surface]) for surface in found]


def kb_lexicon(nodes: Iterable[ConceptNode]) -> dict[str, str]:
    """Concept surface -> first sense description, for prompt lookups."""
    lexicon: dict[str, str] = {}
    for node in nodes:
        if node.senses:
            first = min(node.senses, key=lambda s: s.sense_index)
            lexicon[node.surface] = first.text
    return lexicon


# -- metrics ------------------------------------------------------------------


def _normalize_answer(text: str) -> str:
    return text.strip().casefold()


def _percentage(numerator: Decimal, denominator: Decimal) -> float:
    value = Decimal(100) * numerator / denominator
    return float(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def exact_match_accuracy(preds: Sequence[str], golds: Sequence[str], metric: str = "exact_match") -> EvalResult:
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise EmptyInput("no samples to score")
    correct = sum(1 for p, g in zip(preds, golds) if _normalize_answer(p) == _normalize_answer(g))
    return EvalResult(metric=metric, value=_percentage(Decimal(correct), Decimal(len(preds))), n=len(preds))


def _soft_matches(answer: str, gold_annotations: Sequence[str]) -> int:
    if len(gold_annotations) != GOLD_ANNOTATIONS:
        raise ValueError(f"expected {GOLD_ANNOTATIONS} annotations")
    norm = _normalize_answer(answer)
    matches = sum(1 for g in gold_annotations if _normalize_answer(g) == norm)
    return min(matches, 3)


def soft_accuracy(answer: str, gold_annotations: Sequence[str]) -> float:
    """min(#matching annotations / 3, 1), the annotator-agreement metric."""
    return _soft_matches(answer, gold_annotations) / 3.0


def mean_soft_accuracy(answers: Sequence[str], annotations: Sequence[Sequence[str]], metric: str = "soft_accuracy") -> EvalResult:
    if len(answers) != len(annotations):
        raise LengthMismatch(f"{len(answers)} answers vs {len(annotations)} annotation lists")
    if not answers:
        raise EmptyInput("no samples to score")
    total_thirds = sum(_soft_matches(a, g) for a, g in zip(answers, annotations))
    return EvalResult(
        metric=metric,
        value=_percentage(Decimal(total_thirds), Decimal(3 * len(answers))),
        n=len(answers),
    )


def win_rate(judgments: Sequence[str]) -> tuple[float, float, float]:
    """Percentages of WIN/LOSE/TIE judgments, one decimal, half-up."""
    if not judgments:
        raise EmptyInput("no judgments")
    counts = {"WIN": 0, "LOSE": 0, "TIE": 0}
    for j in judgments:
        key = j.strip().upper()
        if key not in counts:
            raise ValueError(f"judgment must be WIN, LOSE, or TIE; got {j!r}")
        counts[key] += 1
    n = Decimal(len(judgments))
    return (
        _percentage(Decimal(counts["WIN"]), n),
        _percentage(Decimal(counts["LOSE"]), n),
        _percentage(Decimal(counts["TIE"]), n),
    )


# -- sample IO ----------------------------------------------------------------


def load_vqa_samples(path: str | Path) -> list[VqaSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            samples.append(
                VqaSample(
                    question=obj["question"],
                    gold_annotations=tuple(obj["gold_annotations"]),
                    image_tags=tuple(obj.get("image_tags", [])),
                    original_answer=obj["original_answer"],
                )
            )
    return samples


def write_vqa_samples(samples: Iterable[VqaSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "question": s.question,
                        "gold_annotations": list(s.gold_annotations),
                        "image_tags": list(s.image_tags),
                        "original_answer": s.original_answer,
                    },
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )


def refine_vqa_answers(
    samples: Sequence[VqaSample],
    lexicon: dict[str, str],
    llm,
    include_tag_concepts: bool = False,
) -> list[str]:
    """Build the refinement prompt per sample and collect the LLM's answers.

    ``include_tag_concepts`` additionally surfaces descriptions for the
    precomputed image tags on the question side; off by default so the
    prompt cites only question/answer concepts.
    """
    answers = []
    for sample in samples:
        answer_concepts = lookup_concepts(sample.original_answer, lexicon)
        question_concepts = lookup_concepts(sample.question, lexicon)
        if include_tag_concepts:
            present = {c for c, _ in question_concepts}
            for tag in sample.image_tags:
                if tag in lexicon and tag not in present:
                    question_concepts.append((tag, lexicon[tag]))
                    present.add(tag)
        prompt = build_okvqa_prompt(sample.question, sample.original_answer, answer_concepts, question_concepts)
        answers.append(llm.generate(prompt).strip())
    return answers
