"""Description completion for concepts with no grounded sense.

An LLM generates a candidate description, every description without at least
one sufficiently matching grounded image is filtered out as hallucinated, and
a second (usually cheaper) LLM judges whether the surviving description is
consistent with the caption context the concept appeared in. Status moves
forward only: GENERATED -> HALLUC_FILTERED | JUDGED_OK | JUDGED_REJECT.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol

from .errors import EmptyGeneration, LlmUnavailable
from .relevance import WeightedImage
from .backends.base import GroundingBackend

logger = logging.getLogger(__name__)

GENERATE_TEMPLATE = (
    "Please generate a basic concept description for concept {concept}, "
    "scientifically and rigorously explain the basic meaning of this concept."
)

JUDGE_TEMPLATE = (
    "Context: {text}; Concept: {concept}; Concept description: {description}; "
    "Your task is to determine whether the meaning of a concept in the Context "
    "conflicts with its description. If there is a conflict, output 0. "
    "If there is no conflict, output 1."
)

# First 0 or 1 that is not part of a longer digit run decides the judgment.
_VERDICT_RE = re.compile(r"(?<![0-9])([01])(?![0-9])")

JUDGE_RETRIES = 2


class Status(str, Enum):
    GENERATED = "GENERATED"
    HALLUC_FILTERED = "HALLUC_FILTERED"
    JUDGED_OK = "JUDGED_OK"
    JUDGED_REJECT = "JUDGED_REJECT"


_FORWARD = {
    Status.GENERATED: {Status.HALLUC_FILTERED, Status.JUDGED_OK, Status.JUDGED_REJECT},
    Status.HALLUC_FILTERED: set(),
    Status.JUDGED_OK: set(),
    Status.JUDGED_REJECT: set(),
}


@dataclass
class CompletionRecord:
    concept: str
    text: str
    status: Status = Status.GENERATED
    history: list[Status] = field(default_factory=lambda: [Status.GENERATED])

    def advance(self, new_status: Status) -> None:
        if new_status not in _FORWARD[self.status]:
            raise ValueError(f"illegal status transition {self.status} -> {new_status}")
        self.status = new_status
        self.history.append(new_status)

    def to_json(self) -> str:
        return json.dumps(
            {"concept": self.concept, "text": self.text, "status": self.status.value},
            ensure_ascii=False,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "CompletionRecord":
        obj = json.loads(line)
        status = Status(obj["status"])
        return cls(concept=obj["concept"], text=obj["text"], status=status, history=[status])


class LlmBackend(Protocol):
    def generate(self, prompt: str) -> str: ...


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class ReplayLlm:
    """Deterministic LLM stand-in replaying recorded replies.

    The fixture is newline-delimited JSON ``{"prompt_hash", "reply"}``.
    Repeated hashes queue up in file order (so retry behavior is scriptable);
    the last reply for a hash is sticky.
    """

    def __init__(self, fixture_path: str | Path):
        self._queues: dict[str, list[str]] = {}
        with open(fixture_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                self._queues.setdefault(obj["prompt_hash"], []).append(obj["reply"])

    def generate(self, prompt: str) -> str:
        key = prompt_hash(prompt)
        queue = self._queues.get(key)
        if not queue:
            raise LlmUnavailable(f"no recorded reply for prompt hash {key[:12]}…")
        return queue.pop(0) if len(queue) > 1 else queue[0]


def generate_description(concept: str, llm: LlmBackend) -> CompletionRecord:
    """Ask the generator LLM for a description of an ungrounded concept."""
    reply = llm.generate(GENERATE_TEMPLATE.format(concept=concept))
    if not reply.strip():
        raise EmptyGeneration(f"empty description generated for {concept!r}")
    return CompletionRecord(concept=concept, text=reply)


def eliminate_hallucination(
    record: CompletionRecord,
    weighted_images: list[WeightedImage],
    backend: GroundingBackend,
    tau_h: float = 0.2,
) -> CompletionRecord:
    """Keep the record iff some grounded image matches its text at >= tau_h.

    With no images available the description cannot be verified and is
    filtered.
    """
    if record.status is not Status.GENERATED:
        raise ValueError("hallucination filtering applies to GENERATED records")
    if not weighted_images or not any(backend.score_pair(img, record.text) >= tau_h for img in weighted_images):
        record.advance(Status.HALLUC_FILTERED)
    return record


def parse_verdict(reply: str) -> bool | None:
    """First standalone 0/1 decides; None marks an unparsable reply."""
    match = _VERDICT_RE.search(reply)
    if match is None:
        return None
    return match.group(1) == "1"


def judge_consistency(
    context_text: str,
    concept: str,
    description: str,
    llm: LlmBackend,
) -> Status:
    """Judge description-context consistency, retrying malformed replies."""
    prompt = JUDGE_TEMPLATE.format(text=context_text, concept=concept, description=description)
    for attempt in range(1 + JUDGE_RETRIES):
        reply = llm.generate(prompt)
        verdict = parse_verdict(reply)
        if verdict is not None:
            return Status.JUDGED_OK if verdict else Status.JUDGED_REJECT
        logger.warning("unparsable judge reply (attempt %d): %r", attempt + 1, reply[:60])
    return Status.JUDGED_REJECT


@dataclass
class CompletionInputs:
    """Everything the completion stage knows about one ungrounded concept."""

    concept: str
    weighted_images: list[WeightedImage]
    context_text: str  # caption of the concept's highest double-check-score pair


def run_completion(
    inputs: list[CompletionInputs],
    generator_llm: LlmBackend,
    judge_llm: LlmBackend,
    backend: GroundingBackend,
    tau_h: float = 0.2,
) -> list[CompletionRecord]:
    """Generate, filter, and judge descriptions for ungrounded concepts.

    Concepts whose generation fails (unavailable LLM, empty output) are
    skipped with a log entry and simply yield no record.
    """
    records: list[CompletionRecord] = []
    for item in inputs:
        try:
            record = generate_description(item.concept, generator_llm)
        except LlmUnavailable:
            logger.warning("generator unavailable for %r; queued for retry", item.concept)
            continue
        except EmptyGeneration as exc:
            logger.warning("%s", exc)
            continue
        record = eliminate_hallucination(record, item.weighted_images, backend, tau_h)
        if record.status is Status.HALLUC_FILTERED:
            records.append(record)
            continue
        try:
            verdict = judge_consistency(item.context_text, item.concept, record.text, judge_llm)
        except LlmUnavailable:
            logger.warning("judge unavailable for %r; queued for retry", item.concept)
            continue
        record.advance(verdict)
        records.append(record)
    return records


def write_completions(records: list[CompletionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in sorted(records, key=lambda r: r.concept):
            fh.write(record.to_json() + "\n")


def read_completions(path: str | Path) -> list[CompletionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(CompletionRecord.from_json(line))
    return out
