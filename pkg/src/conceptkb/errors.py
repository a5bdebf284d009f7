"""Exception types shared across the toolkit."""

from __future__ import annotations


class ConceptKbError(Exception):
    """Base class for all toolkit errors."""


class MalformedRecord(ConceptKbError):
    """A corpus or encyclopedia line could not be parsed into a valid record."""

    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"malformed record at line {line_no}" + (f": {reason}" if reason else ""))


class MissingImage(ConceptKbError):
    """The image referenced by a pair is absent or cannot be decoded."""

    def __init__(self, pair_id: str, detail: str = ""):
        self.pair_id = pair_id
        super().__init__(f"image for pair {pair_id!r} missing or undecodable" + (f" ({detail})" if detail else ""))


class TokenizerFailure(ConceptKbError):
    """A tokenizer backend raised while processing text."""

    def __init__(self, sources: list[str]):
        self.sources = sources
        super().__init__(f"tokenizer backend(s) failed: {', '.join(sources)}")


class ShapeMismatch(ConceptKbError):
    """Tensor shapes disagree with each other or with the declared grid."""


class DegenerateGrid(ConceptKbError):
    """A patch grid with zero rows or columns cannot be upsampled."""


class BackendUnavailable(ConceptKbError):
    """The grounding/LLM backend cannot be reached or returned an error."""


class ShapeViolation(ConceptKbError):
    """A backend returned tensors that contradict its own descriptor."""


class LlmUnavailable(ConceptKbError):
    """The LLM backend cannot produce a reply for this prompt."""


class EmptyGeneration(ConceptKbError):
    """The LLM returned an empty description."""


class ConflictingSense(ConceptKbError):
    """Two different texts claim the same (concept, sense_index) slot."""

    def __init__(self, concept: str, sense_index: int):
        self.concept = concept
        self.sense_index = sense_index
        super().__init__(f"conflicting sense texts for ({concept!r}, sense {sense_index})")


class BadMagic(ConceptKbError):
    """A weight-map file does not start with the expected magic bytes."""


class TruncatedFile(ConceptKbError):
    """A weight-map file is shorter than its header promises."""


class EmptyIndex(ConceptKbError):
    """A retrieval query was issued against an index with no entries."""


class EmptyInput(ConceptKbError):
    """A metric was asked to aggregate zero judgments."""


class LengthMismatch(ConceptKbError):
    """Prediction and gold sequences have different lengths."""
