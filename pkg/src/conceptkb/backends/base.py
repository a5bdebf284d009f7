"""Dual-encoder grounding contract.

A backend scores an (image, text) pair, exposes the attention tensors and
their score gradients needed for relevance computation, and embeds images
into a unit-norm vector space. Backends may return either the full
per-head attention stack or a pre-reduced per-layer map (saves a factor of
the head count on the wire); the descriptor says which.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from ..corpus import RasterImage
from ..errors import ShapeViolation
from ..relevance import AttentionStack, ReducedAttention, WeightedImage

# Grounding prompt; the braces are filled with the concept surface.
GROUNDING_PROMPT_TEMPLATE = "an image of {concept}."


def grounding_prompt(concept: str) -> str:
    return GROUNDING_PROMPT_TEMPLATE.format(concept=concept)


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    layers: int
    heads: int
    tokens: int
    patch_grid: tuple[int, int]
    returns_reduced: bool
    max_in_flight: int = 1

    def __post_init__(self):
        m, n = self.patch_grid
        if m * n != self.tokens - 1:
            raise ValueError(f"patch grid {m}x{n} must cover tokens-1 = {self.tokens - 1}")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


@dataclass(frozen=True)
class GroundingResult:
    score: float
    attention: AttentionStack | ReducedAttention

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("score must be finite")


def validate_result(result: GroundingResult, descriptor: BackendDescriptor) -> GroundingResult:
    """Reject results whose tensor shapes contradict the descriptor."""
    att = result.attention
    if isinstance(att, AttentionStack):
        if descriptor.returns_reduced:
            raise ShapeViolation(f"{descriptor.name} advertised reduced attention but returned a full stack")
        ok = (att.layers, att.heads, att.tokens) == (descriptor.layers, descriptor.heads, descriptor.tokens)
    else:
        if not descriptor.returns_reduced:
            raise ShapeViolation(f"{descriptor.name} advertised a full stack but returned reduced attention")
        ok = (att.layers, att.tokens) == (descriptor.layers, descriptor.tokens)
    if not ok:
        raise ShapeViolation(f"attention shape from {descriptor.name} contradicts its descriptor")
    return result


class GroundingBackend(ABC):
    """Minimal surface the pipeline needs from any dual encoder."""

    descriptor: BackendDescriptor

    @abstractmethod
    def ground(self, image: RasterImage, prompt: str) -> GroundingResult:
        """Score the pair and return attention (+ gradients) for relevance."""

    @abstractmethod
    def score_pair(self, image: RasterImage | WeightedImage, text: str) -> float:
        """Deterministic similarity; weighted images are scored on their blended pixels."""

    @abstractmethod
    def embed_image(self, image: RasterImage | WeightedImage) -> np.ndarray:
        """Unit-norm image embedding."""


def as_raster(image: RasterImage | WeightedImage) -> RasterImage:
    return image.blended if isinstance(image, WeightedImage) else image
