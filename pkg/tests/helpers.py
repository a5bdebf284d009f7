"""Test doubles shared across test modules."""

from __future__ import annotations

import numpy as np

from conceptkb.backends.base import BackendDescriptor, GroundingBackend, GroundingResult
from conceptkb.errors import BackendUnavailable
from conceptkb.relevance import ReducedAttention


class ScriptedBackend(GroundingBackend):
    """Mock backend with an injected text -> score table and fixed attention."""

    def __init__(self, scores: dict, abar: np.ndarray | None = None, tokens: int = 5, grid=(2, 2), fail_on=None):
        self.descriptor = BackendDescriptor(
            name="scripted", layers=1, heads=1, tokens=tokens, patch_grid=grid,
            returns_reduced=True, max_in_flight=4,
        )
        self.scores = scores
        self.abar = abar if abar is not None else np.zeros((1, tokens, tokens))
        self.fail_on = fail_on or set()

    def _score(self, text: str) -> float:
        if text in self.fail_on:
            raise BackendUnavailable(f"scripted failure for {text!r}")
        return self.scores.get(text, 0.0)

    def ground(self, image, prompt):
        return GroundingResult(score=self._score(prompt), attention=ReducedAttention(abar=self.abar))

    def score_pair(self, image, text):
        return self._score(text)

    def embed_image(self, image):
        v = np.zeros(4)
        v[0] = 1.0
        return v
