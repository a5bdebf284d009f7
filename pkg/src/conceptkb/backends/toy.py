"""Deterministic toy dual encoder with exact attention gradients.

A two-layer, two-head attention model over mean-pooled patch features and a
hashed bag-of-words text embedding; the matching score is the cosine between
the class-token image embedding and the text embedding. Queries and keys are
computed from the initial token embeddings (not the evolving hidden state),
so the score, viewed as a function of the attention tensors with everything
else held fixed, has a clean analytic gradient that the backward pass
implements layer by layer. Semantic quality is a non-goal; the model exists
to exercise shapes, determinism, and gradient correctness at desk scale.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

from ..corpus import RasterImage
from ..relevance import AttentionStack, WeightedImage
from .base import BackendDescriptor, GroundingBackend, GroundingResult, as_raster

_WORD_RE = re.compile(r"[a-z0-9]+")


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _stable_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


class ToyEncoder(GroundingBackend):
    def __init__(self, seed: int = 0, layers: int = 2, heads: int = 2, grid: tuple[int, int] = (2, 2), dim: int = 16):
        m, n = grid
        tokens = 1 + m * n
        self.descriptor = BackendDescriptor(
            name=f"toy-{seed}",
            layers=layers,
            heads=heads,
            tokens=tokens,
            patch_grid=grid,
            returns_reduced=False,
            max_in_flight=8,
        )
        self.dim = dim
        self.dk = max(dim // heads, 1)
        rng = np.random.default_rng(seed)
        feat_dim = 6  # per-patch: 3 channel means, intensity std, row, col
        self.cls_vec = rng.normal(scale=0.5, size=dim)
        self.w_patch = rng.normal(scale=0.5, size=(feat_dim, dim))
        self.w_q = rng.normal(scale=0.5, size=(layers, heads, dim, self.dk))
        self.w_k = rng.normal(scale=0.5, size=(layers, heads, dim, self.dk))
        self.w_v = rng.normal(scale=0.3 / dim**0.5, size=(layers, heads, dim, dim))

    # -- feature extraction -------------------------------------------------

    def _patch_features(self, image: RasterImage) -> np.ndarray:
        m, n = self.descriptor.patch_grid
        px = image.pixels.astype(np.float64) / 255.0
        if image.channels == 1:
            px = np.repeat(px, 3, axis=2)
        row_edges = np.linspace(0, image.height, m + 1).astype(int)
        col_edges = np.linspace(0, image.width, n + 1).astype(int)
        feats = np.zeros((m * n, 6))
        for r in range(m):
            for c in range(n):
                cell = px[row_edges[r] : max(row_edges[r + 1], row_edges[r] + 1),
                          col_edges[c] : max(col_edges[c + 1], col_edges[c] + 1)]
                k = r * n + c
                feats[k, :3] = cell.mean(axis=(0, 1))
                feats[k, 3] = cell.std()
                feats[k, 4] = r / max(m - 1, 1)
                feats[k, 5] = c / max(n - 1, 1)
        return feats

    def _token_embeddings(self, image: RasterImage) -> np.ndarray:
        patches = self._patch_features(image) @ self.w_patch
        return np.vstack([self.cls_vec, patches])

    def _text_embedding(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        folded = text.casefold()
        tokens = _WORD_RE.findall(folded) + [ch for ch in folded if not ch.isascii()]
        for tok in tokens:
            h = _stable_hash(tok)
            sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
            vec[h % self.dim] += sign
        norm = np.linalg.norm(vec)
        if norm == 0:
            vec = np.ones(self.dim)
            norm = np.linalg.norm(vec)
        return vec / norm

    # -- forward / backward -------------------------------------------------

    def _attention(self, x0: np.ndarray) -> np.ndarray:
        L, H = self.descriptor.layers, self.descriptor.heads
        T = x0.shape[0]
        attn = np.zeros((L, H, T, T))
        for l in range(L):
            for h in range(H):
                q = x0 @ self.w_q[l, h]
                k = x0 @ self.w_k[l, h]
                attn[l, h] = _softmax_rows(q @ k.T / np.sqrt(self.dk))
        return attn

    def _value_pass(self, x0: np.ndarray, attn: np.ndarray) -> list[np.ndarray]:
        """Returns the hidden state before each layer plus the final state."""
        L, H = attn.shape[0], attn.shape[1]
        xs = [x0]
        x = x0
        for l in range(L):
            mix = np.zeros_like(x)
            for h in range(H):
                mix += attn[l, h] @ (x @ self.w_v[l, h])
            x = x + mix / H
            xs.append(x)
        return xs

    def _score_from_state(self, x_final: np.ndarray, t_vec: np.ndarray) -> float:
        u = x_final[0]
        return float(u @ t_vec / np.linalg.norm(u))

    def score_given_attention(self, image: RasterImage, text: str, attn: np.ndarray) -> float:
        """Score as a function of an explicit attention stack (for gradient checks)."""
        x0 = self._token_embeddings(image)
        xs = self._value_pass(x0, np.asarray(attn, dtype=np.float64))
        return self._score_from_state(xs[-1], self._text_embedding(text))

    def _backward(self, xs: list[np.ndarray], attn: np.ndarray, t_vec: np.ndarray) -> np.ndarray:
        L, H, T, _ = attn.shape
        u = xs[-1][0]
        norm = np.linalg.norm(u)
        u_hat = u / norm
        d_u = (t_vec - (u_hat @ t_vec) * u_hat) / norm

        G = np.zeros_like(xs[-1])
        G[0] = d_u
        grad = np.zeros_like(attn)
        for l in range(L - 1, -1, -1):
            x_in = xs[l]
            G_next = G.copy()
            for h in range(H):
                v = x_in @ self.w_v[l, h]
                grad[l, h] = (G_next @ v.T) / H
                G += (attn[l, h].T @ G_next @ self.w_v[l, h].T) / H
        return grad

    # -- backend surface ----------------------------------------------------

    def ground(self, image: RasterImage, prompt: str) -> GroundingResult:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        x0 = self._token_embeddings(image)
        attn = self._attention(x0)
        xs = self._value_pass(x0, attn)
        t_vec = self._text_embedding(prompt)
        score = self._score_from_state(xs[-1], t_vec)
        grad = self._backward(xs, attn, t_vec)
        return GroundingResult(score=score, attention=AttentionStack(attn=attn, grad=grad))

    def score_pair(self, image: RasterImage | WeightedImage, text: str) -> float:
        if not text:
            raise ValueError("text must be non-empty")
        raster = as_raster(image)
        x0 = self._token_embeddings(raster)
        xs = self._value_pass(x0, self._attention(x0))
        return self._score_from_state(xs[-1], self._text_embedding(text))

    def embed_image(self, image: RasterImage | WeightedImage) -> np.ndarray:
        raster = as_raster(image)
        x0 = self._token_embeddings(raster)
        xs = self._value_pass(x0, self._attention(x0))
        u = xs[-1][0]
        return u / np.linalg.norm(u)
