"""Concept-activated relevance numerics.

Given per-layer, per-head attention matrices and their gradients with respect
to an image-text matching score, this module reduces heads into a single
gradient-weighted map per layer, accumulates those maps into a token-level
relevance matrix starting from the identity, extracts the class-token row as
an m x n patch grid, upsamples it to image resolution, normalizes it to
[0, 1], and blends it back into the source pixels.

The layer update is offered in two modes, because the two readings of the
update rule diverge materially:

* HADAMARD (default): ``R <- R + abar * R`` elementwise. Starting from the
  identity this keeps every off-diagonal entry at zero, so the extracted
  class-token row is identically zero; callers get exactly what that rule
  produces.
* MATMUL: ``R <- R + abar @ R``, which propagates relevance across tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .corpus import RasterImage
from .errors import DegenerateGrid, ShapeMismatch

ROW_SUM_TOL = 1e-5
MAX_VAL = 255


@dataclass(frozen=True)
class AttentionStack:
    """Attention tensors [L][H][T][T] plus the score gradient of each entry."""

    attn: np.ndarray
    grad: np.ndarray

    def __post_init__(self):
        attn, grad = np.asarray(self.attn, dtype=np.float64), np.asarray(self.grad, dtype=np.float64)
        object.__setattr__(self, "attn", attn)
        object.__setattr__(self, "grad", grad)
        if attn.shape != grad.shape:
            raise ShapeMismatch(f"attn shape {attn.shape} != grad shape {grad.shape}")
        if attn.ndim != 4:
            raise ShapeMismatch("expected a [layers][heads][tokens][tokens] tensor")
        L, H, T, T2 = attn.shape
        if L < 1 or H < 1 or T < 2 or T != T2:
            raise ShapeMismatch(f"invalid stack shape {attn.shape}")
        if not (np.isfinite(attn).all() and np.isfinite(grad).all()):
            raise ValueError("attention and gradient entries must be finite")
        if (attn < 0).any():
            raise ValueError("attention entries must be >= 0")
        row_sums = attn.sum(axis=-1)
        if not np.allclose(row_sums, 1.0, atol=ROW_SUM_TOL, rtol=0):
            raise ValueError("attention rows must sum to 1 within 1e-5")

    @property
    def layers(self) -> int:
        return self.attn.shape[0]

    @property
    def heads(self) -> int:
        return self.attn.shape[1]

    @property
    def tokens(self) -> int:
        return self.attn.shape[2]


@dataclass(frozen=True)
class ReducedAttention:
    """Head-reduced non-negative attention maps, [L][T][T]."""

    abar: np.ndarray

    def __post_init__(self):
        abar = np.asarray(self.abar, dtype=np.float64)
        object.__setattr__(self, "abar", abar)
        if abar.ndim != 3 or abar.shape[1] != abar.shape[2]:
            raise ShapeMismatch(f"invalid reduced shape {abar.shape}")
        if not np.isfinite(abar).all():
            raise ValueError("reduced attention must be finite")
        if (abar < 0).any():
            raise ValueError("reduced attention must be >= 0 after clamping")

    @property
    def layers(self) -> int:
        return self.abar.shape[0]

    @property
    def tokens(self) -> int:
        return self.abar.shape[1]


@dataclass(frozen=True)
class RelevanceMatrix:
    """Accumulated token relevance, [T][T]; diagonal >= 1, entries >= 0."""

    R: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        object.__setattr__(self, "R", R)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise ShapeMismatch(f"relevance matrix must be square, got {R.shape}")
        if not np.isfinite(R).all():
            raise ValueError("relevance entries must be finite")
        if (R < 0).any():
            raise ValueError("relevance entries must be >= 0")
        if (np.diag(R) < 1).any():
            raise ValueError("relevance diagonal must stay >= 1")


@dataclass(frozen=True)
class PatchGrid:
    values: np.ndarray  # shape (m, n), >= 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise ShapeMismatch("patch grid must be two-dimensional")
        if (values < 0).any():
            raise ValueError("patch relevance must be >= 0")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WeightMap:
    """Normalized pixel weights in [0, 1], stored as float32."""

    w: np.ndarray  # shape (height, width), float32

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float32)
        object.__setattr__(self, "w", w)
        if w.ndim != 2:
            raise ShapeMismatch("weight map must be two-dimensional")
        if (w < 0).any() or (w > 1).any():
            raise ValueError("weights must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.w.shape[1]

    @property
    def height(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class WeightedImage:
    """Original image plus its concept weight map and the blended pixels."""

    image: RasterImage
    map: WeightMap
    source_concept: str
    blended: RasterImage
    gain: float

    def __post_init__(self):
        if (self.map.height, self.map.width) != (self.image.height, self.image.width):
            raise ShapeMismatch("weight map dimensions must equal image dimensions")


class PropagationMode(str, Enum):
    HADAMARD = "HADAMARD"
    MATMUL = "MATMUL"


def reduce_heads(stack: AttentionStack) -> ReducedAttention:
    """Per layer: mean over heads of the clamped gradient-attention product."""
    weighted = np.maximum(stack.grad * stack.attn, 0.0)
    return ReducedAttention(abar=weighted.mean(axis=1))


def propagate(reduced: ReducedAttention, mode: PropagationMode = PropagationMode.HADAMARD) -> RelevanceMatrix:
    """Accumulate layer maps into a relevance matrix, starting from identity."""
    T = reduced.tokens
    R = np.eye(T, dtype=np.float64)
    for l in range(reduced.layers):
        if mode is PropagationMode.HADAMARD:
            R = R + reduced.abar[l] * R
        elif mode is PropagationMode.MATMUL:
            R = R + reduced.abar[l] @ R
        else:
            raise ValueError(f"unknown propagation mode {mode!r}")
    return RelevanceMatrix(R=R)


def extract_patch_relevance(R: RelevanceMatrix, grid_dims: tuple[int, int]) -> PatchGrid:
    """Class-token row of R (columns 1..T-1) reshaped row-major to m x n."""
    m, n = grid_dims
    T = R.R.shape[0]
    if m * n != T - 1:
        raise ShapeMismatch(f"grid {m}x{n} does not cover {T - 1} patch tokens")
    return PatchGrid(values=R.R[0, 1:].reshape(m, n))


def upsample_bilinear(grid: PatchGrid, width: int, height: int) -> np.ndarray:
    """Corner-aligned bilinear upsampling of the patch grid.

    Grid corners map exactly onto output corners; every output value is a
    convex combination of the four surrounding grid values, so the result is
    bounded by the grid's min and max.
    """
    m, n = grid.rows, grid.cols
    if m == 0 or n == 0:
        raise DegenerateGrid("patch grid has no cells")
    if width < n or height < m:
        raise ShapeMismatch(f"target {width}x{height} smaller than grid {n}x{m}")
    g = grid.values

    gx = np.zeros(width) if n == 1 else np.arange(width) * (n - 1) / (width - 1)
    gy = np.zeros(height) if m == 1 else np.arange(height) * (m - 1) / (height - 1)
    x0 = np.clip(np.floor(gx).astype(int), 0, max(n - 2, 0))
    y0 = np.clip(np.floor(gy).astype(int), 0, max(m - 2, 0))
    x1 = np.minimum(x0 + 1, n - 1)
    y1 = np.minimum(y0 + 1, m - 1)
    fx = gx - x0
    fy = gy - y0

    fy_col = fy[:, None]
    fx_row = fx[None, :]
    out = (
        g[np.ix_(y0, x0)] * (1 - fy_col) * (1 - fx_row)
        + g[np.ix_(y0, x1)] * (1 - fy_col) * fx_row
        + g[np.ix_(y1, x0)] * fy_col * (1 - fx_row)
        + g[np.ix_(y1, x1)] * fy_col * fx_row
    )
    return out


def normalize(raw: np.ndarray) -> WeightMap:
    """Min-max rescale into [0, 1]; a constant map normalizes to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        raise ValueError("raw map must be finite")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return WeightMap(w=np.zeros(raw.shape, dtype=np.float32))
    return WeightMap(w=((raw - lo) / (hi - lo)).astype(np.float32))


def blend(image: RasterImage, map: WeightMap, gain: float = 0.5, source_concept: str = "") -> WeightedImage:
    """Emphasize weighted regions by pixel-wise addition.

    out = clamp(pixel + round(gain * w * 255), 0, 255), broadcast across
    channels; ties in the rounding go up.
    """
    if gain < 0:
        raise ValueError("gain must be >= 0")
    if (map.height, map.width) != (image.height, image.width):
        raise ShapeMismatch("weight map dimensions must equal image dimensions")
    boost = np.floor(gain * map.w.astype(np.float64) * MAX_VAL + 0.5)
    out = np.clip(image.pixels.astype(np.float64) + boost[:, :, None], 0, MAX_VAL).astype(np.uint8)
    blended = RasterImage.from_array(out)
    return WeightedImage(image=image, map=map, source_concept=source_concept, blended=blended, gain=gain)
