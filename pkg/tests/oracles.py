"""Independent reference implementations used as test oracles.

Everything here is deliberately written as plain loops over plain Python
data, separate from the library's vectorized paths.
"""

from __future__ import annotations

import numpy as np


def naive_reduce_heads(attn: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Scalar triple-loop version of the head reduction."""
    L, H, T, _ = attn.shape
    out = np.zeros((L, T, T))
    for l in range(L):
        for i in range(T):
            for j in range(T):
                acc = 0.0
                for h in range(H):
                    v = grad[l][h][i][j] * attn[l][h][i][j]
                    if v < 0:
                        v = 0.0
                    acc += v
                out[l][i][j] = acc / H
    return out


def naive_propagate(abar: np.ndarray, mode: str) -> list[np.ndarray]:
    """Loop version of the layer update; returns every intermediate matrix."""
    L, T, _ = abar.shape
    R = np.eye(T)
    layers = [R.copy()]
    for l in range(L):
        nxt = np.zeros((T, T))
        for i in range(T):
            for j in range(T):
                if mode == "HADAMARD":
                    nxt[i][j] = R[i][j] + abar[l][i][j] * R[i][j]
                else:
                    acc = 0.0
                    for k in range(T):
                        acc += abar[l][i][k] * R[k][j]
                    nxt[i][j] = R[i][j] + acc
        R = nxt
        layers.append(R.copy())
    return layers


def bilinear_value(a: float, b: float, c: float, d: float, x: float, y: float) -> float:
    return a + b * x + c * y + d * x * y


def sample_bilinear_grid(a, b, c, d, m: int, n: int) -> np.ndarray:
    """Evaluate the bilinear form on integer grid coordinates (col=x, row=y)."""
    out = np.zeros((m, n))
    for r in range(m):
        for col in range(n):
            out[r][col] = bilinear_value(a, b, c, d, col, r)
    return out


def expected_upsample(a, b, c, d, m, n, width, height) -> np.ndarray:
    """Direct evaluation of the form at corner-aligned output coordinates."""
    out = np.zeros((height, width))
    for py in range(height):
        for px in range(width):
            gx = 0.0 if n == 1 else px * (n - 1) / (width - 1)
            gy = 0.0 if m == 1 else py * (m - 1) / (height - 1)
            out[py][px] = bilinear_value(a, b, c, d, gx, gy)
    return out


def brute_filter(
    surfaces: dict,
    min_freq: int,
    max_len: int,
    top_k: int,
    thresholds: dict,
    noun_tags: set,
) -> set:
    """Re-filter a {surface: (count, {tag: n})} table from the rule text.

    Returns the set of retained surfaces.
    """

    def dominant(tags: dict) -> str:
        return sorted(tags.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]

    def is_latin(s: str) -> bool:
        return all(ord(ch) < 128 for ch in s)

    ranked = sorted(
        (s for s, (_, tags) in surfaces.items() if is_latin(s) and dominant(tags) == "nz"),
        key=lambda s: (-surfaces[s][0], s),
    )
    top_latin_nz = set(ranked[:top_k])

    kept = set()
    for surface, (count, tags) in surfaces.items():
        pos = dominant(tags)
        if pos not in noun_tags:
            continue
        if count < min_freq:
            continue
        if len(surface) > max_len:
            continue
        latin = is_latin(surface)
        if pos == "n":
            pass
        elif pos == "nz":
            if latin and surface not in top_latin_nz:
                continue
        elif pos in thresholds:
            if latin or count < thresholds[pos]:
                continue
        kept.add(surface)
    return kept


def brute_longest_match(text: str, surfaces: list[str]) -> list[str]:
    """Greedy longest-match scan, case-insensitive, first-hit order."""
    folded = {s.casefold(): s for s in sorted(surfaces, reverse=True)}
    found = []
    i = 0
    low = text.casefold()
    while i < len(low):
        best = None
        for key in folded:
            if low.startswith(key, i) and (best is None or len(key) > len(best)):
                best = key
        if best is None:
            i += 1
            continue
        name = folded[best]
        if name not in found:
            found.append(name)
        i += len(best)
    return found


def brute_retrieve(entries: list[tuple[np.ndarray, str]], query: np.ndarray) -> str:
    """Linear-scan argmax with the smallest-label tie rule."""
    best_sim = None
    labels = []
    for vec, label in entries:
        sim = float(np.dot(vec, query))
        if best_sim is None or sim > best_sim:
            best_sim = sim
            labels = [label]
        elif sim == best_sim:
            labels.append(label)
    return min(labels)
