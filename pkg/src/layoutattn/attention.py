"""Cross-attention and the masked global/local attention combination.

Queries are per-pixel rows of an ``(h*w, d)`` matrix in row-major pixel
order; keys and values are ``(l, d)`` per-token matrices.  A mask set is an
``(N, h, w)`` array, binary for hard regions and continuous in ``(0, 1]`` for
soft regions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SoftRegionConfig:
    sigma: float = 0.1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _check_qkv(q, k, v):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("Q, K and V must be 2-D matrices")
    if k.shape[0] < 1:
        raise ShapeError("at least one token is required")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"K has {k.shape[0]} tokens but V has {v.shape[0]}")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic ``softmax(Q K^T / sqrt(d))`` of shape ``(pixels, tokens)``."""
    return softmax(q @ k.T / np.sqrt(q.shape[1]), axis=1)


def cross_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Standard scaled dot-product cross-attention, ``softmax(QK^T/sqrt(d)) V``."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    _check_qkv(q, k, v)
    return attention_weights(q, k) @ v


def pixel_centers(grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Normalised ``(x, y)`` coordinates of every pixel centre, each ``(h, w)``."""
    h, w = grid
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    return np.meshgrid(xs, ys)


def soft_region(center, cfg: SoftRegionConfig, grid: tuple[int, int]) -> np.ndarray:
    """Gaussian region normalised to 1 at ``center``: ``exp(-|p - c|^2 / 2 sigma^2)``."""
    xs, ys = pixel_centers(grid)
    d2 = (xs - center[0]) ** 2 + (ys - center[1]) ** 2
    return np.exp(-d2 / (2.0 * cfg.sigma**2))


def _flatten_regions(regions: np.ndarray, n_pixels: int) -> np.ndarray:
    regions = np.asarray(regions, dtype=float)
    if regions.ndim == 3:
        regions = regions.reshape(regions.shape[0], -1)
    if regions.ndim != 2 or regions.shape[1] != n_pixels:
        raise ShapeError(f"region set of shape {regions.shape} does not match {n_pixels} pixels")
    return regions


def overlap_pixels(masks: np.ndarray, threshold: float = 0.5) -> int:
    """Number of pixels covered by more than one region."""
    masks = np.asarray(masks)
    return int(((masks.reshape(masks.shape[0], -1) > threshold).sum(axis=0) > 1).sum())


def _combine(q, global_kv, locals_kv, regions, lam):
    q = np.asarray(q)
    n = len(locals_kv)
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.shape[0] != n:
        raise ShapeError(f"{lam.shape[0]} weights for {n} local descriptions")
    regions = _flatten_regions(regions, q.shape[0])
    if regions.shape[0] != n:
        raise ShapeError(f"{regions.shape[0]} regions for {n} local descriptions")
    out_global = cross_attention(q, *global_kv)
    # (pixels, N) per-pixel coefficients lambda_i * M_i
    coef = regions.T * lam[None, :]
    out = (1.0 - coef.sum(axis=1))[:, None] * out_global
    for i, (k, v) in enumerate(locals_kv):
        out = out + coef[:, i : i + 1] * cross_attention(q, k, v)
    return out


def combined_attention(
    q: np.ndarray,
    global_kv: tuple[np.ndarray, np.ndarray],
    locals_kv: Sequence[tuple[np.ndarray, np.ndarray]],
    masks: np.ndarray,
    lam: np.ndarray,
) -> np.ndarray:
    """Blend local-description attention into global attention inside each mask.

    ``O = sum_i lam_i M_i * A(Q, K_i, V_i) + (1 - sum_i lam_i M_i) * A(Q, K_D, V_D)``,
    with each ``h x w`` mask broadcast over the value channels.  Overlapping
    masks are allowed; the weights simply add up, so the global coefficient
    may leave ``[0, 1]``.
    """
    masks = np.asarray(masks)
    if not np.isin(masks, (0, 1)).all():
        raise ShapeError("hard masks must be binary; use combined_attention_soft")
    if overlap_pixels(masks):
        log.debug("combined_attention: %d pixels covered by several masks", overlap_pixels(masks))
    return _combine(q, global_kv, locals_kv, masks, lam)


def combined_attention_soft(
    q: np.ndarray,
    global_kv: tuple[np.ndarray, np.ndarray],
    locals_kv: Sequence[tuple[np.ndarray, np.ndarray]],
    regions: np.ndarray,
    lam: np.ndarray,
) -> np.ndarray:
    """As :func:`combined_attention` with continuous region weights ``G_i``."""
    return _combine(q, global_kv, locals_kv, regions, lam)
