"""Per-object Gaussian mixtures over normalised image coordinates, layouts and masks."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from ..errors import NumericalError, ShapeError
from ..scene_dsl import RelationKind

LOG_2PI = float(np.log(2.0 * np.pi))
DEFAULT_RADIUS = 0.2
DEFAULT_K = 5


@dataclass(frozen=True)
class GmmParams:
    """Diagonal-covariance mixture for one object's centre.

    ``means`` and ``variances`` are ``(K, 2)`` arrays in ``(x, y)`` order and
    ``weights`` is a length-``K`` probability vector.
    """

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        for name in ("means", "variances", "weights"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        k = self.weights.shape[0]
        if self.means.shape != (k, 2) or self.variances.shape != (k, 2):
            raise ShapeError(
                f"inconsistent GMM shapes {self.means.shape}, {self.variances.shape}, {self.weights.shape}"
            )

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    def argmax_mean(self) -> np.ndarray:
        return self.means[int(np.argmax(self.weights))]


def gmm_nll(point, g: GmmParams) -> float:
    """Negative log-likelihood of a 2-D point under the mixture ``g``."""
    var = g.variances
    if not np.all(np.isfinite(var)) or np.any(var <= np.finfo(float).tiny):
        raise NumericalError("GMM variance underflow")
    point = np.asarray(point, dtype=float)
    with np.errstate(divide="ignore"):
        log_w = np.log(g.weights)
    log_comp = (
        log_w
        - LOG_2PI
        - 0.5 * np.log(var).sum(axis=1)
        - 0.5 * (((point - g.means) ** 2) / var).sum(axis=1)
    )
    value = -float(logsumexp(log_comp))
    if not np.isfinite(value):
        raise NumericalError("GMM log-likelihood is not finite")
    return value


def rel_penalty(kind: RelationKind, g_i: GmmParams, g_j: GmmParams, delta: float) -> float:
    """Hinge on the extreme mixture means of two related objects.

    For "i left of j" this is ``max(max_k mu_ik.x - min_k mu_jk.x, -delta)``:
    the rightmost mean of ``i`` must sit at least ``delta`` left of the
    leftmost mean of ``j``.  Right-of and below swap the roles; the vertical
    relations use ``y``.
    """
    axis = kind.axis
    first, second = (g_i, g_j) if kind.subject_first else (g_j, g_i)
    gap = first.means[:, axis].max() - second.means[:, axis].min()
    return float(max(gap, -delta))


# ---------------------------------------------------------------------------
# layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float = DEFAULT_RADIUS

    def __post_init__(self):
        if not 0.0 < self.r <= 0.5:
            raise ValueError(f"radius must lie in (0, 0.5], got {self.r}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)


@dataclass(frozen=True, eq=False)
class ExplicitMask:
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        if self.mask.ndim != 2:
            raise ShapeError("explicit masks must be 2-D")

    @property
    def center(self) -> tuple[float, float]:
        h, w = self.mask.shape
        ys, xs = np.nonzero(self.mask)
        if len(xs) == 0:
            return (0.5, 0.5)
        return (float((xs.mean() + 0.5) / w), float((ys.mean() + 0.5) / h))


Region = Union[Circle, ExplicitMask]


@dataclass(frozen=True)
class Layout:
    regions: tuple[Region, ...]

    @property
    def centers(self) -> np.ndarray:
        return np.array([r.center for r in self.regions], dtype=float).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.regions)

    @classmethod
    def from_centers(cls, centers, r: float = DEFAULT_RADIUS) -> "Layout":
        return cls(tuple(Circle(float(x), float(y), r) for x, y in np.asarray(centers, dtype=float)))


class SampleMode(str, enum.Enum):
    SAMPLE = "sample"
    ARGMAX_MEAN = "argmax"


def clamp_center(center, r: float) -> np.ndarray:
    """Keep a centre at least ``r / 2`` from every image edge."""
    return np.clip(np.asarray(center, dtype=float), r / 2.0, 1.0 - r / 2.0)


def sample_layout(
    gmms: Sequence[GmmParams],
    r: float = DEFAULT_RADIUS,
    seed: Optional[int] = 0,
    mode: SampleMode = SampleMode.SAMPLE,
    edge_clamp: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Layout:
    """Draw one centre per object and wrap each in a circle of radius ``r``."""
    if not 0.0 < r <= 0.5:
        raise ValueError(f"radius must lie in (0, 0.5], got {r}")
    mode = SampleMode(mode)
    rng = rng if rng is not None else np.random.default_rng(seed)
    centers = []
    for g in gmms:
        if mode is SampleMode.ARGMAX_MEAN:
            c = g.argmax_mean().copy()
        else:
            k = rng.choice(g.k, p=g.weights / g.weights.sum())
            c = rng.normal(g.means[k], np.sqrt(g.variances[k]))
        c = np.clip(c, 0.0, 1.0)
        if edge_clamp:
            c = clamp_center(c, r)
        centers.append(c)
    return Layout.from_centers(np.array(centers).reshape(-1, 2), r)


def region_mask(layout: Layout, grid: tuple[int, int]) -> np.ndarray:
    """Binary ``(N, h, w)`` masks; a pixel is inside when its centre lies in the region."""
    h, w = grid
    if h < 4 or w < 4:
        raise ShapeError(f"grid {grid} is smaller than 4x4")
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    px, py = np.meshgrid(xs, ys)
    masks = np.zeros((len(layout), h, w), dtype=np.uint8)
    for i, region in enumerate(layout.regions):
        if isinstance(region, ExplicitMask):
            if region.mask.shape != (h, w):
                raise ShapeError(f"mask of shape {region.mask.shape} does not match grid {grid}")
            masks[i] = region.mask
        else:
            masks[i] = (px - region.cx) ** 2 + (py - region.cy) ** 2 <= region.r**2
    return masks
