"""Deterministic toy denoising loop driven by masked cross-attention.

The latent is an ``(h*w, d)`` grid.  Token embeddings are orthonormal basis
directions for nouns and colours plus seeded pseudo-random directions in a
separate subspace for function words, so the decoded noun/colour channels read
exactly the content that attention wrote into each pixel.  Each step queries
the global and local descriptions with ``Q = Z W_Q`` and moves the latent by
``eta`` times the combined attention output.

:class:`PreparedGeneration` fixes everything except the combination weights,
runs the loop for a given ``lam`` and back-propagates a scene gradient to
``lam`` through the recurrence.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .attention import softmax
from .errors import ShapeError, VocabError
from .scene_dsl import COLOR_INDEX, COLORS, FUNCTION_WORDS, NOUN_INDEX, NOUNS, SceneDescription, tokenize

N_NOUNS = len(NOUNS)
N_COLORS = len(COLORS)
CONTENT_DIM = N_NOUNS + N_COLORS
PATCH_SIZE = 16

# sRGB render colours for the palette, in COLORS order
PALETTE_RGB = np.array(
    [
        [220, 30, 30],
        [20, 20, 20],
        [245, 245, 245],
        [40, 70, 220],
        [40, 170, 60],
        [240, 210, 40],
        [130, 80, 40],
        [170, 175, 185],
    ],
    dtype=float,
)


@dataclass(frozen=True)
class GeneratorConfig:
    grid: int = 32
    latent_dim: int = 48
    steps: int = 50
    eta: Optional[float] = None  # defaults to 1 / steps
    value_scale: float = 40.0
    query_align: float = 1.0
    query_align_function: float = 0.0  # function-word subspace of W_Q; 0 keeps queries content-driven
    query_noise: float = 0.5
    readout_gain: float = 2.0
    readout_bias: float = 9.5
    noise_smoothing: float = 1.5  # pixels; 0 gives white noise
    embed_seed: int = 1234
    dtype: str = "float64"  # working precision of the loop; float32 roughly halves run time

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.latent_dim <= CONTENT_DIM:
            raise ValueError(f"latent_dim must exceed the {CONTENT_DIM} content directions")
        if self.step_size <= 0:
            raise ValueError("eta must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")

    @property
    def step_size(self) -> float:
        return 1.0 / self.steps if self.eta is None else self.eta

    @property
    def shape(self) -> tuple[int, int]:
        return (self.grid, self.grid)


@dataclass(frozen=True)
class TokenEmbeddings:
    """Frozen token table and projections for one generator configuration."""

    table: dict
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def token_vectors(self, text: str) -> np.ndarray:
        rows = []
        for tok, offset in tokenize(text):
            if tok not in self.table:
                raise VocabError(f"token {tok!r} at byte {offset} has no embedding")
            rows.append(self.table[tok])
        return np.array(rows)


@lru_cache(maxsize=8)
def _embeddings(
    d: int, seed: int, value_scale: float, query_align: float, query_align_function: float, query_noise: float
) -> TokenEmbeddings:
    rng = np.random.default_rng(seed)
    table = {}
    for noun, i in NOUN_INDEX.items():
        table[noun] = np.eye(d)[i]
    for color, i in COLOR_INDEX.items():
        table[color] = np.eye(d)[N_NOUNS + i]
    for word in FUNCTION_WORDS:
        v = np.zeros(d)
        v[CONTENT_DIM:] = rng.standard_normal(d - CONTENT_DIM)
        table[word] = v / np.linalg.norm(v)
    noise = rng.standard_normal((d, d)) / np.sqrt(d)
    align = np.full(d, query_align_function)
    align[:CONTENT_DIM] = query_align
    w_q = np.diag(align) + query_noise * noise
    for arr in table.values():
        arr.setflags(write=False)
    return TokenEmbeddings(table=table, w_q=w_q, w_k=np.eye(d), w_v=value_scale * np.eye(d))


def token_embeddings(cfg: GeneratorConfig) -> TokenEmbeddings:
    return _embeddings(
        cfg.latent_dim, cfg.embed_seed, cfg.value_scale, cfg.query_align, cfg.query_align_function, cfg.query_noise
    )


def embed_description(text: str, cfg: GeneratorConfig = GeneratorConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Key and value matrices, one row per token of ``text``."""
    emb = token_embeddings(cfg)
    e = emb.token_vectors(text)
    return e @ emb.w_k, e @ emb.w_v


@dataclass
class ToyScene:
    """Decoded generator output: sigmoid activations per noun and colour channel."""

    nouns: np.ndarray  # (h, w, N_NOUNS)
    colors: np.ndarray  # (h, w, N_COLORS)

    @property
    def shape(self) -> tuple[int, int]:
        return self.nouns.shape[:2]

    def signature(self, noun: str, color: Optional[str]) -> np.ndarray:
        """Per-pixel product of the object's noun channel and colour channel."""
        s = self.nouns[..., NOUN_INDEX[noun]]
        if color is not None:
            s = s * self.colors[..., COLOR_INDEX[color]]
        return s

    def render_rgb(self) -> np.ndarray:
        """``(h, w, 3)`` uint8 image: palette colour blended over grey by noun presence."""
        presence = self.nouns.max(axis=-1, keepdims=True)
        cw = self.colors / np.maximum(self.colors.sum(axis=-1, keepdims=True), 1e-9)
        tint = cw @ PALETTE_RGB
        strength = self.colors.max(axis=-1, keepdims=True)
        fg = strength * tint + (1.0 - strength) * 128.0
        img = presence * fg + (1.0 - presence) * 60.0
        return np.clip(np.round(img), 0, 255).astype(np.uint8)


def write_ppm(scene: ToyScene, path, scale: int = 8) -> None:
    """Plain (P3) PPM render, upscaled by pixel replication."""
    img = scene.render_rgb().repeat(scale, axis=0).repeat(scale, axis=1)
    h, w, _ = img.shape
    lines = [f"P3\n{w} {h}\n255\n"]
    for row in img:
        lines.append(" ".join(str(v) for v in row.reshape(-1)) + "\n")
    with open(path, "w", encoding="ascii") as fh:
        fh.writelines(lines)


def write_scene_json(scene: ToyScene, path) -> None:
    payload = {
        "nouns": list(NOUNS),
        "colors": list(COLORS),
        "noun_channels": np.round(scene.nouns, 6).tolist(),
        "color_channels": np.round(scene.colors, 6).tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


# ---------------------------------------------------------------------------
# the denoising loop
# ---------------------------------------------------------------------------


def initial_latent(cfg: GeneratorConfig, seed: int) -> np.ndarray:
    """Seeded ``(h*w, d)`` latent with standard-normal marginals.

    White noise is blurred spatially by a Gaussian of ``noise_smoothing``
    pixels and rescaled by the filter's gain, so every entry stays marginally
    ``N(0, 1)`` while neighbouring pixels are correlated.
    """
    h, w = cfg.shape
    z = np.random.default_rng(seed).standard_normal((h, w, cfg.latent_dim))
    if cfg.noise_smoothing > 0:
        z = ndimage.gaussian_filter(z, sigma=(cfg.noise_smoothing, cfg.noise_smoothing, 0), mode="wrap")
        delta = np.zeros((h, w))
        delta[h // 2, w // 2] = 1.0
        kernel = ndimage.gaussian_filter(delta, sigma=cfg.noise_smoothing, mode="wrap")
        z = z / np.sqrt((kernel**2).sum())
    return z.reshape(h * w, cfg.latent_dim)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class PreparedGeneration:
    """Generation inputs with everything but the combination weights fixed.

    ``regions`` is an ``(N, h, w)`` array of hard or soft region weights.
    Pixels outside every region never see the local descriptions, so their
    trajectory is computed once here.  The local descriptions are stacked
    (padded to a common length) so each step attends to all of them at once.
    """

    def __init__(
        self,
        desc: SceneDescription,
        regions: np.ndarray,
        cfg: GeneratorConfig = GeneratorConfig(),
        seed: int = 0,
    ):
        self.desc = desc
        self.cfg = cfg
        self.seed = seed
        h, w = cfg.shape
        regions = np.asarray(regions, dtype=float)
        if regions.shape != (desc.n_objects, h, w):
            raise ShapeError(f"regions of shape {regions.shape}, expected {(desc.n_objects, h, w)}")
        dt = np.dtype(cfg.dtype)
        self.regions = regions.reshape(desc.n_objects, -1).T.astype(dt)  # (pixels, N)
        emb = token_embeddings(cfg)
        self.w_q = emb.w_q.astype(dt)
        self.scale = dt.type(1.0 / np.sqrt(cfg.latent_dim))
        self.global_kv = tuple(m.astype(dt) for m in embed_description(desc.global_text, cfg))
        local = [embed_description(t, cfg) for t in desc.local_texts]
        length = max(k.shape[0] for k, _ in local)
        n, d = desc.n_objects, cfg.latent_dim
        # flattened (N * L, d) key/value tables; padding slots are masked out
        self.local_k = np.zeros((n * length, d), dtype=dt)
        self.local_v = np.zeros((n * length, d), dtype=dt)
        local_mask = np.zeros((n, length), dtype=bool)
        for i, (k, v) in enumerate(local):
            self.local_k[i * length : i * length + len(k)] = k
            self.local_v[i * length : i * length + len(v)] = v
            local_mask[i, : len(k)] = True
        self.z_init = initial_latent(cfg, seed).astype(dt)
        # logits = Z @ keys: the query projection and 1/sqrt(d) are folded in.
        # Columns are [global tokens | object 1 tokens | ... | object N tokens];
        # `groups` maps each column to its softmax group (0 = global).
        self.n_global = len(self.global_kv[0])
        self.keys = (self.w_q @ np.concatenate([self.global_kv[0], self.local_k]).T) * self.scale
        self.values = np.concatenate([self.global_kv[1], self.local_v])
        group_of = np.concatenate([np.zeros(self.n_global, int), 1 + np.repeat(np.arange(n), length)])
        self.groups = np.zeros((len(group_of), n + 1), dtype=dt)
        self.groups[np.arange(len(group_of)), group_of] = 1.0
        self.token_mask = np.concatenate([np.ones(self.n_global), local_mask.reshape(-1)]).astype(dt)
        self.active = np.flatnonzero(self.regions.any(axis=1))
        inactive = np.flatnonzero(~self.regions.any(axis=1))
        self.z_final = np.empty_like(self.z_init)
        if len(inactive):
            z = self.z_init[inactive]
            k_g, v_g = self.keys[:, : self.n_global], self.values[: self.n_global]
            for _ in range(cfg.steps):
                z = z + cfg.step_size * (softmax(z @ k_g, axis=1) @ v_g)
            self.z_final[inactive] = z

    @property
    def n_objects(self) -> int:
        return self.desc.n_objects

    def _attend(self, z):
        """Attention weights ``(pixels, tokens)``; each softmax group sums to one per row.

        A single per-row shift keeps ``exp`` in range; it cancels inside every
        group.  Group sums are taken with one matrix product.
        """
        logits = z @ self.keys
        e = np.exp(logits - logits.max(axis=1, keepdims=True)) * self.token_mask
        return e / ((e @ self.groups) @ self.groups.T)

    def _check_lam(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=self.cfg.dtype)
        if lam.shape != (self.n_objects, self.cfg.steps):
            raise ShapeError(f"lambda of shape {lam.shape}, expected {(self.n_objects, self.cfg.steps)}")
        return lam

    def run(self, lam, keep_trace: bool = False):
        """Latent ``Z_0`` for weights ``lam`` (``N x T``, column ``t-1`` is step ``t``)."""
        lam = self._check_lam(lam)
        cfg = self.cfg
        eta = cfg.step_size
        regions = self.regions[self.active]
        z = self.z_init[self.active]
        trace = [] if keep_trace else None
        for t in range(cfg.steps, 0, -1):
            att = self._attend(z)
            coef = regions * lam[:, t - 1]
            # per-column mixing weight: 1 - sum(coef) on global tokens, coef_i on object i's tokens
            mix = np.concatenate([(1.0 - coef.sum(axis=1))[:, None], coef], axis=1) @ self.groups.T
            if trace is not None:
                trace.append(att)
            z = z + eta * ((mix * att) @ self.values)
        z_final = self.z_final.copy()
        z_final[self.active] = z
        return (z_final, trace) if keep_trace else z_final

    def decode(self, z_final: np.ndarray) -> ToyScene:
        cfg = self.cfg
        h, w = cfg.shape
        act = _sigmoid(cfg.readout_gain * (z_final[:, :CONTENT_DIM].astype(float) - cfg.readout_bias))
        return ToyScene(
            nouns=act[:, :N_NOUNS].reshape(h, w, N_NOUNS),
            colors=act[:, N_NOUNS:CONTENT_DIM].reshape(h, w, N_COLORS),
        )

    def generate(self, lam) -> ToyScene:
        return self.decode(self.run(lam))

    def forward(self, lam):
        """``(scene, state)``; pass the state to :meth:`backward`."""
        z_final, trace = self.run(lam, keep_trace=True)
        return self.decode(z_final), (z_final, trace, self._check_lam(lam))

    def backward(self, state, grad_nouns: np.ndarray, grad_colors: np.ndarray) -> np.ndarray:
        """Gradient with respect to ``lam`` given gradients on the decoded channels."""
        z_final, trace, lam = state
        cfg = self.cfg
        eta = cfg.step_size
        act = self.active
        zc = z_final[act, :CONTENT_DIM]
        s = _sigmoid(cfg.readout_gain * (zc - cfg.readout_bias))
        g_act = np.concatenate(
            [grad_nouns.reshape(-1, N_NOUNS)[act], grad_colors.reshape(-1, N_COLORS)[act]], axis=1
        )
        g = np.zeros((len(act), cfg.latent_dim), dtype=cfg.dtype)
        g[:, :CONTENT_DIM] = g_act * cfg.readout_gain * s * (1.0 - s)
        regions = self.regions[act]
        grad_lam = np.zeros(lam.shape)
        for idx in range(cfg.steps - 1, -1, -1):
            t = cfg.steps - idx
            att = trace[idx]
            coef = regions * lam[:, t - 1]
            mix = np.concatenate([(1.0 - coef.sum(axis=1))[:, None], coef], axis=1) @ self.groups.T
            g_out = eta * g
            gv = g_out @ self.values.T  # g_out . v for every token
            dots = (att * gv) @ self.groups  # g_out . o for the global and each local output
            grad_lam[:, t - 1] = (regions * (dots[:, 1:] - dots[:, :1])).sum(axis=0)
            ga = mix * gv
            gs = att * (ga - ((ga * att) @ self.groups) @ self.groups.T)
            g = g + gs @ self.keys.T
        return grad_lam


def generate(
    desc: SceneDescription,
    regions: np.ndarray,
    lam,
    cfg: GeneratorConfig = GeneratorConfig(),
    seed: int = 0,
) -> ToyScene:
    """One deterministic generation; see :class:`PreparedGeneration`."""
    return PreparedGeneration(desc, regions, cfg, seed).generate(lam)


# ---------------------------------------------------------------------------
# cropping
# ---------------------------------------------------------------------------


def crop_box(region, grid: tuple[int, int]) -> tuple[int, int, int, int]:
    """Pixel bounds ``(y0, y1, x0, x1)`` (end-exclusive) of the minimum square around a region.

    Circles use their exact bounding square; explicit masks use the bounding
    box of the mask, grown on its shorter side to a square.  The square is
    clipped to the grid.
    """
    h, w = grid
    mask = getattr(region, "mask", None)
    if mask is not None:
        ys, xs = np.nonzero(mask)
        if len(xs) == 0:
            return (0, h, 0, w)
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        side = max(y1 - y0, x1 - x0)
        cy, cx = (y0 + y1) / 2.0, (x0 + x1) / 2.0
        fy0, fy1, fx0, fx1 = cy - side / 2, cy + side / 2, cx - side / 2, cx + side / 2
    else:
        fx0, fx1 = (region.cx - region.r) * w, (region.cx + region.r) * w
        fy0, fy1 = (region.cy - region.r) * h, (region.cy + region.r) * h
    eps = 1e-9
    y0 = int(np.clip(np.floor(fy0 + eps), 0, h - 1))
    x0 = int(np.clip(np.floor(fx0 + eps), 0, w - 1))
    y1 = int(np.clip(np.ceil(fy1 - eps), y0 + 1, h))
    x1 = int(np.clip(np.ceil(fx1 - eps), x0 + 1, w))
    return (y0, y1, x0, x1)


@lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int = PATCH_SIZE) -> np.ndarray:
    """``(n_out, n_in)`` bilinear interpolation operator (half-pixel centres, edge clamped)."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    m.setflags(write=False)
    return m


def crop_region(scene: ToyScene, region, size: int = PATCH_SIZE) -> ToyScene:
    """Crop the minimum square around ``region`` and resize it to ``size x size``."""
    y0, y1, x0, x1 = crop_box(region, scene.shape)
    ry, rx = resize_matrix(y1 - y0, size), resize_matrix(x1 - x0, size)

    def resize(ch):
        return np.einsum("ay,yxc,bx->abc", ry, ch[y0:y1, x0:x1], rx)

    return ToyScene(nouns=resize(scene.nouns), colors=resize(scene.colors))
