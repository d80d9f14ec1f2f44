"""Differentiable image/description agreement for toy scenes.

An object's per-pixel signature is its noun activation times its colour
activation (the colour factor is dropped when the description gives none).
The global score averages, over objects, a smooth maximum of the signature
over the whole scene; the local score of an object is the mean signature over
its cropped region patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import softmax
from .generator import PATCH_SIZE, ToyScene, crop_box, crop_region, resize_matrix
from .scene_dsl import COLOR_INDEX, NOUN_INDEX, ObjectSpec, SceneDescription


@dataclass(frozen=True)
class ScoreConfig:
    gamma: float = 5.0
    temperature: float = 0.1

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def smooth_max(values: np.ndarray, temperature: float) -> float:
    """Softmax-weighted mean ``sum(softmax(v / T) * v)``; lies between mean and max."""
    v = np.asarray(values, dtype=float).reshape(-1)
    return float(softmax(v / temperature) @ v)


def _smooth_max_grad(v: np.ndarray, temperature: float):
    w = softmax(v / temperature)
    value = w @ v
    return value, w * (1.0 + (v - value) / temperature)


def local_score(patch: ToyScene, obj: ObjectSpec) -> float:
    return float(patch.signature(obj.noun, obj.color).mean())


def global_score(scene: ToyScene, desc: SceneDescription, temperature: float = 0.1) -> float:
    return float(np.mean([smooth_max(scene.signature(o.noun, o.color), temperature) for o in desc.objects]))


def attend_loss(scene: ToyScene, desc: SceneDescription, layout, cfg: ScoreConfig = ScoreConfig()) -> float:
    """``-global - gamma * sum_i local_i`` over the layout's object regions."""
    if len(layout) != desc.n_objects:
        raise ValueError(f"layout has {len(layout)} regions for {desc.n_objects} objects")
    local = sum(local_score(crop_region(scene, r), o) for r, o in zip(layout.regions, desc.objects))
    return -global_score(scene, desc, cfg.temperature) - cfg.gamma * local


def attend_loss_grad(
    scene: ToyScene,
    desc: SceneDescription,
    layout,
    cfg: ScoreConfig = ScoreConfig(),
    use_local: bool = True,
):
    """Loss and its gradients with respect to the noun and colour channels.

    With ``use_local=False`` only the global term is kept (the objective of
    the no-spatial-control ablation).
    """
    h, w = scene.shape
    g_n = np.zeros_like(scene.nouns)
    g_c = np.zeros_like(scene.colors)
    n_obj = desc.n_objects
    loss = 0.0
    for obj, region in zip(desc.objects, layout.regions):
        ni = NOUN_INDEX[obj.noun]
        ci = COLOR_INDEX[obj.color] if obj.color else None
        noun = scene.nouns[..., ni]
        color = scene.colors[..., ci] if ci is not None else None
        sig = noun * color if color is not None else noun
        value, d_sig = _smooth_max_grad(sig.reshape(-1), cfg.temperature)
        loss -= value / n_obj
        d_sig = -d_sig.reshape(h, w) / n_obj
        if use_local and cfg.gamma:
            y0, y1, x0, x1 = crop_box(region, (h, w))
            ry, rx = resize_matrix(y1 - y0, PATCH_SIZE), resize_matrix(x1 - x0, PATCH_SIZE)
            pn = ry @ noun[y0:y1, x0:x1] @ rx.T
            if color is not None:
                pc = ry @ color[y0:y1, x0:x1] @ rx.T
                loss -= cfg.gamma * float((pn * pc).mean())
                scale = -cfg.gamma / PATCH_SIZE**2
                g_n[y0:y1, x0:x1, ni] += ry.T @ (scale * pc) @ rx
                g_c[y0:y1, x0:x1, ci] += ry.T @ (scale * pn) @ rx
            else:
                loss -= cfg.gamma * float(pn.mean())
                g_n[y0:y1, x0:x1, ni] += ry.T @ np.full_like(pn, -cfg.gamma / PATCH_SIZE**2) @ rx
        if color is not None:
            g_n[..., ni] += d_sig * color
            g_c[..., ci] += d_sig * noun
        else:
            g_n[..., ni] += d_sig
    return float(loss), g_n, g_c


def outside_score(scene: ToyScene, obj: ObjectSpec, region_mask: np.ndarray) -> float:
    """Mean signature of ``obj`` over the pixels outside a binary region mask."""
    outside = ~np.asarray(region_mask, dtype=bool)
    if not outside.any():
        return 0.0
    return float(scene.signature(obj.noun, obj.color)[outside].mean())
