"""Per-description optimisation of the attention combination weights.

The weights ``lam`` form an ``N x T`` matrix, one value per object and
denoising step.  They start at ``1/N``, follow Adam on the attend loss, and
are projected back into the clamp range after every step.  The best weights
seen (including the initial ones) are returned.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .attention import SoftRegionConfig, soft_region
from .errors import NonFiniteLossError
from .generator import GeneratorConfig, PreparedGeneration, ToyScene
from .layout.gmm import Circle, Layout, region_mask
from .scene_dsl import SceneDescription
from .scorer import ScoreConfig, attend_loss_grad


class Variant(str, enum.Enum):
    FULL = "full"
    NO_SPATIAL = "no-spatial"
    NO_TEMPORAL = "no-temporal"
    NO_OPTIMIZATION = "no-optimization"


class GradientMode(str, enum.Enum):
    FINITE_DIFFERENCE = "fd"
    ANALYTIC = "analytic"


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    iterations: int = 50
    clamp: tuple[float, float] = (-1.0, 2.0)
    gradient_mode: GradientMode = GradientMode.ANALYTIC
    variant: Variant = Variant.FULL
    fd_step: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "gradient_mode", GradientMode(self.gradient_mode))
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not self.clamp[0] < self.clamp[1]:
            raise ValueError("clamp bounds must satisfy lo < hi")


class Adam:
    """Adam on a single array parameter."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class VariantSetup:
    """Regions and weight constraints for one ablation variant."""

    regions: np.ndarray  # (N, h, w)
    temporal: bool  # False: one weight per object, tiled over all steps
    optimize: bool
    use_local_loss: bool


def variant_setup(
    variant: Variant,
    desc: SceneDescription,
    layout: Layout,
    grid: tuple[int, int],
    soft: Optional[SoftRegionConfig] = None,
) -> VariantSetup:
    variant = Variant(variant)
    if variant is Variant.NO_SPATIAL:
        regions = np.ones((desc.n_objects, *grid))
    elif soft is not None:
        regions = np.stack([soft_region(r.center, soft, grid) for r in layout.regions])
    else:
        regions = region_mask(layout, grid).astype(float)
    return VariantSetup(
        regions=regions,
        temporal=variant is not Variant.NO_TEMPORAL,
        optimize=variant is not Variant.NO_OPTIMIZATION,
        use_local_loss=variant is not Variant.NO_SPATIAL,
    )


class AttendObjective:
    """``lam -> attend_loss(generate(lam))`` with an analytic gradient."""

    def __init__(
        self,
        desc: SceneDescription,
        layout: Layout,
        regions: np.ndarray,
        gen_cfg: GeneratorConfig = GeneratorConfig(),
        score_cfg: ScoreConfig = ScoreConfig(),
        seed: int = 0,
        use_local_loss: bool = True,
    ):
        self.desc = desc
        self.layout = layout
        self.score_cfg = score_cfg
        self.use_local_loss = use_local_loss
        self.prepared = PreparedGeneration(desc, regions, gen_cfg, seed)
        self.shape = (desc.n_objects, gen_cfg.steps)

    def scene(self, lam) -> ToyScene:
        return self.prepared.generate(lam)

    def __call__(self, lam) -> float:
        loss, _, _ = attend_loss_grad(self.scene(lam), self.desc, self.layout, self.score_cfg, self.use_local_loss)
        return loss

    def value_and_grad(self, lam):
        scene, state = self.prepared.forward(lam)
        loss, g_n, g_c = attend_loss_grad(scene, self.desc, self.layout, self.score_cfg, self.use_local_loss)
        return loss, self.prepared.backward(state, g_n, g_c)


def finite_difference_gradient(closure: Callable[[np.ndarray], float], lam, step: float = 1e-3) -> np.ndarray:
    """Central differences, one entry at a time."""
    lam = np.asarray(lam, dtype=float)
    grad = np.zeros_like(lam)
    for idx in np.ndindex(lam.shape):
        e = np.zeros_like(lam)
        e[idx] = step
        grad[idx] = (closure(lam + e) - closure(lam - e)) / (2.0 * step)
    return grad


def gradient(lam, closure, mode: GradientMode = GradientMode.ANALYTIC, step: float = 1e-3) -> np.ndarray:
    """Gradient of ``closure`` at ``lam``.

    Analytic mode needs a closure exposing ``value_and_grad`` (such as
    :class:`AttendObjective`); finite differences only call it.
    """
    if GradientMode(mode) is GradientMode.ANALYTIC:
        return closure.value_and_grad(lam)[1]
    return finite_difference_gradient(closure, lam, step)


@dataclass
class OptimizationResult:
    lam: np.ndarray
    scene: ToyScene
    best_loss: float
    initial_loss: float
    loss_trace: list[float] = field(default_factory=list)
    lam_trace: list[np.ndarray] = field(default_factory=list)
    variant: Variant = Variant.FULL

    def to_json(self) -> dict:
        return {
            "variant": self.variant.value,
            "best_loss": self.best_loss,
            "initial_loss": self.initial_loss,
            "loss_trace": self.loss_trace,
            "lambda": self.lam.tolist(),
        }


def optimize(
    desc: SceneDescription,
    layout: Layout,
    gen_cfg: GeneratorConfig = GeneratorConfig(),
    score_cfg: ScoreConfig = ScoreConfig(),
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    seed: int = 0,
    soft: Optional[SoftRegionConfig] = None,
    keep_lam_trace: bool = False,
) -> OptimizationResult:
    """Optimise the combination weights for one description and layout."""
    setup = variant_setup(opt_cfg.variant, desc, layout, gen_cfg.shape, soft)
    objective = AttendObjective(desc, layout, setup.regions, gen_cfg, score_cfg, seed, setup.use_local_loss)
    n, steps = objective.shape
    lo, hi = opt_cfg.clamp
    # free parameters: (N, T), or (N, 1) tiled across steps without temporal control
    theta = np.full((n, steps if setup.temporal else 1), 1.0 / n)
    expand = lambda p: np.broadcast_to(p, (n, steps)).copy()
    adam = Adam(opt_cfg.lr, opt_cfg.beta1, opt_cfg.beta2, opt_cfg.eps)
    iterations = opt_cfg.iterations if setup.optimize else 0

    def evaluate(p):
        lam = expand(p)
        if opt_cfg.gradient_mode is GradientMode.ANALYTIC:
            loss, g = objective.value_and_grad(lam)
        else:
            loss = objective(lam)
            g = finite_difference_gradient(lambda q: objective(expand(q)), p, opt_cfg.fd_step)
            return loss, g
        if not setup.temporal:
            g = g.sum(axis=1, keepdims=True)
        return loss, g

    trace, lam_trace = [], []
    best_loss, best = np.inf, theta
    initial = None
    for it in range(iterations + 1):
        if it < iterations:
            loss, g = evaluate(theta)
        else:
            loss = objective(expand(theta))
        if not np.isfinite(loss):
            raise NonFiniteLossError(f"attend loss became {loss} at iteration {it}")
        if initial is None:
            initial = loss
        trace.append(float(loss))
        if keep_lam_trace:
            lam_trace.append(expand(theta))
        if loss < best_loss:
            best_loss, best = loss, theta.copy()
        if it < iterations:
            theta = np.clip(adam.step(theta, g), lo, hi)
    lam = expand(best)
    return OptimizationResult(
        lam=lam,
        scene=objective.scene(lam),
        best_loss=float(best_loss),
        initial_loss=float(initial),
        loss_trace=trace,
        lam_trace=lam_trace,
        variant=opt_cfg.variant,
    )
