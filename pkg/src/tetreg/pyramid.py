"""Coarse-to-fine neural displacement fit for the model boundary.

A stack of small MLPs, one per level, each fed a level-specific sinusoidal
encoding of the current point positions. Level l predicts a confidence
c in (0,1) and a directional scaling a, giving the increment
du = c * a o x (elementwise); increments accumulate across levels while
earlier levels stay frozen. Each level is trained per case with Adam on

    alignment + lambda_rigid * confidence penalty + lambda_strain * elastic energy

where the elastic term evaluates the boundary field embedded into the
volumetric mesh with zero interior displacement, coupling neighboring
surface points like virtual springs.

Optimization runs in a normalized frame: the joint bounding box of both
point sets is scaled isotropically into [-1, 1]^3 so the encoding
frequencies 4^l * pi are meaningful at any physical scale. Losses are
reported in physical units (mm^2 alignment, kPa mm^3 energy).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .correspond import CorrespondenceSet
from .fem import StiffnessMatrix
from .mesh import InterpolationOp, PointCloud


class DivergenceError(RuntimeError):
    """Loss became non-finite during optimization."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 4
    mlp_depth: int = 3  # hidden layers per level
    mlp_width: int = 64
    learning_rate: float = 0.01
    steps_per_level: int = 400
    lambda_rigid: float = 1e-4
    lambda_strain: float = 1e-5
    seed: int = 0
    confidence_clamp: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_cosine_decay: bool = False
    keep_best_iterate: bool = True
    head_init_scale: float = 0.05  # Xavier gain of the output layer (0 = exact identity start)

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one pyramid level")

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            for f in fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")

    @classmethod
    def from_file(cls, path) -> "PyramidConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in known:
                    raise ValueError(f"unknown config key {key!r}")
                value = value.strip()
                if known[key] == "int":
                    kwargs[key] = int(value)
                elif known[key] == "bool":
                    kwargs[key] = value.lower() in ("1", "true", "yes")
                else:
                    kwargs[key] = float(value)
        return cls(**kwargs)


# Working-frame geometry. The frame is origin-free (centered at FRAME_CENTER
# rather than 0) because the increment c * a o x has no lever arm where a
# coordinate crosses zero; and its half-width is irrational so that the
# dyadic encoding periods 2 / 4^l can never divide the separation of two
# grid-aligned points exactly, which would give them identical features at
# every level.
FRAME_CENTER = 2.0
FRAME_HALF_WIDTH = np.sqrt(3.0) / 2.0


@dataclass(frozen=True)
class NormFrame:
    """Isotropic map between millimeter space and the sinusoid working frame."""

    center: np.ndarray
    scale: float

    @classmethod
    def from_points(cls, *point_sets: np.ndarray) -> "NormFrame":
        pts = np.vstack(point_sets)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        half = float((hi - lo).max() / 2.0) / FRAME_HALF_WIDTH
        return cls(center=(lo + hi) / 2.0, scale=half if half > 0 else 1.0)

    def normalize(self, points_mm: np.ndarray) -> np.ndarray:
        return (points_mm - self.center) / self.scale + FRAME_CENTER


def encode(x_norm: np.ndarray, level: int) -> np.ndarray:
    """Level-specific sinusoidal embedding [sin(4^l pi x), cos(4^l pi x)] of shape (..., 6)."""
    phase = (4.0**level) * np.pi * np.asarray(x_norm, dtype=np.float64)
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


@dataclass
class MlpParams:
    """Weights and biases of one pyramid level (inputs 6, outputs 1 + 3)."""

    weights: list[ad.Tensor]
    biases: list[ad.Tensor]

    @property
    def tensors(self) -> list[ad.Tensor]:
        return [*self.weights, *self.biases]

    def copy_arrays(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.tensors]


def init_mlp(cfg: PyramidConfig, rng: np.random.Generator) -> MlpParams:
    """Xavier-uniform hidden layers; the output layer is scaled by
    ``head_init_scale`` (zero gives an exact identity start, but then the
    hidden layers see no alignment gradient until the head grows)."""
    sizes = [6] + [cfg.mlp_width] * cfg.mlp_depth + [4]
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        if k == len(sizes) - 2:
            w *= cfg.head_init_scale
        weights.append(ad.Tensor(w, requires_grad=True))
        biases.append(ad.Tensor(np.zeros(fan_out), requires_grad=True))
    return MlpParams(weights=weights, biases=biases)


def mlp_forward(params: MlpParams, gamma: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
    """Confidence in (0,1) with shape (n,1) and scaling vectors with shape (n,3)."""
    h: ad.Tensor = ad.as_tensor(np.atleast_2d(gamma))
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k < last:
            h = ad.softplus(h)
    if not np.all(np.isfinite(h.data)):
        raise FloatingPointError("non-finite activation in deformation network")
    c = ad.sigmoid(ad.col_slice(h, 0, 1))
    a = ad.col_slice(h, 1, 4)
    return c, a


def incremental_displacement(c: ad.Tensor, a: ad.Tensor, x_prev_norm: np.ndarray) -> ad.Tensor:
    """du = c * a o x in normalized units; vanishes where c -> 0 (rigid regions)."""
    return c * a * ad.as_tensor(np.atleast_2d(x_prev_norm))


@dataclass
class LossParts:
    total: float
    align: float
    rigid: float
    strain: float

    def row(self, level: int, step: int) -> tuple:
        return (level, step, self.align, self.rigid, self.strain, self.total)


def fem_level_weight(level: int, levels: int) -> float:
    """Elastic-term schedule (k - l) / (2k): strongest early, zero at the last level."""
    return (levels - level) / (2.0 * levels)


def level_loss(
    params: MlpParams,
    gamma: np.ndarray,
    x_prev_norm: np.ndarray,
    x_prev_mm: np.ndarray,
    u_prev_mm: np.ndarray,
    y_pair_mm: np.ndarray,
    pair_src: np.ndarray,
    frame: NormFrame,
    alpha: float,
    cfg: PyramidConfig,
    strain_matvec=None,
) -> tuple[ad.Tensor, LossParts]:
    """Build the level loss graph; returns (total tensor, detached part values)."""
    c, a = mlp_forward(params, gamma)
    du_mm = incremental_displacement(c, a, x_prev_norm) * frame.scale
    x_l = du_mm + x_prev_mm

    diff = ad.gather_rows(x_l, pair_src) - y_pair_mm
    align = ad.tsum(diff * diff) * (1.0 / len(pair_src))

    eps = cfg.confidence_clamp
    rigid = -ad.tmean(ad.log(ad.clamp(1.0 - c, eps, 1.0)))

    if strain_matvec is not None and cfg.lambda_strain != 0.0 and alpha != 0.0:
        u_l = du_mm + u_prev_mm
        strain = ad.quadratic_form(u_l, strain_matvec, scale=alpha)
    else:
        strain = ad.as_tensor(0.0)

    total = align + cfg.lambda_rigid * rigid + cfg.lambda_strain * strain
    parts = LossParts(
        total=total.item(), align=align.item(), rigid=rigid.item(), strain=strain.item()
    )
    return total, parts


class Adam:
    """Adam with bias correction; no weight decay.

    ``lr`` is the initial rate; an optional cosine schedule anneals it to
    zero over ``total_steps``, damping the late-stage oscillations the
    high-frequency encodings otherwise cause.
    """

    def __init__(
        self,
        params: list[ad.Tensor],
        lr: float,
        beta1: float,
        beta2: float,
        eps: float,
        total_steps: int | None = None,
    ):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.total_steps = total_steps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        frac = min(self.t, self.total_steps) / self.total_steps
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * frac))

    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m += (1.0 - self.beta1) * (p.grad - m)
            v += (1.0 - self.beta2) * (p.grad**2 - v)
            p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def boundary_strain_matvec(k: StiffnessMatrix, phi: InterpolationOp):
    """Operator u_b -> Phi K Phi^T u_b on flattened boundary fields."""

    def matvec(u_flat: np.ndarray) -> np.ndarray:
        full = phi.apply_transpose(u_flat)
        return phi.apply(k.csr @ full)

    return matvec


@dataclass
class PyramidResult:
    displacement: np.ndarray  # (n, 3) mm, total boundary field
    deformed: np.ndarray  # (n, 3) mm
    increments: list[np.ndarray]
    trace: list[tuple]
    frame: NormFrame
    level_params: list[MlpParams]
    final_parts: list[LossParts] = field(default_factory=list)


def optimize(
    x_mm: np.ndarray,
    y: PointCloud,
    corr: CorrespondenceSet,
    k: StiffnessMatrix | None,
    phi: InterpolationOp | None,
    cfg: PyramidConfig,
    on_step=None,
) -> PyramidResult:
    """Fit the pyramid level by level and return the accumulated boundary field.

    Levels run sequentially: each is initialized from the per-level seed,
    trained for ``steps_per_level`` Adam steps against the frozen output of
    the previous levels, then fixed. The run is bitwise reproducible for
    identical inputs and config.
    """
    x_mm = np.asarray(x_mm, dtype=np.float64)
    if len(corr) == 0:
        raise ValueError("correspondence set is empty")
    if cfg.lambda_strain != 0.0 and (k is None or phi is None):
        raise ValueError("strain regularization requires the stiffness matrix and selector")

    frame = NormFrame.from_points(x_mm, y.points)
    pair_src = corr.source_indices
    y_pair = y.points[corr.target_indices]
    strain_matvec = (
        boundary_strain_matvec(k, phi) if (k is not None and cfg.lambda_strain != 0.0) else None
    )

    u_cum = np.zeros_like(x_mm)
    increments: list[np.ndarray] = []
    level_params: list[MlpParams] = []
    final_parts: list[LossParts] = []
    trace: list[tuple] = []

    for level in range(1, cfg.levels + 1):
        rng = np.random.default_rng([cfg.seed, level])
        params = init_mlp(cfg, rng)
        x_prev_mm = x_mm + u_cum
        x_prev_norm = frame.normalize(x_prev_mm)
        gamma = encode(x_prev_norm, level)
        alpha = fem_level_weight(level, cfg.levels)
        adam = Adam(
            params.tensors, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
            total_steps=cfg.steps_per_level if cfg.lr_cosine_decay else None,
        )

        parts = None
        best_loss = np.inf
        best_arrays = params.copy_arrays()
        for step in range(cfg.steps_per_level):
            adam.zero_grad()
            total, parts = level_loss(
                params, gamma, x_prev_norm, x_prev_mm, u_prev_mm=u_cum, y_pair_mm=y_pair,
                pair_src=pair_src, frame=frame, alpha=alpha, cfg=cfg,
                strain_matvec=strain_matvec,
            )
            if not np.isfinite(parts.total):
                raise DivergenceError(
                    f"non-finite loss at level {level}, step {step}", trace
                )
            if cfg.keep_best_iterate and parts.total < best_loss:
                best_loss = parts.total
                best_arrays = params.copy_arrays()
            trace.append(parts.row(level, step))
            if on_step is not None:
                on_step(level, step, parts)
            total.backward()
            adam.step()

        if cfg.keep_best_iterate:
            # The level keeps its best-loss parameters, not the last iterate.
            for tensor, arr in zip(params.tensors, best_arrays):
                tensor.data = arr
        c, a = mlp_forward(params, gamma)
        du = (c.data * a.data * x_prev_norm) * frame.scale
        increments.append(du)
        u_cum = u_cum + du
        level_params.append(params)
        if parts is not None:
            final_parts.append(parts)

    return PyramidResult(
        displacement=u_cum,
        deformed=x_mm + u_cum,
        increments=increments,
        trace=trace,
        frame=frame,
        level_params=level_params,
        final_parts=final_parts,
    )


def write_trace_csv(trace: list[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "step", "l_align", "l_rigid", "l_fem", "total"])
        writer.writerows(trace)


def halved_budget(cfg: PyramidConfig) -> PyramidConfig:
    """Reduced-latency variant used for interactive re-optimization."""
    return replace(cfg, steps_per_level=max(1, cfg.steps_per_level // 2))
