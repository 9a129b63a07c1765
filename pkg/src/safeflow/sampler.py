"""ODE samplers for flow-matching velocities with optional repulsive guidance.

Sampling integrates from t = 1 (noise) to t = 0 (data) on a uniform grid;
a step of size dt moves x <- x - dt * v.

Guidance is injected in one of two places:

* ``x0``    -- predict x0_hat = x - t v, move it to x0_hat + lambda(t) grad E(x0_hat),
               then step with the velocity implied by the moved prediction;
* ``drift`` -- add lambda(t) grad E(x) to the sampling drift -v directly.
"""

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng
from .guidance import GuidanceSpec, evaluate_guidance


@dataclass(frozen=True)
class PathSchedule:
    alpha: Callable[[float], float] = lambda t: 1.0 - t
    sigma: Callable[[float], float] = lambda t: t


class FunctionVelocity:
    """Wrap a plain ``f(x, t) -> v`` as a velocity model."""

    kind = "function"

    def __init__(self, fn):
        self.fn = fn

    def velocity(self, x, t):
        return self.fn(np.asarray(x, dtype=float), t)


class AnalyticVelocity:
    kind = "analytic_mixture"

    def __init__(self, mixture):
        self.mixture = mixture

    def velocity(self, x, t):
        return self.mixture.velocity(x, t)


class TrainedVelocity:
    kind = "trained_mlp"

    def __init__(self, mlp):
        self.mlp = mlp

    def velocity(self, x, t):
        return self.mlp.velocity(x, t)


def x0_from_velocity(x_t, t: float, v):
    return np.asarray(x_t, dtype=float) - t * np.asarray(v, dtype=float)


def ddim_step(x_t, t: float, s: float, x0_hat, path: PathSchedule = PathSchedule()):
    """alpha_s x0_hat + (sigma_s / sigma_t) (x_t - alpha_t x0_hat)."""
    if not 0.0 <= s <= t <= 1.0:
        raise ValueError(f"need 0 <= s <= t <= 1, got s={s}, t={t}")
    sig_t = path.sigma(t)
    if sig_t == 0:
        raise ValueError("cannot step from the data endpoint (sigma_t = 0)")
    x_t = np.asarray(x_t, dtype=float)
    x0_hat = np.asarray(x0_hat, dtype=float)
    return path.alpha(s) * x0_hat + path.sigma(s) / sig_t * (x_t - path.alpha(t) * x0_hat)


class Guide:
    """Scheduled guidance against a fixed negative set."""

    def __init__(self, spec: GuidanceSpec | None, negatives):
        self.spec = spec
        self.negatives = None if negatives is None else np.asarray(negatives, dtype=float)
        if spec is not None and self.negatives is None:
            raise ValueError("guidance needs a negative set")

    def active(self, t: float) -> bool:
        return self.spec is not None and self.spec.schedule.lambda_at(t) > 0

    def __call__(self, z, t: float):
        return evaluate_guidance(self.spec, z, t, self.negatives)


def _velocity_x0_guided(model, guide: Guide, x, t):
    """Velocity implied by the guided x0 prediction at (x, t)."""
    v = model.velocity(x, t)
    if not guide.active(t):
        return v
    x0 = x0_from_velocity(x, t, v)
    x0_guided = x0 + guide(x0, t)
    return (x - x0_guided) / t


def _drift(model, guide: Guide, x, t, space: str, guided: bool):
    """Sampling-direction drift (dx per unit of decreasing t)."""
    if guided and guide.active(t):
        if space == "x0":
            return -_velocity_x0_guided(model, guide, x, t)
        return -model.velocity(x, t) + guide(x, t)
    return -model.velocity(x, t)


def guided_step_euler(x, t: float, dt: float, model, spec: GuidanceSpec | None = None,
                      negatives=None, space: str = "x0"):
    if t <= 0:
        return np.asarray(x, dtype=float)
    if t - dt < -1e-12:
        raise ValueError("step would pass t = 0")
    guide = spec if isinstance(spec, Guide) else Guide(spec, negatives)
    return x + dt * _drift(model, guide, x, t, space, True)


def guided_step_midpoint(x, t: float, dt: float, model, spec: GuidanceSpec | None = None,
                         negatives=None, space: str = "x0", midpoint_guidance_only: bool = True):
    """Midpoint rule; by default guidance enters only the half-step drift."""
    if t <= 0:
        return np.asarray(x, dtype=float)
    if t - dt < -1e-12:
        raise ValueError("step would pass t = 0")
    guide = spec if isinstance(spec, Guide) else Guide(spec, negatives)
    k1 = _drift(model, guide, x, t, space, not midpoint_guidance_only)
    t_mid = t - 0.5 * dt
    k2 = _drift(model, guide, x + 0.5 * dt * k1, t_mid, space, True)
    return x + dt * k2


@dataclass
class SamplerConfig:
    steps: int = 50
    integrator: str = "midpoint"
    seed: int = 0
    guidance: GuidanceSpec | None = None
    midpoint_guidance_only: bool = True
    guidance_space: str = "x0"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.integrator not in ("euler", "midpoint"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.guidance_space not in ("x0", "drift"):
            raise ValueError(f"unknown guidance_space {self.guidance_space!r}")


@dataclass
class SampleResult:
    points: np.ndarray
    initial: np.ndarray
    times: np.ndarray
    snapshots: list = field(default_factory=list)


def time_grid(steps: int) -> np.ndarray:
    """Uniform grid from 1 to 0 inclusive; the last entry is exactly 0."""
    grid = np.linspace(1.0, 0.0, steps + 1)
    grid[-1] = 0.0
    return grid


def sample(model, cfg: SamplerConfig, negatives=None, n: int = 1, dim: int | None = None,
           record: bool = False, x_init=None) -> SampleResult:
    """Integrate ``n`` points from standard-normal noise keyed on ``cfg.seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if x_init is None:
        dim = dim or _model_dim(model)
        x = rng.point_normals(cfg.seed, n, dim)
    else:
        x = np.array(x_init, dtype=float)
    x_start = x.copy()
    grid = time_grid(cfg.steps)
    guide = Guide(cfg.guidance, negatives)
    snaps = [x.copy()] if record else []
    for t, s in zip(grid[:-1], grid[1:]):
        dt = t - s
        if cfg.integrator == "euler":
            x = guided_step_euler(x, t, dt, model, guide, space=cfg.guidance_space)
        else:
            x = guided_step_midpoint(x, t, dt, model, guide, space=cfg.guidance_space,
                                     midpoint_guidance_only=cfg.midpoint_guidance_only)
        if record:
            snaps.append(x.copy())
    return SampleResult(x, x_start, grid, snaps)


def _model_dim(model) -> int:
    for attr in ("mixture", "mlp"):
        inner = getattr(model, attr, None)
        if inner is not None:
            return inner.dim
    raise ValueError("cannot infer dimension from model; pass dim=")


def write_trajectory_csv(result: SampleResult, path):
    """Columns: step, t, point_id, x0, x1, ... (one coordinate column per dimension)."""
    if not result.snapshots:
        raise ValueError("sample was not recorded; pass record=True")
    dim = result.points.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "t", "point_id", *[f"x{i}" for i in range(dim)]])
        for step, (t, pts) in enumerate(zip(result.times, result.snapshots)):
            for pid, p in enumerate(pts):
                w.writerow([step, repr(float(t)), pid, *[repr(float(c)) for c in p]])
