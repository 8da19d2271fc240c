"""Rectified-flow primitives.

The noising path is the straight line x_t = (1-t) x0 + t eps with t=1 pure
noise and t=0 data.  Its conditional velocity target is the constant path
derivative eps - x0, so a single exact Euler step from t=1 to t=0 recovers
x0.  Velocity, endpoint estimate and score are interconvertible:

    x0_hat = x_t - t v
    eps_hat = x_t + (1 - t) v
    score  = -eps_hat / t

Every function accepts bare arrays or tape Tensors (see ``autodiff``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as nd
from .models import NULL_CLASS


@dataclass(frozen=True)
class Schedule:
    """Ordered sampling timesteps t_1 > t_2 > ... > t_N, with t_1 = 1.

    The terminal time 0.0 is implicit and never part of ``steps``.
    """

    steps: tuple[float, ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("schedule needs at least one step")
        if self.steps[0] != 1.0:
            raise ValueError("schedule must start at t = 1.0")
        prev = None
        for t in self.steps:
            if not 0.0 < t <= 1.0:
                raise ValueError(f"step {t} outside (0, 1]")
            if prev is not None and t >= prev:
                raise ValueError("steps must be strictly decreasing")
            prev = t

    @classmethod
    def uniform(cls, n: int) -> "Schedule":
        """n steps with spacing 1/n: t_i = 1 - (i-1)/n."""
        if n < 1:
            raise ValueError("n must be >= 1")
        return cls(tuple(1.0 - i / n for i in range(n)))

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def t_min(self) -> float:
        """Score-singularity guard: half the smallest step.

        Sampling and timestep sharing never evaluate scores below the last
        schedule step, so hitting this guard indicates a pipeline bug.
        """
        return self.steps[-1] / 2.0

    def next_time(self, i: int) -> float:
        """Time after step index i (terminal 0.0 past the last step)."""
        return self.steps[i + 1] if i + 1 < len(self.steps) else 0.0


@dataclass
class PathPoint:
    x_t: np.ndarray
    t: float
    x0: np.ndarray | None = None
    eps: np.ndarray | None = None


def interpolate(x0, eps, t: float):
    """Point on the straight noising path: (1-t) x0 + t eps."""
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return nd.add(nd.scale(x0, 1.0 - float(t)), nd.scale(eps, float(t)))


def interpolate_point(x0: np.ndarray, eps: np.ndarray, t: float) -> PathPoint:
    return PathPoint(interpolate(x0, eps, t), float(t), x0=x0, eps=eps)


def velocity_target(x0, eps):
    """Conditional velocity of the straight path (constant in t)."""
    return nd.sub(eps, x0)


def velocity_to_x0(x_t, v, t: float):
    """Endpoint implied by a velocity prediction: x_t - t v."""
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return nd.sub(x_t, nd.scale(v, float(t)))


def score_from_velocity(x_t, v, t: float, t_min: float):
    """Marginal score implied by a velocity prediction: -(x_t + (1-t) v) / t.

    Follows from x0_hat = x_t - t v, eps_hat = v + x0_hat and
    score = -eps_hat / t for the straight path (alpha_t = 1-t, sigma_t = t).
    """
    t = float(t)
    if t_min <= 0.0:
        raise ValueError("t_min must be > 0")
    if t < t_min:
        raise ValueError(f"score requested at t={t} below guard t_min={t_min}")
    eps_hat = nd.add(x_t, nd.scale(v, 1.0 - t))
    return nd.scale(eps_hat, -1.0 / t)


def euler_step(x_t, v, t_cur: float, t_next: float):
    """One denoising step: x + (t_next - t_cur) v, with t_next < t_cur."""
    if t_next >= t_cur:
        raise ValueError(f"euler_step needs t_next < t_cur, got {t_next} >= {t_cur}")
    return nd.add(x_t, nd.scale(v, t_next - t_cur))


def guided_velocity(model, x, t, c, guidance_scale: float = 1.0,
                    params=None):
    """Classifier-free-guided velocity: v_u + w (v_c - v_u).

    ``guidance_scale == 1`` is exactly the conditional prediction (the
    unconditional branch is never evaluated).
    """
    v_c = model.forward(x, t, c, params=params)
    if guidance_scale == 1.0:
        return v_c
    n = nd.value_of(x).shape[0]
    null = np.full(n, NULL_CLASS, dtype=np.int64)
    v_u = model.forward(x, t, null, params=params)
    return nd.add(v_u, nd.scale(nd.sub(v_c, v_u), guidance_scale))


def sample(model, schedule: Schedule, z: np.ndarray, cond,
           guidance_scale: float = 1.0) -> list[PathPoint]:
    """Euler rollout through the schedule, recording every intermediate.

    Returns N+1 points: one at each schedule time (the first is ``z`` at
    t=1) plus the terminal sample at t=0.
    """
    x = np.asarray(z, dtype=np.float64)
    traj = [PathPoint(x, schedule.steps[0])]
    for i, t in enumerate(schedule.steps):
        v = guided_velocity(model, x, t, cond, guidance_scale)
        x = euler_step(x, v, t, schedule.next_time(i))
        traj.append(PathPoint(x, schedule.next_time(i)))
    nd.check_finite(traj[-1].x_t, "sample endpoint")
    return traj
