"""Teacher training on synthetic 2D conditional distributions.

The teacher is a multi-step velocity net fit with the flow-matching loss
on draws from a known ground-truth distribution.  Per-sample condition
dropout teaches the null-class row so the teacher supports classifier-free
guidance.  For Gaussian data the exact marginal velocity and score are
available in closed form and serve as oracles for everything downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as nd
from .autodiff import Tape, grads_of
from .flow import Schedule, sample
from .models import NULL_CLASS, NetConfig, VelocityNet
from .optim import AdamW
from .rng import Rng


class DivergenceError(RuntimeError):
    """Training loss went non-finite or blew past its initial level."""


def _circle_centers(k: int, radius: float) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(k) / k
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


@dataclass(frozen=True)
class DataSpec:
    """Ground-truth sampling distribution for teacher training."""

    kind: str = "gaussian_mixture"
    n_modes: int = 8
    radius: float = 4.0
    sigma: float = 0.3
    conditional: bool = True
    board_half: float = 4.0  # checkerboard extent [-board_half, board_half]

    def __post_init__(self):
        if self.kind not in ("gaussian_mixture", "checkerboard", "single_gaussian"):
            raise ValueError(f"unknown data kind {self.kind!r}")
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")

    @property
    def n_classes(self) -> int:
        if self.kind == "gaussian_mixture" and self.conditional:
            return self.n_modes
        return 1

    @property
    def centers(self) -> np.ndarray:
        if self.kind == "gaussian_mixture":
            return _circle_centers(self.n_modes, self.radius)
        return np.zeros((1, 2))


def gen_data(spec: DataSpec, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw n i.i.d. samples; conditions are mode indices when conditional."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if spec.kind == "single_gaussian":
        x = spec.sigma * rng.normal((n, 2))
        return x, np.zeros(n, dtype=np.int64)
    if spec.kind == "gaussian_mixture":
        modes = rng.integers(0, spec.n_modes, (n,))
        x = spec.centers[modes] + spec.sigma * rng.normal((n, 2))
        c = modes if spec.conditional else np.zeros(n, dtype=np.int64)
        return x, c
    # checkerboard: uniform over the dark cells of a 4x4 board
    cells = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0])
    pick = rng.integers(0, len(cells), (n,))
    u = rng.uniform(0.0, 1.0, (n, 2))
    side = spec.board_half / 2.0
    x = (cells[pick] + u) * side - spec.board_half
    return x, np.zeros(n, dtype=np.int64)


def flow_matching_loss(net: VelocityNet, x0: np.ndarray, c: np.ndarray,
                       rng: Rng, cond_dropout_p: float = 0.0, params=None):
    """Mean over the batch of ||(eps - x0) - v(x_t, t, c)||^2.

    Draws t ~ U(0,1) and eps ~ N(0,I) per sample; with probability
    ``cond_dropout_p`` a sample's condition is replaced by the null class.
    Returns a tape Tensor when ``params`` is a wrapped tree, else a float.
    """
    if not 0.0 <= cond_dropout_p < 1.0:
        raise ValueError("cond_dropout_p must be in [0, 1)")
    n, d = x0.shape
    t = rng.uniform(0.0, 1.0, (n,))
    eps = rng.normal((n, d))
    x_t = (1.0 - t)[:, None] * x0 + t[:, None] * eps
    if cond_dropout_p > 0.0:
        drop = rng.uniform(0.0, 1.0, (n,)) < cond_dropout_p
        c = np.where(drop, NULL_CLASS, c)
    v = net.forward(x_t, t, c, params=params)
    # squared norm per row, averaged over the batch = d * elementwise mse
    return nd.scale(nd.mse(v, eps - x0), float(d))


@dataclass
class TeacherConfig:
    iterations: int = 12000
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.0
    cond_dropout_p: float = 0.1
    sample_steps: int = 50
    log_every: int = 50


def train_teacher(spec: DataSpec, cfg: TeacherConfig, rng: Rng,
                  net_cfg: NetConfig | None = None
                  ) -> tuple[VelocityNet, list[tuple[int, float]]]:
    """Fit a teacher by flow matching; returns the net and its loss curve.

    Aborts with ``DivergenceError`` if the loss goes non-finite or exceeds
    ten times its initial level after warmup.
    """
    if net_cfg is None:
        net_cfg = NetConfig(n_classes=spec.n_classes)
    elif net_cfg.n_classes != spec.n_classes:
        raise ValueError("net n_classes must match the data spec")
    net = VelocityNet.init(net_cfg, rng.substream("init"))
    opt = AdamW(net.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    data_rng = rng.substream("data")
    loss_rng = rng.substream("fm")
    curve: list[tuple[int, float]] = []
    warmup_level = None
    for it in range(cfg.iterations):
        x0, c = gen_data(spec, cfg.batch_size, data_rng)
        tape = Tape()
        wrapped = tape.wrap(net.params)
        loss = flow_matching_loss(net, x0, c, loss_rng, cfg.cond_dropout_p,
                                  params=wrapped)
        val = float(loss.data)
        if not math.isfinite(val):
            raise DivergenceError(f"teacher loss non-finite at iteration {it}")
        if it == 50:
            warmup_level = max(np.mean([v for _, v in curve[-50:]]), 1e-9)
        if warmup_level is not None and it > 200 and val > 10.0 * warmup_level:
            raise DivergenceError(
                f"teacher loss {val:.3g} exceeded 10x warmup level "
                f"{warmup_level:.3g} at iteration {it}")
        tape.backward(loss)
        opt.step(net.params, grads_of(wrapped))
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            curve.append((it, val))
    return net, curve


# ---------------------------------------------------------------------------
# analytic oracles for isotropic Gaussian data N(mu, sigma^2 I)
#
# On the straight path x_t = a x0 + t eps with a = 1 - t, x_t is jointly
# Gaussian with x0 and eps, so the conditional expectations are linear:
#   s2          = a^2 sigma^2 + t^2          (marginal variance of x_t)
#   E[x0 | x_t] = mu + (a sigma^2 / s2) (x_t - a mu)
#   E[eps| x_t] = (t / s2) (x_t - a mu)
#   v(x_t, t)   = E[eps - x0 | x_t]
#   score(x_t)  = -(x_t - a mu) / s2

def analytic_velocity_gaussian(mu, sigma: float, x_t: np.ndarray,
                               t: float) -> np.ndarray:
    """Exact marginal velocity for Gaussian data; valid for t in (0, 1]."""
    t = float(t)
    if not 0.0 < t <= 1.0:
        raise ValueError("t must be in (0, 1]")
    mu = np.asarray(mu, dtype=np.float64)
    a = 1.0 - t
    s2 = a * a * sigma * sigma + t * t
    centered = x_t - a * mu
    e_x0 = mu + (a * sigma * sigma / s2) * centered
    e_eps = (t / s2) * centered
    return e_eps - e_x0


def analytic_score_gaussian(mu, sigma: float, x_t: np.ndarray,
                            t: float) -> np.ndarray:
    """Exact marginal score for Gaussian data on the straight path."""
    t = float(t)
    mu = np.asarray(mu, dtype=np.float64)
    a = 1.0 - t
    s2 = a * a * sigma * sigma + t * t
    return -(x_t - a * mu) / s2


# ---------------------------------------------------------------------------
# synthetic samples from a trained teacher (the "real" data of distillation)

@dataclass
class SyntheticSet:
    x0: np.ndarray
    c: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.x0)

    def minibatch(self, rng: Rng, n: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self.x0), (n,))
        return self.x0[idx], self.c[idx]


def gen_synthetic_set(teacher: VelocityNet, n: int, rng: Rng,
                      steps: int = 32, guidance_scale: float = 4.0,
                      has_null: bool = True) -> SyntheticSet:
    """Conditional teacher rollouts collected as a reusable sample pool."""
    if guidance_scale != 1.0 and not has_null:
        raise ValueError("guided sampling needs a teacher trained with "
                         "condition dropout (null class)")
    schedule = Schedule.uniform(steps)
    k = teacher.cfg.n_classes
    c = rng.integers(0, k, (n,))
    z = rng.normal((n, 2))
    if n:
        traj = sample(teacher, schedule, z, c, guidance_scale)
        x0 = traj[-1].x_t
    else:
        x0 = z
    meta = {"steps": steps, "guidance_scale": guidance_scale,
            "n": n, "seed": rng.seed}
    return SyntheticSet(x0=x0, c=c, meta=meta)
