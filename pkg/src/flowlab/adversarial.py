"""Multi-head discriminator over proxy-extracted features.

The proxy velocity net doubles as a frozen feature extractor: samples are
noised to a handful of fixed levels t* spread over (0, 1) and the tapped
hidden states become per-sample feature vectors.  One small MLP head per
(tap, t*) pair scores them.  Each head applies its first four layers per
sample, mean-pools over the minibatch, and maps the pooled vector through
four more layers to a single logit, so a head judges batch statistics
rather than individual points (the toy stand-in for pooling over patches).

All heads live in stacked parameter tensors with a leading head axis, so
the whole bank trains with batched matmuls; each head keeps its own
optimizer moments and step count so a refreshed head restarts cleanly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as nd
from .autodiff import Tape, grads_of
from .flow import interpolate
from .models import VelocityNet, validate_taps
from .rng import Rng

DEFAULT_T_STARS = (0.95, 0.75, 0.5, 0.25, 0.05)


@dataclass(frozen=True)
class BankConfig:
    taps: tuple[int, ...] = (3, 4, 5, 6, 8, 10, 11)
    t_star_levels: tuple[float, ...] = DEFAULT_T_STARS
    feat_dim: int = 64          # width of the proxy net
    head_width: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    refresh_p: float = 0.005
    loss_form: str = "non_saturating"  # or "logit_difference"

    def __post_init__(self):
        for t in self.t_star_levels:
            if not 0.0 < t < 1.0:
                raise ValueError("t* levels must lie in (0, 1)")
        if self.loss_form not in ("non_saturating", "logit_difference"):
            raise ValueError(f"unknown loss form {self.loss_form!r}")

    @property
    def n_heads(self) -> int:
        return len(self.taps) * len(self.t_star_levels)


def extract_disc_features(proxy: VelocityNet, x0, c, t_star: float,
                          taps, rng: Rng) -> list:
    """Tap features of ``proxy`` at x0 noised to level t*.

    Fresh noise per call.  Gradients flow only into ``x0`` (the proxy
    parameters enter as constants), which is exactly what the generator
    pass needs; the discriminator pass feeds bare arrays and gets bare
    arrays back.
    """
    if not 0.0 < t_star < 1.0:
        raise ValueError("t_star must be in (0, 1)")
    eps = rng.normal(nd.value_of(x0).shape)
    x_t = interpolate(x0, eps, t_star)
    feats, _ = proxy.forward(x_t, t_star, c, taps=taps)
    return feats


def collect_features(proxy: VelocityNet, x0, c, levels, taps,
                     rng: Rng) -> list[list]:
    """Features for every t* level: a list (levels) of lists (taps)."""
    return [extract_disc_features(proxy, x0, c, t, taps, rng) for t in levels]


class DiscriminatorBank:
    """Stacked per-(tap, t*) MLP heads with refresh state.

    Layer layout per head: 4 per-sample layers, mean-pool over the batch,
    4 more layers down to a scalar logit, with layer norm and SiLU at every
    junction.  Weights start small-uniform (+-1/sqrt(fan_in)) so a fresh
    head scores near chance.
    """

    N_LAYERS = 8
    POOL_AFTER = 4

    def __init__(self, cfg: BankConfig, rng: Rng):
        self.cfg = cfg
        self._init_rng = rng.substream("head-init")
        self.params: dict[str, np.ndarray] = {}
        for li in range(self.N_LAYERS):
            fan_in, fan_out = self._layer_dims(li)
            self.params[f"w{li}"] = self._draw_w(self._init_rng, cfg.n_heads,
                                                 fan_in, fan_out)
            self.params[f"b{li}"] = np.zeros((cfg.n_heads, 1, fan_out))
            if li < self.N_LAYERS - 1:
                self.params[f"ln{li}_g"] = np.ones((cfg.n_heads, 1, fan_out))
                self.params[f"ln{li}_b"] = np.zeros((cfg.n_heads, 1, fan_out))
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.steps = np.zeros(cfg.n_heads)

    def _layer_dims(self, li: int) -> tuple[int, int]:
        w = self.cfg.head_width
        fan_in = self.cfg.feat_dim if li == 0 else w
        fan_out = 1 if li == self.N_LAYERS - 1 else w
        return fan_in, fan_out

    @staticmethod
    def _draw_w(rng: Rng, heads: int, fan_in: int, fan_out: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, (heads, fan_in, fan_out))

    # -- forward ----------------------------------------------------------

    def _stacked_input(self, feats_by_level: list[list]):
        if len(feats_by_level) != len(self.cfg.t_star_levels):
            raise ValueError("feature levels do not match the bank's t* levels")
        parts = []
        for level_feats in feats_by_level:
            if len(level_feats) != len(self.cfg.taps):
                raise ValueError("feature taps do not match the bank's taps")
            parts.extend(level_feats)
        return nd.stack_parts(parts)  # (heads, n, feat_dim)

    def logits(self, feats_by_level: list[list], params=None):
        """Per-head logits, shape (n_heads, 1, 1)."""
        p = self.params if params is None else params
        z = self._stacked_input(feats_by_level)
        for li in range(self.N_LAYERS):
            z = nd.affine(z, p[f"w{li}"], p[f"b{li}"])
            if li < self.N_LAYERS - 1:
                z = nd.layer_norm(z, p[f"ln{li}_g"], p[f"ln{li}_b"])
                z = nd.silu(z)
            if li == self.POOL_AFTER - 1:
                z = nd.batch_mean(z)
        nd.check_finite(z, "discriminator logits")
        return z

    # -- losses -----------------------------------------------------------

    def _disc_loss_from_logits(self, lr_, lf):
        real_term = nd.reduce_sum(nd.softplus(nd.scale(lr_, -1.0)))
        if self.cfg.loss_form == "non_saturating":
            return nd.add(real_term, nd.reduce_sum(nd.softplus(lf)))
        return nd.sub(real_term, nd.reduce_sum(nd.softplus(nd.scale(lf, -1.0))))

    def disc_loss(self, real_feats: list[list], fake_feats: list[list],
                  params=None):
        """Discriminator objective summed over heads.

        Default is the non-saturating GAN discriminator,
        -log sigmoid(l_real) - log(1 - sigmoid(l_fake)) per head; the
        ``logit_difference`` form drops the complement and instead rewards
        pushing fake logits down directly.
        """
        lr_ = self.logits(real_feats, params)
        lf = self.logits(fake_feats, params)
        return self._disc_loss_from_logits(lr_, lf)

    def gen_loss(self, fake_feats: list[list]):
        """Generator objective: -log sigmoid(l_fake), summed over heads.

        Head parameters enter as constants, so gradients reach only the
        fake features (and through them the generator).
        """
        lf = self.logits(fake_feats, params=self.params)
        return nd.reduce_sum(nd.softplus(nd.scale(lf, -1.0)))

    # -- training ---------------------------------------------------------

    def train_step(self, real_feats: list[list], fake_feats: list[list]
                   ) -> tuple[float, np.ndarray, np.ndarray]:
        """One head-only gradient step; returns (loss, real/fake logits)."""
        tape = Tape()
        wrapped = tape.wrap(self.params)
        lr_ = self.logits(real_feats, params=wrapped)
        lf = self.logits(fake_feats, params=wrapped)
        loss = self._disc_loss_from_logits(lr_, lf)
        tape.backward(loss)
        self._opt_step(grads_of(wrapped))
        return float(loss.data), lr_.data.reshape(-1), lf.data.reshape(-1)

    def _opt_step(self, grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.steps += 1.0
        c1 = (1.0 - cfg.beta1 ** self.steps)[:, None, None]
        c2 = (1.0 - cfg.beta2 ** self.steps)[:, None, None]
        for name, p in self.params.items():
            g = grads[name]
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for head {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)

    def refresh_heads(self, rng: Rng, p: float | None = None) -> int:
        """Re-initialize each head independently with probability p.

        A refreshed head gets fresh weights and exactly-zero optimizer
        moments, plus a reset step count so bias correction restarts.
        """
        p = self.cfg.refresh_p if p is None else p
        if not 0.0 <= p <= 1.0:
            raise ValueError("refresh probability must be in [0, 1]")
        mask = rng.uniform(0.0, 1.0, (self.cfg.n_heads,)) < p
        hit = np.flatnonzero(mask)
        for h in hit:
            for li in range(self.N_LAYERS):
                fan_in, fan_out = self._layer_dims(li)
                self.params[f"w{li}"][h] = self._draw_w(self._init_rng, 1,
                                                        fan_in, fan_out)[0]
                self.params[f"b{li}"][h] = 0.0
                if li < self.N_LAYERS - 1:
                    self.params[f"ln{li}_g"][h] = 1.0
                    self.params[f"ln{li}_b"][h] = 0.0
            for name in self.params:
                self.m[name][h] = 0.0
                self.v[name][h] = 0.0
            self.steps[h] = 0.0
        return int(len(hit))
