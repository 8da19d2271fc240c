"""Sample-quality metrics and experiment harnesses.

The distribution distance is the biased (V-statistic) squared maximum mean
discrepancy under an RBF kernel, accumulated in fixed-point so the result
is exactly invariant to reordering either sample set.  Energy distance is
kept as a second opinion.  Coverage and conditional accuracy are the desk
analogs of mode dropping and prompt alignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adversarial import BankConfig, DiscriminatorBank
from .distill import DistillConfig, DistillState, distill_four_step, \
    make_distill_state
from .flow import Schedule, sample
from .models import VelocityNet, quantize_weights
from .rng import Rng
from .teacher import DataSpec, SyntheticSet, gen_data, gen_synthetic_set

# fixed-point quantum for order-invariant kernel sums; kernel values lie in
# [0, 1] so the induced error is ~5.7e-14 per entry, far below sampling noise
_QUANT = 2.0 ** 44
_BLOCK = 256


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    d2 = aa + bb - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kernel_sum(a: np.ndarray, b: np.ndarray, gamma: float) -> float:
    """Sum of exp(-gamma d^2) over all pairs, order-invariant.

    Kernel values are rounded to a fixed quantum and summed exactly as
    integers (int64 per row, python bigints across rows), so any
    permutation of the rows of either input yields the bit-identical
    total.  Row sums stay within int64 for up to 2**19 columns.
    """
    if len(b) >= 2 ** 19:
        raise ValueError("kernel sum limited to < 2**19 points per side")
    total = 0
    for i in range(0, len(a), _BLOCK):
        k = np.exp(-gamma * _sq_dists(a[i:i + _BLOCK], b))
        q = np.round(k * _QUANT).astype(np.int64)
        total += sum(int(r) for r in q.sum(axis=1))
    return total / _QUANT


def median_pairwise_distance(points: np.ndarray, cap: int = 4096) -> float:
    """Median inter-point distance; above ``cap`` points an evenly strided
    deterministic subsample keeps the cost quadratic in ``cap``."""
    n = len(points)
    if n > cap:
        idx = np.linspace(0, n - 1, cap).astype(int)
        points = points[idx]
        n = cap
    d2 = _sq_dists(points, points)
    iu = np.triu_indices(n, k=1)
    return float(np.median(np.sqrt(d2[iu])))


def mmd_rbf(a: np.ndarray, b: np.ndarray, bandwidth: float | None = None
            ) -> float:
    """Biased V-statistic MMD^2 with kernel exp(-|u-v|^2 / (2 h^2)).

    ``bandwidth`` defaults to the median pairwise distance of the pooled
    samples.  Identical multisets give exactly zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("mmd_rbf needs nonempty samples")
    if a.shape[1] != b.shape[1]:
        raise ValueError("mmd_rbf: dimension mismatch")
    if bandwidth is None:
        bandwidth = median_pairwise_distance(np.concatenate([a, b]))
        if bandwidth == 0.0:
            bandwidth = 1.0
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)
    na, nb = len(a), len(b)
    s_aa = _kernel_sum(a, a, gamma)
    s_bb = _kernel_sum(b, b, gamma)
    s_ab = _kernel_sum(a, b, gamma)
    return s_aa / (na * na) + s_bb / (nb * nb) - 2.0 * s_ab / (na * nb)


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """V-statistic energy distance: 2 E|a-b| - E|a-a'| - E|b-b'|."""
    def mean_dist(x, y):
        total = 0.0
        for i in range(0, len(x), _BLOCK):
            total += float(np.sqrt(_sq_dists(x[i:i + _BLOCK], y)).sum())
        return total / (len(x) * len(y))

    return 2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)


def mode_coverage(samples: np.ndarray, centers: np.ndarray,
                  assign_radius: float, min_fraction: float = 0.02) -> float:
    """Fraction of centers holding at least ``min_fraction`` of the samples
    within ``assign_radius``."""
    if len(centers) == 0:
        raise ValueError("mode_coverage needs centers")
    if len(samples) == 0:
        return 0.0
    d2 = _sq_dists(samples, centers)
    within = d2 <= assign_radius * assign_radius
    frac = within.mean(axis=0)
    return float((frac >= min_fraction).mean())


def conditional_accuracy(samples: np.ndarray, conditions: np.ndarray,
                         centers: np.ndarray) -> float:
    """Fraction of samples whose nearest center is their condition's."""
    if len(samples) != len(conditions):
        raise ValueError("samples and conditions must have equal length")
    if len(samples) == 0:
        return 0.0
    nearest = _sq_dists(samples, centers).argmin(axis=1)
    return float((nearest == np.asarray(conditions)).mean())


@dataclass
class MetricReport:
    mmd2: float
    energy_distance: float
    mode_coverage: float
    conditional_accuracy: float
    n_samples: int
    seed: int
    meta: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {"mmd2": self.mmd2, "energy_distance": self.energy_distance,
               "mode_coverage": self.mode_coverage,
               "conditional_accuracy": self.conditional_accuracy,
               "n_samples": self.n_samples, "seed": self.seed}
        row.update(self.meta)
        return row


@dataclass
class EvalConfig:
    n_samples: int = 10000
    seeds: tuple[int, ...] = (0, 1, 2)
    min_fraction: float = 0.02
    assign_radius_sigmas: float = 3.0


def data_bandwidth(spec: DataSpec, n: int, seed: int) -> float:
    """Shared kernel bandwidth for paired comparisons at one seed."""
    rng = Rng(seed).substream("bandwidth")
    x, _ = gen_data(spec, min(n, 4096), rng)
    h = median_pairwise_distance(x)
    return h if h > 0 else 1.0


def baseline_mmd(spec: DataSpec, n: int, seed: int,
                 bandwidth: float | None = None) -> float:
    """MMD^2 between two disjoint ground-truth draws (sampling floor)."""
    rng = Rng(seed)
    a, _ = gen_data(spec, n, rng.substream("baseline-a"))
    b, _ = gen_data(spec, n, rng.substream("baseline-b"))
    return mmd_rbf(a, b, bandwidth)


def evaluate_model(model, spec: DataSpec, schedule: Schedule, n: int,
                   seed: int, guidance_scale: float = 1.0,
                   bandwidth: float | None = None,
                   eval_cfg: EvalConfig | None = None,
                   meta: dict | None = None) -> MetricReport:
    """Sample the model and score it against a fresh ground-truth draw."""
    eval_cfg = eval_cfg or EvalConfig()
    rng = Rng(seed)
    ref, _ = gen_data(spec, n, rng.substream("eval-ref"))
    k = spec.n_classes
    c = rng.substream("eval-cond").integers(0, k, (n,))
    z = rng.substream("eval-noise").normal((n, 2))
    traj = sample(model, schedule, z, c, guidance_scale)
    x = traj[-1].x_t
    mmd2 = mmd_rbf(x, ref, bandwidth)
    if mmd2 < -1e-12:
        raise AssertionError(f"biased MMD^2 went negative: {mmd2}")
    report = MetricReport(
        mmd2=mmd2,
        energy_distance=energy_distance(x, ref),
        mode_coverage=mode_coverage(
            x, spec.centers, eval_cfg.assign_radius_sigmas * spec.sigma,
            eval_cfg.min_fraction),
        conditional_accuracy=conditional_accuracy(x, c, spec.centers),
        n_samples=n,
        seed=seed,
        meta={"steps": len(schedule), "guidance_scale": guidance_scale,
              **(meta or {})},
    )
    return report


ABLATION_VARIANTS = ("full", "no_adv", "no_pretrain", "no_timestep_sharing",
                     "no_refresh")


def apply_ablation(cfg: DistillConfig, variant: str) -> tuple[DistillConfig, bool]:
    """Return (stage config, pretrain flag) for one ablation variant."""
    from dataclasses import replace

    if variant == "full":
        return cfg, True
    if variant == "no_adv":
        return replace(cfg, adversarial=False, lambda_adv=0.0), True
    if variant == "no_pretrain":
        return cfg, False
    if variant == "no_timestep_sharing":
        return replace(cfg, timestep_sharing=False), True
    if variant == "no_refresh":
        return replace(cfg, refresh=False), True
    raise ValueError(f"unknown ablation variant {variant!r}")


def distill_variant(teacher: VelocityNet, synthetic: SyntheticSet,
                    cfg: DistillConfig, bank_cfg: BankConfig, seed: int,
                    variant: str = "full", n_steps: int = 4
                    ) -> tuple[DistillState, dict]:
    """Train one (variant, seed) student; returns the state and run logs."""
    stage_cfg, pretrain = apply_ablation(cfg, variant)
    rng = Rng(seed).substream(f"distill/{n_steps}step")
    state = make_distill_state(teacher, n_steps, stage_cfg)
    bank = None
    if stage_cfg.adversarial:
        bank = DiscriminatorBank(bank_cfg, rng.substream("bank"))
    logs = distill_four_step(state, bank, synthetic, stage_cfg, rng,
                             pretrain=pretrain)
    logs["meta"] = {"variant": variant, "seed": seed,
                    "pretrain_iterations": stage_cfg.pretrain_iterations if pretrain else 0,
                    "matching_iterations": stage_cfg.matching_iterations}
    return state, logs


def run_ablation_matrix(teacher: VelocityNet, spec: DataSpec,
                        synthetic: SyntheticSet, cfg: DistillConfig,
                        bank_cfg: BankConfig, eval_cfg: EvalConfig,
                        seeds: tuple[int, ...] | None = None,
                        variants: tuple[str, ...] = ABLATION_VARIANTS,
                        ) -> list[MetricReport]:
    """Full pipeline plus ablations under paired seeds and equal budgets."""
    seeds = eval_cfg.seeds if seeds is None else seeds
    reports: list[MetricReport] = []
    for seed in seeds:
        bw = data_bandwidth(spec, eval_cfg.n_samples, seed)
        for variant in variants:
            state, logs = distill_variant(teacher, synthetic, cfg, bank_cfg,
                                          seed, variant)
            rep = evaluate_model(state.student, spec, state.schedule,
                                 eval_cfg.n_samples, seed, bandwidth=bw,
                                 eval_cfg=eval_cfg,
                                 meta={"variant": variant,
                                       **logs["meta"]})
            reports.append(rep)
    _assert_paired(reports, variants)
    return reports


def _assert_paired(reports: list[MetricReport], variants) -> None:
    by_variant: dict[str, list] = {}
    for r in reports:
        by_variant.setdefault(r.meta["variant"], []).append(r)
    seeds = {tuple(sorted(r.seed for r in rs)) for rs in by_variant.values()}
    iters = {(r.meta["matching_iterations"]) for r in reports}
    if len(seeds) != 1 or len(iters) != 1:
        raise AssertionError("ablation variants must share seeds and budgets")


def quantization_tradeoff(student: VelocityNet, spec: DataSpec,
                          schedule: Schedule, eval_cfg: EvalConfig,
                          bits_list: tuple[int, ...] = (64, 16, 8, 6),
                          seed: int = 0) -> list[dict]:
    """Metrics and (hypothetically packed) parameter bytes per bit width."""
    bw = data_bandwidth(spec, eval_cfg.n_samples, seed)
    rows = []
    for bits in bits_list:
        net = student if bits == 64 else quantize_weights(student, bits)
        rep = evaluate_model(net, spec, schedule, eval_cfg.n_samples, seed,
                             bandwidth=bw, eval_cfg=eval_cfg,
                             meta={"bits": bits})
        row = rep.as_row()
        row["param_bytes"] = student.n_params() * bits // 8
        rows.append(row)
    return rows
