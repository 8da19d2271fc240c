"""Few-step distillation of a multi-step teacher.

Stage 1 pretrains the student with trajectory guidance: along the
teacher's own rollout, the student's prediction at each schedule point is
regressed onto the teacher's average velocity over the interval the
student will step across, weighted by the timestep.  A student that nails
these targets reproduces the teacher's trajectory knots exactly with N
Euler steps.

Stage 2 matches distributions.  The gradient of the KL between student
and teacher output distributions is the score difference evaluated at
student samples, so each generator update builds the surrogate

    L = mean_b < stop_grad((s_fake - s_real) / eta), x_theta >

where x_theta is the generator-dependent sample and eta is a per-batch
normalizer.  With timestep sharing the scores are evaluated at the
student's own schedule points, reached by one gradient-carrying Euler
step from a rollout point; no sample is ever re-noised from an endpoint
estimate.  Early iterations feed the previous (noisier) rollout point for
a given target step and switch to the on-step input once training has
had time to stabilize.

The proxy net is refit to fresh student endpoints (random noise levels,
plain flow matching) ten times per generator update, alongside the
discriminator; an adversarial term and, for the 2-step stage, a Gram
feature-statistics term are added to the generator objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as nd
from .autodiff import Tape, grads_of
from .adversarial import DiscriminatorBank, collect_features
from .flow import Schedule, euler_step, guided_velocity, interpolate, sample, \
    score_from_velocity, velocity_to_x0
from .models import VelocityNet, copy_params, ema_update, freeze_params, \
    merge_interpolate
from .optim import AdamW
from .rng import Rng
from .teacher import DivergenceError, SyntheticSet, flow_matching_loss


@dataclass
class DistillConfig:
    """Stage hyperparameters (desk-scale defaults)."""

    pretrain_iterations: int = 2000
    pretrain_lr: float = 3e-4
    matching_iterations: int = 800
    matching_iterations_2step: int = 1200
    student_lr: float = 1e-4
    proxy_lr: float = 3e-4
    batch_size: int = 128
    inner_batch_size: int = 64
    update_ratio: int = 10
    lambda_adv: float = 0.1
    lambda_gram: float = 0.05
    normalizer_eps: float = 1e-8
    quad_substeps: int = 8
    noisier_switch_frac: float = 0.5
    timestep_sharing: bool = True
    adversarial: bool = True
    refresh: bool = True
    tg_guidance: float = 1.0
    split_iterations: int = 400
    split_ratio: float = 0.3
    split_boundary: float = 0.5
    ema_beta: float = 0.99


@dataclass
class DistillState:
    """Everything one distillation run owns.

    The teacher is cloned and frozen at construction; student and proxy
    start as copies of it.
    """

    student: VelocityNet
    proxy: VelocityNet
    teacher: VelocityNet
    schedule: Schedule
    stage: str = "pretrain"
    iteration: int = 0
    opt_student: AdamW | None = None
    opt_proxy: AdamW | None = None


def make_distill_state(teacher: VelocityNet, n_steps: int,
                       cfg: DistillConfig) -> DistillState:
    frozen = teacher.clone()
    freeze_params(frozen.params)
    student = teacher.clone()
    proxy = teacher.clone()
    return DistillState(
        student=student,
        proxy=proxy,
        teacher=frozen,
        schedule=Schedule.uniform(n_steps),
        opt_student=AdamW(student.params, lr=cfg.pretrain_lr),
        opt_proxy=AdamW(proxy.params, lr=cfg.proxy_lr),
    )


# ---------------------------------------------------------------------------
# stage 1: trajectory guidance

def teacher_interval_averages(teacher: VelocityNet, schedule: Schedule,
                              z: np.ndarray, c, substeps: int,
                              guidance: float = 1.0
                              ) -> tuple[list, list]:
    """Teacher rollout recording, per schedule point, the average velocity
    over the interval down to the next point (K-substep Euler quadrature).

    The average velocity is the displacement across the interval divided
    by its width, so it is exact for a constant field at any K.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    points = []
    averages = []
    x = np.asarray(z, dtype=np.float64)
    for i, t in enumerate(schedule.steps):
        t_next = schedule.next_time(i)
        points.append((x, t))
        xs = x
        ts = np.linspace(t, t_next, substeps + 1)
        for a, b in zip(ts[:-1], ts[1:]):
            v = guided_velocity(teacher, xs, float(a), c, guidance)
            xs = euler_step(xs, v, float(a), float(b))
        averages.append((xs - x) / (t_next - t))
        x = xs
    return points, averages


def trajectory_guidance_loss(state: DistillState, x_start: np.ndarray, c,
                             substeps: int, params=None,
                             guidance: float = 1.0):
    """Timestep-weighted squared error between the student's predictions
    at the teacher's schedule points and the teacher's interval-average
    velocities.  The teacher rollout carries no gradient.
    """
    points, averages = teacher_interval_averages(
        state.teacher, state.schedule, x_start, c, substeps, guidance)
    d = x_start.shape[1]
    total = None
    for (x_t, t), vbar in zip(points, averages):
        pred = state.student.forward(x_t, t, c, params=params)
        term = nd.scale(nd.mse(pred, vbar), t * t * d)
        total = term if total is None else nd.add(total, term)
    return total


def pretrain_student(state: DistillState, cfg: DistillConfig, rng: Rng
                     ) -> list[dict]:
    """Run the trajectory-guidance stage; moves the state to "matching"."""
    if state.stage != "pretrain":
        raise ValueError(f"pretrain called in stage {state.stage!r}")
    state.opt_student = AdamW(state.student.params, lr=cfg.pretrain_lr)
    noise_rng = rng.substream("pretrain/noise")
    k = state.student.cfg.n_classes
    rows: list[dict] = []
    warmup_level = None
    for it in range(cfg.pretrain_iterations):
        z = noise_rng.normal((cfg.batch_size, 2))
        c = noise_rng.integers(0, k, (cfg.batch_size,))
        tape = Tape()
        wrapped = tape.wrap(state.student.params)
        loss = trajectory_guidance_loss(state, z, c, cfg.quad_substeps,
                                        params=wrapped,
                                        guidance=cfg.tg_guidance)
        val = float(loss.data)
        if not math.isfinite(val):
            raise DivergenceError(f"trajectory guidance loss non-finite at {it}")
        if it == 50:
            warmup_level = max(np.mean([r["tg_loss"] for r in rows[-50:]]), 1e-9)
        if warmup_level is not None and it > 200 and val > 10.0 * warmup_level:
            raise DivergenceError(
                f"trajectory guidance loss {val:.3g} blew up at iteration {it}")
        tape.backward(loss)
        state.opt_student.step(state.student.params, grads_of(wrapped))
        rows.append({"iteration": it, "tg_loss": val})
    state.stage = "matching"
    state.opt_student = AdamW(state.student.params, lr=cfg.student_lr)
    return rows


# ---------------------------------------------------------------------------
# stage 2: distribution matching with timestep sharing

def rollout_schedule_points(model, schedule: Schedule, z: np.ndarray, c
                            ) -> tuple[list[tuple[np.ndarray, float]], np.ndarray]:
    """Gradient-free student rollout: every schedule point plus endpoint."""
    traj = sample(model, schedule, z, c, guidance_scale=1.0)
    points = [(p.x_t, p.t) for p in traj[:-1]]
    return points, traj[-1].x_t


def valid_input_indices(n_steps: int, noisier_start: bool) -> list[int]:
    """Rollout indices usable as matching inputs.

    For target step t_i, the noisier-start phase feeds the point at
    t_{i-1}; after the switch the input sits at t_i itself and the scored
    point moves one step further down, so the last step drops out (its
    successor is the terminal time where the score is undefined).
    """
    if noisier_start:
        return list(range(0, n_steps - 1))
    return list(range(1, n_steps - 1))


def matching_surrogate(state: DistillState, student_fwd, points, c,
                       input_idx: int, normalizer_eps: float,
                       timestep_sharing: bool = True,
                       renoise_rng: Rng | None = None,
                       frozen_weights: np.ndarray | None = None):
    """Build the distribution-matching surrogate on the caller's tape.

    ``student_fwd(x, t, c)`` must return a tape Tensor.  One Euler step
    moves the rollout input to the next schedule time, producing the
    generator-dependent sample x_theta at which both scores are taken; the
    weighted inner product has the KL gradient (scaled by 1/eta) as its
    parameter gradient.  With sharing disabled, x_theta instead comes from
    re-noising the implied endpoint to a random level (the ablation
    baseline).

    ``frozen_weights`` substitutes precomputed surrogate weights, which
    keeps the loss differentiable in the parameters alone (used by the
    finite-difference checks).
    """
    schedule = state.schedule
    x_in, t_in = points[input_idx]
    v = student_fwd(x_in, t_in, c)
    if timestep_sharing:
        t_score = schedule.steps[input_idx + 1]
        x_theta = euler_step(x_in, v, t_in, t_score)
        x0_hat = None
    else:
        if renoise_rng is None:
            raise ValueError("re-noising ablation needs an rng")
        x0_hat = velocity_to_x0(x_in, v, t_in)
        t_score = float(renoise_rng.uniform(schedule.t_min, 1.0))
        eps = renoise_rng.normal(x_in.shape)
        x_theta = interpolate(x0_hat, eps, t_score)
    if frozen_weights is None:
        xv = nd.value_of(x_theta)
        t_min = schedule.t_min
        s_real = score_from_velocity(
            xv, state.teacher.forward(xv, t_score, c), t_score, t_min)
        s_fake = score_from_velocity(
            xv, state.proxy.forward(xv, t_score, c), t_score, t_min)
        diff = s_fake - s_real
        eta = np.abs(diff).mean() + normalizer_eps
        weights = diff / eta
    else:
        weights = frozen_weights
    n = nd.value_of(x_theta).shape[0]
    loss = nd.scale(nd.reduce_sum(nd.mul(weights, x_theta)), 1.0 / n)
    info = {"t_input": t_in, "t_scored": t_score, "weights": weights,
            "x0_hat": x0_hat}
    return loss, x_theta, info


def proxy_update(state: DistillState, x0: np.ndarray, c, rng: Rng) -> float:
    """Refit the proxy to fresh student endpoints by flow matching.

    This is the one stage-2 site that noises samples to random levels;
    the proxy must track the student distribution everywhere.
    """
    tape = Tape()
    wrapped = tape.wrap(state.proxy.params)
    loss = flow_matching_loss(state.proxy, x0, c, rng, 0.0, params=wrapped)
    tape.backward(loss)
    state.opt_proxy.step(state.proxy.params, grads_of(wrapped))
    return float(loss.data)


def gram_loss(feats_a: list, feats_b: list):
    """Mean over taps of the MSE between batch Gram matrices (F^T F / n)."""
    if len(feats_a) != len(feats_b):
        raise ValueError("gram_loss: tap count mismatch")
    if not feats_a:
        raise ValueError("gram_loss: no features")
    total = None
    for fa, fb in zip(feats_a, feats_b):
        va, vb = nd.value_of(fa), nd.value_of(fb)
        if va.shape[1] != vb.shape[1]:
            raise ValueError("gram_loss: feature width mismatch")
        ga = nd.scale(nd.matmul(nd.transpose(fa), fa), 1.0 / va.shape[0])
        gb = nd.scale(nd.matmul(nd.transpose(fb), fb), 1.0 / vb.shape[0])
        term = nd.mse(ga, gb)
        total = term if total is None else nd.add(total, term)
    return nd.scale(total, 1.0 / len(feats_a))


# -- trainable-student adapters (single net, or split branches) ------------

class _SingleStudent:
    def __init__(self, state: DistillState):
        self.state = state

    def forward(self, x, t, c, params=None):
        return self.state.student.forward(x, t, c, params=params)

    def wrap(self, tape: Tape) -> dict:
        return {"main": tape.wrap(self.state.student.params)}

    def tape_forward(self, wrapped, x, t, c):
        return self.state.student.forward(x, t, c, params=wrapped["main"])

    def step(self, wrapped) -> float:
        grads = grads_of(wrapped["main"])
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        self.state.opt_student.step(self.state.student.params, grads)
        return norm


class _SplitStudent:
    """Two branches owning disjoint timestep ranges, EMA-stabilized.

    The branch for t <= boundary handles the low-noise end; every forward
    at a schedule time routes to the owning branch, so each branch only
    ever receives gradients from its own range.
    """

    def __init__(self, student: VelocityNet, boundary: float, ema_beta: float,
                 lr: float):
        self.boundary = boundary
        self.ema_beta = ema_beta
        self.low = student.clone()     # t in (0, boundary]
        self.high = student.clone()    # t in (boundary, 1]
        self.low_ema = copy_params(self.low.params)
        self.high_ema = copy_params(self.high.params)
        self.opt_low = AdamW(self.low.params, lr=lr)
        self.opt_high = AdamW(self.high.params, lr=lr)

    def _branch(self, t: float) -> VelocityNet:
        return self.low if t <= self.boundary else self.high

    def forward(self, x, t, c, params=None):
        return self._branch(float(t)).forward(x, t, c, params=params)

    def wrap(self, tape: Tape) -> dict:
        return {"low": tape.wrap(self.low.params),
                "high": tape.wrap(self.high.params)}

    def tape_forward(self, wrapped, x, t, c):
        key = "low" if float(t) <= self.boundary else "high"
        return self._branch(float(t)).forward(x, t, c, params=wrapped[key])

    def step(self, wrapped) -> float:
        sq = 0.0
        for key, net, opt in (("low", self.low, self.opt_low),
                              ("high", self.high, self.opt_high)):
            leaves = wrapped[key]
            if not any(leaf.grad is not None for leaf in leaves.values()):
                continue  # branch untouched this iteration: no decay, no step
            grads = grads_of(leaves)
            sq += sum(float((g * g).sum()) for g in grads.values())
            opt.step(net.params, grads)
            if key == "low":
                self.low_ema = ema_update(self.low_ema, net.params, self.ema_beta)
            else:
                self.high_ema = ema_update(self.high_ema, net.params, self.ema_beta)
        return math.sqrt(sq)

    def merged(self, ratio: float) -> dict[str, np.ndarray]:
        return merge_interpolate(self.low_ema, self.high_ema, ratio)


# -- the stage loop ---------------------------------------------------------

def run_matching_stage(state: DistillState, bank: DiscriminatorBank | None,
                       synthetic: SyntheticSet, cfg: DistillConfig, rng: Rng,
                       iterations: int | None = None,
                       lambda_gram: float = 0.0,
                       noisier_fraction: float | None = None,
                       adapter=None) -> list[dict]:
    """Interleaved stage-2 loop.

    Per generator iteration: ``update_ratio`` rounds of proxy refit plus
    discriminator step, then one generator update combining the matching
    surrogate, the adversarial generator term and (optionally) the Gram
    term.  Returns one log row per generator iteration.
    """
    if state.stage not in ("matching", "split_ft"):
        raise ValueError(f"matching stage called in stage {state.stage!r}")
    schedule = state.schedule
    n_steps = len(schedule)
    iterations = cfg.matching_iterations if iterations is None else iterations
    frac = cfg.noisier_switch_frac if noisier_fraction is None else noisier_fraction
    switch_at = int(frac * iterations)
    adversarial = cfg.adversarial and bank is not None
    if adapter is None:
        adapter = _SingleStudent(state)
    k = state.student.cfg.n_classes
    steps_set = set(schedule.steps)
    if bank is not None:
        levels, taps = bank.cfg.t_star_levels, bank.cfg.taps
    else:
        from .adversarial import DEFAULT_T_STARS
        from .models import DEFAULT_TAPS
        levels, taps = DEFAULT_T_STARS, DEFAULT_TAPS

    r_inner = rng.substream("inner")
    r_gen = rng.substream("gen")
    r_proxy = rng.substream("proxy-fm")
    r_real = rng.substream("real-batch")
    r_feat = rng.substream("features")
    r_pick = rng.substream("target-pick")
    r_refresh = rng.substream("refresh")
    r_renoise = rng.substream("renoise")

    rows: list[dict] = []
    n_proxy = n_disc = n_gen = 0
    for it in range(iterations):
        noisier = it < switch_at
        if not valid_input_indices(n_steps, noisier_start=False):
            noisier = True  # 2-step schedules have no on-step inputs
        refreshed = 0
        if adversarial and cfg.refresh:
            refreshed = bank.refresh_heads(r_refresh)

        proxy_loss = disc_loss = 0.0
        logit_real = logit_fake = None
        for _ in range(cfg.update_ratio):
            zi = r_inner.normal((cfg.inner_batch_size, 2))
            ci = r_inner.integers(0, k, (cfg.inner_batch_size,))
            _, x0i = rollout_schedule_points(adapter, schedule, zi, ci)
            proxy_loss = proxy_update(state, x0i, ci, r_proxy)
            n_proxy += 1
            if adversarial:
                rx, rc = synthetic.minibatch(r_real, cfg.inner_batch_size)
                real_feats = collect_features(state.proxy, rx, rc,
                                              levels, taps, r_feat)
                fake_feats = collect_features(state.proxy, x0i, ci,
                                              levels, taps, r_feat)
                disc_loss, logit_real, logit_fake = bank.train_step(
                    real_feats, fake_feats)
                n_disc += 1

        # generator update
        z = r_gen.normal((cfg.batch_size, 2))
        c = r_gen.integers(0, k, (cfg.batch_size,))
        points, _ = rollout_schedule_points(adapter, schedule, z, c)
        choices = valid_input_indices(n_steps, noisier)
        input_idx = int(choices[int(r_pick.integers(0, len(choices)))])
        tape = Tape()
        wrapped = adapter.wrap(tape)

        def student_fwd(x, t, cc):
            return adapter.tape_forward(wrapped, x, t, cc)

        surr, x_theta, info = matching_surrogate(
            state, student_fwd, points, c, input_idx, cfg.normalizer_eps,
            timestep_sharing=cfg.timestep_sharing, renoise_rng=r_renoise)
        if cfg.timestep_sharing:
            assert info["t_scored"] in steps_set, \
                "score evaluated off the shared schedule"
        total = surr
        adv_loss = gram_val = 0.0
        if adversarial or lambda_gram > 0.0:
            x0_theta = _endpoint_from(x_theta, info, input_idx, schedule,
                                      student_fwd, c, cfg.timestep_sharing)
            fake_feats = collect_features(state.proxy, x0_theta, c,
                                          levels, taps, r_feat)
            if adversarial:
                g_adv = bank.gen_loss(fake_feats)
                adv_loss = float(nd.value_of(g_adv))
                total = nd.add(total, nd.scale(g_adv, cfg.lambda_adv))
            if lambda_gram > 0.0:
                rx, rc = synthetic.minibatch(r_real, cfg.batch_size)
                real_feats = collect_features(state.proxy, rx, rc,
                                              levels, taps, r_feat)
                flat_fake = [f for level in fake_feats for f in level]
                flat_real = [f for level in real_feats for f in level]
                g_gram = gram_loss(flat_real, flat_fake)
                gram_val = float(nd.value_of(g_gram))
                total = nd.add(total, nd.scale(g_gram, lambda_gram))

        for name, val in (("matching", float(surr.data)),
                          ("adversarial", adv_loss), ("gram", gram_val)):
            if not math.isfinite(val):
                raise DivergenceError(f"{name} loss non-finite at iteration {it}")
        tape.backward(total)
        grad_norm = adapter.step(wrapped)
        n_gen += 1
        state.iteration += 1
        rows.append({
            "iteration": it,
            "matching_loss": float(surr.data),
            "adv_gen_loss": adv_loss,
            "gram_loss": gram_val,
            "proxy_loss": proxy_loss,
            "disc_loss": disc_loss,
            "grad_norm": grad_norm,
            "t_input": info["t_input"],
            "t_scored": info["t_scored"],
            "noisier_start": int(noisier),
            "refreshed": refreshed,
            "proxy_updates": n_proxy,
            "disc_updates": n_disc,
            "gen_updates": n_gen,
            "logit_real_mean": float(np.mean(logit_real)) if logit_real is not None else 0.0,
            "logit_fake_mean": float(np.mean(logit_fake)) if logit_fake is not None else 0.0,
        })
    return rows


def _endpoint_from(x_theta, info, input_idx, schedule, student_fwd, c,
                   timestep_sharing):
    """Continue the gradient-carrying sample down to the t=0 endpoint."""
    if not timestep_sharing:
        return info["x0_hat"]
    x = x_theta
    for idx in range(input_idx + 1, len(schedule)):
        t = schedule.steps[idx]
        v = student_fwd(x, t, c)
        x = euler_step(x, v, t, schedule.next_time(idx))
    return x


def distill_four_step(state: DistillState, bank: DiscriminatorBank | None,
                      synthetic: SyntheticSet, cfg: DistillConfig, rng: Rng,
                      pretrain: bool = True) -> dict[str, list[dict]]:
    """Stage 1 + stage 2 on the 4-step schedule; returns the stage logs."""
    logs: dict[str, list[dict]] = {}
    if pretrain:
        logs["pretrain"] = pretrain_student(state, cfg, rng.substream("stage1"))
    else:
        state.stage = "matching"
        state.opt_student = AdamW(state.student.params, lr=cfg.student_lr)
        logs["pretrain"] = []
    logs["matching"] = run_matching_stage(
        state, bank, synthetic, cfg, rng.substream("stage2"),
        iterations=cfg.matching_iterations)
    return logs


def distill_two_step(state: DistillState, bank: DiscriminatorBank | None,
                     synthetic: SyntheticSet, cfg: DistillConfig, rng: Rng
                     ) -> list[dict]:
    """Continue a trained 4-step student toward 2-step inference.

    Swaps in the uniform 2-step schedule and reruns the matching stage
    with the Gram feature-statistics term enabled.
    """
    state.schedule = Schedule.uniform(2)
    state.stage = "matching"
    state.opt_student = AdamW(state.student.params, lr=cfg.student_lr)
    return run_matching_stage(
        state, bank, synthetic, cfg, rng.substream("2step"),
        iterations=cfg.matching_iterations_2step,
        lambda_gram=cfg.lambda_gram)


def split_timestep_finetune(state: DistillState,
                            bank: DiscriminatorBank | None,
                            synthetic: SyntheticSet, cfg: DistillConfig,
                            rng: Rng) -> VelocityNet:
    """Duplicate the student into two timestep-range branches, fine-tune,
    then fuse their EMA shadows by weight interpolation.

    Zero iterations is an exact identity.  Refused on a 2-step schedule.
    """
    if len(state.schedule) <= 2:
        raise ValueError("split fine-tuning needs more than 2 schedule steps")
    adapter = _SplitStudent(state.student, cfg.split_boundary, cfg.ema_beta,
                            cfg.student_lr)
    state.stage = "split_ft"
    if cfg.split_iterations > 0:
        run_matching_stage(state, bank, synthetic, cfg,
                           rng.substream("split"),
                           iterations=cfg.split_iterations,
                           noisier_fraction=0.0, adapter=adapter)
    merged = adapter.merged(cfg.split_ratio)
    state.student = VelocityNet(state.student.cfg, merged)
    state.stage = "matching"
    state.opt_student = AdamW(state.student.params, lr=cfg.student_lr)
    return state.student
