"""Experiment orchestrator.

Each subcommand owns one run directory named ``<command>-s<seed>`` under
the configured output root, locked for the duration of the command and
rewritten in place: re-running with the same config and seed produces
byte-identical outputs.  Every run directory carries the fully resolved
config and the SHA-256 of any input checkpoints, so results are
self-describing.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .adversarial import DiscriminatorBank
from .config import ConfigError, RunConfig, config_to_dict, default_config, \
    load_config
from .distill import DistillState, distill_four_step, distill_two_step, \
    make_distill_state, split_timestep_finetune
from .flow import Schedule, sample
from .metrics import EvalConfig, data_bandwidth, evaluate_model, \
    quantization_tradeoff, run_ablation_matrix
from .models import CheckpointError, VelocityNet, load_checkpoint, \
    quantize_weights, save_checkpoint
from .report import bar_plot, line_plot, scatter_plot, write_csv
from .rng import Rng
from .teacher import DataSpec, DivergenceError, gen_data, gen_synthetic_set, \
    train_teacher


class PrerequisiteError(RuntimeError):
    """A required earlier pipeline stage is missing."""


class RunDirLocked(RuntimeError):
    """Another command currently owns this run directory."""


class _RunDir:
    """Deterministically named, locked run directory."""

    def __init__(self, cfg: RunConfig, command: str, tag: str = ""):
        name = f"{command}-s{cfg.seed}" + (f"-{tag}" if tag else "")
        self.path = Path(cfg.out_dir) / name
        self.path.mkdir(parents=True, exist_ok=True)
        self._lock = self.path / ".lock"
        self.inputs: dict[str, str] = {}
        self.cfg = cfg
        self.command = command

    def __enter__(self) -> "_RunDir":
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.close(fd)
        except FileExistsError:
            raise RunDirLocked(f"run directory {self.path} is locked "
                               f"(remove {self._lock} if stale)") from None
        return self

    def __exit__(self, *exc) -> None:
        self._lock.unlink(missing_ok=True)

    def record_input(self, label: str, path) -> None:
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        self.inputs[label] = digest

    def finalize(self) -> None:
        manifest = {
            "command": self.command,
            "seed": self.cfg.seed,
            "config": config_to_dict(self.cfg),
            "input_checksums": self.inputs,
        }
        with open(self.path / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _load_net(run: _RunDir, label: str, path) -> tuple[VelocityNet, dict]:
    net, meta = load_checkpoint(path)
    run.record_input(label, path)
    return net, meta


def _teacher_rng_state(rng: Rng) -> dict:
    return rng.get_state()


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(cfg: RunConfig) -> Path:
    with _RunDir(cfg, "gen-data") as run:
        rng = Rng(cfg.seed).substream("dataset")
        x, c = gen_data(cfg.data, cfg.eval.n_samples, rng)
        rows = [{"x": xi, "y": yi, "class": int(ci)}
                for (xi, yi), ci in zip(x, c)]
        write_csv(run.path / "dataset.csv", rows, ["x", "y", "class"])
        scatter_plot(run.path / "dataset.svg", x, c, cfg.data.centers,
                     title="ground truth samples")
        run.finalize()
        return run.path


def cmd_train_teacher(cfg: RunConfig) -> Path:
    with _RunDir(cfg, "train-teacher") as run:
        rng = Rng(cfg.seed).substream("teacher")
        net, curve = train_teacher(cfg.data, cfg.teacher, rng, cfg.model)
        meta = {
            "stage": "teacher",
            "seed": cfg.seed,
            "data": dataclasses.asdict(cfg.data),
            "cond_dropout_p": cfg.teacher.cond_dropout_p,
            "sample_steps": cfg.teacher.sample_steps,
            "rng_state": _teacher_rng_state(rng),
        }
        save_checkpoint(net, meta, run.path / "teacher.ckpt")
        write_csv(run.path / "curve.csv",
                  [{"iteration": i, "loss": v} for i, v in curve],
                  ["iteration", "loss"])
        line_plot(run.path / "curve.svg",
                  {"loss": ([i for i, _ in curve], [v for _, v in curve])},
                  title="teacher flow-matching loss", xlabel="iteration",
                  ylabel="loss", logy=True)
        run.finalize()
        return run.path


def _make_synthetic(cfg: RunConfig, teacher: VelocityNet, teacher_meta: dict):
    rng = Rng(cfg.seed).substream("synthetic")
    has_null = teacher_meta.get("cond_dropout_p", 0.0) > 0.0
    return gen_synthetic_set(teacher, cfg.synthetic.n, rng,
                             steps=cfg.synthetic.steps,
                             guidance_scale=cfg.synthetic.guidance_scale,
                             has_null=has_null)


def cmd_distill(cfg: RunConfig, teacher_path, target_steps: int = 4,
                student_path=None, no_adv: bool = False,
                no_pretrain: bool = False, no_timestep_sharing: bool = False,
                no_refresh: bool = False, split_ft: bool = False) -> Path:
    tag = f"{target_steps}step"
    for flag, name in ((no_adv, "noadv"), (no_pretrain, "nopre"),
                       (no_timestep_sharing, "nots"), (no_refresh, "noref"),
                       (split_ft, "split")):
        if flag:
            tag += f"-{name}"
    with _RunDir(cfg, "distill", tag) as run:
        teacher, teacher_meta = _load_net(run, "teacher", teacher_path)
        if teacher_meta.get("stage") != "teacher":
            raise PrerequisiteError(
                f"{teacher_path} is not a teacher checkpoint")
        dcfg = dataclasses.replace(
            cfg.distill,
            adversarial=cfg.distill.adversarial and not no_adv,
            timestep_sharing=cfg.distill.timestep_sharing
            and not no_timestep_sharing,
            refresh=cfg.distill.refresh and not no_refresh,
        )
        rng = Rng(cfg.seed).substream("distill")
        synthetic = _make_synthetic(cfg, teacher, teacher_meta)
        bank = None
        if dcfg.adversarial:
            bank = DiscriminatorBank(cfg.bank, rng.substream("bank"))

        if target_steps == 2:
            if student_path is None:
                raise PrerequisiteError(
                    "2-step distillation starts from a 4-step student "
                    "checkpoint; pass --student")
            student, student_meta = _load_net(run, "student", student_path)
            if not str(student_meta.get("stage", "")).startswith("student4"):
                raise PrerequisiteError(
                    f"{student_path} is not a 4-step student checkpoint")
            state = make_distill_state(teacher, 4, dcfg)
            state.student = student
            state.proxy = student.clone()
            state.stage = "matching"
            from .optim import AdamW
            state.opt_student = AdamW(state.student.params, lr=dcfg.student_lr)
            state.opt_proxy = AdamW(state.proxy.params, lr=dcfg.proxy_lr)
            rows = distill_two_step(state, bank, synthetic, dcfg, rng)
            logs = {"matching": rows, "pretrain": []}
            stage_name = "student2"
        else:
            state = make_distill_state(teacher, 4, dcfg)
            logs = distill_four_step(state, bank, synthetic, dcfg, rng,
                                     pretrain=not no_pretrain)
            stage_name = "student4"
            if split_ft:
                split_timestep_finetune(state, bank, synthetic, dcfg, rng)
                stage_name = "student4_split"

        meta = {
            "stage": stage_name,
            "seed": cfg.seed,
            "n_steps": len(state.schedule),
            "flags": {"no_adv": no_adv, "no_pretrain": no_pretrain,
                      "no_timestep_sharing": no_timestep_sharing,
                      "no_refresh": no_refresh, "split_ft": split_ft},
            "rng_state": rng.get_state(),
        }
        save_checkpoint(state.student, meta, run.path / "student.ckpt")
        if logs["pretrain"]:
            write_csv(run.path / "pretrain_log.csv", logs["pretrain"])
        if logs["matching"]:
            write_csv(run.path / "matching_log.csv", logs["matching"])
            line_plot(run.path / "losses.svg",
                      {"matching": ([r["iteration"] for r in logs["matching"]],
                                    [r["matching_loss"] for r in logs["matching"]]),
                       "proxy": ([r["iteration"] for r in logs["matching"]],
                                 [r["proxy_loss"] for r in logs["matching"]])},
                      title="matching stage losses", xlabel="iteration")
        run.finalize()
        return run.path


def _schedule_for(meta: dict, cfg: RunConfig, steps_override=None) -> Schedule:
    if steps_override:
        return Schedule.uniform(steps_override)
    if meta.get("stage") == "teacher":
        return Schedule.uniform(meta.get("sample_steps", cfg.teacher.sample_steps))
    return Schedule.uniform(int(meta.get("n_steps", 4)))


def cmd_eval(cfg: RunConfig, checkpoint_path, steps: int | None = None) -> Path:
    with _RunDir(cfg, "eval") as run:
        net, meta = _load_net(run, "checkpoint", checkpoint_path)
        schedule = _schedule_for(meta, cfg, steps)
        bw = data_bandwidth(cfg.data, cfg.eval.n_samples, cfg.seed)
        reports = []
        for seed in cfg.eval.seeds:
            rep = evaluate_model(net, cfg.data, schedule,
                                 cfg.eval.n_samples, seed, bandwidth=bw,
                                 eval_cfg=cfg.eval,
                                 meta={"stage": meta.get("stage", "?")})
            reports.append(rep.as_row())
        write_csv(run.path / "metrics.csv", reports)
        rng = Rng(cfg.seed).substream("eval-plot")
        z = rng.normal((2000, 2))
        c = rng.integers(0, cfg.data.n_classes, (2000,))
        traj = sample(net, schedule, z, c)
        scatter_plot(run.path / "samples.svg", traj[-1].x_t, c,
                     cfg.data.centers,
                     title=f"{meta.get('stage', '?')} samples "
                           f"({len(schedule)} steps)")
        run.finalize()
        return run.path


def cmd_ablate(cfg: RunConfig, teacher_path) -> Path:
    with _RunDir(cfg, "ablate") as run:
        teacher, teacher_meta = _load_net(run, "teacher", teacher_path)
        synthetic = _make_synthetic(cfg, teacher, teacher_meta)
        reports = run_ablation_matrix(teacher, cfg.data, synthetic,
                                      cfg.distill, cfg.bank, cfg.eval)
        rows = [r.as_row() for r in reports]
        write_csv(run.path / "ablation.csv", rows)
        variants: dict[str, list[float]] = {}
        for r in rows:
            variants.setdefault(r["variant"], []).append(r["mmd2"])
        labels = list(variants)
        medians = [float(np.median(v)) for v in variants.values()]
        bar_plot(run.path / "ablation.svg", labels, medians,
                 title="ablation matrix (median MMD^2)", ylabel="MMD^2")
        run.finalize()
        return run.path


def cmd_quantize(cfg: RunConfig, checkpoint_path, bits: int) -> Path:
    with _RunDir(cfg, "quantize", f"{bits}bit") as run:
        net, meta = _load_net(run, "checkpoint", checkpoint_path)
        qnet = quantize_weights(net, bits)
        meta = dict(meta)
        meta["stage"] = f"{meta.get('stage', 'model')}_q{bits}"
        save_checkpoint(qnet, meta, run.path / "quantized.ckpt")
        schedule = _schedule_for(meta, cfg)
        rows = quantization_tradeoff(net, cfg.data, schedule, cfg.eval,
                                     bits_list=(64, bits), seed=cfg.seed)
        write_csv(run.path / "tradeoff.csv", rows)
        run.finalize()
        return run.path


def cmd_sample(cfg: RunConfig, checkpoint_path, n: int, steps: int | None,
               guidance: float, seed: int) -> Path:
    cfg = dataclasses.replace(cfg, seed=seed)
    with _RunDir(cfg, "sample") as run:
        net, meta = _load_net(run, "checkpoint", checkpoint_path)
        schedule = _schedule_for(meta, cfg, steps)
        rng = Rng(seed).substream("sample")
        z = rng.normal((n, 2))
        c = rng.integers(0, net.cfg.n_classes, (n,))
        traj = sample(net, schedule, z, c, guidance)
        x = traj[-1].x_t
        rows = [{"x": xi, "y": yi, "class": int(ci)}
                for (xi, yi), ci in zip(x, c)]
        write_csv(run.path / "samples.csv", rows, ["x", "y", "class"])
        scatter_plot(run.path / "samples.svg", x, c, cfg.data.centers,
                     title=f"samples ({len(schedule)} steps, w={guidance})")
        run.finalize()
        return run.path


# ---------------------------------------------------------------------------

def _add_config_arg(p):
    p.add_argument("--config", help="path to a JSON run config "
                                    "(defaults apply when omitted)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowlab",
        description="few-step rectified-flow distillation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a ground-truth dataset")
    _add_config_arg(p)

    p = sub.add_parser("train-teacher", help="flow-matching teacher training")
    _add_config_arg(p)

    p = sub.add_parser("distill", help="few-step distillation")
    _add_config_arg(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--target-steps", type=int, choices=(4, 2), default=4)
    p.add_argument("--student", help="4-step student checkpoint "
                                     "(required for --target-steps 2)")
    p.add_argument("--no-adv", action="store_true")
    p.add_argument("--no-pretrain", action="store_true")
    p.add_argument("--no-timestep-sharing", action="store_true")
    p.add_argument("--no-refresh", action="store_true")
    p.add_argument("--split-ft", action="store_true")

    p = sub.add_parser("eval", help="metric report for a checkpoint")
    _add_config_arg(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("ablate", help="full ablation matrix")
    _add_config_arg(p)
    p.add_argument("--teacher", required=True)

    p = sub.add_parser("quantize", help="quantize a checkpoint and report")
    _add_config_arg(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bits", type=int, choices=(6, 8, 16), required=True)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    _add_config_arg(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else default_config()
        if args.command == "gen-data":
            out = cmd_gen_data(cfg)
        elif args.command == "train-teacher":
            out = cmd_train_teacher(cfg)
        elif args.command == "distill":
            out = cmd_distill(cfg, args.teacher, args.target_steps,
                              args.student, args.no_adv, args.no_pretrain,
                              args.no_timestep_sharing, args.no_refresh,
                              args.split_ft)
        elif args.command == "eval":
            out = cmd_eval(cfg, args.checkpoint, args.steps)
        elif args.command == "ablate":
            out = cmd_ablate(cfg, args.teacher)
        elif args.command == "quantize":
            out = cmd_quantize(cfg, args.checkpoint, args.bits)
        elif args.command == "sample":
            out = cmd_sample(cfg, args.checkpoint, args.n, args.steps,
                             args.guidance, args.seed)
        else:  # pragma: no cover
            raise AssertionError(args.command)
    except (ConfigError, CheckpointError, PrerequisiteError, DivergenceError,
            RunDirLocked, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
