"""
Ablation orchestration. Every variant starts from the same stage-1 checkpoint; the
stage-1 model itself is reported as the ``protonet`` baseline row.
"""
import os
import typing

import bittensor as bt

from evaluator.kshot import evaluate_shots
from model.adaptation import build_task_conditioned_model
from model.encoder import build_base_model
from shared.config import RunConfig
from shared.errors import UnknownVariantError
from shared.grad2task_protocol import EvalReport
from shared.tensor_core import Rng
from tasks.datasets import TaskRegistry
from trainer.episodic import checkpoint, continue_stage1, last_checkpoint_path, steps_per_epoch, train_stage2
from trainer.metrics import MetricsLogger

VARIANTS = ("grad2task", "pn-longer", "x", "x-and-y", "adapt-all", "hypernet")
BASELINE = "protonet"


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise UnknownVariantError(f"unknown variant '{variant}'; valid variants: {', '.join(VARIANTS)}")
    return variant


def matched_extra_steps(registry: TaskRegistry, cfg: RunConfig) -> int:
    """Stage-2 step budget, the default number of extra steps for ProtoNet longer training."""
    if cfg.train.extra_steps is not None:
        return cfg.train.extra_steps
    if cfg.train.max_steps is not None:
        return cfg.train.max_steps
    return cfg.train.max_epochs * steps_per_epoch(registry.subset("meta-train"), cfg.train)


def ablation_checkpoint_path(out_dir: typing.Optional[str], variant: str) -> typing.Optional[str]:
    return os.path.join(out_dir, f"ablate-{variant}.ckpt") if out_dir else None


def _discard_stale(path: typing.Optional[str]):
    if path is None:
        return
    for stale in (path, last_checkpoint_path(path)):
        if os.path.isfile(stale):
            os.remove(stale)


def load_stage1(cfg: RunConfig, stage1_checkpoint: str, rng: Rng):
    base = build_base_model(cfg.encoder, rng.child("base"))
    checkpoint("load", base, stage1_checkpoint)
    base.eval()
    return base


def evaluate_baseline(stage1_checkpoint: str, registry: TaskRegistry, cfg: RunConfig, rng: Rng) -> EvalReport:
    base = load_stage1(cfg, stage1_checkpoint, rng)
    return evaluate_shots(base, registry, cfg.eval.shots, cfg.eval.runs, rng.child("eval"), BASELINE,
                          cfg.eval.allow_overlap, cfg.eval.batch_size)


def run_ablation(variant: str, stage1_checkpoint: str, registry: TaskRegistry, cfg: RunConfig, rng: Rng,
                 out_dir: typing.Optional[str] = None) -> EvalReport:
    check_variant(variant)
    base = load_stage1(cfg, stage1_checkpoint, rng)
    metrics = MetricsLogger(os.path.join(out_dir, f"metrics-ablate-{variant}.csv") if out_dir else None)
    checkpoint_path = ablation_checkpoint_path(out_dir, variant)
    _discard_stale(checkpoint_path)
    train_cfg = cfg.train.model_copy(update={"checkpoint_path": checkpoint_path})

    if variant == "pn-longer":
        extra = matched_extra_steps(registry, cfg)
        bt.logging.info(f"ablate | pn-longer | {extra} extra stage-1 steps")
        continue_stage1(base, registry, train_cfg, rng.child("ablate", variant), extra, metrics, cfg.eval.batch_size)
        model = base
    else:
        cond = cfg.conditioning.model_copy(update={"variant": variant})
        model = build_task_conditioned_model(base, cond, rng.child("conditioning", variant),
                                             cfg.train.subsample_rounds, registry.vocab, cfg.eval.batch_size)
        train_stage2(model, registry, train_cfg, rng.child("ablate", variant), metrics)

    if checkpoint_path is not None and os.path.isfile(checkpoint_path):
        checkpoint("load", model, checkpoint_path)
        bt.logging.info(f"ablate | {variant} | evaluating best checkpoint {checkpoint_path}")
    model.eval()

    report = evaluate_shots(model, registry, cfg.eval.shots, cfg.eval.runs, rng.child("eval"), variant,
                            cfg.eval.allow_overlap, cfg.eval.batch_size)
    bt.logging.success(f"ablate | {variant} | mean accuracy {report.mean_accuracy(variant):.4f}")
    return report


def run_ablations(variants: typing.Sequence[str], stage1_checkpoint: str, registry: TaskRegistry, cfg: RunConfig,
                  rng: Rng, out_dir: typing.Optional[str] = None, include_baseline: bool = True) -> EvalReport:
    for variant in variants:
        check_variant(variant)
    report = EvalReport()
    if include_baseline:
        report.extend(evaluate_baseline(stage1_checkpoint, registry, cfg, rng))
    for variant in variants:
        bt.logging.info(f"ablate | running {variant}")
        report.extend(run_ablation(variant, stage1_checkpoint, registry, cfg, rng, out_dir))
    return report
