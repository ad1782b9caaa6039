"""
k-shot evaluation: per run a k-shot support set from the task's train pool, prototypes
(adapted for conditioned models), then the whole test pool is classified.
"""
import typing

import bittensor as bt
import torch

from model.adaptation import TaskConditionedModel, prototype_logits
from model.encoder import BaseModel
from shared.errors import DatasetError, RoleViolationError
from shared.grad2task_protocol import EvalReport, EvalRow, Episode
from shared.tensor_core import Rng
from tasks.datasets import TaskRegistry
from tasks.episodes import sample_episode

Evaluable = typing.Union[BaseModel, TaskConditionedModel]


def accuracy(predictions: torch.Tensor, labels) -> float:
    """Share of matching labels; ``predictions`` are class ids (Q,) or logits (Q, C)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if predictions.dim() == 2:
        predictions = predictions.argmax(dim=-1)
    if predictions.shape != labels.shape:
        raise DatasetError(f"{tuple(predictions.shape)} predictions for {tuple(labels.shape)} labels")
    if labels.numel() == 0:
        raise DatasetError("accuracy over an empty test pool")
    return float((predictions == labels).sum()) / labels.numel()


def predict_logits(model: Evaluable, episode: Episode, query, rng: Rng, batch_size: int = 64) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if isinstance(model, TaskConditionedModel):
                return model.episode_logits(episode, rng, query)
            return prototype_logits(model, episode, query, batch_size=batch_size)
    finally:
        model.train(was_training)


def check_roles(registry: TaskRegistry, tasks: typing.Sequence[str], allow_overlap: bool):
    for name in tasks:
        role = registry.role(name)
        if role != "meta-test" and not allow_overlap:
            raise RoleViolationError(f"task '{name}' is tagged {role}; evaluating it as a test task "
                                     f"needs --allow-overlap")


def evaluate_kshot(model: Evaluable, registry: TaskRegistry, k: int, runs: int, rng: Rng,
                   variant: str = "protonet", tasks: typing.Optional[typing.Sequence[str]] = None,
                   allow_overlap: bool = False, batch_size: int = 64) -> EvalReport:
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    tasks = list(registry.names("meta-test") if tasks is None else tasks)
    check_roles(registry, tasks, allow_overlap)

    report = EvalReport()
    for name in tasks:
        dataset = registry.get(name)
        if not dataset.test:
            raise DatasetError(f"{name}: empty test pool")
        labels = [ex.label for ex in dataset.test]
        accuracies = []
        for run in range(runs):
            run_rng = rng.child("kshot", name, k, run)
            episode = sample_episode(dataset, k, 0, run_rng, split="train")
            logits = predict_logits(model, episode, dataset.test, run_rng.child("features"), batch_size)
            accuracies.append(accuracy(logits, labels))
        row = EvalRow.from_accuracies(variant, name, k, accuracies)
        bt.logging.info(f"eval | {variant} | {name} | k={k} | mean {row.mean:.4f} | std {row.std:.4f} | runs {runs}")
        report.rows.append(row)
    return report


def evaluate_shots(model: Evaluable, registry: TaskRegistry, shots: typing.Sequence[int], runs: int, rng: Rng,
                   variant: str = "protonet", allow_overlap: bool = False, batch_size: int = 64,
                   tasks: typing.Optional[typing.Sequence[str]] = None) -> EvalReport:
    report = EvalReport()
    for k in shots:
        report.extend(evaluate_kshot(model, registry, k, runs, rng, variant, tasks, allow_overlap, batch_size))
    return report


def format_table(report: EvalReport) -> str:
    """Aligned text table of a report, one line per (variant, task, k)."""
    header = ("variant", "task", "k", "mean", "std", "runs")
    lines = [header] + [(r.variant, r.task, str(r.k), f"{r.mean:.4f}", f"{r.std:.4f}", str(r.runs))
                        for r in report.rows]
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in lines) + "\n"
