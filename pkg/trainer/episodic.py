"""
Two-stage episodic training.

Stage 1 trains adapters, layer norms and the output head of the base model with the
prototypical loss. Stage 2 freezes the whole base model and trains only the task
representation and adaptation networks with the loss of the adapted model.

Step ``s`` of stage ``n`` draws all of its randomness from ``Rng(seed).child(stage_n, s)``
(task choice, episodes, pseudo-labels, dropout), so a run resumed from a checkpoint
replays exactly the steps an uninterrupted run would have taken.
"""
import math
import typing
from dataclasses import dataclass, field

import bittensor as bt
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from model.adaptation import CONDITIONING_GROUPS, TaskConditionedModel, prototype_logits
from model.encoder import BaseModel
from model.proto_classifier import episode_accuracy
from shared.checkpoint import load_checkpoint, save_checkpoint
from shared.config import TrainConfig
from shared.errors import (DatasetError, FrozenParameterError, IdentityInitError, InsufficientExamplesError,
                           TrainingDivergedError)
from shared.grad2task_protocol import Episode
from shared.tensor_core import ParamStore, Rng, adam_step, backward
from tasks.datasets import TaskRegistry
from tasks.episodes import sample_episode, sample_task
from trainer.metrics import MetricsLogger

STAGE1_GROUPS = ("adapter", "layer_norm", "head")
BASE_GROUPS = ("theta",) + STAGE1_GROUPS
LAST_SUFFIX = ".last"


@dataclass
class TrainResult:
    stage: int
    steps: int
    epochs: int
    best_val_accuracy: float
    last_val_loss: float
    history: typing.List[typing.Dict[str, float]] = field(default_factory=list)
    checkpoint_path: typing.Optional[str] = None
    stopped_early: bool = False


def last_checkpoint_path(path: str) -> str:
    return path + LAST_SUFFIX


def steps_per_epoch(registry: TaskRegistry, cfg: TrainConfig) -> int:
    """Episodes per epoch cover roughly as many examples as the meta-train pools hold."""
    if cfg.steps_per_epoch is not None:
        return max(1, cfg.steps_per_epoch)
    per_episode = np.mean([registry.get(n).num_classes * (cfg.shots + cfg.query_k) for n in registry.names()])
    return max(1, int(round(registry.total_train_examples() / (per_episode * cfg.episodes_per_step))))


def validation_episodes(registry: TaskRegistry, cfg: TrainConfig, rng: Rng) -> typing.List[Episode]:
    """A fixed set of episodes from the val pools of every meta-train task."""
    episodes = []
    for name in registry.names():
        dataset = registry.get(name)
        task_rng = rng.child("validation", name)
        for i in range(cfg.val_episodes_per_task):
            try:
                episodes.append(sample_episode(dataset, cfg.shots, cfg.query_k, task_rng.child(i), split="val"))
            except InsufficientExamplesError as e:
                bt.logging.warning(f"validation | {name} | {e}; using fewer validation episodes")
                break
    return episodes


def _meta_train(registry: TaskRegistry) -> TaskRegistry:
    sub = registry.subset("meta-train")
    if len(sub) == 0:
        raise DatasetError("registry holds no meta-train tasks")
    return sub


def _validate(logits_fn: typing.Callable[[Episode, int], torch.Tensor],
              episodes: typing.Sequence[Episode]) -> typing.Tuple[float, float, typing.Dict[str, typing.Tuple[float, float]]]:
    per_task: typing.Dict[str, typing.List[typing.Tuple[float, float]]] = {}
    with torch.no_grad():
        for i, episode in enumerate(episodes):
            logits = logits_fn(episode, i)
            labels = torch.as_tensor([ex.label for ex in episode.query], dtype=torch.long)
            loss = float(F.cross_entropy(logits, labels))
            per_task.setdefault(episode.task_name, []).append((loss, episode_accuracy(logits, labels)))
    summary = {task: (float(np.mean([l for l, _ in v])), float(np.mean([a for _, a in v])))
               for task, v in per_task.items()}
    losses = [l for v in per_task.values() for l, _ in v]
    accs = [a for v in per_task.values() for _, a in v]
    return float(np.mean(losses)), float(np.mean(accs)), summary


def _run_episodic(stage_tag: str, module: nn.Module, store: ParamStore, groups: typing.Sequence[str],
                  episode_loss: typing.Callable[[Episode, Rng], typing.Tuple[torch.Tensor, float]],
                  validate: typing.Callable[[], typing.Tuple[float, float, dict]],
                  registry: TaskRegistry, cfg: TrainConfig, rng: Rng, metrics: MetricsLogger,
                  checkpoint_path: typing.Optional[str], resume_from: typing.Optional[str],
                  max_steps: typing.Optional[int], after_backward=None) -> TrainResult:
    stage = int(stage_tag[-1]) if stage_tag[-1].isdigit() else 1
    store.train_only(groups)
    global_step, best, bad_epochs = 0, -math.inf, 0
    if resume_from is not None:
        meta = load_checkpoint(store, resume_from)
        global_step = int(meta.get("global_step", 0))
        best = meta.get("best_val_accuracy", -math.inf)
        bad_epochs = int(meta.get("bad_epochs", 0))
        bt.logging.info(f"{stage_tag} | resumed from {resume_from} at step {global_step}")

    per_epoch = steps_per_epoch(registry, cfg)
    total_steps = max_steps if max_steps is not None else cfg.max_epochs * per_epoch
    result = TrainResult(stage=stage, steps=global_step, epochs=0, best_val_accuracy=best,
                         last_val_loss=math.nan, checkpoint_path=checkpoint_path)
    bt.logging.info(f"{stage_tag} | {len(registry)} tasks | {per_epoch} steps per epoch | "
                    f"{total_steps} steps | trainable {len(store.trainable_names())} tensors")

    def meta():
        return {"global_step": global_step, "best_val_accuracy": best, "bad_epochs": bad_epochs, "stage": stage}

    while global_step < total_steps:
        step_rng = rng.child(stage_tag, global_step)
        torch.manual_seed(step_rng.torch_seed())
        module.train()
        losses, accs = [], []
        for m in range(cfg.episodes_per_step):
            episode_rng = step_rng.child("episode", m)
            task = sample_task(registry, episode_rng)
            episode = sample_episode(registry.get(task), cfg.shots, cfg.query_k, episode_rng)
            loss, acc = episode_loss(episode, episode_rng.child("features"))
            if not bool(torch.isfinite(loss)):
                raise TrainingDivergedError(f"{stage_tag} | step {global_step} | task {task} | "
                                            f"non-finite loss {float(loss)}")
            backward(loss / cfg.episodes_per_step)
            losses.append(float(loss))
            accs.append(acc)
        if after_backward is not None:
            after_backward()
        adam_step(store, cfg.lr, cfg.adam_betas, cfg.adam_eps)
        global_step += 1
        epoch = math.ceil(global_step / per_epoch)
        metrics.log(global_step, epoch, "train", "all", float(np.mean(losses)), float(np.mean(accs)))
        bt.logging.debug(f"{stage_tag} | step {global_step} | loss {np.mean(losses):.4f}")

        if global_step % per_epoch and global_step != total_steps:
            continue
        module.eval()
        val_loss, val_acc, per_task = validate()
        for task, (task_loss, task_acc) in sorted(per_task.items()):
            metrics.log(global_step, epoch, "val", task, task_loss, task_acc)
        metrics.log(global_step, epoch, "val", "all", val_loss, val_acc)
        result.history.append({"step": global_step, "epoch": epoch, "val_loss": val_loss, "val_accuracy": val_acc})
        result.last_val_loss = val_loss
        result.epochs = epoch
        bt.logging.info(f"{stage_tag} | epoch {epoch} | step {global_step} | val loss {val_loss:.4f} | "
                        f"val accuracy {val_acc:.4f}")

        if val_acc > best:
            best, bad_epochs = val_acc, 0
            if checkpoint_path is not None:
                save_checkpoint(store, checkpoint_path, meta())
        else:
            bad_epochs += 1
        if checkpoint_path is not None:
            save_checkpoint(store, last_checkpoint_path(checkpoint_path), meta())
        if bad_epochs >= cfg.patience:
            bt.logging.info(f"{stage_tag} | early stop after {bad_epochs} epochs without improvement")
            result.stopped_early = True
            break

    module.eval()
    result.steps = global_step
    result.best_val_accuracy = best
    bt.logging.success(f"{stage_tag} | done after {global_step} steps | best val accuracy {best:.4f}")
    return result


def stage1_loss(base: BaseModel, episode: Episode, batch_size: int = 64) -> typing.Tuple[torch.Tensor, float]:
    logits = prototype_logits(base, episode, batch_size=batch_size)
    labels = torch.as_tensor([ex.label for ex in episode.query], dtype=torch.long)
    return F.cross_entropy(logits, labels), episode_accuracy(logits.detach(), labels)


def stage1_validation_loss(base: BaseModel, episodes: typing.Sequence[Episode], batch_size: int = 64):
    base.eval()
    return _validate(lambda episode, _: prototype_logits(base, episode, batch_size=batch_size), episodes)


def train_stage1(model: BaseModel, registry: TaskRegistry, cfg: TrainConfig, rng: Rng,
                 metrics: typing.Optional[MetricsLogger] = None, resume_from: typing.Optional[str] = None,
                 max_steps: typing.Optional[int] = None, stage_tag: str = "stage1",
                 batch_size: int = 64) -> TrainResult:
    """Prototypical training of adapters, layer norms and the output head."""
    registry = _meta_train(registry)
    metrics = metrics or MetricsLogger()
    store = ParamStore.from_module(model, BaseModel.param_group)
    val_episodes = validation_episodes(registry, cfg, rng)
    return _run_episodic(
        stage_tag, model, store, STAGE1_GROUPS,
        lambda episode, _: stage1_loss(model, episode, batch_size),
        lambda: stage1_validation_loss(model, val_episodes, batch_size),
        registry, cfg, rng, metrics, cfg.checkpoint_path, resume_from,
        cfg.max_steps if max_steps is None else max_steps)


def continue_stage1(model: BaseModel, registry: TaskRegistry, cfg: TrainConfig, rng: Rng, extra_steps: int,
                    metrics: typing.Optional[MetricsLogger] = None, batch_size: int = 64) -> TrainResult:
    """ProtoNet longer training: ``extra_steps`` more stage-1 steps on a fresh optimizer."""
    if extra_steps <= 0:
        bt.logging.info("stage1-extra | no extra steps requested")
        return TrainResult(stage=1, steps=0, epochs=0, best_val_accuracy=math.nan, last_val_loss=math.nan)
    return train_stage1(model, registry, cfg, rng.child("continue"), metrics, max_steps=extra_steps,
                        stage_tag="stage1-extra", batch_size=batch_size)


def check_identity_init(model: TaskConditionedModel, episodes: typing.Sequence[Episode], rng: Rng):
    """The untrained conditioning must leave every prediction of the base model unchanged."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for i, episode in enumerate(episodes):
            adapted = model.episode_logits(episode, rng.child("identity", i))
            plain = model.base_logits(episode)
            if not torch.equal(adapted, plain):
                diff = float((adapted - plain).abs().max())
                raise IdentityInitError(f"{episode.task_name}: adapted logits differ from the base model "
                                        f"by {diff:g} before training")
    model.train(was_training)


def assert_base_untouched(model: TaskConditionedModel):
    for name, param in model.base.named_parameters():
        if param.grad is not None:
            raise FrozenParameterError(f"frozen base parameter '{name}' received a gradient")


def stage2_loss(model: TaskConditionedModel, episode: Episode, rng: Rng) -> typing.Tuple[torch.Tensor, float]:
    logits = model.episode_logits(episode, rng)
    labels = torch.as_tensor([ex.label for ex in episode.query], dtype=torch.long)
    return F.cross_entropy(logits, labels), episode_accuracy(logits.detach(), labels)


def stage2_validation_loss(model: TaskConditionedModel, episodes: typing.Sequence[Episode], rng: Rng):
    model.eval()
    return _validate(lambda episode, i: model.episode_logits(episode, rng.child("val-features", i)), episodes)


def train_stage2(model: TaskConditionedModel, registry: TaskRegistry, cfg: TrainConfig, rng: Rng,
                 metrics: typing.Optional[MetricsLogger] = None, resume_from: typing.Optional[str] = None,
                 max_steps: typing.Optional[int] = None, verify_identity: bool = True) -> TrainResult:
    """Trains the task representation and adaptation networks on top of the frozen base model."""
    registry = _meta_train(registry)
    metrics = metrics or MetricsLogger()
    store = ParamStore.from_module(model, TaskConditionedModel.param_group)
    store.train_only(CONDITIONING_GROUPS)
    val_episodes = validation_episodes(registry, cfg, rng)
    if verify_identity and resume_from is None:
        check_identity_init(model, val_episodes[:4], rng)
        bt.logging.info(f"stage2 | {model.variant} | identity initialization verified")
    frozen = store.names_in(BASE_GROUPS)
    base_digest = store.digest(frozen)
    result = _run_episodic(
        "stage2", model, store, CONDITIONING_GROUPS,
        lambda episode, episode_rng: stage2_loss(model, episode, episode_rng),
        lambda: stage2_validation_loss(model, val_episodes, rng),
        registry, cfg, rng, metrics, cfg.checkpoint_path, resume_from,
        cfg.max_steps if max_steps is None else max_steps,
        after_backward=lambda: assert_base_untouched(model))
    if store.digest(frozen) != base_digest:
        raise FrozenParameterError(f"stage2 | {model.variant} | frozen base parameters changed during training")
    return result


def stage_store(module: nn.Module) -> ParamStore:
    group_of = TaskConditionedModel.param_group if isinstance(module, TaskConditionedModel) else BaseModel.param_group
    return ParamStore.from_module(module, group_of)


def checkpoint(action: str, module: nn.Module, path: str, meta: typing.Optional[typing.Dict[str, float]] = None,
               strict: bool = True) -> typing.Dict[str, float]:
    """save | load the parameters of a base or task-conditioned model; requires_grad flags survive."""
    if action not in ("save", "load"):
        raise ValueError(f"checkpoint action must be save or load, got {action!r}")
    trainable = {n: p.requires_grad for n, p in module.named_parameters()}
    store = stage_store(module)
    try:
        if action == "save":
            save_checkpoint(store, path, meta)
            return dict(meta or {})
        return load_checkpoint(store, path, strict=strict)
    finally:
        for name, param in module.named_parameters():
            param.requires_grad_(trainable[name])
