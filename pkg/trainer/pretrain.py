"""
Masked-token pretraining of the encoder body.

A temporary output layer predicts the original ids at masked positions; it is thrown away
afterwards. Only theta (embeddings, attention, feed-forward) and the layer norms learn.
"""
import typing

import bittensor as bt
import torch
import torch.nn.functional as F
from torch import nn

from model.encoder import BaseModel, collate
from shared.config import TrainConfig
from shared.errors import DatasetError, TrainingDivergedError
from shared.tensor_core import DTYPE, ParamStore, Rng, adam_step, backward
from tasks.datasets import TaskRegistry
from tasks.vocabulary import MASK_ID

IGNORE_INDEX = -100
PRETRAIN_GROUPS = ("theta", "layer_norm", "mlm_head")


class MaskedTokenHead(nn.Module):
    def __init__(self, model_dim: int, vocab_size: int):
        super().__init__()
        self.output = nn.Linear(model_dim, vocab_size)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.output(hidden)


def pretraining_corpus(registry: TaskRegistry) -> typing.List[typing.Tuple[int, ...]]:
    return [ex.tokens for name in registry.names() for ex in registry.get(name).train]


def mask_tokens(ids: torch.Tensor, key_mask: torch.Tensor, rate: float,
                rng: Rng) -> typing.Tuple[torch.Tensor, torch.Tensor]:
    """
    Replaces a ``rate`` share of real non-[CLS] positions with [MASK], at least one per
    sequence that has any. Returns (masked ids, targets with IGNORE_INDEX elsewhere).
    """
    candidates = key_mask.clone()
    candidates[:, 0] = False
    chosen = torch.as_tensor(rng.np.random(tuple(ids.shape)) < rate) & candidates
    for row in range(ids.shape[0]):
        if candidates[row].any() and not chosen[row].any():
            positions = torch.nonzero(candidates[row]).flatten()
            chosen[row, positions[int(rng.np.integers(len(positions)))]] = True
    masked = ids.masked_fill(chosen, MASK_ID)
    targets = ids.masked_fill(~chosen, IGNORE_INDEX)
    return masked, targets


def _masked_loss(model: BaseModel, head: MaskedTokenHead, sequences, rate: float, rng: Rng):
    ids, key_mask = collate(sequences, model.cfg)
    masked, targets = mask_tokens(ids, key_mask, rate, rng)
    _, hidden = model(masked, key_mask, return_hidden=True)
    logits = head(hidden)
    return logits, targets


def pretrain_encoder(model: BaseModel, registry: TaskRegistry, cfg: TrainConfig, rng: Rng,
                     steps: typing.Optional[int] = None) -> typing.Tuple[MaskedTokenHead, typing.List[float]]:
    steps = cfg.pretrain_steps if steps is None else steps
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.child("mlm-head").torch_seed())
        head = MaskedTokenHead(model.cfg.model_dim, model.cfg.vocab_size).to(DTYPE)
    if steps <= 0:
        bt.logging.warning("pretrain | zero pretraining steps, encoder left at its initialization")
        return head, []

    corpus = pretraining_corpus(registry)
    if not corpus:
        raise DatasetError("pretraining corpus is empty")

    store = ParamStore.from_module(model, BaseModel.param_group)
    for name, param in head.named_parameters():
        store.add(f"mlm_head.{name}", param, group="mlm_head")
    store.train_only(PRETRAIN_GROUPS)

    losses = []
    model.train()
    for step in range(steps):
        step_rng = rng.child("pretrain", step)
        torch.manual_seed(step_rng.torch_seed())
        batch = step_rng.np.choice(len(corpus), size=min(cfg.pretrain_batch_size, len(corpus)), replace=False)
        logits, targets = _masked_loss(model, head, [corpus[int(i)] for i in batch], cfg.mask_rate, step_rng)
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE_INDEX)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"pretrain | step {step} | non-finite loss {float(loss)}")
        backward(loss)
        adam_step(store, cfg.pretrain_lr, cfg.adam_betas, cfg.adam_eps)
        losses.append(float(loss))
        if step % 50 == 0 or step == steps - 1:
            bt.logging.info(f"pretrain | step {step} | loss {float(loss):.4f}")
    model.eval()
    return head, losses


def masked_token_accuracy(model: BaseModel, head: MaskedTokenHead, sequences, rate: float, rng: Rng) -> float:
    with torch.no_grad():
        logits, targets = _masked_loss(model, head, sequences, rate, rng)
    picked = targets != IGNORE_INDEX
    if not bool(picked.any()):
        return 0.0
    hits = (logits.argmax(dim=-1) == targets) & picked
    return float(hits.sum()) / float(picked.sum())
