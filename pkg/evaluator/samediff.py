"""
Same / different task classification on gradient features.

Two few-shot datasets are summarized by their mean-pooled Fisher features; one linear map
W (shared by both sides) projects them, the cosine of the projections goes through an
affine and a sigmoid, and the classifier is trained with binary cross entropy.
"""
import typing
from dataclasses import dataclass

import bittensor as bt
import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import roc_auc_score
from torch import nn

from model.encoder import BaseModel
from model.task_embedding import fim_diag_features
from shared.config import ConditioningConfig, SameDiffConfig
from shared.errors import DatasetError, UndefinedMetricError
from shared.grad2task_protocol import Episode
from shared.tensor_core import DTYPE, ParamStore, Rng, adam_step, backward, ensure_finite
from tasks.datasets import TaskRegistry
from tasks.episodes import sample_episode


@dataclass
class SameDiffPair:
    first: torch.Tensor
    second: torch.Tensor
    same: int
    tasks: typing.Tuple[str, str]


@dataclass
class SameDiffResult:
    shots: int
    auc: float
    train_pairs: int
    eval_pairs: int


class SameDiffModel(nn.Module):
    def __init__(self, in_dim: int, proj_dim: int = 16):
        super().__init__()
        self.proj = nn.Linear(in_dim, proj_dim, bias=False)
        self.scale = nn.Parameter(torch.ones(()))
        self.bias = nn.Parameter(torch.zeros(()))

    def cosine(self, first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
        a, b = self.proj(first), self.proj(second)
        dot = (a * b).sum(dim=-1)
        norms = (a * a).sum(dim=-1) * (b * b).sum(dim=-1)
        return ensure_finite(dot / torch.sqrt(norms), "cosine similarity")

    def forward(self, first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
        """Probability that both feature vectors come from the same task."""
        return torch.sigmoid(self.scale * self.cosine(first, second) + self.bias)


def episode_features(base: BaseModel, episode: Episode, rounds: int, rng: Rng,
                     cond: typing.Optional[ConditioningConfig] = None) -> torch.Tensor:
    cond = cond or ConditioningConfig()
    feats = fim_diag_features(base, episode, rounds, rng, cond.proto_per_class, cond.probe_size, cond.fisher_mode)
    return feats.pooled()


def build_samediff_pairs(base: BaseModel, registry: TaskRegistry, role: str, k: int, num_pairs: int, rng: Rng,
                         rounds: int = 1, cond: typing.Optional[ConditioningConfig] = None) -> typing.List[SameDiffPair]:
    """Alternating same / different pairs of k-shot datasets from tasks tagged ``role``."""
    names = registry.names(role)
    if len(names) < 2:
        raise DatasetError(f"same/different pairs need at least 2 {role} tasks, found {len(names)}")
    pairs = []
    for i in range(num_pairs):
        pair_rng = rng.child("pair", role, k, i)
        same = int(i % 2 == 0)
        if same:
            name = names[int(pair_rng.np.integers(len(names)))]
            both = sample_episode(registry.get(name), k, k, pair_rng)
            first = Episode(name, both.support, [], k, both.num_classes, both.class_names)
            second = Episode(name, [ex for ex in both.query], [], k, both.num_classes, both.class_names)
        else:
            a, b = pair_rng.np.choice(len(names), size=2, replace=False)
            first = sample_episode(registry.get(names[int(a)]), k, 0, pair_rng.child("first"))
            second = sample_episode(registry.get(names[int(b)]), k, 0, pair_rng.child("second"))
        pairs.append(SameDiffPair(
            first=episode_features(base, first, rounds, pair_rng.child("features", 0), cond),
            second=episode_features(base, second, rounds, pair_rng.child("features", 1), cond),
            same=same, tasks=(first.task_name, second.task_name)))
    return pairs


def _rescale(features: torch.Tensor) -> torch.Tensor:
    """Divides each row by its mean entry."""
    return features / features.mean(dim=-1, keepdim=True).clamp_min(1e-12)


def _stack(pairs: typing.Sequence[SameDiffPair]):
    first = torch.stack([p.first for p in pairs])
    second = torch.stack([p.second for p in pairs])
    labels = torch.as_tensor([p.same for p in pairs], dtype=DTYPE)
    return first, second, labels


def samediff_train(pairs: typing.Sequence[SameDiffPair], cfg: SameDiffConfig, rng: Rng) -> SameDiffModel:
    if not pairs:
        raise DatasetError("no same/different training pairs")
    first, second, labels = _stack(pairs)
    if len(set(int(v) for v in labels)) < 2:
        raise DatasetError("same/different training pairs carry a single label")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.child("samediff-init").torch_seed())
        model = SameDiffModel(first.shape[-1], cfg.proj_dim).to(DTYPE)
    first, second = _rescale(first), _rescale(second)
    store = ParamStore.from_module(model)
    for epoch in range(cfg.epochs):
        loss = F.binary_cross_entropy(model(first, second), labels)
        backward(loss)
        adam_step(store, cfg.lr)
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            bt.logging.debug(f"samediff | epoch {epoch} | bce {loss.detach().item():.4f}")
    return model


def auc(scores: typing.Sequence[float], labels: typing.Sequence[int]) -> float:
    """ROC AUC; tied scores count one half."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    return float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))


def samediff_scores(model: SameDiffModel, pairs: typing.Sequence[SameDiffPair]) -> np.ndarray:
    first, second, _ = _stack(pairs)
    first, second = _rescale(first), _rescale(second)
    with torch.no_grad():
        return model(first, second).cpu().numpy()


def samediff_eval(model: SameDiffModel, pairs: typing.Sequence[SameDiffPair]) -> float:
    if not pairs:
        raise UndefinedMetricError("no evaluation pairs")
    return auc(samediff_scores(model, pairs), [p.same for p in pairs])


def samediff_eval_by_shots(base: BaseModel, registry: TaskRegistry, cfg: SameDiffConfig, rng: Rng,
                           rounds: int = 1, cond: typing.Optional[ConditioningConfig] = None) -> typing.List[SameDiffResult]:
    """Trains the classifier on meta-train pairs and scores meta-test pairs, once per shot count."""
    results = []
    base.eval()
    for k in cfg.shots:
        train_pairs = build_samediff_pairs(base, registry, "meta-train", k, cfg.train_pairs, rng.child("train"),
                                           rounds, cond)
        eval_pairs = build_samediff_pairs(base, registry, "meta-test", k, cfg.eval_pairs, rng.child("eval"),
                                          rounds, cond)
        model = samediff_train(train_pairs, cfg, rng.child("fit", k))
        score = samediff_eval(model, eval_pairs)
        bt.logging.info(f"samediff | k={k} | auc {score:.4f} | {len(train_pairs)} train / {len(eval_pairs)} eval pairs")
        results.append(SameDiffResult(k, score, len(train_pairs), len(eval_pairs)))
    return results
