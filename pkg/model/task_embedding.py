"""
Gradient-based task representation.

For an episode, the frozen base model is run on part of its own support set: build
prototypes from a few examples per class, sample pseudo-labels for a disjoint scored
subset from the model's predictive distribution, and square the gradient of the scored
negative log-likelihood w.r.t. each adapter's parameters. Averaged over rounds this is
the Fisher diagonal restricted to adapter l, g_l. A GRU over the adapter index turns the
sequence g_1..g_2L into per-layer task embeddings.
"""
import csv
import typing
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from model.encoder import BaseModel, collate, encode_batch
from model.proto_classifier import class_logits, compute_prototypes
from shared.errors import DatasetError, ShapeError
from shared.grad2task_protocol import Episode, Example, TaskEmbeddingRecord, canonical_order
from shared.tensor_core import Rng, ensure_finite, stop_gradient
from tasks.episodes import subsample_support
from tasks.vocabulary import CLS_ID, Vocabulary

NORMALIZE_EPS = 1e-12


@dataclass
class GradFeatures:
    vectors: typing.List[torch.Tensor]  # one flattened, detached vector per adapter
    rounds: int

    def __len__(self):
        return len(self.vectors)

    def stacked(self) -> torch.Tensor:
        return torch.stack(self.vectors)

    def normalized(self) -> "GradFeatures":
        return GradFeatures([v / (v.mean() + NORMALIZE_EPS) for v in self.vectors], self.rounds)

    def pooled(self) -> torch.Tensor:
        return self.stacked().mean(dim=0)


@contextmanager
def eval_mode(module: nn.Module):
    was_training = module.training
    module.eval()
    try:
        yield module
    finally:
        module.train(was_training)


def adapter_overrides(model: BaseModel) -> typing.Dict[str, torch.Tensor]:
    params = dict(model.named_parameters())
    return {name: params[name].detach().clone().requires_grad_(True)
            for names in model.adapter_param_names() for name in names}


def _embed(model: BaseModel, overrides, examples: typing.Sequence[Example]) -> torch.Tensor:
    ids, mask = collate([ex.tokens for ex in examples], model.cfg)
    return functional_call(model, overrides, (ids, mask))


def scoring_logits(model: BaseModel, overrides, protos: typing.Sequence[Example],
                 scored: typing.Sequence[Example], num_classes: int) -> torch.Tensor:
    prototypes = compute_prototypes(_embed(model, overrides, protos), [ex.label for ex in protos], num_classes)
    return class_logits(_embed(model, overrides, scored), prototypes)


def sample_pseudo_labels(model: BaseModel, protos, scored, num_classes: int, rng: Rng) -> typing.List[int]:
    """y'_j ~ p_base(y | x_j) by inverse-CDF sampling with the episode's stream."""
    with torch.no_grad():
        probs = torch.softmax(scoring_logits(model, {}, protos, scored, num_classes), dim=-1).cpu().numpy()
    uniforms = rng.np.random(len(scored))
    cdf = np.cumsum(probs, axis=1)
    return [int(min(np.searchsorted(row, u, side="right"), num_classes - 1)) for row, u in zip(cdf, uniforms)]


def fisher_round(model: BaseModel, protos: typing.Sequence[Example], scored: typing.Sequence[Example],
                 labels: typing.Sequence[int], num_classes: int, mode: str = "batch") -> typing.List[torch.Tensor]:
    """
    Squared adapter gradients of the scored NLL under pseudo-labels ``labels``.
    mode "batch" squares the gradient of the summed NLL; "per_example" sums per-example squares.
    """
    if mode not in ("batch", "per_example"):
        raise ValueError(f"unknown fisher mode {mode!r}")
    overrides = adapter_overrides(model)
    groups = model.adapter_param_names()
    flat = [overrides[n] for names in groups for n in names]
    squares = [torch.zeros_like(p) for p in flat]

    with torch.enable_grad():
        logits = scoring_logits(model, overrides, protos, scored, num_classes)
        targets = torch.as_tensor(list(labels), dtype=torch.long)
        if mode == "batch":
            losses = [F.cross_entropy(logits, targets, reduction="sum")]
        else:
            losses = list(F.cross_entropy(logits, targets, reduction="none"))
        for i, loss in enumerate(losses):
            grads = torch.autograd.grad(loss, flat, retain_graph=i < len(losses) - 1)
            for acc, g in zip(squares, grads):
                ensure_finite(g, "adapter gradient")
                acc += g.detach() * g.detach()

    out, offset = [], 0
    for names in groups:
        chunk = squares[offset:offset + len(names)]
        offset += len(names)
        out.append(torch.cat([c.reshape(-1) for c in chunk]))
    return out


def fim_diag_features(model: BaseModel, episode: Episode, rounds: int, rng: Rng,
                      proto_per_class: typing.Optional[int] = None, probe_size: typing.Optional[int] = None,
                      mode: str = "batch") -> GradFeatures:
    if rounds < 1:
        raise ValueError(f"subsample rounds must be >= 1, got {rounds}")
    canonical = Episode(task_name=episode.task_name, support=canonical_order(episode.support), query=[],
                        shots=episode.shots, num_classes=episode.num_classes, class_names=episode.class_names)
    total: typing.Optional[typing.List[torch.Tensor]] = None
    with eval_mode(model):
        for s in range(rounds):
            round_rng = rng.child("fisher-round", s)
            protos, scored = subsample_support(canonical, proto_per_class, probe_size, round_rng)
            scored = canonical_order(scored)
            labels = sample_pseudo_labels(model, protos, scored, episode.num_classes, round_rng)
            squares = fisher_round(model, protos, scored, labels, episode.num_classes, mode)
            total = squares if total is None else [t + g for t, g in zip(total, squares)]
    return GradFeatures([stop_gradient(t / rounds) for t in total], rounds)


class TaskEmbedNet(nn.Module):
    """d: a GRU over the adapter index with a learnable initial state and a linear output head."""

    def __init__(self, input_size: int, num_adapters: int, hidden_size: int = 32, embedding_size: int = 16,
                 num_layers: int = 2, dropout_rate: float = 0.1, normalize: bool = True):
        super().__init__()
        self.input_size = input_size
        self.num_adapters = num_adapters
        self.normalize = normalize
        self.gru = nn.GRU(input_size, hidden_size, num_layers=num_layers, batch_first=True,
                          dropout=dropout_rate if num_layers > 1 else 0.0)
        self.h0 = nn.Parameter(torch.zeros(num_layers, 1, hidden_size))
        self.output = nn.Linear(hidden_size, embedding_size)

    @property
    def embedding_size(self) -> int:
        return self.output.out_features

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        hidden, _ = self.gru(feats[None], self.h0)
        return self.output(hidden[0])


def embed_layers(net: TaskEmbedNet, feats: GradFeatures) -> typing.List[torch.Tensor]:
    if len(feats) != net.num_adapters:
        raise ShapeError(f"expected features for {net.num_adapters} adapters, got {len(feats)}")
    for i, v in enumerate(feats.vectors):
        if v.shape != (net.input_size,):
            raise ShapeError(f"features of adapter {i} have shape {tuple(v.shape)}, net expects ({net.input_size},)")
    if net.normalize:
        feats = feats.normalized()
    return list(net(feats.stacked()))


def mean_input_task_rep(model: BaseModel, episode: Episode) -> torch.Tensor:
    if not episode.support:
        raise DatasetError(f"{episode.task_name}: empty support set")
    with eval_mode(model), torch.no_grad():
        embeddings = encode_batch(model, [ex.tokens for ex in canonical_order(episode.support)])
    return stop_gradient(embeddings.mean(dim=0))


def label_tokens(vocab: Vocabulary, class_name: str) -> typing.Tuple[int, ...]:
    ids = vocab.known_ids(class_name.replace("_", " ")) or vocab.known_ids(class_name)
    if not ids:
        raise DatasetError(f"label text {class_name!r} has no in-vocabulary tokens")
    return (CLS_ID, *ids)


def input_label_task_rep(model: BaseModel, episode: Episode, vocab: Vocabulary) -> torch.Tensor:
    inputs = mean_input_task_rep(model, episode)
    if len(episode.class_names) != episode.num_classes:
        raise DatasetError(f"{episode.task_name}: episode carries no class names")
    with eval_mode(model), torch.no_grad():
        labels = encode_batch(model, [label_tokens(vocab, name) for name in episode.class_names])
    return stop_gradient(torch.cat([inputs, labels.mean(dim=0)]))


def export_embeddings(records: typing.Sequence[TaskEmbeddingRecord], path: str):
    """CSV: episode_id, task_name, layer, dim_0 .. dim_{E-1}; 12 significant digits."""
    width = len(records[0].layers[0]) if records and records[0].layers else 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["episode_id", "task_name", "layer"] + [f"dim_{i}" for i in range(width)])
        for record in records:
            for layer, values in enumerate(record.layers):
                writer.writerow([record.episode_id, record.task_name, layer] + [f"{v:.12g}" for v in values])


def load_embeddings(path: str) -> typing.List[TaskEmbeddingRecord]:
    records: typing.Dict[int, TaskEmbeddingRecord] = {}
    with open(path, "r", newline="") as f:
        for row in csv.DictReader(f):
            episode_id = int(row["episode_id"])
            record = records.setdefault(episode_id, TaskEmbeddingRecord(episode_id, row["task_name"]))
            record.layers.append([float(row[k]) for k in row if k.startswith("dim_")])
    return list(records.values())
