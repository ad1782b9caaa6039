"""Prototypes, nearest-cluster logits and the ProtoNet loss."""
import typing
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from shared.errors import ShapeError
from shared.tensor_core import add, square


@dataclass
class PrototypeSet:
    means: torch.Tensor  # (C, D)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]


def _canonical_rows(rows: torch.Tensor) -> torch.Tensor:
    # lexicographic row order makes the float summation independent of support order
    if rows.shape[0] < 2:
        return rows
    values = rows.detach().cpu().numpy()
    order = np.lexsort(values.T[::-1])
    return rows[torch.as_tensor(order, dtype=torch.long)]


def compute_prototypes(embeddings: torch.Tensor, labels: typing.Union[torch.Tensor, typing.Sequence[int]],
                       num_classes: int) -> PrototypeSet:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if embeddings.dim() != 2 or embeddings.shape[0] != labels.shape[0]:
        raise ShapeError(f"compute_prototypes: embeddings {tuple(embeddings.shape)} and labels "
                         f"{tuple(labels.shape)} do not conform")
    if num_classes < 2:
        raise ShapeError(f"a prototype set needs at least 2 classes, got {num_classes}")
    means = []
    for c in range(num_classes):
        rows = embeddings[labels == c]
        if rows.shape[0] == 0:
            raise ShapeError(f"class {c} has no support embeddings")
        means.append(_canonical_rows(rows).sum(dim=0) / rows.shape[0])
    return PrototypeSet(means=torch.stack(means))


def class_logits(query: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    """logit_c = -||query - mu_c||^2 for a (D,) query or a (Q, D) batch."""
    single = query.dim() == 1
    q = query[None] if single else query
    if q.shape[-1] != protos.means.shape[-1]:
        raise ShapeError(f"class_logits: query {tuple(query.shape)} and prototypes "
                         f"{tuple(protos.means.shape)} do not conform")
    diff = add(q[:, None, :], -protos.means[None, :, :])
    logits = -square(diff).sum(dim=-1)
    return logits[0] if single else logits


def protonet_loss(support: torch.Tensor, support_labels, query: torch.Tensor, query_labels,
                  num_classes: int) -> torch.Tensor:
    """Mean negative log-likelihood of the query labels under the distance softmax."""
    protos = compute_prototypes(support, support_labels, num_classes)
    logits = class_logits(query, protos)
    return F.cross_entropy(logits, torch.as_tensor(query_labels, dtype=torch.long))


def episode_accuracy(logits: torch.Tensor, labels) -> float:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() == 0:
        return 0.0
    return float((logits.argmax(dim=-1) == labels).double().mean())
