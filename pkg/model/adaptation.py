"""
Task-conditioned adaptation of the frozen base model.

AdaptNet holds one block of four perceptrons per adapter. Block l reads the task
embedding of layer l together with the [CLS] activation entering adapter l (computed
through the already adapted lower layers) and emits the FiLM tuple for that adapter.
Final layers start at zero and gammas are 1 + delta, so a fresh net is the identity.

TaskConditionedModel ties base model, task representation and adaptation together for
every conditioned variant:
  grad2task  Fisher features -> GRU embeddings -> FiLM on [CLS]
  adapt-all  same, FiLM on every position
  hypernet   Fisher features -> GRU embeddings -> residual adapter weights
  x          mean support embedding -> FiLM on [CLS]
  x-and-y    mean support embedding + mean label embedding -> FiLM on [CLS]
"""
import typing

import torch
from torch import nn
from torch.func import functional_call

from model.encoder import Adaptation, BaseModel, collate
from model.film import AdaptationParams
from model.proto_classifier import class_logits, compute_prototypes
from model.task_embedding import (TaskEmbedNet, embed_layers, fim_diag_features, input_label_task_rep,
                                  mean_input_task_rep)
from shared.config import ConditioningConfig
from shared.errors import ConfigError, ShapeError, UnknownVariantError
from shared.grad2task_protocol import Episode, Example, canonical_order
from shared.tensor_core import DTYPE, Rng, add, apply_linear, concat, ensure_finite, tanh
from tasks.vocabulary import Vocabulary

MODEL_VARIANTS = ("grad2task", "x", "x-and-y", "adapt-all", "hypernet")
GRADIENT_VARIANTS = ("grad2task", "adapt-all", "hypernet")
CONDITIONING_GROUPS = ("task_net", "adapt_net", "hypernet")

Overrides = typing.Optional[typing.Dict[str, torch.Tensor]]


class FilmHead(nn.Module):
    """Single-hidden-layer perceptron (tanh), or one affine map when ``linear``."""

    def __init__(self, in_size: int, out_size: int, hidden_multiplier: int = 2, linear: bool = False):
        super().__init__()
        if linear:
            self.hidden = None
            self.output = nn.Linear(in_size, out_size)
        else:
            self.hidden = nn.Linear(in_size, hidden_multiplier * in_size)
            self.output = nn.Linear(hidden_multiplier * in_size, out_size)
        nn.init.zeros_(self.output.weight)
        nn.init.zeros_(self.output.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.hidden is not None:
            x = tanh(apply_linear(self.hidden, x))
        return apply_linear(self.output, x)


class AdaptBlock(nn.Module):
    def __init__(self, in_size: int, bottleneck_dim: int, model_dim: int, hidden_multiplier: int, linear: bool):
        super().__init__()
        self.in_size = in_size
        self.gamma_mid = FilmHead(in_size, bottleneck_dim, hidden_multiplier, linear)
        self.beta_mid = FilmHead(in_size, bottleneck_dim, hidden_multiplier, linear)
        self.gamma_out = FilmHead(in_size, model_dim, hidden_multiplier, linear)
        self.beta_out = FilmHead(in_size, model_dim, hidden_multiplier, linear)


class AdaptNet(nn.Module):
    def __init__(self, num_adapters: int, task_dim: int, model_dim: int, bottleneck_dim: int,
                 hidden_multiplier: int = 2, linear: bool = False):
        super().__init__()
        self.task_dim = task_dim
        self.model_dim = model_dim
        self.blocks = nn.ModuleList(
            AdaptBlock(task_dim + model_dim, bottleneck_dim, model_dim, hidden_multiplier, linear)
            for _ in range(num_adapters))

    @property
    def input_size(self) -> int:
        return self.task_dim + self.model_dim


def gen_adapt_params(net: AdaptNet, index: int, task_embedding: torch.Tensor,
                     cls_activation: torch.Tensor) -> AdaptationParams:
    """FiLM tuple of adapter ``index`` for a batch of [CLS] activations (B, model_dim) or a single one."""
    if not 0 <= index < len(net.blocks):
        raise ShapeError(f"adapter index {index} outside 0..{len(net.blocks) - 1}")
    cls = cls_activation[None] if cls_activation.dim() == 1 else cls_activation
    if task_embedding.shape[-1] != net.task_dim or cls.shape[-1] != net.model_dim:
        raise ShapeError(f"adaptation input: task embedding {tuple(task_embedding.shape)} and activation "
                         f"{tuple(cls_activation.shape)} do not match ({net.task_dim}, {net.model_dim})")
    emb = task_embedding.expand(cls.shape[0], -1) if task_embedding.dim() == 1 else task_embedding
    x = concat([emb, cls], dim=-1)
    block = net.blocks[index]
    params = AdaptationParams(
        gamma_mid=1.0 + block.gamma_mid(x),
        beta_mid=block.beta_mid(x),
        gamma_out=1.0 + block.gamma_out(x),
        beta_out=block.beta_out(x),
    )
    for value in (params.gamma_mid, params.beta_mid, params.gamma_out, params.beta_out):
        ensure_finite(value, f"adaptation parameters of adapter {index}")
    return params


class HyperNet(nn.Module):
    """One zero-initialized linear map per adapter: task embedding -> residual adapter weights."""

    def __init__(self, embedding_size: int, num_adapters: int, param_count: int):
        super().__init__()
        self.heads = nn.ModuleList(nn.Linear(embedding_size, param_count) for _ in range(num_adapters))
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, index: int, task_embedding: torch.Tensor) -> torch.Tensor:
        return apply_linear(self.heads[index], task_embedding)


def hypernet_variant(hnet: HyperNet, base: BaseModel,
                     embeddings: typing.Sequence[torch.Tensor]) -> typing.Dict[str, torch.Tensor]:
    """alpha'_l = alpha_l + hnet_l(e_l), returned as parameter overrides for the base model."""
    if len(embeddings) != base.num_adapters:
        raise ShapeError(f"hypernetwork got {len(embeddings)} task embeddings for {base.num_adapters} adapters")
    params = dict(base.named_parameters())
    overrides = {}
    for index, names in enumerate(base.adapter_param_names()):
        residual = hnet(index, embeddings[index])
        expected = sum(params[n].numel() for n in names)
        if residual.numel() != expected:
            raise ShapeError(f"hypernetwork output of size {residual.numel()} for adapter {index}, "
                             f"which has {expected} parameters")
        offset = 0
        for name in names:
            p = params[name]
            overrides[name] = add(p, residual[offset:offset + p.numel()].view_as(p))
            offset += p.numel()
    return overrides


def encode_examples(base: BaseModel, examples: typing.Sequence[Example], adapt: typing.Optional[Adaptation] = None,
                    overrides: Overrides = None, scope: str = "cls", batch_size: int = 64) -> torch.Tensor:
    """Embeds ``examples`` in fixed-size chunks; every path through the models goes through here."""
    chunks = []
    for start in range(0, len(examples), batch_size):
        ids, mask = collate([ex.tokens for ex in examples[start:start + batch_size]], base.cfg)
        if overrides:
            chunks.append(functional_call(base, overrides, (ids, mask), {"adapt": adapt, "scope": scope}))
        else:
            chunks.append(base(ids, mask, adapt=adapt, scope=scope))
    if not chunks:
        raise ShapeError("nothing to encode")
    return torch.cat(chunks)


def prototype_logits(base: BaseModel, episode: Episode, query: typing.Optional[typing.Sequence[Example]] = None,
                     adapt: typing.Optional[Adaptation] = None, overrides: Overrides = None,
                     scope: str = "cls", batch_size: int = 64) -> torch.Tensor:
    support = canonical_order(episode.support)
    query = episode.query if query is None else query
    protos = compute_prototypes(encode_examples(base, support, adapt, overrides, scope, batch_size),
                                [ex.label for ex in support], episode.num_classes)
    return class_logits(encode_examples(base, query, adapt, overrides, scope, batch_size), protos)


class TaskConditionedModel(nn.Module):
    def __init__(self, base: BaseModel, cond: ConditioningConfig, rounds: int = 1,
                 vocab: typing.Optional[Vocabulary] = None, batch_size: int = 64):
        super().__init__()
        if cond.variant not in MODEL_VARIANTS:
            raise UnknownVariantError(f"unknown model variant '{cond.variant}'; valid: {', '.join(MODEL_VARIANTS)}")
        if cond.variant == "x-and-y" and vocab is None:
            raise ConfigError("the x-and-y variant needs the vocabulary to encode class names")
        ecfg = base.cfg
        self.base = base
        self.cond = cond
        self.variant = cond.variant
        self.rounds = rounds
        self.vocab = vocab
        self.batch_size = batch_size

        if self.variant in GRADIENT_VARIANTS:
            self.task_net = TaskEmbedNet(ecfg.adapter_param_count, ecfg.num_adapters, cond.hidden_size,
                                         cond.embedding_size, cond.gru_layers, ecfg.dropout_rate,
                                         cond.normalize_features)
        if self.variant == "hypernet":
            self.hypernet = HyperNet(cond.embedding_size, ecfg.num_adapters, ecfg.adapter_param_count)
        else:
            task_dim = {"x": ecfg.head_out_dim, "x-and-y": 2 * ecfg.head_out_dim}.get(self.variant,
                                                                                      cond.embedding_size)
            self.adapt_net = AdaptNet(ecfg.num_adapters, task_dim, ecfg.model_dim, ecfg.adapter_bottleneck_dim,
                                      cond.adapt_hidden_multiplier, cond.adapt_linear)

    @staticmethod
    def param_group(name: str) -> str:
        if name.startswith("base."):
            return BaseModel.param_group(name[len("base."):])
        for group in CONDITIONING_GROUPS:
            if name.startswith(group + "."):
                return group
        raise ValueError(f"parameter '{name}' belongs to no known group")

    @property
    def scope(self) -> str:
        return "all" if self.variant == "adapt-all" else "cls"

    def freeze_base(self):
        self.base.requires_grad_(False)
        return self

    def train(self, mode: bool = True):
        super().train(mode)
        # the base model is frozen, its dropout stays off
        self.base.eval()
        return self

    def task_representation(self, episode: Episode, rng: Rng) -> typing.List[torch.Tensor]:
        if self.variant in GRADIENT_VARIANTS:
            feats = fim_diag_features(self.base, episode, self.rounds, rng, self.cond.proto_per_class,
                                      self.cond.probe_size, self.cond.fisher_mode)
            return embed_layers(self.task_net, feats)
        if self.variant == "x":
            rep = mean_input_task_rep(self.base, episode)
        else:
            rep = input_label_task_rep(self.base, episode, self.vocab)
        return [rep] * self.base.num_adapters

    def adaptation(self, reps: typing.Sequence[torch.Tensor]) -> typing.Tuple[typing.Optional[Adaptation], Overrides]:
        if self.variant == "hypernet":
            return None, hypernet_variant(self.hypernet, self.base, reps)

        def adapt(index: int, cls_activation: torch.Tensor) -> AdaptationParams:
            return gen_adapt_params(self.adapt_net, index, reps[index], cls_activation)

        return adapt, None

    def episode_logits(self, episode: Episode, rng: Rng, query: typing.Optional[typing.Sequence[Example]] = None,
                       scope: typing.Optional[str] = None) -> torch.Tensor:
        adapt, overrides = self.adaptation(self.task_representation(episode, rng))
        return prototype_logits(self.base, episode, query, adapt, overrides, scope or self.scope, self.batch_size)

    def base_logits(self, episode: Episode, query: typing.Optional[typing.Sequence[Example]] = None) -> torch.Tensor:
        return prototype_logits(self.base, episode, query, batch_size=self.batch_size)


def build_task_conditioned_model(base: BaseModel, cond: ConditioningConfig, rng: Rng, rounds: int = 1,
                                 vocab: typing.Optional[Vocabulary] = None, batch_size: int = 64) -> TaskConditionedModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.torch_seed())
        model = TaskConditionedModel(base, cond, rounds, vocab, batch_size)
    return model.to(DTYPE).freeze_base()


def adapted_predict(model: TaskConditionedModel, episode: Episode, rng: Rng,
                    query: typing.Optional[typing.Sequence[Example]] = None) -> torch.Tensor:
    """p_final(y | x) for every query example."""
    return torch.softmax(model.episode_logits(episode, rng, query), dim=-1)


def adapt_all_variant(model: TaskConditionedModel, episode: Episode, rng: Rng,
                      query: typing.Optional[typing.Sequence[Example]] = None) -> torch.Tensor:
    return torch.softmax(model.episode_logits(episode, rng, query, scope="all"), dim=-1)


def base_predict(model: BaseModel, episode: Episode, query: typing.Optional[typing.Sequence[Example]] = None,
                 batch_size: int = 64) -> torch.Tensor:
    return torch.softmax(prototype_logits(model, episode, query, batch_size=batch_size), dim=-1)
