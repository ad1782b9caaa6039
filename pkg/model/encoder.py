"""
Base model f: a small post-norm transformer encoder with two bottleneck adapters per
layer, [CLS] pooling and a linear output head.

Per layer (Houlsby placement, adapter on the sublayer output before the residual norm):
    a = adapter_2i(attention(h));     h = norm(h + a)
    f = adapter_2i+1(ffn(h));         h = norm(h + f)
"""
import math
import typing

import torch
from torch import nn

from model.film import AdaptationParams, film_apply
from shared.config import EncoderConfig
from shared.errors import DatasetError, ShapeError
from shared.tensor_core import (DTYPE, LAYER_NORM_EPS, Rng, add, apply_layer_norm, apply_linear, gelu, matmul,
                                relu, softmax)
from tasks.vocabulary import CLS_ID, PAD_ID

# A fixed list of per-adapter FiLM parameters or a callback (adapter index, [CLS] activation) -> params.
Adaptation = typing.Union[typing.Sequence[AdaptationParams], typing.Callable[[int, torch.Tensor], AdaptationParams]]


class BottleneckAdapter(nn.Module):
    def __init__(self, model_dim: int, bottleneck_dim: int, activation: str = "relu"):
        super().__init__()
        self.down = nn.Linear(model_dim, bottleneck_dim)
        self.up = nn.Linear(bottleneck_dim, model_dim)
        self.activation = activation
        # identity at init
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, h: torch.Tensor, film: typing.Optional[AdaptationParams] = None,
                scope: str = "cls") -> torch.Tensor:
        if h.shape[-1] != self.down.in_features:
            raise ShapeError(f"adapter expects width {self.down.in_features}, got input {tuple(h.shape)}")
        mid = apply_linear(self.down, h)
        mid = relu(mid) if self.activation == "relu" else gelu(mid)
        if film is not None:
            mid = film_apply(mid, film, "mid", scope)
        out = apply_linear(self.up, mid)
        if film is not None:
            out = film_apply(out, film, "out", scope)
        return add(h, out)


def adapter_forward(adapter: BottleneckAdapter, h: torch.Tensor) -> torch.Tensor:
    """h + up(nonlin(down(h))) for a single vector or a batch of sequences."""
    if h.dim() == 1:
        return adapter(h[None, None, :])[0, 0]
    return adapter(h)


class SelfAttention(nn.Module):
    def __init__(self, model_dim: int, num_heads: int, dropout_rate: float):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.query = nn.Linear(model_dim, model_dim)
        self.key = nn.Linear(model_dim, model_dim)
        self.value = nn.Linear(model_dim, model_dim)
        self.output = nn.Linear(model_dim, model_dim)
        self.dropout = nn.Dropout(dropout_rate)

    def forward(self, h: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, t, d = h.shape

        def heads(x):
            return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = (heads(apply_linear(proj, h)) for proj in (self.query, self.key, self.value))
        scores = matmul(q, k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = self.dropout(softmax(scores, dim=-1))
        context = matmul(weights, v).transpose(1, 2).reshape(b, t, d)
        return apply_linear(self.output, context)


class TransformerLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.model_dim
        self.attention = SelfAttention(d, cfg.num_heads, cfg.dropout_rate)
        self.attention_adapter = BottleneckAdapter(d, cfg.adapter_bottleneck_dim, cfg.adapter_activation)
        self.attention_norm = nn.LayerNorm(d, eps=LAYER_NORM_EPS)
        self.ffn_in = nn.Linear(d, cfg.ffn_dim)
        self.ffn_out = nn.Linear(cfg.ffn_dim, d)
        self.ffn_adapter = BottleneckAdapter(d, cfg.adapter_bottleneck_dim, cfg.adapter_activation)
        self.ffn_norm = nn.LayerNorm(d, eps=LAYER_NORM_EPS)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, h, key_mask, run_adapter, first_adapter: int):
        a = self.dropout(self.attention(h, key_mask))
        a = run_adapter(first_adapter, a, self.attention_adapter)
        h = apply_layer_norm(self.attention_norm, add(h, a))
        f = self.dropout(apply_linear(self.ffn_out, gelu(apply_linear(self.ffn_in, h))))
        f = run_adapter(first_adapter + 1, f, self.ffn_adapter)
        return apply_layer_norm(self.ffn_norm, add(h, f))


class BaseModel(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.vocab_size is None:
            raise ShapeError("encoder config has no vocab_size; set it from the vocabulary")
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.model_dim)
        self.position_embedding = nn.Embedding(cfg.max_seq_len, cfg.model_dim)
        self.embedding_norm = nn.LayerNorm(cfg.model_dim, eps=LAYER_NORM_EPS)
        self.embedding_dropout = nn.Dropout(cfg.dropout_rate)
        self.layers = nn.ModuleList(TransformerLayer(cfg) for _ in range(cfg.num_layers))
        self.head = nn.Linear(cfg.model_dim, cfg.head_out_dim)

    @staticmethod
    def param_group(name: str) -> str:
        if "adapter" in name:
            return "adapter"
        if "norm" in name:
            return "layer_norm"
        if name.startswith("head."):
            return "head"
        return "theta"

    def adapters(self) -> typing.List[BottleneckAdapter]:
        out = []
        for layer in self.layers:
            out.extend([layer.attention_adapter, layer.ffn_adapter])
        return out

    def adapter_param_names(self) -> typing.List[typing.List[str]]:
        """Parameter names of each adapter, in adapter order, relative to this module."""
        names = []
        for i in range(self.cfg.num_layers):
            for sub in ("attention_adapter", "ffn_adapter"):
                prefix = f"layers.{i}.{sub}"
                names.append([f"{prefix}.down.weight", f"{prefix}.down.bias",
                              f"{prefix}.up.weight", f"{prefix}.up.bias"])
        return names

    @property
    def num_adapters(self) -> int:
        return 2 * self.cfg.num_layers

    def forward(self, ids: torch.Tensor, key_mask: torch.Tensor, adapt: typing.Optional[Adaptation] = None,
                scope: str = "cls", return_hidden: bool = False):
        positions = torch.arange(ids.shape[1], device=ids.device)
        h = add(self.token_embedding(ids), self.position_embedding(positions)[None])
        h = self.embedding_dropout(apply_layer_norm(self.embedding_norm, h))

        if adapt is not None and not callable(adapt) and len(adapt) != self.num_adapters:
            raise ShapeError(f"adaptation given for {len(adapt)} adapters, model has {self.num_adapters}")

        def run_adapter(index: int, x: torch.Tensor, adapter: BottleneckAdapter) -> torch.Tensor:
            if adapt is None:
                return adapter(x)
            film = adapt(index, x[:, 0]) if callable(adapt) else adapt[index]
            if film is None:
                raise ShapeError(f"no adaptation parameters for adapter {index}")
            return adapter(x, film, scope)

        for i, layer in enumerate(self.layers):
            h = layer(h, key_mask, run_adapter, 2 * i)
        out = apply_linear(self.head, h[:, 0])
        return (out, h) if return_hidden else out


def build_base_model(cfg: EncoderConfig, rng: Rng) -> BaseModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.torch_seed())
        model = BaseModel(cfg)
    return model.to(DTYPE)


def collate(sequences: typing.Sequence[typing.Sequence[int]], cfg: EncoderConfig) -> typing.Tuple[torch.Tensor, torch.Tensor]:
    """Pads with [PAD]; returns (ids (B, T), key mask (B, T) true on real tokens)."""
    if not sequences:
        raise DatasetError("nothing to encode")
    width = max(len(s) for s in sequences)
    ids = torch.full((len(sequences), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(sequences), width), dtype=torch.bool)
    for row, seq in enumerate(sequences):
        if len(seq) == 0:
            raise DatasetError("empty token sequence")
        if len(seq) > cfg.max_seq_len:
            raise DatasetError(f"sequence of length {len(seq)} exceeds max_seq_len {cfg.max_seq_len}")
        if seq[0] != CLS_ID:
            raise DatasetError(f"sequence must start with the [CLS] id {CLS_ID}, got {seq[0]}")
        bad = [t for t in seq if not 0 <= t < cfg.vocab_size]
        if bad:
            raise DatasetError(f"unknown token id {bad[0]} (vocab size {cfg.vocab_size})")
        ids[row, :len(seq)] = torch.tensor(list(seq), dtype=torch.long)
        mask[row, :len(seq)] = True
    return ids, mask


def encode_batch(model: BaseModel, sequences: typing.Sequence[typing.Sequence[int]],
                 adapt: typing.Optional[Adaptation] = None, scope: str = "cls") -> torch.Tensor:
    ids, mask = collate(sequences, model.cfg)
    return model(ids, mask, adapt=adapt, scope=scope)


def encode(model: BaseModel, tokens: typing.Sequence[int]) -> torch.Tensor:
    return encode_batch(model, [tokens])[0]


def encode_adapted(model: BaseModel, tokens: typing.Sequence[int], adapt: Adaptation, scope: str = "cls") -> torch.Tensor:
    return encode_batch(model, [tokens], adapt=adapt, scope=scope)[0]
