import typing

import pytest
import torch
from torch import nn

from model.encoder import BaseModel, build_base_model
from shared.config import DataConfig, EncoderConfig, TrainConfig
from shared.grad2task_protocol import Episode, Example
from shared.tensor_core import Rng
from tasks.synthetic_suite import SuiteSpec, build_synthetic_registry
from tasks.vocabulary import CLS_ID


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training check")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_encoder_cfg(**overrides) -> EncoderConfig:
    values = dict(vocab_size=16, max_seq_len=12, model_dim=8, num_layers=2, num_heads=2, ffn_dim=16,
                  adapter_bottleneck_dim=4, head_out_dim=6, dropout_rate=0.0)
    values.update(overrides)
    return EncoderConfig(**values)


def randomize_adapters(model: BaseModel, seed: int = 0, scale: float = 0.3):
    """Adapters start as the identity; tests exercising them need non-zero up projections."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for adapter in model.adapters():
            for p in adapter.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return model


def make_model(seed: int = 0, randomized: bool = True, **overrides) -> BaseModel:
    model = build_base_model(tiny_encoder_cfg(**overrides), Rng(seed))
    if randomized:
        randomize_adapters(model, seed)
    return model.eval()


def random_example(gen: torch.Generator, label: int, vocab_size: int = 16, min_len: int = 3,
                   max_len: int = 8) -> Example:
    length = int(torch.randint(min_len, max_len + 1, (1,), generator=gen))
    ids = (CLS_ID,) + tuple(int(t) for t in torch.randint(4, vocab_size, (length - 1,), generator=gen))
    return Example(text=" ".join(f"w{t}" for t in ids[1:]), tokens=ids, label=label)


def random_episode(seed: int = 0, num_classes: int = 2, shots: int = 4, query_shots: int = 3,
                   vocab_size: int = 16) -> Episode:
    gen = torch.Generator().manual_seed(seed)
    support = [random_example(gen, c, vocab_size) for c in range(num_classes) for _ in range(shots)]
    query = [random_example(gen, c, vocab_size) for c in range(num_classes) for _ in range(query_shots)]
    return Episode(task_name=f"random-{seed}", support=support, query=query, shots=shots,
                   num_classes=num_classes, class_names=[f"c{c}" for c in range(num_classes)])


def tiny_data_cfg(**overrides) -> DataConfig:
    values = dict(meta_train=("keyword-presence", "dominant-topic:3", "lexicon-sentiment"),
                  meta_test=("keyword-presence", "keyword-parity"),
                  train_per_class=24, val_per_class=12, test_size=24, min_len=4, max_len=8, words_per_family=10)
    values.update(overrides)
    return DataConfig(**values)


def tiny_train_cfg(**overrides) -> TrainConfig:
    values = dict(episodes_per_step=2, shots=4, query_shots=2, lr=1e-3, max_epochs=1, steps_per_epoch=3,
                  val_episodes_per_task=2, patience=5, pretrain_steps=3, pretrain_batch_size=4)
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def suite_spec() -> SuiteSpec:
    return SuiteSpec.from_config(tiny_data_cfg(), max_seq_len=12)


@pytest.fixture
def registry(suite_spec):
    return build_synthetic_registry(Rng(7), suite_spec)


def registry_model(registry, seed: int = 0, **overrides) -> BaseModel:
    return make_model(seed, randomized=True, vocab_size=len(registry.vocab), **overrides)


def param_digest(module: nn.Module, names: typing.Optional[typing.Iterable[str]] = None) -> typing.Dict[str, torch.Tensor]:
    params = dict(module.named_parameters())
    return {n: params[n].detach().clone() for n in (names if names is not None else params)}
