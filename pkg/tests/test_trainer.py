import os

import numpy as np
import pytest
import torch

from evaluator.kshot import evaluate_kshot
from model.adaptation import CONDITIONING_GROUPS, TaskConditionedModel, build_task_conditioned_model
from model.encoder import BaseModel
from shared.config import ConditioningConfig
from shared.errors import FrozenParameterError, IdentityInitError
from shared.tensor_core import ParamStore, Rng, adam_step, backward
from tasks.episodes import sample_episode
from tasks.synthetic_suite import SuiteSpec, build_synthetic_registry
from tasks.vocabulary import CLS_ID, MASK_ID
from trainer.episodic import (STAGE1_GROUPS, check_identity_init, checkpoint, continue_stage1, last_checkpoint_path,
                              stage1_loss, stage1_validation_loss, stage2_loss, stage2_validation_loss,
                              steps_per_epoch, train_stage1, train_stage2, validation_episodes)
from trainer.metrics import METRIC_COLUMNS, MetricsLogger, read_metrics
from trainer.pretrain import IGNORE_INDEX, mask_tokens, masked_token_accuracy, pretrain_encoder, pretraining_corpus

from tests.conftest import make_model, param_digest, random_episode, registry_model, tiny_data_cfg, tiny_train_cfg


def _groups(model: BaseModel):
    out = {}
    for name, _ in model.named_parameters():
        out.setdefault(BaseModel.param_group(name), []).append(name)
    return out


def _changed(before, model, names):
    params = dict(model.named_parameters())
    return [n for n in names if not torch.equal(before[n], params[n])]


def _conditioned(base, registry, variant="grad2task"):
    return build_task_conditioned_model(base, ConditioningConfig(variant=variant), Rng(1), vocab=registry.vocab)


def test_steps_per_epoch(registry):
    assert steps_per_epoch(registry, tiny_train_cfg()) == 3
    derived = steps_per_epoch(registry.subset("meta-train"), tiny_train_cfg(steps_per_epoch=None))
    assert derived >= 1


def test_validation_episodes_come_from_val_pools(registry):
    sub = registry.subset("meta-train")
    episodes = validation_episodes(sub, tiny_train_cfg(), Rng(0))
    assert len(episodes) == 2 * len(sub)
    for episode in episodes:
        val = {ex.tokens for ex in sub.get(episode.task_name).val}
        assert all(ex.tokens in val for ex in episode.support + episode.query)
    assert episodes == validation_episodes(sub, tiny_train_cfg(), Rng(0))


def test_zero_learning_rate_changes_nothing(registry):
    model = registry_model(registry)
    before = param_digest(model)
    result = train_stage1(model, registry, tiny_train_cfg(lr=0.0), Rng(0), max_steps=2)
    assert result.steps == 2
    assert not _changed(before, model, before)


def test_stage1_trains_adapters_norms_and_head_only(registry):
    model = registry_model(registry)
    before = param_digest(model)
    train_stage1(model, registry, tiny_train_cfg(lr=1e-2), Rng(0), max_steps=3)
    groups = _groups(model)
    assert not _changed(before, model, groups["theta"])
    for group in ("adapter", "layer_norm", "head"):
        assert _changed(before, model, groups[group]), group


def test_stage1_result_and_metrics_csv(registry, tmp_path):
    path = str(tmp_path / "metrics-train-base.csv")
    ckpt = str(tmp_path / "stage1.ckpt")
    metrics = MetricsLogger(path)
    result = train_stage1(registry_model(registry), registry, tiny_train_cfg(checkpoint_path=ckpt), Rng(0), metrics)
    assert (result.steps, result.epochs, len(result.history)) == (3, 1, 1)
    assert os.path.isfile(ckpt) and os.path.isfile(last_checkpoint_path(ckpt))

    with open(path) as f:
        assert f.readline().strip() == ",".join(METRIC_COLUMNS)
    rows = read_metrics(path)
    assert [(r.step, r.split, r.task) for r in rows if r.split == "train"] == [(s, "train", "all") for s in (1, 2, 3)]
    val_tasks = [r.task for r in rows if r.split == "val"]
    assert val_tasks == sorted(registry.names("meta-train")) + ["all"]
    assert len(rows) == len(metrics.rows)
    for written, kept in zip(rows, metrics.rows):
        assert (written.step, written.epoch, written.split, written.task) == (kept.step, kept.epoch, kept.split, kept.task)
        assert written.loss == pytest.approx(kept.loss, rel=1e-11)
    summary = next(r for r in rows if r.split == "val" and r.task == "all")
    assert summary.accuracy == pytest.approx(result.best_val_accuracy, abs=1e-11)


def test_early_stopping(registry):
    cfg = tiny_train_cfg(lr=0.0, steps_per_epoch=1, max_epochs=10, patience=1)
    result = train_stage1(registry_model(registry), registry, cfg, Rng(0))
    assert result.stopped_early
    assert result.steps == 2


def test_resume_replays_an_uninterrupted_run(registry, tmp_path):
    cfg = tiny_train_cfg(lr=1e-2, steps_per_epoch=2, max_epochs=10, patience=100)

    def run(name, max_steps, resume_from=None):
        model = registry_model(registry)
        ckpt = str(tmp_path / f"{name}.ckpt")
        train_stage1(model, registry, cfg.model_copy(update={"checkpoint_path": ckpt}), Rng(3),
                     resume_from=resume_from, max_steps=max_steps)
        return model, ckpt

    uninterrupted, _ = run("a", 4)
    _, halfway = run("b", 2)
    resumed, _ = run("c", 4, resume_from=last_checkpoint_path(halfway))
    a, c = dict(uninterrupted.named_parameters()), dict(resumed.named_parameters())
    assert all(torch.equal(a[n], c[n]) for n in a)


def test_episode_gradients_accumulate_linearly(registry):
    model = registry_model(registry)
    dataset = registry.get("keyword-presence-kp0")
    episodes = [sample_episode(dataset, 4, 2, Rng(0).child(i)) for i in range(2)]
    params = [p for p in model.parameters() if p.requires_grad]

    for episode in episodes:
        backward(stage1_loss(model, episode)[0] / 2)
    accumulated = [p.grad.clone() for p in params]
    model.zero_grad(set_to_none=True)
    backward((stage1_loss(model, episodes[0])[0] + stage1_loss(model, episodes[1])[0]) / 2)
    assert all(torch.allclose(a, p.grad, atol=1e-12) for a, p in zip(accumulated, params))


def test_continue_stage1(registry):
    model = registry_model(registry)
    before = param_digest(model)
    result = continue_stage1(model, registry, tiny_train_cfg(), Rng(0), 0)
    assert result.steps == 0 and not _changed(before, model, before)
    result = continue_stage1(model, registry, tiny_train_cfg(lr=1e-2), Rng(0), 2)
    assert result.steps == 2 and _changed(before, model, before)


def test_stage2_starts_at_the_stage1_loss(registry):
    base = registry_model(registry)
    model = _conditioned(base, registry)
    episodes = validation_episodes(registry.subset("meta-train"), tiny_train_cfg(), Rng(0))
    assert stage2_validation_loss(model, episodes, Rng(5)) == stage1_validation_loss(base, episodes)


@pytest.mark.parametrize("variant", ["grad2task", "x-and-y", "hypernet"])
def test_stage2_only_trains_the_conditioning(registry, variant):
    base = registry_model(registry)
    model = _conditioned(base, registry, variant)
    base_before = param_digest(base)
    cond_names = [n for n, _ in model.named_parameters() if not n.startswith("base.")]
    cond_before = param_digest(model, cond_names)
    result = train_stage2(model, registry, tiny_train_cfg(lr=1e-2), Rng(0), max_steps=2)
    assert result.steps == 2
    assert not _changed(base_before, base, base_before)
    assert _changed(cond_before, model, cond_names)
    assert all(p.grad is None for p in base.parameters())


def test_stage2_with_no_steps_keeps_the_identity(registry):
    base = registry_model(registry)
    model = _conditioned(base, registry)
    result = train_stage2(model, registry, tiny_train_cfg(), Rng(0), max_steps=0)
    assert result.steps == 0
    episode = sample_episode(registry.get("lexicon-sentiment-ls2"), 4, 2, Rng(1))
    with torch.no_grad():
        assert torch.equal(model.episode_logits(episode, Rng(2)), model.base_logits(episode))


def test_identity_check_catches_a_non_identity_start(registry):
    model = _conditioned(registry_model(registry), registry)
    with torch.no_grad():
        model.adapt_net.blocks[0].beta_out.output.bias.fill_(0.5)
    episodes = validation_episodes(registry.subset("meta-train"), tiny_train_cfg(), Rng(0))
    with pytest.raises(IdentityInitError):
        check_identity_init(model, episodes[:1], Rng(0))
    with pytest.raises(IdentityInitError):
        train_stage2(model, registry, tiny_train_cfg(), Rng(0), max_steps=1)


def test_checkpoint_helper_round_trip_keeps_trainable_flags(registry, tmp_path):
    base = registry_model(registry)
    model = _conditioned(base, registry)
    path = str(tmp_path / "stage2.ckpt")
    with torch.no_grad():
        model.adapt_net.blocks[1].gamma_mid.output.weight.fill_(0.1)
    checkpoint("save", model, path, {"global_step": 7})

    fresh = _conditioned(registry_model(registry), registry)
    meta = checkpoint("load", fresh, path)
    assert meta["global_step"] == 7
    assert torch.equal(fresh.adapt_net.blocks[1].gamma_mid.output.weight, model.adapt_net.blocks[1].gamma_mid.output.weight)
    assert all(not p.requires_grad for p in fresh.base.parameters())
    with pytest.raises(ValueError):
        checkpoint("copy", model, path)


def test_mask_tokens_never_masks_cls_or_padding():
    ids = torch.tensor([[CLS_ID, 5, 6, 7, 0], [CLS_ID, 8, 0, 0, 0]])
    key_mask = ids != 0
    key_mask[:, 0] = True
    masked, targets = mask_tokens(ids, key_mask, 0.0, Rng(0))
    for row in range(2):
        picked = (targets[row] != IGNORE_INDEX).nonzero().flatten().tolist()
        assert len(picked) == 1 and picked[0] != 0 and bool(key_mask[row, picked[0]])
        assert int(masked[row, picked[0]]) == MASK_ID
        assert int(targets[row, picked[0]]) == int(ids[row, picked[0]])
    everything, _ = mask_tokens(ids, key_mask, 1.0, Rng(0))
    assert everything.tolist() == [[CLS_ID, MASK_ID, MASK_ID, MASK_ID, 0], [CLS_ID, MASK_ID, 0, 0, 0]]


def test_pretraining_updates_the_encoder_body_only(registry):
    model = registry_model(registry)
    before = param_digest(model)
    head, losses = pretrain_encoder(model, registry, tiny_train_cfg(), Rng(0))
    assert len(losses) == 3
    groups = _groups(model)
    assert _changed(before, model, groups["theta"])
    assert not _changed(before, model, groups["adapter"] + groups["head"])
    corpus = pretraining_corpus(registry)
    accuracy = masked_token_accuracy(model, head, corpus[:8], 0.15, Rng(1))
    assert 0.0 <= accuracy <= 1.0

    untouched = registry_model(registry)
    _, none = pretrain_encoder(untouched, registry, tiny_train_cfg(), Rng(0), steps=0)
    assert none == []




def test_pretraining_is_deterministic_in_the_seed(registry):
    cfg = tiny_train_cfg(pretrain_steps=4)
    first, second, other = (registry_model(registry) for _ in range(3))
    _, losses = pretrain_encoder(first, registry, cfg, Rng(5))
    _, again = pretrain_encoder(second, registry, cfg, Rng(5))
    _, different = pretrain_encoder(other, registry, cfg, Rng(6))
    assert losses == again
    assert losses != different
    a, b = dict(first.named_parameters()), dict(second.named_parameters())
    assert all(torch.equal(a[n], b[n]) for n in a)


def test_stage2_refuses_a_moved_base(registry, monkeypatch):
    model = _conditioned(registry_model(registry), registry)

    def leaky_step(store, *args, **kwargs):
        adam_step(store, *args, **kwargs)
        with torch.no_grad():
            model.base.head.bias.add_(1e-3)

    monkeypatch.setattr("trainer.episodic.adam_step", leaky_step)
    with pytest.raises(FrozenParameterError, match="frozen base"):
        train_stage2(model, registry, tiny_train_cfg(lr=1e-2), Rng(0), max_steps=1)


# gradients of the episode losses -----------------------------------------------

GRADIENT_CONFIGS = [
    # seed, num_layers, model_dim, num_heads, num_classes, shots
    (0, 1, 8, 2, 2, 2),
    (1, 2, 8, 2, 2, 3),
    (2, 1, 6, 3, 3, 2),
    (3, 2, 4, 1, 2, 4),
    (4, 1, 8, 4, 4, 2),
    (5, 2, 6, 2, 3, 3),
    (6, 1, 4, 2, 2, 2),
    (7, 2, 8, 1, 3, 2),
    (8, 1, 6, 1, 2, 5),
    (9, 3, 4, 2, 2, 2),
]


def _directional_derivatives(params, loss_fn, seed, eps=1e-6):
    """(autograd, central difference) derivatives of loss_fn along a random direction over all params."""
    grads = torch.autograd.grad(loss_fn(), params)
    gen = torch.Generator().manual_seed(seed)
    direction = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))

    def shift(scale):
        with torch.no_grad():
            for p, d in zip(params, direction):
                p.add_(scale * d)

    shift(eps)
    plus = float(loss_fn())
    shift(-2 * eps)
    minus = float(loss_fn())
    shift(eps)
    return analytic, (plus - minus) / (2 * eps)


@pytest.mark.parametrize("stage", ["stage1", "grad2task", "hypernet"])
@pytest.mark.parametrize("seed, num_layers, model_dim, num_heads, num_classes, shots", GRADIENT_CONFIGS)
def test_episode_loss_gradients_match_finite_differences(stage, seed, num_layers, model_dim, num_heads,
                                                         num_classes, shots):
    base = make_model(seed, num_layers=num_layers, model_dim=model_dim, num_heads=num_heads,
                      adapter_activation="gelu")
    episode = random_episode(seed, num_classes=num_classes, shots=shots, query_shots=2)
    if stage == "stage1":
        store = ParamStore.from_module(base, BaseModel.param_group)
        store.train_only(STAGE1_GROUPS)

        def loss_fn():
            return stage1_loss(base, episode)[0]
    else:
        cond = ConditioningConfig(variant=stage, embedding_size=4, hidden_size=8)
        model = build_task_conditioned_model(base, cond, Rng(seed))
        store = ParamStore.from_module(model, TaskConditionedModel.param_group)
        store.train_only(CONDITIONING_GROUPS)
        gen = torch.Generator().manual_seed(100 + seed)
        with torch.no_grad():
            for name in store.trainable_names():
                store[name].add_(0.1 * torch.randn(store[name].shape, generator=gen, dtype=store[name].dtype))
        model.eval()

        def loss_fn():
            return stage2_loss(model, episode, Rng(seed).child("features"))[0]

    params = [store[n] for n in store.trainable_names()]
    assert params
    for direction in range(2):
        analytic, numeric = _directional_derivatives(params, loss_fn, seed * 10 + direction)
        assert numeric == pytest.approx(analytic, rel=1e-6, abs=1e-9)


# long training runs ------------------------------------------------------------

@pytest.mark.slow
def test_pretraining_beats_chance(registry):
    model = registry_model(registry, model_dim=16, ffn_dim=32)
    cfg = tiny_train_cfg(pretrain_steps=300, pretrain_batch_size=16)
    held_out = [ex.tokens for name in registry.names() for ex in registry.get(name).test]
    head, losses = pretrain_encoder(model, registry, cfg, Rng(0), steps=0)
    untrained = masked_token_accuracy(model, head, held_out, cfg.mask_rate, Rng(1))
    head, losses = pretrain_encoder(model, registry, cfg, Rng(0))
    trained = masked_token_accuracy(model, head, held_out, cfg.mask_rate, Rng(1))
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    assert trained >= 2.0 / len(registry.vocab)
    assert trained > untrained


@pytest.mark.slow
def test_stage1_learns_keyword_presence():
    spec = SuiteSpec.from_config(tiny_data_cfg(meta_train=("keyword-presence",), meta_test=("keyword-presence",),
                                               train_per_class=64, test_size=100), max_seq_len=12)
    registry = build_synthetic_registry(Rng(0), spec)
    model = registry_model(registry, model_dim=16, ffn_dim=32, head_out_dim=16, adapter_bottleneck_dim=8)
    cfg = tiny_train_cfg(lr=3e-3, shots=4, query_shots=4, steps_per_epoch=50, max_epochs=10, patience=10,
                         pretrain_steps=200)
    pretrain_encoder(model, registry, cfg, Rng(1))
    result = train_stage1(model, registry, cfg, Rng(2))
    assert result.steps <= 500

    dataset = registry.get("keyword-presence-kp0")
    held_out = [sample_episode(dataset, 4, 4, Rng(3).child(i), split="test") for i in range(50)]
    _, accuracy, _ = stage1_validation_loss(model, held_out)
    assert accuracy >= 0.9


@pytest.mark.slow
def test_stage2_never_loses_to_stage1(tmp_path):
    spec = SuiteSpec.from_config(tiny_data_cfg(train_per_class=48, test_size=60), max_seq_len=12)
    registry = build_synthetic_registry(Rng(0), spec)
    base = registry_model(registry, model_dim=16, ffn_dim=32, head_out_dim=16, adapter_bottleneck_dim=8)
    stage1_ckpt, stage2_ckpt = str(tmp_path / "stage1.ckpt"), str(tmp_path / "stage2.ckpt")
    cfg = tiny_train_cfg(lr=3e-3, shots=4, query_shots=4, steps_per_epoch=50, max_epochs=6, patience=6,
                         pretrain_steps=200, val_episodes_per_task=8)
    pretrain_encoder(base, registry, cfg, Rng(1))
    train_stage1(base, registry, cfg.model_copy(update={"checkpoint_path": stage1_ckpt}), Rng(2))
    checkpoint("load", base, stage1_ckpt)
    model = _conditioned(base, registry)
    train_stage2(model, registry, cfg.model_copy(update={"checkpoint_path": stage2_ckpt}), Rng(3))
    checkpoint("load", model, stage2_ckpt)
    model.eval()

    stage1 = evaluate_kshot(base, registry, 4, 20, Rng(4))
    stage2 = evaluate_kshot(model, registry, 4, 20, Rng(4), variant="grad2task")
    gains = [ours.mean - theirs.mean for ours, theirs in zip(stage2.rows, stage1.rows)]
    assert all(gain >= -0.005 for gain in gains), gains
    assert any(gain > 0 for gain in gains), gains
