import math

import numpy as np
import pytest
import torch
from torch import nn

from shared.errors import MissingGradError, NonFiniteError, ShapeError, TapeError
from shared.tensor_core import (DTYPE, ParamStore, Rng, adam_step, add, backward, concat, ensure_finite, layer_norm,
                                linear, matmul, mul, softmax, take_slice)


def test_matmul_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(torch.ones(2, 3, dtype=DTYPE), torch.ones(4, 5, dtype=DTYPE))


def test_broadcast_mismatch():
    with pytest.raises(ShapeError):
        add(torch.ones(2, 3, dtype=DTYPE), torch.ones(4, dtype=DTYPE))
    with pytest.raises(ShapeError):
        mul(torch.ones(3, dtype=DTYPE), torch.ones(2, dtype=DTYPE))
    assert add(torch.ones(2, 3, dtype=DTYPE), torch.ones(3, dtype=DTYPE)).shape == (2, 3)


def test_matmul_matches_a_triple_loop():
    gen = torch.Generator().manual_seed(0)
    a = torch.randn(3, 4, generator=gen, dtype=DTYPE)
    b = torch.randn(4, 2, generator=gen, dtype=DTYPE)
    expected = torch.zeros(3, 2, dtype=DTYPE)
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    assert torch.allclose(matmul(a, b), expected, rtol=0, atol=1e-12)


def test_linear_is_the_nn_linear_map():
    layer = nn.Linear(4, 3).to(DTYPE)
    x = torch.randn(5, 4, dtype=DTYPE)
    assert torch.equal(linear(x, layer.weight, layer.bias), layer(x))
    with pytest.raises(ShapeError, match=r"\(5, 3\).*\(3, 4\)"):
        linear(torch.ones(5, 3, dtype=DTYPE), layer.weight, layer.bias)
    with pytest.raises(ShapeError):
        linear(x, layer.weight, torch.ones(4, dtype=DTYPE))


def test_non_finite_results_are_refused():
    with pytest.raises(NonFiniteError):
        ensure_finite(torch.tensor([1.0, math.inf], dtype=DTYPE), "logits")
    with pytest.raises(NonFiniteError):
        mul(torch.tensor([1e300], dtype=DTYPE), torch.tensor([1e300], dtype=DTYPE))


def test_softmax_rows_sum_to_one():
    out = softmax(torch.randn(4, 7, dtype=DTYPE))
    assert torch.allclose(out.sum(dim=-1), torch.ones(4, dtype=DTYPE))


def test_layer_norm_checks():
    x = torch.randn(3, 5, dtype=DTYPE)
    with pytest.raises(ValueError):
        layer_norm(x, eps=0.0)
    with pytest.raises(ShapeError):
        layer_norm(x, weight=torch.ones(4, dtype=DTYPE))
    out = layer_norm(x)
    assert torch.allclose(out.mean(dim=-1), torch.zeros(3, dtype=DTYPE), atol=1e-12)


def test_concat_and_slice_bounds():
    with pytest.raises(ShapeError):
        concat([])
    with pytest.raises(ShapeError):
        concat([torch.ones(2, 3), torch.ones(3, 3)], dim=-1)
    assert concat([torch.ones(2, 3), torch.ones(2, 1)], dim=-1).shape == (2, 4)
    with pytest.raises(ShapeError):
        take_slice(torch.ones(4), 2, 6)
    assert take_slice(torch.arange(6.0), 1, 3).tolist() == [1.0, 2.0]


def test_backward_needs_scalar_with_tape():
    w = torch.ones(3, dtype=DTYPE, requires_grad=True)
    with pytest.raises(ShapeError):
        backward(w * 2)
    with pytest.raises(TapeError):
        backward(torch.tensor(1.0, dtype=DTYPE))
    backward((w * w).sum())
    assert torch.equal(w.grad, torch.full((3,), 2.0, dtype=DTYPE))


def test_rng_is_reproducible_and_children_are_independent():
    a = Rng(11).child("stage1", 4).np.random(8)
    b = Rng(11).child("stage1", 4).np.random(8)
    c = Rng(11).child("stage1", 5).np.random(8)
    d = Rng(12).child("stage1", 4).np.random(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    assert Rng(3).child("x").torch_seed() == Rng(3).child("x").torch_seed()
    assert Rng(3).path == ()


def test_rng_child_does_not_consume_parent():
    parent = Rng(5)
    parent.np.random(3)
    parent.child("anything").np.random(100)
    fresh = Rng(5)
    fresh.np.random(3)
    assert np.array_equal(parent.np.random(2), fresh.np.random(2))


def _linear_store():
    layer = nn.Linear(3, 2).to(DTYPE)
    store = ParamStore.from_module(layer, lambda name: "w" if name == "weight" else "b")
    return layer, store


def test_param_store_order_and_groups():
    layer, store = _linear_store()
    assert list(store) == ["weight", "bias"]
    assert store.names_in(["b"]) == ["bias"]
    store.train_only(["w"])
    assert store.trainable_names() == ["weight"]
    assert layer.weight.requires_grad and not layer.bias.requires_grad
    with pytest.raises(ValueError):
        store.add("weight", layer.weight)


def test_adam_step_leaves_frozen_parameters_untouched():
    layer, store = _linear_store()
    store.train_only(["w"])
    bias_before = layer.bias.detach().clone()
    weight_before = layer.weight.detach().clone()
    backward(layer(torch.randn(4, 3, dtype=DTYPE)).pow(2).sum())
    adam_step(store, lr=0.1)
    assert torch.equal(layer.bias, bias_before)
    assert not torch.equal(layer.weight, weight_before)
    assert layer.weight.grad is None
    assert store.adam_state("bias") is None
    step, m, v = store.adam_state("weight")
    assert step == 1.0 and m.shape == v.shape == layer.weight.shape


def test_adam_step_with_zero_lr_changes_nothing():
    layer, store = _linear_store()
    before = store.digest()
    backward(layer(torch.randn(4, 3, dtype=DTYPE)).sum())
    adam_step(store, lr=0.0)
    assert store.digest() == before


def test_adam_step_requires_gradients_of_trainable_parameters():
    layer, store = _linear_store()
    with pytest.raises(MissingGradError, match="weight"):
        adam_step(store, lr=0.1)


def test_digest_tracks_values():
    layer, store = _linear_store()
    before = store.digest()
    with torch.no_grad():
        layer.bias.add_(1.0)
    assert store.digest() != before
    assert store.digest(["weight"]) == ParamStore.from_module(layer).digest(["weight"])


def test_adam_step_follows_the_textbook_recurrence():
    w = nn.Parameter(torch.tensor([0.5, -1.0, 2.0], dtype=DTYPE))
    store = ParamStore()
    store.add("w", w)
    lr, (b1, b2), eps = 0.1, (0.9, 0.999), 1e-8
    scale = torch.tensor([1.0, 3.0, 0.5], dtype=DTYPE)

    expected = w.detach().clone()
    m = torch.zeros(3, dtype=DTYPE)
    v = torch.zeros(3, dtype=DTYPE)
    for t in range(1, 4):
        backward((scale * w * w).sum())
        g = w.grad.detach().clone()
        adam_step(store, lr, (b1, b2), eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        expected = expected - lr * m_hat / (v_hat.sqrt() + eps)
        assert torch.allclose(w.detach(), expected, rtol=1e-12, atol=1e-14)
