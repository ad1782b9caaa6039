"""
Tensor substrate shared by every model in the project.

torch supplies the tensors, the reverse-mode tape and the Adam recurrence. This module
adds the contracts the rest of the code relies on:
  - float64 everywhere (``DTYPE``)
  - checked ops that name both shapes on a mismatch and refuse non-finite results
  - ``backward`` that only accepts a scalar loss with a live tape
  - ``ParamStore``: named parameters in a stable order with per-name trainable flags
  - ``adam_step`` that never touches frozen parameters
  - ``Rng``: seeded counter-based (Philox) streams with independent children
"""
import hashlib
from collections import OrderedDict
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from shared.errors import MissingGradError, NonFiniteError, ShapeError, TapeError

DTYPE = torch.float64
LAYER_NORM_EPS = 1e-5


def ensure_finite(tensor: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteError(f"{what} produced non-finite values (shape {tuple(tensor.shape)})")
    return tensor


def stop_gradient(tensor: torch.Tensor) -> torch.Tensor:
    return tensor.detach()


def _check_broadcast(op: str, a: torch.Tensor, b: torch.Tensor):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as e:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} are not compatible") from e


###############################################################################
# Checked op family
###############################################################################

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not conform")
    return ensure_finite(a @ b, "matmul")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """x @ weight.T + bias, the affine map of an nn.Linear."""
    if x.shape[-1] != weight.shape[-1] or (bias is not None and tuple(bias.shape) != (weight.shape[0],)):
        bias_shape = None if bias is None else tuple(bias.shape)
        raise ShapeError(f"linear: input {tuple(x.shape)} and weight {tuple(weight.shape)} / bias {bias_shape} "
                         f"do not conform")
    return ensure_finite(F.linear(x, weight, bias), "linear")


def apply_linear(layer: nn.Linear, x: torch.Tensor) -> torch.Tensor:
    return linear(x, layer.weight, layer.bias)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast("add", a, b)
    return ensure_finite(a + b, "add")


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast("mul", a, b)
    return ensure_finite(a * b, "mul")


def layer_norm(x: torch.Tensor, weight: Optional[torch.Tensor] = None,
               bias: Optional[torch.Tensor] = None, eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    if eps <= 0:
        raise ValueError(f"layer_norm epsilon must be positive, got {eps}")
    width = x.shape[-1]
    for name, p in (("weight", weight), ("bias", bias)):
        if p is not None and tuple(p.shape) != (width,):
            raise ShapeError(f"layer_norm: input {tuple(x.shape)} and {name} {tuple(p.shape)} do not conform")
    return ensure_finite(F.layer_norm(x, (width,), weight, bias, eps), "layer_norm")


def apply_layer_norm(norm: nn.LayerNorm, x: torch.Tensor) -> torch.Tensor:
    return layer_norm(x, norm.weight, norm.bias, norm.eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return ensure_finite(torch.softmax(x, dim=dim), "softmax")


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def concat(tensors: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    ref = tensors[0]
    axis = dim % ref.dim()
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis):
            raise ShapeError(f"concat: shapes {tuple(ref.shape)} and {tuple(t.shape)} differ off axis {dim}")
    return torch.cat(list(tensors), dim=dim)


def take_slice(x: torch.Tensor, start: int, stop: int, dim: int = -1) -> torch.Tensor:
    size = x.shape[dim]
    if not 0 <= start <= stop <= size:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for shape {tuple(x.shape)} on dim {dim}")
    return x.narrow(dim, start, stop - start)


def mean(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def square(x: torch.Tensor) -> torch.Tensor:
    return x * x


def sqrt(x: torch.Tensor) -> torch.Tensor:
    return ensure_finite(torch.sqrt(x), "sqrt")


def backward(loss: torch.Tensor):
    """Populates ``.grad`` of every leaf that requires grad; torch frees the tape afterwards."""
    if loss.dim() != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise TapeError("backward called on a loss with an empty tape")
    ensure_finite(loss, "loss")
    loss.backward()


###############################################################################
# Seeded randomness
###############################################################################

def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)) and key >= 0:
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """
    Counter-based random stream.

    State transition is numpy's Philox-4x64 keyed by ``SeedSequence(seed, spawn_key=path)``.
    Children extend ``path``; two different paths never share a stream.
    """
    ALGORITHM = "philox4x64"

    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.np = np.random.Generator(np.random.Philox(self._seq))

    def child(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def torch_seed(self) -> int:
        return int(self._seq.generate_state(1, np.uint64)[0] >> np.uint64(1))

    def torch_generator(self) -> torch.Generator:
        return torch.Generator().manual_seed(self.torch_seed())

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


###############################################################################
# Parameter store + optimizer
###############################################################################

class ParamStore:
    """Named parameters with stable order, a group tag and a trainable flag per name."""

    def __init__(self):
        self._params: "OrderedDict[str, nn.Parameter]" = OrderedDict()
        self._groups: Dict[str, str] = {}
        self._trainable: Dict[str, bool] = {}
        self._optimizer: Optional[torch.optim.Adam] = None

    @classmethod
    def from_module(cls, module: nn.Module, group_of: Optional[Callable[[str], str]] = None) -> "ParamStore":
        store = cls()
        for name, param in module.named_parameters():
            store.add(name, param, group=group_of(name) if group_of else "default")
        return store

    def add(self, name: str, param: nn.Parameter, group: str = "default", trainable: bool = True):
        if name in self._params:
            raise ValueError(f"parameter name '{name}' already registered")
        self._params[name] = param
        self._groups[name] = group
        self._trainable[name] = trainable
        param.requires_grad_(trainable)
        self._optimizer = None

    def __len__(self):
        return len(self._params)

    def __contains__(self, name: str):
        return name in self._params

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self) -> Iterable[Tuple[str, nn.Parameter]]:
        return self._params.items()

    def group(self, name: str) -> str:
        return self._groups[name]

    def names_in(self, groups: Iterable[str]) -> List[str]:
        wanted = set(groups)
        return [n for n in self._params if self._groups[n] in wanted]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> List[str]:
        return [n for n, flag in self._trainable.items() if flag]

    def train_only(self, groups: Iterable[str]):
        """Makes exactly the parameters of ``groups`` trainable; everything else is frozen."""
        wanted = set(groups)
        for name, param in self._params.items():
            flag = self._groups[name] in wanted
            self._trainable[name] = flag
            param.requires_grad_(flag)

    def zero_grad(self):
        for param in self._params.values():
            param.grad = None

    def digest(self, names: Optional[Iterable[str]] = None) -> str:
        h = hashlib.sha256()
        for name in (names if names is not None else self._params):
            h.update(name.encode("utf-8"))
            h.update(self._params[name].detach().cpu().numpy().astype("<f8").tobytes())
        return h.hexdigest()

    # optimizer ---------------------------------------------------------------

    def optimizer(self) -> torch.optim.Adam:
        if self._optimizer is None:
            self._optimizer = torch.optim.Adam(list(self._params.values()), lr=0.0, foreach=False)
        return self._optimizer

    def reset_optimizer(self):
        self._optimizer = None

    def adam_state(self, name: str) -> Optional[Tuple[float, torch.Tensor, torch.Tensor]]:
        if self._optimizer is None:
            return None
        state = self._optimizer.state.get(self._params[name])
        if not state:
            return None
        return float(state["step"]), state["exp_avg"], state["exp_avg_sq"]

    def set_adam_state(self, name: str, step: float, exp_avg: torch.Tensor, exp_avg_sq: torch.Tensor):
        param = self._params[name]
        self.optimizer().state[param] = {
            "step": torch.tensor(float(step), dtype=torch.float32),
            "exp_avg": exp_avg.to(dtype=param.dtype).clone(),
            "exp_avg_sq": exp_avg_sq.to(dtype=param.dtype).clone(),
        }


def adam_step(store: ParamStore, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One Adam update of the trainable parameters; gradients are cleared afterwards."""
    for name, param in store.items():
        if not store.is_trainable(name):
            param.grad = None
        elif param.grad is None:
            raise MissingGradError(f"trainable parameter '{name}' has no gradient")
        else:
            ensure_finite(param.grad, f"gradient of '{name}'")

    optimizer = store.optimizer()
    for group in optimizer.param_groups:
        group["lr"] = lr
        group["betas"] = tuple(betas)
        group["eps"] = eps
    optimizer.step()
    store.zero_grad()
