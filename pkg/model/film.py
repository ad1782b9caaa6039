"""Feature-wise linear modulation of adapter activations."""
import typing
from dataclasses import dataclass

import torch

from shared.errors import ShapeError
from shared.tensor_core import DTYPE, add, concat, mul

CLS_POSITION = 0
SCOPES = ("cls", "all")


@dataclass
class AdaptationParams:
    """
    FiLM tuple for one adapter, batched over sequences:
    gamma_mid / beta_mid (B, bottleneck), gamma_out / beta_out (B, model_dim).
    """
    gamma_mid: torch.Tensor
    beta_mid: torch.Tensor
    gamma_out: torch.Tensor
    beta_out: torch.Tensor

    @classmethod
    def identity(cls, batch: int, bottleneck_dim: int, model_dim: int) -> "AdaptationParams":
        return cls(
            gamma_mid=torch.ones(batch, bottleneck_dim, dtype=DTYPE),
            beta_mid=torch.zeros(batch, bottleneck_dim, dtype=DTYPE),
            gamma_out=torch.ones(batch, model_dim, dtype=DTYPE),
            beta_out=torch.zeros(batch, model_dim, dtype=DTYPE),
        )

    def pair(self, where: str) -> typing.Tuple[torch.Tensor, torch.Tensor]:
        if where == "mid":
            return self.gamma_mid, self.beta_mid
        if where == "out":
            return self.gamma_out, self.beta_out
        raise ValueError(f"modulation point must be 'mid' or 'out', got {where!r}")


def film_apply(h: torch.Tensor, params: AdaptationParams, where: str, scope: str = "cls",
               position: int = CLS_POSITION) -> torch.Tensor:
    """
    h: (B, T, F). With scope "cls" only row ``position`` becomes gamma * h + beta and every
    other position is returned bit-identical; scope "all" modulates every position.
    """
    gamma, beta = params.pair(where)
    if gamma.shape != beta.shape or gamma.shape[-1] != h.shape[-1] or gamma.shape[0] != h.shape[0]:
        raise ShapeError(f"film_apply: hidden {tuple(h.shape)} and {where} params {tuple(gamma.shape)} do not conform")
    if scope == "all":
        return add(mul(gamma[:, None, :], h), beta[:, None, :])
    if scope != "cls":
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    if not 0 <= position < h.shape[1]:
        raise ShapeError(f"film_apply: position {position} outside sequence of length {h.shape[1]}")
    modulated = add(mul(gamma, h[:, position]), beta)[:, None, :]
    return concat([h[:, :position], modulated, h[:, position + 1:]], dim=1)
