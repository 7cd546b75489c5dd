"""Seeded, fan-in scaled uniform initialisation for the torch modules."""

from __future__ import annotations

import math

import torch
from torch import nn


def _fan_in(module: nn.Module, name: str, p: torch.Tensor) -> int:
    if isinstance(module, (nn.GRU, nn.LSTM)):
        return module.hidden_size
    if isinstance(module, nn.Embedding):
        return 1
    if name == "bias":
        w = getattr(module, "weight")
        return int(w[0].numel())
    return int(p[0].numel()) if p.dim() > 1 else p.numel()


@torch.no_grad()
def init_uniform(root: nn.Module, seed: int) -> nn.Module:
    """Draw every parameter from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Parameters are visited in ``named_modules`` order with a private generator,
    so the result depends only on ``seed`` and the architecture.
    """
    gen = torch.Generator().manual_seed(seed)
    for module in root.modules():
        for name, p in module.named_parameters(recurse=False):
            bound = 1.0 / math.sqrt(max(1, _fan_in(module, name, p)))
            u = torch.rand(p.shape, generator=gen, dtype=torch.float64)
            p.copy_(((2 * u - 1) * bound).to(p.dtype))
    return root
