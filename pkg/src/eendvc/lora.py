"""Low-rank adapters for frozen linear layers.

An adapted layer computes ``base(x) + scaling * B(A(x))`` with the base
weights frozen. A is rank x in_features, B is out_features x rank, so each
adapted matrix adds exactly rank * (in_features + out_features) trainable
parameters. B starts at zero, so a freshly attached adapter is a no-op.
"""

from __future__ import annotations

import math
from typing import Iterator

import torch
from torch import nn


class LoRALinear(nn.Module):
    """Wraps a frozen ``nn.Linear`` with a trainable low-rank update."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float | None = None):
        super().__init__()
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.base = base
        for param in self.base.parameters():
            param.requires_grad_(False)
        self.rank = rank
        self.scaling = (alpha if alpha is not None else float(rank)) / rank
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        self.merged = False

    @property
    def added_parameter_count(self) -> int:
        return self.lora_a.numel() + self.lora_b.numel()

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * (self.lora_b @ self.lora_a)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        if not self.merged:
            out = out + self.scaling * torch.nn.functional.linear(
                torch.nn.functional.linear(x, self.lora_a), self.lora_b
            )
        return out

    def merge(self) -> None:
        """Fold the adapter into the base weight matrix."""
        if not self.merged:
            with torch.no_grad():
                self.base.weight += self.delta_weight()
            self.merged = True

    def unmerge(self) -> None:
        """Subtract a previously merged adapter from the base weight."""
        if self.merged:
            with torch.no_grad():
                self.base.weight -= self.delta_weight()
            self.merged = False


def _resolve_parent(module: nn.Module, dotted: str) -> tuple[nn.Module, str]:
    parts = dotted.split(".")
    parent = module
    for part in parts[:-1]:
        parent = getattr(parent, part)
    return parent, parts[-1]


def attach(
    module: nn.Module,
    target_names: list[str],
    rank: int,
    alpha: float | None = None,
    seed: int = 0,
) -> list[str]:
    """Replace the named ``nn.Linear`` submodules with LoRA-wrapped versions.

    Adapter initialization is seeded so repeated runs attach identical
    adapters. Returns the list of adapted names.
    """
    adapted = []
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        for name in target_names:
            parent, attr = _resolve_parent(module, name)
            layer = getattr(parent, attr)
            if isinstance(layer, LoRALinear):
                raise ValueError(f"{name} already carries an adapter")
            if not isinstance(layer, nn.Linear):
                raise TypeError(f"{name} is {type(layer).__name__}, expected nn.Linear")
            setattr(parent, attr, LoRALinear(layer, rank, alpha))
            adapted.append(name)
    return adapted


def strip(module: nn.Module) -> int:
    """Remove all adapters, restoring the original linear layers.

    Merged adapters are unmerged first, so the base weights come back
    numerically intact. Returns the number of adapters removed."""
    removed = 0
    for name, child in list(module.named_modules()):
        if isinstance(child, LoRALinear):
            child.unmerge()
            parent, attr = _resolve_parent(module, name)
            base = child.base
            for param in base.parameters():
                param.requires_grad_(True)
            setattr(parent, attr, base)
            removed += 1
    return removed


def adapters(module: nn.Module) -> Iterator[tuple[str, LoRALinear]]:
    for name, child in module.named_modules():
        if isinstance(child, LoRALinear):
            yield name, child


def adapter_parameters(module: nn.Module) -> Iterator[nn.Parameter]:
    for _, layer in adapters(module):
        yield layer.lora_a
        yield layer.lora_b


def added_parameter_count(module: nn.Module) -> int:
    return sum(layer.added_parameter_count for _, layer in adapters(module))
