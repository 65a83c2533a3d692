"""Low-rank adapters on attention q/v projections.

Effective weight is ``W + (alpha / r) * B @ A`` with ``A: (r, d_in)`` and
``B: (d_out, r)``. ``B`` starts at zero so an attached model computes exactly
what the base model computes.
"""

from __future__ import annotations

import copy
import math
from typing import Dict, Iterable, List, Optional, Sequence

import torch
import torch.nn as nn

from .errors import ConfigError
from .transformer import Attention, make_generator

LORA_PROJECTIONS = ("wq", "wv")


class LoraConfigError(ConfigError):
    pass


class LoraAdapter(nn.Module):
    def __init__(self, target: str, d_out: int, d_in: int, r: int, alpha: float, generator: torch.Generator):
        super().__init__()
        if r <= 0:
            raise LoraConfigError(f"LoRA rank must be positive, got {r}")
        self.target = target
        self.r = r
        self.alpha = float(alpha)
        bound = 1.0 / math.sqrt(d_in)
        self.A = nn.Parameter(torch.empty(r, d_in).uniform_(-bound, bound, generator=generator))
        self.B = nn.Parameter(torch.zeros(d_out, r))

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def delta(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)

    def extra_repr(self) -> str:
        return f"target={self.target}, r={self.r}, alpha={self.alpha}"


def lora_targets(model: nn.Module) -> List[str]:
    """Every q/v projection name in ``model`` (e.g. ``encoder.block0.attn.wq``)."""
    out = []
    for mod_name, mod in model.named_modules():
        if isinstance(mod, Attention):
            prefix = mod_name + "." if mod_name else ""
            out.extend(prefix + p for p in LORA_PROJECTIONS)
    return out


def _resolve(model: nn.Module, target: str) -> Attention:
    owner_name, _, proj = target.rpartition(".")
    try:
        owner = model.get_submodule(owner_name) if owner_name else model
    except AttributeError:
        owner = None
    if not isinstance(owner, Attention) or proj not in LORA_PROJECTIONS:
        raise LoraConfigError(
            f"unknown LoRA target {target!r}; targets must name an attention q/v projection"
        )
    return owner


def attach_lora(
    model: nn.Module,
    targets: Optional[Sequence[str]] = None,
    r: int = 4,
    alpha: float = 4.0,
    seed: int = 0,
) -> Dict[str, LoraAdapter]:
    """Attach adapters in place; ``targets=None`` means every q/v projection."""
    targets = lora_targets(model) if targets is None else list(targets)
    owners = [_resolve(model, t) for t in targets]
    g = make_generator(seed)
    adapters = {}
    for target, owner in zip(targets, owners):
        proj = target.rpartition(".")[2]
        base = getattr(owner, proj)
        ad = LoraAdapter(target, base.shape[0], base.shape[1], r, alpha, g).to(base.dtype)
        owner.lora[proj] = ad
        adapters[target] = ad
    return adapters


def adapters_of(model: nn.Module) -> Dict[str, LoraAdapter]:
    out = {}
    for mod_name, mod in model.named_modules():
        if isinstance(mod, Attention):
            prefix = mod_name + "." if mod_name else ""
            for proj, ad in mod.lora.items():
                out[prefix + proj] = ad
    return out


def merge_lora(model: nn.Module) -> nn.Module:
    """Return a copy with every adapter folded into its base weight and removed."""
    merged = copy.deepcopy(model)
    for mod in merged.modules():
        if isinstance(mod, Attention):
            with torch.no_grad():
                for proj in list(mod.lora.keys()):
                    getattr(mod, proj).copy_(mod.weight(proj))
                    del mod.lora[proj]
    return merged


def lora_parameter_names(model: nn.Module) -> List[str]:
    return [n for n, _ in model.named_parameters() if ".lora." in n or n.startswith("lora.")]
