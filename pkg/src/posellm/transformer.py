"""Pre-norm transformer blocks shared by the vision encoder and the language decoder.

Projection weights are stored ``(d_out, d_in)`` and applied as ``x @ W.T + b``.
Attention q/k/v/o projections are plain parameters (``wq``, ``bq``, ...) so that
each one is individually addressable by name, which is what LoRA attaches to.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

INIT_STD = 0.02


def trunc_normal(shape, generator: torch.Generator, std: float = INIT_STD) -> torch.Tensor:
    t = torch.empty(shape)
    nn.init.trunc_normal_(t, mean=0.0, std=std, a=-2 * std, b=2 * std, generator=generator)
    return t


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.g = nn.Parameter(torch.ones(d))
        self.b = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(x, (x.shape[-1],), self.g, self.b, self.eps)


class Attention(nn.Module):
    PROJECTIONS = ("wq", "wk", "wv", "wo")

    def __init__(self, d: int, heads: int, generator: torch.Generator):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        for name in self.PROJECTIONS:
            setattr(self, name, nn.Parameter(trunc_normal((d, d), generator)))
            setattr(self, "b" + name[1], nn.Parameter(torch.zeros(d)))
        # LoRA adapters keyed by projection name; filled by posellm.lora.attach_lora
        self.lora = nn.ModuleDict()

    def weight(self, name: str) -> torch.Tensor:
        w = getattr(self, name)
        if name in self.lora:
            w = w + self.lora[name].delta()
        return w

    def forward(self, x: torch.Tensor, causal: bool) -> torch.Tensor:
        B, T, d = x.shape
        h = self.heads

        def proj(name):
            return F.linear(x, self.weight(name), getattr(self, "b" + name[1]))

        q, k, v = (proj(n).view(B, T, h, d // h).transpose(1, 2) for n in ("wq", "wk", "wv"))
        out = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        out = out.transpose(1, 2).reshape(B, T, d)
        return F.linear(out, self.weight("wo"), self.bo)


class MLP(nn.Module):
    def __init__(self, d: int, ratio: int, generator: torch.Generator):
        super().__init__()
        hidden = d * ratio
        self.w1 = nn.Parameter(trunc_normal((hidden, d), generator))
        self.b1 = nn.Parameter(torch.zeros(hidden))
        self.w2 = nn.Parameter(trunc_normal((d, hidden), generator))
        self.b2 = nn.Parameter(torch.zeros(d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(F.gelu(F.linear(x, self.w1, self.b1)), self.w2, self.b2)


class Block(nn.Module):
    """LN -> MHSA -> residual, LN -> MLP(GELU) -> residual."""

    def __init__(self, d: int, heads: int, mlp_ratio: int, generator: torch.Generator):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = Attention(d, heads, generator)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio, generator)

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), causal)
        return x + self.mlp(self.ln2(x))


def block_param_count(d: int, mlp_ratio: int) -> int:
    hidden = d * mlp_ratio
    return 2 * 2 * d + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d)


def make_generator(seed: Optional[int]) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(0 if seed is None else int(seed))
    return g
