"""Vision-language connector: two-layer GELU MLP, or the single linear projector baseline.

Weights follow the row-vector convention ``V = I @ W + b`` with ``W`` of shape
``(d_in, d_out)``. Forward and backward are written out by hand; the module
wraps them in an autograd Function so training uses the same gradients that
the finite-difference tests check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn

from .errors import ShapeError
from .transformer import make_generator, trunc_normal

MODES = ("mlp", "linear")
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    return 0.5 * x * (1.0 + torch.erf(x * _INV_SQRT2))


def gelu_grad(x: torch.Tensor) -> torch.Tensor:
    """d/dx of :func:`gelu`: ``Phi(x) + x * phi(x)``."""
    cdf = 0.5 * (1.0 + torch.erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * torch.exp(-0.5 * x * x)
    return cdf + x * pdf


@dataclass(frozen=True)
class ConnectorConfig:
    mode: str = "mlp"
    d_in: int = 64
    d_out: int = 128
    d_hidden: Optional[int] = None  # defaults to 4 * d_in

    @property
    def hidden(self) -> int:
        return self.d_hidden if self.d_hidden is not None else 4 * self.d_in

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"connector mode must be one of {MODES}, got {self.mode!r}")
        if min(self.d_in, self.d_out, self.hidden) <= 0:
            raise ValueError("connector widths must be positive")


def _check(I: torch.Tensor, w: Dict[str, torch.Tensor]) -> None:
    first = w["W1"] if "W1" in w else w["W"]
    if I.shape[-1] != first.shape[0]:
        raise ShapeError(f"connector expects input width {first.shape[0]}, got {I.shape[-1]}")


def connect(I: torch.Tensor, w: Dict[str, torch.Tensor]) -> torch.Tensor:
    """Map patch features (..., d_in) to visual embeddings (..., d_out), tokenwise."""
    _check(I, w)
    if "W1" in w:
        Z = gelu(I @ w["W1"] + w["b1"])
        return Z @ w["W2"] + w["b2"]
    return I @ w["W"] + w["b"]


def connect_backward(
    I: torch.Tensor, w: Dict[str, torch.Tensor], upstream: torch.Tensor
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Reverse-mode gradients of :func:`connect` given dL/dV."""
    _check(I, w)
    if upstream.shape[:-1] != I.shape[:-1]:
        raise ShapeError(f"upstream gradient shape {tuple(upstream.shape)} does not match input {tuple(I.shape)}")
    flat_I = I.reshape(-1, I.shape[-1])
    G = upstream.reshape(-1, upstream.shape[-1])
    if "W1" not in w:
        if G.shape[-1] != w["W"].shape[1]:
            raise ShapeError("upstream gradient width does not match d_out")
        grads = {"W": flat_I.T @ G, "b": G.sum(0)}
        return (G @ w["W"].T).reshape(I.shape), grads

    if G.shape[-1] != w["W2"].shape[1]:
        raise ShapeError("upstream gradient width does not match d_out")
    pre = flat_I @ w["W1"] + w["b1"]
    Z = gelu(pre)
    dZ = G @ w["W2"].T
    dpre = dZ * gelu_grad(pre)
    grads = {
        "W1": flat_I.T @ dpre,
        "b1": dpre.sum(0),
        "W2": Z.T @ G,
        "b2": G.sum(0),
    }
    return (dpre @ w["W1"].T).reshape(I.shape), grads


class _ConnectFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, I, names, *tensors):
        w = dict(zip(names, tensors))
        ctx.names = names
        ctx.save_for_backward(I, *tensors)
        return connect(I, w)

    @staticmethod
    def backward(ctx, upstream):
        I, *tensors = ctx.saved_tensors
        w = dict(zip(ctx.names, tensors))
        grad_I, grads = connect_backward(I, w, upstream)
        return (grad_I, None, *(grads[n] for n in ctx.names))


class Connector(nn.Module):
    def __init__(self, config: ConnectorConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        g = make_generator(seed)
        if config.mode == "mlp":
            self.W1 = nn.Parameter(trunc_normal((config.d_in, config.hidden), g))
            self.b1 = nn.Parameter(torch.zeros(config.hidden))
            self.W2 = nn.Parameter(trunc_normal((config.hidden, config.d_out), g))
            self.b2 = nn.Parameter(torch.zeros(config.d_out))
        else:
            self.W = nn.Parameter(trunc_normal((config.d_in, config.d_out), g))
            self.b = nn.Parameter(torch.zeros(config.d_out))

    @property
    def names(self) -> Tuple[str, ...]:
        return ("W1", "b1", "W2", "b2") if self.config.mode == "mlp" else ("W", "b")

    def weights(self) -> Dict[str, torch.Tensor]:
        return {n: getattr(self, n) for n in self.names}

    def forward(self, I: torch.Tensor) -> torch.Tensor:
        _check(I, self.weights())
        return _ConnectFn.apply(I, self.names, *(getattr(self, n) for n in self.names))
