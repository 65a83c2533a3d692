"""Causal transformer decoder over the concatenated [visual; text] sequence."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import prompt_codec
from .transformer import Block, LayerNorm, make_generator, trunc_normal


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    d_model: int = 128
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = prompt_codec.VOCAB.size
    max_seq_len: int = 320

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.depth < 0 or self.vocab_size <= 0 or self.max_seq_len <= 0:
            raise ValueError("depth, vocab_size and max_seq_len must be valid")


@dataclass
class DecodeResult:
    token_ids: List[int]
    coords: Optional[Tuple[float, float]]

    @property
    def parse_failed(self) -> bool:
        return self.coords is None

    @property
    def text(self) -> str:
        return prompt_codec.detokenize(self.token_ids)


class LanguageDecoder(nn.Module):
    # visual positions take rows [0, N) of pos_embed, text positions continue at N
    EMBEDDING_PARAMS = ("tok_embed", "pos_embed", "ln_f.g", "ln_f.b", "head")

    def __init__(self, config: DecoderConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        g = make_generator(seed)
        d = config.d_model
        self.tok_embed = nn.Parameter(trunc_normal((config.vocab_size, d), g))
        self.pos_embed = nn.Parameter(trunc_normal((config.max_seq_len, d), g))
        for i in range(config.depth):
            self.add_module(f"block{i}", Block(d, config.heads, config.mlp_ratio, g))
        self.ln_f = LayerNorm(d)
        self.head = nn.Parameter(trunc_normal((config.vocab_size, d), g))

    @property
    def blocks(self) -> List[Block]:
        return [getattr(self, f"block{i}") for i in range(self.config.depth)]

    def forward(self, V: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        """Logits (B, L, vocab) for the text positions only."""
        B, N, d = V.shape
        L = token_ids.shape[1]
        if N + L > self.config.max_seq_len:
            raise CapacityError(f"sequence of {N} visual + {L} text tokens exceeds max_seq_len {self.config.max_seq_len}")
        if d != self.config.d_model:
            raise ValueError(f"visual embedding width {d} != d_model {self.config.d_model}")
        x = torch.cat([V, F.embedding(token_ids, self.tok_embed)], dim=1) + self.pos_embed[: N + L]
        for blk in self.blocks:
            x = blk(x, causal=True)
        return F.linear(self.ln_f(x[:, N:]), self.head)

    @torch.no_grad()
    def greedy_decode(self, V: torch.Tensor, prompt_ids: torch.Tensor, max_answer_len: int) -> List[DecodeResult]:
        """Batched greedy decoding; all prompts in the batch share one length.

        argmax ties go to the lowest token id. Each row stops at eos or after
        ``max_answer_len`` generated tokens.
        """
        ids = prompt_ids
        B = ids.shape[0]
        generated: List[List[int]] = [[] for _ in range(B)]
        done = [False] * B
        for _ in range(max_answer_len):
            nxt = self(V, ids)[:, -1].argmax(-1)
            for i, t in enumerate(nxt.tolist()):
                if done[i]:
                    continue
                generated[i].append(t)
                done[i] = t == prompt_codec.EOS
            if all(done):
                break
            ids = torch.cat([ids, nxt[:, None]], dim=1)
        results = []
        for gen in generated:
            body = gen[:-1] if gen and gen[-1] == prompt_codec.EOS else gen
            coords = prompt_codec.parse_coords(prompt_codec.detokenize(body)) if gen else None
            results.append(DecodeResult(gen, coords))
        return results


def masked_cross_entropy(
    logits: torch.Tensor,
    target_ids: torch.Tensor,
    answer_mask: torch.Tensor,
    reduction: str = "mean",
) -> torch.Tensor:
    """Cross-entropy over mask-true positions only.

    Only the selected rows of ``logits`` enter the computation, so anything at a
    mask-false position (logits or target) has no effect on the value or gradient.
    ``reduction="sum"`` returns the unnormalized sum for callers that normalize
    over a larger batch themselves.
    """
    mask = answer_mask.bool()
    if not bool(mask.any()):
        raise ValueError("answer mask has no true positions")
    sel = logits[mask]
    tgt = target_ids[mask]
    nll = -torch.log_softmax(sel, dim=-1).gather(-1, tgt[:, None]).squeeze(-1)
    if reduction == "sum":
        return nll.sum()
    return nll.mean()


def shift_for_next_token(token_ids: torch.Tensor, answer_mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Teacher-forcing alignment: inputs ``ids[:, :-1]`` predict targets ``ids[:, 1:]``."""
    return token_ids[:, :-1], token_ids[:, 1:], answer_mask[:, 1:]
