"""Teacher-forced training: AdamW, gradient accumulation, LoRA on the backbones.

The connector is always fully trained. Encoder/decoder base weights stay frozen
and only their LoRA factors move, unless ``train_embeddings`` also unfreezes
the patch/token/position embeddings and the output head.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .language_decoder import masked_cross_entropy
from .lora import adapters_of, attach_lora, lora_targets
from .model import PoseLLM, Query, build_queries, collate, images_tensor
from .synth_data import SkeletonSample

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 0.05
    micro_batch: int = 8
    accumulation_steps: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_embeddings: bool = False
    queries_per_sample: int = 0
    max_steps: int = 0  # 0 = run all epochs
    dtype: str = "float32"

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation_steps

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def validate(self) -> None:
        for name in ("epochs", "micro_batch", "accumulation_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("train.lr and train.weight_decay must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("train.dtype must be float32 or float64")


@dataclass
class TrainState:
    step: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)
    losses: List[float] = field(default_factory=list)


def adamw_step(
    params: Dict[str, torch.Tensor],
    grads: Dict[str, torch.Tensor],
    state: TrainState,
    lr: float,
    wd: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place AdamW update with decoupled weight decay.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``. Increments ``state.step``.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            update = (m / c1) / ((v / c2).sqrt() + eps) + wd * p
            p.sub_(lr * update)


def trainable_names(model: PoseLLM, train_embeddings: bool) -> List[str]:
    names = set(model.connector_parameter_names())
    if train_embeddings:
        names |= set(model.embedding_parameter_names())
    return [n for n, _ in model.named_parameters() if n in names or ".lora." in n]


def prepare_model(model: PoseLLM, config: TrainConfig) -> Dict[str, torch.nn.Parameter]:
    """Freeze everything except the trainable set; returns that set by name."""
    keep = set(trainable_names(model, config.train_embeddings))
    out = {}
    for n, p in model.named_parameters():
        p.requires_grad_(n in keep)
        if n in keep:
            out[n] = p
    return out


class Trainer:
    def __init__(self, model: PoseLLM, samples: Sequence[SkeletonSample], config: TrainConfig,
                 queries: Optional[Sequence[Query]] = None):
        config.validate()
        if not samples:
            raise ValueError("training set is empty")
        self.model = model
        self.config = config
        self.samples = list(samples)
        self.queries = list(queries) if queries is not None else build_queries(
            self.samples, config.queries_per_sample, config.seed)
        if not self.queries:
            raise ValueError("training set has no visible keypoints to query")
        self.images = images_tensor(self.samples, dtype=model.dtype)
        self.params = prepare_model(model, config)
        self.state = TrainState()

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.queries) / self.config.effective_batch)

    @property
    def total_steps(self) -> int:
        total = self.steps_per_epoch * self.config.epochs
        return min(total, self.config.max_steps) if self.config.max_steps else total

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, epoch]).permutation(len(self.queries))

    def batch_for_step(self, step: int) -> List[Query]:
        epoch, offset = divmod(step, self.steps_per_epoch)
        order = self.epoch_order(epoch)
        eb = self.config.effective_batch
        return [self.queries[i] for i in order[offset * eb:(offset + 1) * eb]]

    def compute_gradients(self, batch: Sequence[Query]) -> float:
        """Accumulate gradients of the effective-batch mean loss over micro-batches."""
        for p in self.params.values():
            p.grad = None
        n_tokens = sum(sum(q.record.answer_mask[1:]) for q in batch)
        total = 0.0
        mb = self.config.micro_batch
        for start in range(0, len(batch), mb):
            inputs, targets, mask, idx = collate(batch[start:start + mb])
            logits = self.model(self.images[idx], inputs)
            loss = masked_cross_entropy(logits, targets, mask, reduction="sum") / n_tokens
            loss.backward()
            total += loss.item()
        return total

    def step(self) -> float:
        step = self.state.step
        self.model.train()
        loss = self.compute_gradients(self.batch_for_step(step))
        if not math.isfinite(loss):
            raise TrainingAborted(f"non-finite loss {loss} at optimizer step {step}")
        grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in self.params.items()}
        c = self.config
        adamw_step(self.params, grads, self.state, c.lr, c.weight_decay, c.beta1, c.beta2, c.eps)
        self.state.losses.append(loss)
        return loss

    def run(self, max_steps: Optional[int] = None, on_step: Optional[Callable[[int, float], None]] = None) -> TrainState:
        end = self.total_steps if max_steps is None else min(self.total_steps, self.state.step + max_steps)
        while self.state.step < end:
            loss = self.step()
            if on_step is not None:
                on_step(self.state.step, loss)
            if self.state.step % 50 == 0:
                log.info("step %d/%d loss %.4f", self.state.step, end, loss)
        return self.state


def build_model(encoder, connector, decoder, lora_r: int, lora_alpha: float, lora_target_names=None,
                seed: int = 0, dtype: torch.dtype = torch.float32) -> PoseLLM:
    model = PoseLLM(encoder, connector, decoder, seed=seed)
    attach_lora(model, lora_target_names, r=lora_r, alpha=lora_alpha, seed=seed * 3 + 2)
    return model.to(dtype)


def train(samples: Sequence[SkeletonSample], model: PoseLLM, config: TrainConfig,
          on_step: Optional[Callable[[int, float], None]] = None) -> Tuple[PoseLLM, TrainState]:
    trainer = Trainer(model, samples, config)
    trainer.run(on_step=on_step)
    return model, trainer.state
