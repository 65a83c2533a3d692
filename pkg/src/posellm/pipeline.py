"""End-to-end operations shared by the CLI and the test-suite."""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import prompt_codec
from .ablation import AblationRow
from .config import RunConfig
from .metrics import EvalReport, Prediction, evaluate
from .model import PoseLLM, images_tensor, predict_keypoints
from .synth_data import SkeletonSample, generate_samples, read_dataset, write_dataset
from .trainer import Trainer, TrainState, build_model

log = logging.getLogger(__name__)


def generate_splits(cfg: RunConfig) -> Tuple[List[SkeletonSample], List[SkeletonSample]]:
    train_seeds, val_seeds = cfg.data.seeds()
    return generate_samples(train_seeds, cfg.generator), generate_samples(val_seeds, cfg.generator)


def write_splits(cfg: RunConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    train, val = generate_splits(cfg)
    write_dataset(train, out_dir / "train.jsonl", "train", cfg.generator)
    write_dataset(val, out_dir / "val.jsonl", "val", cfg.generator)
    return {"train": len(train), "val": len(val)}


def load_split(data_dir, split: str = "train") -> List[SkeletonSample]:
    p = Path(data_dir)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    return read_dataset(p)


def new_model(cfg: RunConfig) -> PoseLLM:
    return build_model(cfg.encoder, cfg.connector, cfg.decoder, cfg.lora.r, cfg.lora.alpha,
                       cfg.lora_target_names(), seed=cfg.train.seed, dtype=cfg.train.torch_dtype)


def train_model(cfg: RunConfig, samples: Sequence[SkeletonSample], model: Optional[PoseLLM] = None,
                state: Optional[TrainState] = None, max_steps: Optional[int] = None,
                on_step: Optional[Callable[[int, float], None]] = None) -> Tuple[PoseLLM, TrainState]:
    model = new_model(cfg) if model is None else model
    trainer = Trainer(model, samples, cfg.train)
    if state is not None:
        trainer.state = state
    trainer.run(max_steps=max_steps, on_step=on_step)
    return model, trainer.state


def predict_dataset(model: PoseLLM, samples: Sequence[SkeletonSample]) -> Tuple[List[Prediction], int, int]:
    """Decode all 17 keypoints for each sample; returns (predictions, parse failures, queries)."""
    if not samples:
        return [], 0, 0
    images = images_tensor(samples, dtype=model.dtype)
    results = predict_keypoints(model, images, list(range(prompt_codec.NUM_KEYPOINTS)))
    preds, failures = [], 0
    for s, row in zip(samples, results):
        failures += sum(r.coords is None for r in row)
        preds.append(Prediction.from_pairs(s.seed, [r.coords for r in row]))
    return preds, failures, len(samples) * prompt_codec.NUM_KEYPOINTS


def evaluate_model(model: PoseLLM, samples: Sequence[SkeletonSample], cfg: RunConfig) -> Tuple[EvalReport, List[Prediction]]:
    preds, failures, queries = predict_dataset(model, samples)
    return evaluate(preds, samples, cfg.metrics.oks_params(), failures, queries), preds


def run_ablation(cfg: RunConfig, seeds: Sequence[int], eval_split: str = "train") -> List[AblationRow]:
    """Train and evaluate both connector modes for each seed on the same data."""
    train, val = generate_splits(cfg)
    held = train if eval_split == "train" else val
    held = held[: cfg.metrics.eval_samples]
    rows = []
    for seed in seeds:
        for mode in ("mlp", "linear"):
            run = dataclasses.replace(
                cfg,
                connector=dataclasses.replace(cfg.connector, mode=mode),
                train=dataclasses.replace(cfg.train, seed=int(seed)),
            ).validate()
            log.info("ablation: training %s connector, seed %d", mode, seed)
            model, _ = train_model(run, train)
            report, _ = evaluate_model(model, held, run)
            rows.append(AblationRow(mode, int(seed), report))
    return rows
