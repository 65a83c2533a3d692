"""Encoder -> connector -> decoder assembly and batching of instruction records."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import prompt_codec
from .connector import Connector, ConnectorConfig
from .language_decoder import DecodeResult, DecoderConfig, LanguageDecoder, shift_for_next_token
from .synth_data import SkeletonSample
from .vision_encoder import EncoderConfig, VisionEncoder


class PoseLLM(nn.Module):
    def __init__(self, encoder: EncoderConfig, connector: ConnectorConfig, decoder: DecoderConfig, seed: int = 0):
        super().__init__()
        if connector.d_in != encoder.d_vis:
            raise ValueError(f"connector d_in {connector.d_in} != encoder d_vis {encoder.d_vis}")
        if connector.d_out != decoder.d_model:
            raise ValueError(f"connector d_out {connector.d_out} != decoder d_model {decoder.d_model}")
        # distinct streams per component so changing one config does not reshuffle the others
        self.encoder = VisionEncoder(encoder, seed=seed * 3 + 0)
        self.connector = Connector(connector, seed=seed * 3 + 1)
        self.decoder = LanguageDecoder(decoder, seed=seed * 3 + 2)

    def visual_embedding(self, images: torch.Tensor) -> torch.Tensor:
        return self.connector(self.encoder(images))

    def forward(self, images: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.visual_embedding(images), token_ids)

    def embedding_parameter_names(self) -> List[str]:
        return [f"encoder.{n}" for n in VisionEncoder.EMBEDDING_PARAMS] + [
            f"decoder.{n}" for n in LanguageDecoder.EMBEDDING_PARAMS
        ]

    def connector_parameter_names(self) -> List[str]:
        return [f"connector.{n}" for n in self.connector.names]

    @property
    def dtype(self) -> torch.dtype:
        return self.connector.weights()[self.connector.names[0]].dtype


@dataclass(frozen=True)
class Query:
    """One (image, keypoint) training/evaluation unit."""

    sample_index: int
    keypoint: int
    record: prompt_codec.InstructionRecord


def build_queries(samples: Sequence[SkeletonSample], queries_per_sample: int = 0, seed: int = 0) -> List[Query]:
    """Expand samples into per-keypoint queries over visible keypoints.

    ``queries_per_sample=0`` keeps every visible keypoint; a positive value keeps
    that many, chosen per sample by a seeded RNG.
    """
    out = []
    for i, s in enumerate(samples):
        visible = [k for k in range(prompt_codec.NUM_KEYPOINTS) if s.visibility[k]]
        if queries_per_sample > 0 and len(visible) > queries_per_sample:
            rng = np.random.default_rng([seed, s.seed])
            visible = sorted(rng.choice(visible, size=queries_per_sample, replace=False).tolist())
        for k in visible:
            x, y = s.keypoints[k]
            out.append(Query(i, k, prompt_codec.make_training_record(k, float(x), float(y))))
    return out


def images_tensor(samples: Sequence[SkeletonSample], dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype)


def collate(queries: Sequence[Query]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Right-pad records; returns (inputs, targets, target_mask, sample_indices)."""
    L = max(len(q.record.token_ids) for q in queries)
    ids = torch.full((len(queries), L), prompt_codec.PAD, dtype=torch.long)
    mask = torch.zeros((len(queries), L), dtype=torch.bool)
    for i, q in enumerate(queries):
        n = len(q.record.token_ids)
        ids[i, :n] = torch.tensor(q.record.token_ids)
        mask[i, :n] = torch.tensor(q.record.answer_mask)
    inputs, targets, tmask = shift_for_next_token(ids, mask)
    return inputs, targets, tmask, torch.tensor([q.sample_index for q in queries])


@torch.no_grad()
def predict_keypoints(
    model: PoseLLM,
    images: torch.Tensor,
    keypoints: Sequence[int],
    max_answer_len: Optional[int] = None,
    batch_size: int = 64,
) -> List[List[DecodeResult]]:
    """Greedy-decode every requested keypoint for every image.

    Returns ``results[image][j]`` for ``keypoints[j]``.
    """
    max_answer_len = prompt_codec.answer_length() if max_answer_len is None else max_answer_len
    model.eval()
    V_all = model.visual_embedding(images)
    out: List[List[Optional[DecodeResult]]] = [[None] * len(keypoints) for _ in range(len(images))]
    for j, k in enumerate(keypoints):
        prompt = torch.tensor(prompt_codec.prompt_ids(k), dtype=torch.long)
        for start in range(0, len(images), batch_size):
            V = V_all[start:start + batch_size]
            ids = prompt[None].expand(V.shape[0], -1)
            for i, res in enumerate(model.decoder.greedy_decode(V, ids, max_answer_len)):
                out[start + i][j] = res
    return out
