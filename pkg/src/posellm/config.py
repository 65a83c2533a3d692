"""Flat ``section.key=value`` run configuration, presets and cross-module validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

from . import prompt_codec
from .connector import ConnectorConfig
from .language_decoder import DecoderConfig
from .metrics import OksParams
from .synth_data import GeneratorConfig
from .trainer import TrainConfig
from .vision_encoder import EncoderConfig


class ConfigValidationError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class DataConfig:
    count: int = 320
    split: float = 0.8
    seed: int = 0

    def seeds(self) -> Tuple[List[int], List[int]]:
        """Sample seeds for the train and val splits."""
        n_train = int(round(self.count * self.split))
        base = self.seed * 1_000_000
        all_seeds = [base + i for i in range(self.count)]
        return all_seeds[:n_train], all_seeds[n_train:]


@dataclass(frozen=True)
class LoraConfig:
    r: int = 4
    alpha: float = 4.0
    targets: str = "all"  # "all" q/v projections, "none", or a comma list of names


@dataclass(frozen=True)
class MetricsConfig:
    k: float = 0.08
    coco_sigmas: bool = False
    area_medium: float = 32.0 ** 2
    area_large: float = 96.0 ** 2
    eval_samples: int = 32

    def oks_params(self) -> OksParams:
        if self.coco_sigmas:
            return OksParams.coco(area_medium=self.area_medium, area_large=self.area_large)
        return OksParams(k=(self.k,) * prompt_codec.NUM_KEYPOINTS,
                         area_medium=self.area_medium, area_large=self.area_large)


SECTIONS = {
    "data": DataConfig,
    "generator": GeneratorConfig,
    "encoder": EncoderConfig,
    "connector": ConnectorConfig,
    "decoder": DecoderConfig,
    "lora": LoraConfig,
    "train": TrainConfig,
    "metrics": MetricsConfig,
}
MODEL_SECTIONS = ("encoder", "connector", "decoder", "lora")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    generator: GeneratorConfig = GeneratorConfig()
    encoder: EncoderConfig = EncoderConfig()
    connector: ConnectorConfig = ConnectorConfig()
    decoder: DecoderConfig = DecoderConfig()
    lora: LoraConfig = LoraConfig()
    train: TrainConfig = TrainConfig()
    metrics: MetricsConfig = MetricsConfig()

    # -- serialization ----------------------------------------------------

    def to_flat(self) -> Dict[str, str]:
        out = {}
        for sec in SECTIONS:
            for f in dataclasses.fields(getattr(self, sec)):
                out[f"{sec}.{f.name}"] = _fmt(getattr(getattr(self, sec), f.name))
        return out

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_flat().items())

    def override(self, values: Mapping[str, str]) -> "RunConfig":
        grouped: Dict[str, Dict[str, object]] = {}
        for key, raw in values.items():
            sec, _, name = key.partition(".")
            if sec not in SECTIONS or not name:
                raise ConfigValidationError([f"unknown config key {key!r}"])
            fields = {f.name: f for f in dataclasses.fields(SECTIONS[sec])}
            if name not in fields:
                raise ConfigValidationError([f"unknown config key {key!r}"])
            try:
                grouped.setdefault(sec, {})[name] = _parse(raw, getattr(getattr(self, sec), name), fields[name])
            except ValueError as e:
                raise ConfigValidationError([f"{key}: {e}"]) from None
        return dataclasses.replace(
            self, **{sec: dataclasses.replace(getattr(self, sec), **kw) for sec, kw in grouped.items()}
        )

    def model_hash(self) -> str:
        flat = self.to_flat()
        blob = json.dumps({k: v for k, v in flat.items() if k.split(".")[0] in MODEL_SECTIONS}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- validation -------------------------------------------------------

    def validate(self) -> "RunConfig":
        problems = []
        for sec in ("generator", "encoder", "connector", "decoder", "train"):
            try:
                getattr(self, sec).validate()
            except ValueError as e:
                problems.append(f"{sec}: {e}")
        if self.connector.d_in != self.encoder.d_vis:
            problems.append(f"connector.d_in={self.connector.d_in} != encoder.d_vis={self.encoder.d_vis}")
        if self.connector.d_out != self.decoder.d_model:
            problems.append(f"connector.d_out={self.connector.d_out} != decoder.d_model={self.decoder.d_model}")
        if self.generator.image_size != self.encoder.image_size:
            problems.append(f"generator.image_size={self.generator.image_size} != encoder.image_size={self.encoder.image_size}")
        if self.decoder.vocab_size != prompt_codec.VOCAB.size:
            problems.append(f"decoder.vocab_size={self.decoder.vocab_size} != tokenizer size {prompt_codec.VOCAB.size}")
        if self.encoder.image_size % max(self.encoder.patch_size, 1) == 0:
            need = self.encoder.num_tokens + prompt_codec.max_record_length()
            if self.decoder.max_seq_len < need:
                problems.append(f"decoder.max_seq_len={self.decoder.max_seq_len} < visual+text length {need}")
        if self.data.count <= 0:
            problems.append("data.count must be positive")
        if not 0.0 < self.data.split <= 1.0:
            problems.append("data.split must be in (0, 1]")
        elif self.data.count > 0 and not self.data.seeds()[0]:
            problems.append("data.split leaves the training split empty")
        if self.lora.r <= 0:
            problems.append("lora.r must be positive")
        if self.metrics.k <= 0:
            problems.append("metrics.k must be positive")
        if not 0 < self.metrics.area_medium <= self.metrics.area_large:
            problems.append("metrics area bands must satisfy 0 < area_medium <= area_large")
        if problems:
            raise ConfigValidationError(problems)
        return self

    def lora_target_names(self) -> Optional[List[str]]:
        t = self.lora.targets.strip()
        if t == "all":
            return None
        if t == "none":
            return []
        return [s.strip() for s in t.split(",") if s.strip()]


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, current, f: dataclasses.Field):
    raw = raw.strip()
    if isinstance(current, tuple):
        return tuple(float(x) for x in raw.split(","))
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if raw.lower() == "none" and (current is None or "Optional" in str(f.type)):
        return None
    if isinstance(current, int) or (current is None and "int" in str(f.type)):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def parse_kv(text: str, origin: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigValidationError([f"{origin}:{lineno}: expected key=value, got {line!r}"])
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def preset_text(name: str) -> str:
    return resources.files("posellm").joinpath(f"presets/{name}.cfg").read_text("utf-8")


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Defaults <- file (or ``preset:<name>``) <- overrides, then validated."""
    cfg = RunConfig()
    if path:
        if path.startswith("preset:"):
            text, origin = preset_text(path.split(":", 1)[1]), path
        else:
            text, origin = Path(path).read_text("utf-8"), path
        cfg = cfg.override(parse_kv(text, origin))
    if overrides:
        cfg = cfg.override(overrides)
    return cfg.validate()
