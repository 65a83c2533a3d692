"""Checkpoint directories: ``manifest.json`` plus one little-endian blob per parameter group.

Groups are ``encoder``, ``connector``, ``decoder``, ``lora`` and, for training
state, ``adam_m``/``adam_v``. Each manifest entry records name, shape, dtype and
byte offset inside its group's blob; every blob carries a sha256 digest.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .config import RunConfig, parse_kv
from .model import PoseLLM
from .trainer import TrainState, build_model

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8")}


class CheckpointError(IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


def _group(name: str) -> str:
    if ".lora." in name:
        return "lora"
    return name.split(".", 1)[0]


def _dtype_name(t: torch.Tensor) -> str:
    for k, (td, _) in _DTYPES.items():
        if t.dtype == td:
            return k
    raise CheckpointError(f"unsupported dtype {t.dtype}")


def _pack(tensors: List[Tuple[str, str, torch.Tensor]]):
    blobs: Dict[str, bytearray] = {}
    entries = []
    for name, group, t in tensors:
        dt = _dtype_name(t)
        raw = t.detach().cpu().contiguous().numpy().astype(_DTYPES[dt][1], copy=False).tobytes()
        buf = blobs.setdefault(group, bytearray())
        entries.append({"name": name, "group": group, "shape": list(t.shape), "dtype": dt,
                        "offset": len(buf), "nbytes": len(raw)})
        buf.extend(raw)
    return entries, blobs


def save_checkpoint(path, model: PoseLLM, config: RunConfig, state: Optional[TrainState] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = [(n, _group(n), p) for n, p in model.named_parameters()]
    if state is not None:
        for n in sorted(state.m):
            tensors.append((n, "adam_m", state.m[n]))
            tensors.append((n, "adam_v", state.v[n]))
    entries, blobs = _pack(tensors)
    digests = {}
    for group, buf in blobs.items():
        (path / f"{group}.bin").write_bytes(bytes(buf))
        digests[group] = hashlib.sha256(buf).hexdigest()
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config.model_hash(),
        "config": config.to_flat(),
        "connector_mode": config.connector.mode,
        "step": state.step if state is not None else None,
        "losses": list(state.losses) if state is not None else [],
        "blobs": digests,
        "tensors": entries,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    mp = Path(path) / MANIFEST
    try:
        manifest = json.loads(mp.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint manifest {mp}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version!r}, this build reads {FORMAT_VERSION}")
    return manifest


def checkpoint_config(path) -> RunConfig:
    manifest = read_manifest(path)
    cfg = RunConfig().override(manifest["config"])
    if cfg.model_hash() != manifest["config_hash"]:
        raise CheckpointMismatchError("manifest config_hash does not match its stored config")
    return cfg


def _load_blobs(path: Path, manifest: dict) -> Dict[str, bytes]:
    blobs = {}
    for group, digest in manifest["blobs"].items():
        try:
            raw = (path / f"{group}.bin").read_bytes()
        except OSError as e:
            raise CheckpointError(f"missing blob {group}.bin: {e}") from e
        if hashlib.sha256(raw).hexdigest() != digest:
            raise CheckpointError(f"blob {group}.bin is corrupt (digest mismatch)")
        blobs[group] = raw
    return blobs


def _tensor(entry: dict, blobs: Dict[str, bytes]) -> torch.Tensor:
    raw = blobs[entry["group"]][entry["offset"]:entry["offset"] + entry["nbytes"]]
    if len(raw) != entry["nbytes"]:
        raise CheckpointError(f"tensor {entry['name']} is truncated")
    arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]][1]).reshape(entry["shape"])
    return torch.from_numpy(arr.copy())


def load_checkpoint(path, expected: Optional[RunConfig] = None) -> Tuple[PoseLLM, RunConfig, TrainState]:
    """Rebuild the model (with adapters) and training state from ``path``.

    If ``expected`` is given its model hash must match the checkpoint's.
    """
    path = Path(path)
    manifest = read_manifest(path)
    cfg = checkpoint_config(path)
    if expected is not None and expected.model_hash() != manifest["config_hash"]:
        raise CheckpointMismatchError(
            f"checkpoint config hash {manifest['config_hash']} does not match run config {expected.model_hash()}"
        )
    blobs = _load_blobs(path, manifest)
    model = build_model(cfg.encoder, cfg.connector, cfg.decoder, cfg.lora.r, cfg.lora.alpha,
                        cfg.lora_target_names(), seed=cfg.train.seed, dtype=cfg.train.torch_dtype)
    params = dict(model.named_parameters())
    state = TrainState(step=manifest["step"] or 0, losses=list(manifest["losses"]))
    seen = set()
    for entry in manifest["tensors"]:
        t = _tensor(entry, blobs)
        name, group = entry["name"], entry["group"]
        if group == "adam_m":
            state.m[name] = t
        elif group == "adam_v":
            state.v[name] = t
        else:
            if name not in params or tuple(params[name].shape) != tuple(t.shape):
                raise CheckpointMismatchError(f"checkpoint tensor {name} does not fit the model")
            with torch.no_grad():
                params[name].copy_(t)
            seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointMismatchError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    return model, cfg, state


def read_loss_curve(path) -> List[Tuple[int, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            s, l = line.split()
            out.append((int(s), float(l)))
    return out


def write_loss_curve(path, losses) -> None:
    with open(path, "w") as f:
        f.write("# step loss\n")
        for i, l in enumerate(losses, start=1):
            f.write(f"{i} {l!r}\n")
