import json

import pytest
import torch

from posellm.checkpoint import (CheckpointError, CheckpointMismatchError, CheckpointVersionError, load_checkpoint,
                                read_loss_curve, read_manifest, save_checkpoint, write_loss_curve)
from posellm.config import ConfigValidationError, RunConfig, load_config, parse_kv, preset_text
from posellm.pipeline import generate_splits, new_model, train_model
from tiny_config import tiny_config


def _params(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def test_save_load_round_trip(tmp_path):
    cfg = tiny_config()
    train, _ = generate_splits(cfg)
    model, state = train_model(cfg, train, max_steps=3)
    save_checkpoint(tmp_path / "ck", model, cfg, state)
    back, cfg2, state2 = load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg and state2.step == 3 and state2.losses == state.losses
    for n, p in _params(back).items():
        assert p.numpy().tobytes() == _params(model)[n].numpy().tobytes()
    for n in state.m:
        assert torch.equal(state.m[n], state2.m[n]) and torch.equal(state.v[n], state2.v[n])


def test_manifest_layout(tmp_path):
    cfg = tiny_config()
    save_checkpoint(tmp_path / "ck", new_model(cfg), cfg)
    m = read_manifest(tmp_path / "ck")
    assert m["format_version"] == 1 and m["config_hash"] == cfg.model_hash()
    assert set(m["blobs"]) == {"encoder", "connector", "decoder", "lora"}
    e = next(t for t in m["tensors"] if t["name"] == "connector.W1")
    assert e["shape"] == [16, 64] and e["dtype"] == "float64" and e["group"] == "connector"


def test_linear_mode_manifest(tmp_path):
    cfg = tiny_config(connector__mode="linear")
    save_checkpoint(tmp_path / "ck", new_model(cfg), cfg)
    names = {t["name"] for t in read_manifest(tmp_path / "ck")["tensors"] if t["group"] == "connector"}
    assert names == {"connector.W", "connector.b"}


def test_version_gate(tmp_path):
    cfg = tiny_config()
    save_checkpoint(tmp_path / "ck", new_model(cfg), cfg)
    mp = tmp_path / "ck" / "manifest.json"
    m = json.loads(mp.read_text())
    m["format_version"] = 2
    mp.write_text(json.dumps(m))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "ck")


def test_corrupt_blob(tmp_path):
    cfg = tiny_config()
    save_checkpoint(tmp_path / "ck", new_model(cfg), cfg)
    blob = tmp_path / "ck" / "connector.bin"
    raw = bytearray(blob.read_bytes())
    raw[5] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path / "ck")


def test_hash_mismatch(tmp_path):
    cfg = tiny_config()
    save_checkpoint(tmp_path / "ck", new_model(cfg), cfg)
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(tmp_path / "ck", tiny_config(lora__r=3))


def test_resume_matches_continuous(tmp_path):
    cfg = tiny_config(train__epochs=8)
    train, _ = generate_splits(cfg)
    full, full_state = train_model(cfg, train, max_steps=14)
    part, part_state = train_model(cfg, train, max_steps=4)
    save_checkpoint(tmp_path / "ck", part, cfg, part_state)
    model, cfg2, state = load_checkpoint(tmp_path / "ck")
    resumed, resumed_state = train_model(cfg2, train, model=model, state=state, max_steps=10)
    assert resumed_state.step == 14
    assert resumed_state.losses == full_state.losses
    for n, p in _params(full).items():
        assert torch.equal(p, _params(resumed)[n])


def test_identical_runs_identical_checkpoints(tmp_path):
    cfg = tiny_config()
    train, _ = generate_splits(cfg)
    for name in ("a", "b"):
        model, state = train_model(cfg, train, max_steps=4)
        save_checkpoint(tmp_path / name, model, cfg, state)
    for f in ("manifest.json", "encoder.bin", "connector.bin", "decoder.bin", "lora.bin", "adam_m.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_loss_curve_file(tmp_path):
    write_loss_curve(tmp_path / "loss.txt", [3.5, 2.25])
    assert (tmp_path / "loss.txt").read_text().splitlines()[1:] == ["1 3.5", "2 2.25"]
    assert read_loss_curve(tmp_path / "loss.txt") == [(1, 3.5), (2, 2.25)]


# -- config ------------------------------------------------------------------


def test_flat_round_trip():
    cfg = tiny_config()
    assert RunConfig().override(parse_kv(cfg.dumps())) == cfg


def test_presets_load():
    for name in ("desk", "paper", "ablate"):
        cfg = load_config(f"preset:{name}")
        assert cfg.connector.d_out == cfg.decoder.d_model
    paper = load_config("preset:paper")
    assert paper.train.lr == 5e-4 and paper.train.weight_decay == 0.05
    assert paper.train.effective_batch == 32 and paper.train.epochs == 12
    assert paper.encoder.image_size == 224 and paper.connector.hidden == 4096
    assert "train.lr=5e-4" in preset_text("paper")


@pytest.mark.parametrize("over,needle", [
    ({"connector.d_out": "32"}, "d_model"),
    ({"encoder.d_vis": "24"}, "connector.d_in"),
    ({"decoder.max_seq_len": "64"}, "max_seq_len"),
    ({"data.count": "0"}, "data.count"),
    ({"generator.image_size": "32"}, "image_size"),
    ({"train.epochs": "0"}, "epochs"),
])
def test_validation_catches_inconsistency(over, needle):
    with pytest.raises(ConfigValidationError, match=needle):
        tiny_config(**{k.replace(".", "__"): v for k, v in over.items()})


def test_unknown_key_and_bad_line(tmp_path):
    with pytest.raises(ConfigValidationError, match="unknown config key"):
        load_config(None, {"encoder.colour": "red"})
    bad = tmp_path / "bad.cfg"
    bad.write_text("encoder.depth=2\nnot a pair\n")
    with pytest.raises(ConfigValidationError, match="bad.cfg:2"):
        load_config(str(bad))


def test_split_counts():
    cfg = load_config(None, {"data.count": "100", "data.split": "0.9"})
    tr, va = cfg.data.seeds()
    assert (len(tr), len(va)) == (90, 10)
    assert not set(tr) & set(va)
