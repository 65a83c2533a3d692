import pytest
import torch

from posellm.connector import ConnectorConfig
from posellm.language_decoder import DecoderConfig, LanguageDecoder
from posellm.lora import LoraConfigError, adapters_of, attach_lora, lora_parameter_names, lora_targets, merge_lora
from posellm.model import PoseLLM
from posellm.vision_encoder import EncoderConfig


def tiny_model(seed=0):
    return PoseLLM(EncoderConfig(image_size=16, patch_size=4, depth=1, d_vis=16, heads=2),
                   ConnectorConfig("mlp", 16, 16), DecoderConfig(d_model=16, depth=1, heads=2, max_seq_len=64),
                   seed=seed).double()


def inputs():
    g = torch.Generator().manual_seed(0)
    return torch.rand(2, 16, 16, generator=g, dtype=torch.float64), torch.randint(3, 50, (2, 7), generator=g)


def test_targets_are_q_and_v_everywhere():
    t = lora_targets(tiny_model())
    assert t == ["encoder.block0.attn.wq", "encoder.block0.attn.wv",
                 "decoder.block0.attn.wq", "decoder.block0.attn.wv"]


def test_identity_at_init_for_all_targets():
    m = tiny_model()
    x, ids = inputs()
    base = m(x, ids)
    adapters = attach_lora(m, r=4, alpha=8, seed=1)
    assert len(adapters) == 4
    assert all(not a.B.any() for a in adapters.values())
    assert torch.equal(m(x, ids), base)


def test_unknown_target():
    for bad in ("decoder.block0.attn.wk", "decoder.block7.attn.wq", "connector.W1"):
        with pytest.raises(LoraConfigError):
            attach_lora(tiny_model(), [bad])


def test_parameter_count():
    dec = LanguageDecoder(DecoderConfig(d_model=16, depth=1, heads=2, max_seq_len=32))
    before = sum(p.numel() for p in dec.parameters())
    attach_lora(dec, ["block0.attn.wq"], r=2, alpha=2)
    assert sum(p.numel() for p in dec.parameters()) - before == 2 * (2 * 16)


def test_effective_weight():
    m = tiny_model()
    ad = attach_lora(m, ["decoder.block0.attn.wv"], r=2, alpha=6)["decoder.block0.attn.wv"]
    with torch.no_grad():
        ad.B.normal_()
    attn = m.decoder.block0.attn
    torch.testing.assert_close(attn.weight("wv"), attn.wv + 3.0 * (ad.B @ ad.A), rtol=0, atol=0)


def test_merge_reproduces_adapter_path():
    m = tiny_model()
    attach_lora(m, r=4, alpha=4)
    with torch.no_grad():
        for a in adapters_of(m).values():
            a.B.normal_(0, 0.5)
    x, ids = inputs()
    out = m(x, ids)
    merged = merge_lora(m)
    assert adapters_of(merged) == {} and lora_parameter_names(merged) == []
    ref = merged(x, ids)
    assert ((ref - out).norm() / out.norm()).item() <= 1e-5
    # the source model keeps its adapters
    assert len(adapters_of(m)) == 4
