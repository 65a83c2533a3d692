import math

import pytest
import torch

import reference as ref
from posellm import prompt_codec as pc
from posellm.language_decoder import CapacityError, DecoderConfig, LanguageDecoder, masked_cross_entropy
from posellm.lora import attach_lora


def small(depth=1, d=16, seed=0):
    dec = LanguageDecoder(DecoderConfig(d_model=d, depth=depth, heads=2, max_seq_len=64), seed=seed).double()
    with torch.no_grad():
        for p in dec.parameters():
            p.add_(0.1 * torch.randn_like(p))
    return dec


def ids(B, L, seed=0):
    return torch.randint(3, pc.VOCAB.size, (B, L), generator=torch.Generator().manual_seed(seed))


def test_depth0_ignores_visual_stream():
    dec = small(depth=0)
    V = torch.randn(2, 5, 16, dtype=torch.float64)
    t = ids(2, 7)
    out = dec(V, t)
    torch.testing.assert_close(out, dec(torch.zeros_like(V), t), rtol=0, atol=0)
    p = ref.params_of(dec)
    h = ref.layer_norm(p["tok_embed"][t] + p["pos_embed"][5:12], p["ln_f.g"], p["ln_f.b"])
    torch.testing.assert_close(out, h @ p["head"].T)


def test_matches_reference_implementation():
    dec = small(depth=2, seed=4)
    V = torch.randn(2, 6, 16, dtype=torch.float64)
    t = ids(2, 9)
    torch.testing.assert_close(dec(V, t), ref.decode_logits(V, t, ref.params_of(dec), dec.config),
                               rtol=1e-6, atol=1e-9)


def test_causality():
    dec = small(depth=2)
    V = torch.randn(1, 4, 16, dtype=torch.float64)
    t = ids(1, 10)
    base = dec(V, t)
    for j in (0, 3, 9):
        t2 = t.clone()
        t2[0, j] = (t2[0, j] + 1) % pc.VOCAB.size
        out = dec(V, t2)
        assert torch.equal(out[:, :j], base[:, :j])


def test_visual_influence():
    dec = small(depth=1)
    V = torch.randn(1, 4, 16, dtype=torch.float64)
    t = ids(1, 6)
    assert (dec(V, t) - dec(V + torch.randn_like(V), t)).abs().max() > 1e-6


def test_capacity_error():
    dec = small()
    with pytest.raises(CapacityError):
        dec(torch.zeros(1, 60, 16, dtype=torch.float64), ids(1, 5))


def test_uniform_logits_loss():
    for vocab in (45, pc.VOCAB.size):
        logits = torch.zeros(2, 5, vocab, dtype=torch.float64)
        targets = torch.randint(0, vocab, (2, 5))
        for mask in (torch.ones(2, 5, dtype=torch.bool), torch.tensor([[0, 1, 0, 0, 1], [1, 0, 0, 0, 0]]).bool()):
            assert abs(masked_cross_entropy(logits, targets, mask).item() - math.log(vocab)) < 1e-8
    assert math.log(45) == pytest.approx(3.8067, abs=1e-4)


def test_two_token_hand_computation():
    logits = torch.tensor([[[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]], dtype=torch.float64)
    targets = torch.tensor([[1, 2]])
    mask = torch.tensor([[True, True]])

    def nll(row, t):
        z = sum(math.exp(v) for v in row)
        return -math.log(math.exp(row[t]) / z)

    expected = 0.5 * (nll([1.0, 2.0, 0.5], 1) + nll([0.0, -1.0, 3.0], 2))
    assert abs(masked_cross_entropy(logits, targets, mask).item() - expected) < 1e-8


def test_mask_false_positions_are_inert():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(3, 6, 10, dtype=torch.float64, generator=g, requires_grad=True)
    targets = torch.randint(0, 10, (3, 6), generator=g)
    mask = torch.zeros(3, 6, dtype=torch.bool)
    mask[:, 3:] = True
    loss = masked_cross_entropy(logits, targets, mask)
    loss.backward()
    assert not logits.grad[~mask].any()

    t2 = targets.clone()
    t2[~mask] = (t2[~mask] + 3) % 10
    l2 = logits.detach().clone()
    l2[~mask] = 1e3 * torch.randn_like(l2[~mask])
    assert masked_cross_entropy(l2, t2, mask).item() == loss.item()


def test_all_false_mask_rejected():
    with pytest.raises(ValueError):
        masked_cross_entropy(torch.zeros(1, 2, 5), torch.zeros(1, 2, dtype=torch.long), torch.zeros(1, 2, dtype=torch.bool))


def test_greedy_decode_boundaries_and_determinism():
    dec = small(depth=1)
    V = torch.randn(2, 4, 16, dtype=torch.float64)
    prompt = ids(2, 5)
    empty = dec.greedy_decode(V, prompt, 0)
    assert all(r.token_ids == [] and r.parse_failed for r in empty)
    a = dec.greedy_decode(V, prompt, 8)
    b = dec.greedy_decode(V, prompt, 8)
    assert [r.token_ids for r in a] == [r.token_ids for r in b]
    assert all(len(r.token_ids) <= 8 for r in a)


def test_greedy_ties_pick_lowest_id():
    dec = LanguageDecoder(DecoderConfig(d_model=16, depth=0, heads=2, max_seq_len=32)).double()
    with torch.no_grad():
        dec.head.zero_()
        dec.head[7] = 1.0
        dec.head[9] = 1.0
        dec.ln_f.b.fill_(1.0)
        dec.ln_f.g.zero_()
    res = dec.greedy_decode(torch.zeros(1, 2, 16, dtype=torch.float64), ids(1, 3), 3)
    assert res[0].token_ids == [7, 7, 7]


def test_gradient_check_depth1():
    dec = small(depth=1, d=16)
    attach_lora(dec, r=2, alpha=2, seed=0)
    with torch.no_grad():
        for a in dec.modules():
            if hasattr(a, "B") and isinstance(a.B, torch.nn.Parameter):
                a.B.normal_(0, 0.1)
    V = torch.randn(2, 3, 16, dtype=torch.float64, requires_grad=True)
    t = ids(2, 6)
    targets = ids(2, 6, seed=1)
    mask = torch.zeros(2, 6, dtype=torch.bool)
    mask[:, 2:] = True
    params = dict(dec.named_parameters())
    params["V"] = V
    err = ref.finite_difference_check(lambda: masked_cross_entropy(dec(V, t), targets, mask), params)
    assert err < 1e-4
