import pytest
import torch

from semiseg.nets import (MCDropout, NetConfig, build_correction_net, build_pair, mc_forward, predict_prob,
                          tapped_forward)

SMALL = NetConfig(base_width=4, depth=3)


def test_pair_has_distinct_parameters():
    a, b = build_pair(SMALL, seed=0)
    pairs = list(zip(a.parameters(), b.parameters()))
    assert all(pa.shape == pb.shape for pa, pb in pairs)
    assert all(not torch.equal(pa, pb) for pa, pb in pairs if pa.numel() > 1 and pa.std() > 0)
    assert {id(p) for p in a.parameters()}.isdisjoint({id(p) for p in b.parameters()})


def test_same_seed_gives_same_init():
    a, b = build_pair(SMALL, seed=3, seed2=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_full_resolution_logits():
    net, _ = build_pair(NetConfig(base_width=4, depth=4))
    f_e, f_b, logits = tapped_forward(net, torch.rand(1, 3, 256, 256))
    assert logits.shape == (1, 1, 256, 256)
    assert f_e.shape == (1, 4, 256, 256)
    assert f_b.shape == (1, 64, 16, 16)


def test_dropout_sits_in_decoder_only():
    net, _ = build_pair(SMALL)
    for name, m in net.named_modules():
        if isinstance(m, MCDropout):
            assert name.startswith("decoders")
    assert sum(isinstance(m, MCDropout) for m in net.modules()) == 2 * SMALL.depth


def test_mc_forward_without_dropout_is_deterministic():
    net, _ = build_pair(NetConfig(base_width=4, depth=3, dropout_rate=0.0))
    x = torch.rand(2, 3, 16, 16)
    maps = mc_forward(net, x, 5, seed=0)
    for m in maps[1:]:
        assert torch.equal(m, maps[0])
    assert torch.allclose(maps[0], torch.sigmoid(tapped_forward(net, x)[2]))


def test_mc_forward_k1_and_variation():
    net, _ = build_pair(SMALL)
    x = torch.rand(1, 3, 16, 16)
    assert len(mc_forward(net, x, 1, seed=0)) == 1
    maps = mc_forward(net, x, 5, seed=0)
    for i in range(5):
        for j in range(i + 1, 5):
            assert not torch.equal(maps[i], maps[j])
    again = mc_forward(net, x, 5, seed=0)
    assert all(torch.equal(a, b) for a, b in zip(maps, again))
    with pytest.raises(ValueError):
        mc_forward(net, x, 0)


def test_mc_forward_leaves_dropout_off():
    net, _ = build_pair(SMALL)
    x = torch.rand(1, 3, 16, 16)
    mc_forward(net, x, 2, seed=0)
    assert torch.equal(tapped_forward(net, x)[2], tapped_forward(net, x)[2])


def test_taps_match_across_pair_and_are_finite():
    a, b = build_pair(SMALL)
    x = torch.zeros(2, 3, 32, 32)
    ta, tb = tapped_forward(a, x), tapped_forward(b, x)
    for u, v in zip(ta, tb):
        assert u.shape == v.shape
        assert torch.isfinite(u).all()


def test_correction_net_io():
    net = build_correction_net(SMALL, image_channels=3)
    x = torch.rand(2, 5 * 3 + 5, 16, 16)
    p = predict_prob(net, x)
    assert p.shape == (2, 1, 16, 16)
    assert ((p >= 0) & (p <= 1)).all()


@pytest.mark.parametrize("bad", [dict(base_width=0), dict(dropout_rate=1.0), dict(norm="group")])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        build_pair(NetConfig(**bad))
