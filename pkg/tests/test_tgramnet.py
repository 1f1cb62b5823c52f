import numpy as np
import pytest
import torch

from stgram_asd.dataio import AudioClip
from stgram_asd.features import SpectralConfig, log_mel
from stgram_asd.tgramnet import tgramnet_forward, tgramnet_init

REFERENCE = SpectralConfig()
SMALL = SpectralConfig(window_size=64, hop_length=32, mel_bins=16)


def central_difference(f, tensor, index, h):
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        up = f().item()
        tensor[index] = orig - h
        down = f().item()
        tensor[index] = orig
    return (up - down) / (2 * h)


def test_parameter_shapes_follow_the_architecture_table():
    net = tgramnet_init(REFERENCE, seed=0)
    assert tuple(net.front_conv.weight.shape) == (128, 1, 1024)
    assert net.front_conv.stride == (512,) and net.front_conv.padding == (512,)
    assert net.front_conv.bias is not None
    assert len(net.blocks) == 3
    for block in net.blocks:
        assert block.conv.weight.numel() == 128 * 128 * 3
        assert block.conv.kernel_size == (3,) and block.conv.padding == (1,)
        assert block.norm.norm.normalized_shape == (128,)


def test_same_seed_same_parameters():
    a, b = tgramnet_init(SMALL, seed=5), tgramnet_init(SMALL, seed=5)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    c = tgramnet_init(SMALL, seed=6)
    assert not torch.equal(a.front_conv.weight, c.front_conv.weight)


def test_init_does_not_disturb_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    tgramnet_init(SMALL, seed=0)
    assert torch.equal(torch.rand(3), expected)


def test_zero_parameters_give_zero_output():
    net = tgramnet_init(SMALL)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    wave = torch.randn(2000)
    out = tgramnet_forward(net, wave)
    assert out.kind == "Tgram"
    assert torch.count_nonzero(out.data) == 0


def test_reference_shape():
    net = tgramnet_init(REFERENCE)
    with torch.no_grad():
        out = tgramnet_forward(net, torch.zeros(160_000))
    assert out.shape == (1, 128, 313)


@pytest.mark.parametrize("cfg", [SMALL, REFERENCE])
def test_frame_count_matches_log_mel(cfg):
    H = cfg.hop_length
    net = tgramnet_init(cfg)
    for L in (H, 2 * H + 3, 160_000):
        with torch.no_grad():
            t = tgramnet_forward(net, torch.zeros(L))
        s = log_mel(AudioClip(np.zeros(L, dtype=np.float32), cfg.sample_rate), cfg)
        assert t.shape == s.shape == (1, cfg.mel_bins, L // H + 1)


def test_bypassing_blocks_keeps_shape():
    net = tgramnet_init(SMALL)
    wave = torch.randn(1000)
    ref = tgramnet_forward(net, wave).shape
    for i in range(3):
        net.bypass = [j == i for j in range(3)]
        assert tgramnet_forward(net, wave).shape == ref
    net.bypass = [True] * 3
    assert tgramnet_forward(net, wave).shape == ref


def test_inference_is_deterministic():
    net = tgramnet_init(SMALL).eval()
    wave = torch.randn(3000)
    with torch.no_grad():
        assert torch.equal(tgramnet_forward(net, wave).data, tgramnet_forward(net, wave).data)


def test_length_mismatch_is_an_error():
    net = tgramnet_init(SMALL, clip_length=1000)
    with pytest.raises(ValueError, match="1000"):
        tgramnet_forward(net, torch.zeros(999))
    with pytest.raises(ValueError):
        tgramnet_forward(net, torch.zeros(2, 1000))


def test_gradient_matches_central_differences():
    net = tgramnet_init(SMALL, seed=1).double()
    wave = torch.randn(700, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    f = lambda: tgramnet_forward(net, wave).data.sum()
    f().backward()

    params = dict(net.named_parameters())
    rng = np.random.default_rng(0)
    names = ["front_conv.weight", "front_conv.bias", "blocks.0.conv.weight", "blocks.1.norm.norm.weight", "blocks.2.conv.weight"]
    checked = 0
    for name in names:
        p = params[name]
        for _ in range(2):
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            fd = central_difference(f, p.data, idx, 1e-6)
            ad = p.grad[idx].item()
            assert abs(fd - ad) <= 1e-4 * max(abs(ad), 1e-8), (name, idx, fd, ad)
            checked += 1
    assert checked == 10


def test_gradient_reaches_the_wave():
    net = tgramnet_init(SMALL)
    wave = torch.randn(500, requires_grad=True)
    tgramnet_forward(net, wave).data.square().sum().backward()
    assert wave.grad is not None and torch.count_nonzero(wave.grad) > 0
