import pytest
import torch

from hnfnet import tensor as T
from hnfnet.errors import ConfigurationError, InputError, NumericFaultError
from hnfnet.network import NetworkConfig, build, count_parameters, estimate_flops, forward

from conftest import weighted_sum


def _conv_block(a, b):
    return 27 * a * b + 2 * b + 27 * b * b + 2 * b


def _down(a, b):
    return 27 * a * b + 2 * b


def _sde(c, ratio=4):
    s = max(c // ratio, 4)
    return c * s + s + s * c + c


def _pmf(ws, intra):
    n = 0
    for w in ws:
        n += _conv_block(w, w) + (_sde(w) if intra else 0)
    for j in range(len(ws)):
        for i in range(len(ws)):
            if i < j:
                n += sum(27 * ws[k] * ws[k + 1] + ws[k + 1] for k in range(i, j))
            elif i > j:
                n += ws[i] * ws[j] + ws[j]
    return n


def parameter_oracle(c, cin=4, cout=3, intra=True, inter=True):
    """Closed-form parameter count built from per-layer formulas."""
    w = [c * 2 ** s for s in range(5)]
    n = _conv_block(cin, c) + _conv_block(c, c) + _down(c, w[1])
    prev = 1
    for b in (2, 3, 4, 4):
        n += sum(_down(w[s], w[s + 1]) for s in range(prev, b))
        n += _pmf(w[1:b + 1], intra)
        prev = b
    if inter:
        n += 4 * (w[4] + 1) + sum((x + 1) * x + x for x in w[1:5])
    n += sum(w[s] * w[1] + w[1] for s in range(2, 5))
    m = 4 * w[1]
    n += 2 * (m * m + m)
    n += m * c + c
    n += 2 * _conv_block(c, c) + c * cout + cout
    return n


@pytest.fixture(scope="module")
def small_net():
    return build(NetworkConfig(base_channels=4, ema_bases=4))


def test_widths():
    assert NetworkConfig(base_channels=8).widths() == [8, 16, 32, 64, 128]
    assert NetworkConfig.full().widths() == [32, 64, 128, 256, 512]
    assert NetworkConfig(base_channels=8, channel_cap=4).widths() == [8, 16, 32, 32, 32]


@pytest.mark.parametrize("c", [2, 4, 8])
@pytest.mark.parametrize("intra,inter", [(False, False), (True, False), (True, True), (False, True)])
def test_parameter_count_matches_oracle(c, intra, inter):
    net = build(NetworkConfig(base_channels=c, intra_sde=intra, inter_sde=inter))
    report = count_parameters(net)
    assert report.total == parameter_oracle(c, intra=intra, inter=inter)
    assert report.total == sum(p.numel() for p in net.parameters())
    assert sum(report.breakdown.values()) == report.total


def test_ema_bases_are_not_parameters():
    a = count_parameters(build(NetworkConfig(base_channels=4, ema_bases=2))).total
    b = count_parameters(build(NetworkConfig(base_channels=4, ema_bases=64))).total
    assert a == b


def test_ablation_parameter_ordering():
    counts = [
        count_parameters(build(cfg)).total
        for cfg in (
            NetworkConfig.hnf_net(),
            NetworkConfig(intra_sde=True, inter_sde=False),
            NetworkConfig(),
        )
    ]
    assert counts[0] < counts[1] < counts[2]


def test_ablation_flop_ordering():
    flops = [
        estimate_flops(build(cfg), (32, 32, 32))
        for cfg in (
            NetworkConfig.hnf_net(base_channels=4),
            NetworkConfig(base_channels=4, inter_sde=False),
            NetworkConfig(base_channels=4),
        )
    ]
    assert flops[0] < flops[1] < flops[2]


def test_flops_scale_with_volume_and_bases():
    net = build(NetworkConfig(base_channels=2, ema_bases=2))
    f16 = estimate_flops(net, (16, 16, 16))
    f32 = estimate_flops(net, (32, 32, 32))
    assert 7.5 * f16 < f32 < 8.5 * f16
    more = build(NetworkConfig(base_channels=2, ema_bases=16))
    assert estimate_flops(more, (16, 16, 16)) > f16


def test_output_shape(small_net):
    y = forward(small_net, torch.randn(2, 4, 32, 16, 48), mode="infer")
    assert y.shape == (2, 3, 32, 16, 48)


@pytest.mark.parametrize("shape,axis", [((1, 4, 24, 32, 32), "D"), ((1, 4, 32, 20, 32), "H"), ((1, 4, 32, 32, 17), "W")])
def test_indivisible_extent_names_axis(small_net, shape, axis):
    with pytest.raises(InputError, match=f"axis {axis}"):
        small_net(torch.zeros(shape))


def test_wrong_channels_and_rank(small_net):
    with pytest.raises(InputError):
        small_net(torch.zeros(1, 3, 16, 16, 16))
    with pytest.raises(InputError):
        small_net(torch.zeros(4, 16, 16, 16))


def test_bad_mode(small_net):
    with pytest.raises(ConfigurationError):
        forward(small_net, torch.zeros(1, 4, 16, 16, 16), mode="eval")


def test_zero_parameters_give_zero_output():
    net = build(NetworkConfig(base_channels=2, ema_bases=2))
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    y = forward(net, torch.randn(1, 4, 16, 16, 16), mode="infer")
    assert torch.all(y == 0)


def test_deterministic_initialization_and_forward():
    cfg = NetworkConfig(base_channels=2, ema_bases=2, seed=7)
    a, b = build(cfg), build(cfg)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    x = torch.randn(1, 4, 16, 16, 16)
    assert torch.equal(forward(a, x), forward(b, x))
    c = build(NetworkConfig(base_channels=2, ema_bases=2, seed=8))
    assert not torch.equal(forward(a, x), forward(c, x))


def test_build_does_not_disturb_global_rng():
    torch.manual_seed(3)
    expected = torch.rand(3)
    torch.manual_seed(3)
    build(NetworkConfig(base_channels=2, ema_bases=2))
    assert torch.equal(torch.rand(3), expected)


def test_network_is_not_flip_equivariant(small_net):
    x = torch.randn(1, 4, 16, 16, 16, generator=torch.Generator().manual_seed(0))
    y = forward(small_net, x)
    for dims in ((2,), (3,), (4,)):
        y_flip = torch.flip(forward(small_net, torch.flip(x, dims)), dims)
        assert not torch.allclose(y, y_flip, atol=1e-5)


def test_gradient_reaches_every_parameter():
    net = build(NetworkConfig(base_channels=2, ema_bases=2))
    # 32^3 keeps the coarsest scale above one voxel, where instance norm has no gradient
    x = torch.randn(2, 4, 32, 32, 32, generator=torch.Generator().manual_seed(0))
    y = forward(net, x, mode="train")
    T.backward((y * torch.randn(y.shape, generator=torch.Generator().manual_seed(1))).sum())
    dead = [n for n, p in net.named_parameters() if p.grad is None or p.grad.abs().sum() == 0]
    assert not dead


def test_training_mode_moves_ema_bases():
    net = build(NetworkConfig(base_channels=2, ema_bases=2))
    before = net.ema.bases.clone()
    forward(net, torch.randn(1, 4, 16, 16, 16), mode="infer")
    assert torch.equal(net.ema.bases, before)
    forward(net, torch.randn(1, 4, 16, 16, 16), mode="train")
    assert not torch.equal(net.ema.bases, before)


def test_nan_reports_offending_layer():
    net = build(NetworkConfig(base_channels=2, ema_bases=2))
    with torch.no_grad():
        net.pmf[1].branches[0][0].conv1.weight[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericFaultError) as info:
        forward(net, torch.randn(1, 4, 16, 16, 16))
    assert info.value.layer.startswith("pmf.1.branches.0")


def test_nan_check_can_be_disabled():
    net = build(NetworkConfig(base_channels=2, ema_bases=2))
    net.check_finite = False
    y = forward(net, torch.full((1, 4, 16, 16, 16), float("nan")))
    assert torch.isnan(y).any()


@pytest.mark.parametrize("shape", [(1, 4, 16, 16, 32), (1, 4, 32, 16, 16), (2, 4, 16, 32, 16)])
def test_network_directional_gradcheck(shape):
    # Every extent >= 32 on one axis keeps the coarsest branch above a single voxel (a lone voxel
    # normalizes to exactly the shift, putting the next ReLU on its kink). Biases start at zero,
    # which leaves exact-zero pre-activations on kinks too, so they get small random values.
    # Thousands of ReLUs sit within eps=1e-4 of a kink at this size; eps=1e-6 keeps crossings rare.
    net = build(NetworkConfig(base_channels=2, ema_bases=2, seed=3)).double().eval()
    gen = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.05 * torch.randn(p.shape, dtype=p.dtype, generator=gen))
    x = torch.randn(shape, dtype=torch.float64, generator=gen)
    probe = weighted_sum(net(x), gen)
    leaves = list(net.parameters()) + [x]
    assert T.check_directional_gradient(lambda: probe(net(x)), leaves, eps=1e-6, generator=gen) < 1e-4


def test_config_roundtrip_and_hash():
    cfg = NetworkConfig(base_channels=4, ema_bases=3)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.config_hash() == NetworkConfig.from_dict(cfg.to_dict()).config_hash()
    assert cfg.config_hash() != NetworkConfig(base_channels=4, ema_bases=4).config_hash()
    with pytest.raises(ConfigurationError):
        NetworkConfig.from_dict({"base_channel": 4})
    with pytest.raises(ConfigurationError):
        NetworkConfig(ema_bases=0)
