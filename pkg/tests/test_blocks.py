import numpy as np
import pytest
import torch

from hnfnet import tensor as T
from hnfnet.blocks import ConvBlock, DownBlock, EMAModule, InterScaleSDE, IntraScaleSDE, PMFModule
from hnfnet.errors import ConfigurationError

from conftest import weighted_sum


def _seeded(cls, *args, seed=0, **kw):
    torch.manual_seed(seed)
    return cls(*args, **kw).double()


def _randomize(module, gen, scale=0.5):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, dtype=p.dtype, generator=gen) * scale)


def _zero(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def _pyramid(widths, extent, gen, batch=1):
    xs = []
    n = extent
    for w in widths:
        xs.append(torch.randn(batch, w, n, n, n, dtype=torch.float64, generator=gen))
        n = (n - 1) // 2 + 1
    return xs


# -- ConvBlock ------------------------------------------------------------------


def test_conv_block_shape():
    blk = ConvBlock(4, 8)
    assert blk(torch.randn(1, 4, 8, 8, 8)).shape == (1, 8, 8, 8, 8)


def test_conv_block_zero_weights_give_zero():
    blk = ConvBlock(4, 8)
    _zero(blk)
    assert torch.all(blk(torch.randn(1, 4, 8, 8, 8)) == 0)


def test_conv_block_channel_mismatch():
    with pytest.raises(ConfigurationError):
        ConvBlock(4, 8)(torch.randn(1, 3, 8, 8, 8))


@pytest.mark.parametrize("shape", [(1, 2, 4, 4, 4), (2, 2, 3, 4, 5), (1, 2, 5, 3, 3)])
def test_conv_block_gradcheck(shape, gen):
    blk = _seeded(ConvBlock, 2, 3)
    x = torch.randn(shape, dtype=torch.float64, generator=gen)
    probe = weighted_sum(blk(x), gen)
    assert T.check_input_gradient(lambda t: probe(blk(t)), x) < 1e-4
    assert T.check_directional_gradient(lambda: probe(blk(x)), blk.parameters(), generator=gen) < 1e-4


def test_down_block_halves():
    assert DownBlock(2, 4)(torch.randn(1, 2, 8, 6, 4)).shape == (1, 4, 4, 3, 2)


# -- PMF module -------------------------------------------------------------------


def test_pmf_shapes():
    pmf = PMFModule([4, 8])
    xs = [torch.randn(1, 4, 8, 8, 8), torch.randn(1, 8, 4, 4, 4)]
    ys = pmf(xs)
    assert [y.shape for y in ys] == [x.shape for x in xs]


def test_pmf_every_target_gets_all_branches():
    pmf = PMFModule([2, 3, 4, 5])
    assert all(len(row) == 4 for row in pmf.fuse)


def test_pmf_identity_only_fusion_reduces_to_branches(gen):
    pmf = _seeded(PMFModule, [2, 3, 4], intra_sde=True)
    _zero(pmf.fuse)
    xs = _pyramid([2, 3, 4], 8, gen)
    ys = pmf(xs)
    for branch, x, y in zip(pmf.branches, xs, ys):
        assert torch.equal(y, branch(x))


def test_pmf_full_connectivity(gen):
    pmf = _seeded(PMFModule, [2, 3, 4])
    _randomize(pmf, gen)
    xs = _pyramid([2, 3, 4], 8, gen)
    base = pmf(xs)
    for src in range(3):
        pert = [x.clone() for x in xs]
        pert[src] = pert[src] + 0.1 * torch.randn(pert[src].shape, dtype=torch.float64, generator=gen)
        out = pmf(pert)
        for j in range(3):
            assert not torch.allclose(out[j], base[j]), f"branch {src} does not reach output {j}"


def test_pmf_jacobian_nonzero_for_every_pair(gen):
    pmf = _seeded(PMFModule, [2, 3])
    _randomize(pmf, gen)
    xs = [x.requires_grad_(True) for x in _pyramid([2, 3], 8, gen)]
    ys = pmf(xs)
    for j, y in enumerate(ys):
        grads = torch.autograd.grad(y.sum(), xs, retain_graph=True)
        for i, g in enumerate(grads):
            assert g.abs().sum() > 0, (i, j)


def test_pmf_rejects_bad_ladder():
    pmf = PMFModule([2, 3])
    with pytest.raises(ConfigurationError):
        pmf([torch.randn(1, 2, 8, 8, 8)])
    with pytest.raises(ConfigurationError):
        pmf([torch.randn(1, 2, 8, 8, 8), torch.randn(1, 3, 8, 8, 8)])
    with pytest.raises(ConfigurationError):
        pmf([torch.randn(1, 2, 8, 8, 8), torch.randn(1, 2, 4, 4, 4)])


@pytest.mark.parametrize("widths,extent", [([2, 2], 4), ([1, 2, 2], 6), ([2, 3], 5)])
def test_pmf_gradcheck(widths, extent, gen):
    pmf = _seeded(PMFModule, widths, intra_sde=True)
    _randomize(pmf, gen)
    xs = _pyramid(widths, extent, gen)
    probes = [weighted_sum(y, gen) for y in pmf(xs)]

    def loss(first):
        return sum(p(y) for p, y in zip(probes, pmf([first] + xs[1:])))

    assert T.check_input_gradient(loss, xs[0]) < 1e-4
    leaves = list(pmf.parameters()) + xs
    assert T.check_directional_gradient(lambda: loss(xs[0]), leaves, generator=gen) < 1e-4


# -- intra-scale SDE -----------------------------------------------------------------


def test_intra_sde_zero_logits_halve_input():
    sde = IntraScaleSDE(8)
    with torch.no_grad():
        sde.fc2.weight.zero_()
        sde.fc2.bias.zero_()
    x = torch.randn(2, 8, 4, 4, 4)
    assert torch.allclose(sde(x), x / 2)


def test_intra_sde_zero_input():
    sde = IntraScaleSDE(8)
    assert torch.all(sde(torch.zeros(1, 8, 4, 4, 4)) == 0)


def test_intra_sde_gate_range_and_magnitude(gen):
    sde = _seeded(IntraScaleSDE, 6)
    _randomize(sde, gen, 2.0)
    x = torch.randn(2, 6, 3, 3, 3, dtype=torch.float64, generator=gen)
    s = sde.gate(x)
    assert torch.all((s > 0) & (s < 1))
    assert torch.all(sde(x).abs() <= x.abs())


def test_intra_sde_squeeze_width():
    assert IntraScaleSDE(32).fc1.out_channels == 8
    assert IntraScaleSDE(8).fc1.out_channels == 4


@pytest.mark.parametrize("shape", [(1, 4, 3, 3, 3), (2, 5, 2, 3, 4), (1, 8, 4, 2, 2)])
def test_intra_sde_gradcheck(shape, gen):
    sde = _seeded(IntraScaleSDE, shape[1])
    _randomize(sde, gen)
    x = torch.randn(shape, dtype=torch.float64, generator=gen)
    probe = weighted_sum(sde(x), gen)
    assert T.check_input_gradient(lambda t: probe(sde(t)), x) < 1e-4
    assert T.check_directional_gradient(lambda: probe(sde(x)), sde.parameters(), generator=gen) < 1e-4


# -- inter-scale SDE -----------------------------------------------------------------


def test_inter_sde_constant_propagation():
    sde = InterScaleSDE([2, 1]).double()
    w, c = 0.7, 3.0
    with torch.no_grad():
        for red in sde.reduce:
            red.weight.fill_(w)
            red.bias.zero_()
        for res in sde.restore:
            res.weight.zero_()
            res.weight[:, -1] = 1.0  # read only the appended channel
            res.bias.zero_()
    xs = [torch.randn(1, 2, 6, 6, 6, dtype=torch.float64), torch.full((1, 1, 3, 3, 3), c, dtype=torch.float64)]
    for y in sde(xs):
        assert torch.allclose(y, torch.full_like(y, w * c), atol=1e-12)


def test_inter_sde_zeroed_appended_channel_is_plain_projection(gen):
    sde = _seeded(InterScaleSDE, [3, 4])
    with torch.no_grad():
        for res in sde.restore:
            res.weight[:, -1] = 0.0
    xs = _pyramid([3, 4], 6, gen)
    for x, res, y in zip(xs, sde.restore, sde(xs)):
        expected = T.conv3d(x, res.weight[:, :-1], res.bias)
        assert torch.allclose(y, expected, atol=1e-12)


def test_inter_sde_shapes_and_channel_restore(gen):
    sde = _seeded(InterScaleSDE, [2, 3, 4, 5])
    xs = _pyramid([2, 3, 4, 5], 16, gen)
    ys = sde(xs)
    assert [y.shape for y in ys] == [x.shape for x in xs]
    assert [r.in_channels for r in sde.restore] == [3, 4, 5, 6]


def test_inter_sde_global_context_reaches_every_branch(gen):
    sde = _seeded(InterScaleSDE, [2, 3, 4])
    xs = _pyramid([2, 3, 4], 8, gen)
    base = sde(xs)
    pert = xs[:-1] + [xs[-1] + 1.0]
    for y0, y1 in zip(base, sde(pert)):
        assert not torch.allclose(y0, y1)


def test_inter_sde_needs_two_branches():
    with pytest.raises(ConfigurationError):
        InterScaleSDE([4])


@pytest.mark.parametrize("widths,extent", [([2, 3], 4), ([1, 2, 2], 6), ([3, 2], 5)])
def test_inter_sde_gradcheck(widths, extent, gen):
    sde = _seeded(InterScaleSDE, widths)
    xs = _pyramid(widths, extent, gen)
    probes = [weighted_sum(y, gen) for y in sde(xs)]

    def loss(last):
        return sum(p(y) for p, y in zip(probes, sde(xs[:-1] + [last])))

    assert T.check_input_gradient(loss, xs[-1]) < 1e-4
    leaves = list(sde.parameters()) + xs
    assert T.check_directional_gradient(lambda: loss(xs[-1]), leaves, generator=gen) < 1e-4


# -- EMA module ----------------------------------------------------------------------


def _identity_projections(ema):
    with torch.no_grad():
        c = ema.channels
        eye = torch.eye(c, dtype=ema.in_proj.weight.dtype).reshape(c, c, 1, 1, 1)
        ema.in_proj.weight.copy_(eye)
        ema.in_proj.bias.zero_()
        ema.out_proj.weight.copy_(eye)
        ema.out_proj.bias.zero_()


def ema_oracle(x, bases, iterations, temperature=1.0):
    """Step-by-step E/M arithmetic in numpy for one sample (identity projections)."""
    c = x.shape[0]
    X = x.reshape(c, -1).T  # L x C
    mu = bases.copy()
    for _ in range(iterations):
        logits = temperature * X @ mu.T
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        Z = e / e.sum(axis=1, keepdims=True)
        raw = (Z.T @ X) / Z.sum(axis=0)[:, None]
        mu = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    recon = Z @ mu
    return x + recon.T.reshape(x.shape), Z, mu


def test_ema_explicit_step_oracle():
    ema = EMAModule(2, num_bases=2, iterations=1).double().eval()
    _identity_projections(ema)
    bases = np.array([[1.0, 0.0], [0.6, 0.8]])
    ema.bases.copy_(torch.from_numpy(bases))
    x = np.arange(16, dtype=np.float64).reshape(1, 2, 2, 2, 2) / 8.0 - 1.0
    x[0, 1] *= -0.5
    out = ema(torch.from_numpy(x)).detach().numpy()
    ref, _, _ = ema_oracle(x[0], bases, 1)
    np.testing.assert_allclose(out[0], ref, atol=1e-6)


@pytest.mark.parametrize("k,t", [(2, 1), (4, 3), (8, 3)])
def test_ema_matches_oracle_random(k, t, gen):
    ema = EMAModule(3, num_bases=k, iterations=t).double().eval()
    _identity_projections(ema)
    x = torch.randn(2, 3, 3, 4, 2, dtype=torch.float64, generator=gen)
    out = ema(x).detach().numpy()
    for s in range(2):
        ref, _, _ = ema_oracle(x[s].numpy(), ema.bases.numpy(), t)
        np.testing.assert_allclose(out[s], ref, atol=1e-10)


def test_ema_reconstruction_equals_naive_nonlocal_attention(gen):
    # one EM iteration is a low-rank non-local attention: Zmu = A X with an explicit N x N affinity A
    ema = EMAModule(4, num_bases=3, iterations=1).double().eval()
    _identity_projections(ema)
    x = torch.randn(1, 4, 3, 3, 2, dtype=torch.float64, generator=gen)
    ema.record = True
    out = ema(x).detach()
    recon = (out - x)[0].reshape(4, -1).T.numpy()
    X = x[0].reshape(4, -1).T.numpy()
    Z = ema.trace[0][0][0].numpy()
    mass = Z.sum(axis=0)
    raw_norm = np.linalg.norm((Z.T @ X) / mass[:, None], axis=1)
    n = X.shape[0]
    A = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            A[i, j] = sum(Z[i, k] * Z[j, k] / (mass[k] * raw_norm[k]) for k in range(3))
    np.testing.assert_allclose(recon, A @ X, atol=1e-12)


def test_ema_single_base_closed_form(gen):
    ema = EMAModule(3, num_bases=1, iterations=3).double().eval()
    _identity_projections(ema)
    x = torch.randn(1, 3, 2, 3, 4, dtype=torch.float64, generator=gen)
    ema.record = True
    out = ema(x).detach()
    X = x[0].reshape(3, -1).T
    direction = X.sum(0) / X.sum(0).norm()
    for z, mu in ema.trace:
        assert torch.allclose(z, torch.ones_like(z))
        assert torch.allclose(mu[0, 0], direction, atol=1e-6)
    assert torch.allclose((out - x)[0].reshape(3, -1).T, direction.expand(X.shape[0], 3), atol=1e-6)


def test_ema_zero_temperature_gives_uniform_responsibilities(gen):
    ema = EMAModule(3, num_bases=5, iterations=2, temperature=0.0).double().eval()
    ema.record = True
    ema(torch.randn(1, 3, 2, 2, 2, dtype=torch.float64, generator=gen))
    for z, _ in ema.trace:
        assert torch.allclose(z, torch.full_like(z, 0.2))


def test_ema_zero_output_projection_is_identity(gen):
    ema = EMAModule(4, num_bases=3)
    with torch.no_grad():
        ema.out_proj.weight.zero_()
        ema.out_proj.bias.zero_()
    x = torch.randn(2, 4, 3, 3, 3, generator=gen)
    assert torch.equal(ema(x), x)


def test_ema_zero_input_keeps_previous_bases():
    ema = EMAModule(2, num_bases=2, iterations=2).double().eval()
    _identity_projections(ema)
    ema.record = True
    out = ema(torch.zeros(1, 2, 2, 2, 2, dtype=torch.float64))
    assert torch.isfinite(out).all()
    for _, mu in ema.trace:
        assert torch.allclose(mu[0], ema.bases)


def test_ema_running_bases_update_only_in_training(gen):
    ema = EMAModule(3, num_bases=2, iterations=2, momentum=0.9).double()
    x = torch.randn(2, 3, 3, 3, 3, dtype=torch.float64, generator=gen)
    before = ema.bases.clone()
    ema.eval()
    ema(x)
    assert torch.equal(ema.bases, before)
    ema.train()
    ema.record = True
    ema(x)
    final = ema.trace[-1][1].mean(0)
    expected = 0.9 * before + 0.1 * final
    expected = expected / expected.norm(dim=1, keepdim=True)
    assert torch.allclose(ema.bases, expected, atol=1e-12)
    assert torch.allclose(ema.bases.norm(dim=1), torch.ones(2, dtype=torch.float64), atol=1e-12)


def test_ema_invalid_config():
    with pytest.raises(ConfigurationError):
        EMAModule(4, num_bases=0)
    with pytest.raises(ConfigurationError):
        EMAModule(4)(torch.zeros(1, 3, 2, 2, 2))


@pytest.mark.parametrize("shape,k", [((1, 3, 2, 2, 2), 2), ((2, 4, 3, 2, 2), 3), ((1, 2, 3, 3, 1), 4)])
def test_ema_gradcheck(shape, k, gen):
    ema = _seeded(EMAModule, shape[1], num_bases=k, iterations=3).eval()
    _randomize(ema, gen)
    x = torch.randn(shape, dtype=torch.float64, generator=gen)
    probe = weighted_sum(ema(x), gen)
    assert T.check_input_gradient(lambda t: probe(ema(t)), x) < 1e-4
    assert T.check_directional_gradient(lambda: probe(ema(x)), ema.parameters(), generator=gen) < 1e-4
