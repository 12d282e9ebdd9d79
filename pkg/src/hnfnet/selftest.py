"""Fast in-package oracle and invariant checks, run by ``hnfnet selftest``."""
import math
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from . import tensor as T
from .blocks import ConvBlock, EMAModule, InterScaleSDE, IntraScaleSDE, PMFModule
from .data.nifti import read_nifti, write_nifti
from .data.preprocessing import normalize_volume
from .engine.inference import make_patch_grid, postprocess
from .engine.losses import region_loss
from .engine.optim import lr_schedule
from .engine.training import TrainConfig
from .metrics import HD95_EMPTY, dice, hd95

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


def _direct_conv(x, w):
    n, cin, D, H, W = x.shape
    cout, _, k, _, _ = w.shape
    out = np.zeros((n, cout, D - k + 1, H - k + 1, W - k + 1))
    for idx in np.ndindex(out.shape):
        s, o, i, j, l = idx
        out[idx] = float((x[s, :, i:i + k, j:j + k, l:l + k] * w[o]).sum())
    return out


@check
def conv_matches_direct_summation(g):
    x = torch.randn(1, 2, 5, 4, 4, dtype=torch.float64, generator=g)
    w = torch.randn(3, 2, 3, 3, 3, dtype=torch.float64, generator=g)
    err = np.abs(T.conv3d(x, w).numpy() - _direct_conv(x.numpy(), w.numpy())).max()
    return err < 1e-10, f"max abs diff {err:.2e}"


@check
def block_gradients_match_finite_differences(g):
    worst = 0.0
    cases = [
        (ConvBlock(2, 3), lambda: [torch.randn(1, 2, 4, 4, 4, generator=g)]),
        (IntraScaleSDE(4), lambda: [torch.randn(1, 4, 3, 3, 3, generator=g)]),
        (EMAModule(3, num_bases=2).eval(), lambda: [torch.randn(1, 3, 2, 2, 2, generator=g)]),
        (PMFModule([2, 2]), lambda: [[torch.randn(1, 2, 4, 4, 4, generator=g), torch.randn(1, 2, 2, 2, 2, generator=g)]]),
        (InterScaleSDE([2, 2]), lambda: [[torch.randn(1, 2, 4, 4, 4, generator=g), torch.randn(1, 2, 2, 2, 2, generator=g)]]),
    ]
    for module, make in cases:
        module = module.double()
        with torch.no_grad():
            for p in module.parameters():
                p.copy_(0.5 * torch.randn(p.shape, dtype=p.dtype, generator=g))
        (arg,) = make()
        arg = [a.double() for a in arg] if isinstance(arg, list) else arg.double()
        leaves = list(module.parameters()) + (arg if isinstance(arg, list) else [arg])

        def loss():
            out = module(arg)
            outs = out if isinstance(out, list) else [out]
            return sum((o * torch.cos(torch.arange(o.numel(), dtype=o.dtype).reshape(o.shape))).sum() for o in outs)

        worst = max(worst, T.check_directional_gradient(loss, leaves, generator=g))
    return worst < 1e-4, f"worst relative error {worst:.2e}"


@check
def ema_invariants(g):
    worst_row, worst_norm = 0.0, 0.0
    for k in (1, 2, 8):
        for t in (1, 3):
            ema = EMAModule(4, num_bases=k, iterations=t).double()
            ema.record = True
            for _ in range(3):
                ema(torch.randn(2, 4, 3, 3, 2, dtype=torch.float64, generator=g))
                for z, mu in ema.trace:
                    worst_row = max(worst_row, float((z.sum(-1) - 1).abs().max()))
                    worst_norm = max(worst_norm, float((mu.norm(dim=-1) - 1).abs().max()))
    return worst_row < 1e-6 and worst_norm < 1e-5, f"row-sum dev {worst_row:.1e}, norm dev {worst_norm:.1e}"


@check
def reference_patch_grid(g):
    grid = make_patch_grid((176, 224, 155), (128, 128, 128), (32, 32, 27))
    starts = [list(s) for s in grid.starts]
    return starts == [[0, 32, 48], [0, 32, 64, 96], [0, 27]] and len(grid) == 24, f"{starts}"


@check
def postprocess_threshold(g):
    ok = True
    for count, keep in ((199, False), (200, True)):
        lab = np.zeros((10, 10, 10), dtype=np.uint8)
        lab.ravel()[:count] = 4
        ok &= bool(((postprocess(lab, 200) == 4).sum() == count) == keep)
    return ok, "199 relabeled, 200 kept" if ok else "boundary rule broken"


@check
def metrics_match_brute_force(g):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        a = rng.random((6, 5, 4)) < 0.3
        b = rng.random((6, 5, 4)) < 0.3
        if not a.any() or not b.any():
            continue
        pa, pb = np.argwhere(a & ~_interior(a)), np.argwhere(b & ~_interior(b))
        d = np.sqrt(((pa[:, None] - pb[None]) ** 2).sum(-1))
        ref = max(np.percentile(d.min(1), 95), np.percentile(d.min(0), 95))
        worst = max(worst, abs(hd95(a, b) - ref))
        inter = int((a & b).sum())
        worst = max(worst, abs(dice(a, b) - 2 * inter / (a.sum() + b.sum())))
    empty = np.zeros((3, 3, 3), bool)
    ok = worst < 1e-9 and hd95(empty, empty) == 0.0 and hd95(empty, ~empty) == HD95_EMPTY
    return ok, f"max deviation {worst:.1e}"


def _interior(m):
    out = np.zeros_like(m)
    core = m[1:-1, 1:-1, 1:-1].copy()
    for ax in range(3):
        for d in (-1, 1):
            sl = [slice(1, -1)] * 3
            sl[ax] = slice(1 + d, m.shape[ax] - 1 + d)
            core &= m[tuple(sl)]
    out[1:-1, 1:-1, 1:-1] = core
    return out


@check
def nifti_round_trip(g):
    vol = np.random.default_rng(1).standard_normal((5, 6, 7)).astype(np.float32)
    with tempfile.TemporaryDirectory() as d:
        back, spacing, _ = read_nifti(write_nifti(vol, (1.0, 2.0, 3.0), Path(d) / "v.nii.gz"))
    return back.tobytes() == vol.tobytes() and spacing == (1.0, 2.0, 3.0), "bitwise"


@check
def preprocessing_moments(g):
    vol = np.zeros((12, 12, 12))
    vol.ravel()[:1000] = np.arange(1, 1001)
    brain = normalize_volume(vol).ravel()[:1000].astype(np.float64)
    m, s = abs(brain.mean()), abs(brain.std() - 1)
    return m < 1e-5 and s < 1e-5, f"|mean| {m:.1e}, |std-1| {s:.1e}"


@check
def schedule_formula(g):
    cfg = TrainConfig()
    ok = all(
        lr_schedule(e, cfg) == (1e-3 * (e + 1) / 5 if e < 5 else 1e-3 * (1 - e / 250) ** 0.9) for e in range(250)
    )
    return ok, "250 epochs"


@check
def loss_zero_logits(g):
    t = torch.zeros(1, 3, 2, 2, 2)
    t[0, :, 0, 0, 0] = 1
    # p = 1/2 on 8 voxels, one target voxel per region: overlap 0.5, union 8 * 0.5 + 1
    gdl = 1 - (2 * 0.5 + 1e-5) / (5.0 + 1e-5)
    got = float(region_loss(torch.zeros_like(t), t))
    return abs(got - (gdl + math.log(2))) < 1e-6, f"loss {got:.6f}"


def run(stream=print):
    """Run every check; returns True when all pass."""
    g = torch.Generator().manual_seed(0)
    all_ok = True
    for fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn(g)
        except Exception as e:  # report, keep going
            ok, detail = False, f"{type(e).__name__}: {e}"
        all_ok &= bool(ok)
        stream(f"{'PASS' if ok else 'FAIL'}  {fn.__name__:<42} {detail} ({time.perf_counter() - t0:.2f}s)")
    return all_ok
