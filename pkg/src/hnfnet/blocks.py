"""Network building blocks: conv block, PMF module, EM attention and the two SDE blocks."""
import torch
from torch import nn

from . import tensor as T
from .errors import ConfigurationError


class ConvBlock(nn.Module):
    """Two (3x3x3 conv -> instance norm -> ReLU) stages; spatial extent preserved."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        # bias is cancelled by the following normalization
        self.conv1 = T.Conv3d(in_channels, out_channels, 3, bias=False)
        self.norm1 = T.InstanceNorm3d(out_channels)
        self.conv2 = T.Conv3d(out_channels, out_channels, 3, bias=False)
        self.norm2 = T.InstanceNorm3d(out_channels)

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"ConvBlock expects {self.in_channels} input channels, got shape {tuple(x.shape)}"
            )
        x = T.relu(self.norm1(self.conv1(x)))
        return T.relu(self.norm2(self.conv2(x)))


class DownBlock(nn.Module):
    """Stride-2 3x3x3 conv -> instance norm -> ReLU; halves every spatial extent."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = T.Conv3d(in_channels, out_channels, 3, stride=2, bias=False)
        self.norm = T.InstanceNorm3d(out_channels)

    def forward(self, x):
        return T.relu(self.norm(self.conv(x)))


class IntraScaleSDE(nn.Module):
    """Channel re-weighting from globally pooled context.

    ``y = x * sigmoid(fc2(relu(fc1(GAP(x)))))`` with the gate broadcast over space.
    """

    def __init__(self, channels, ratio=4, min_width=4):
        super().__init__()
        self.channels = channels
        squeezed = max(channels // ratio, min_width)
        self.fc1 = T.Conv3d(channels, squeezed, 1)
        self.fc2 = T.Conv3d(squeezed, channels, 1)

    def gate(self, x):
        return T.sigmoid(self.fc2(T.relu(self.fc1(T.global_avg_pool(x)))))

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != self.channels:
            raise ConfigurationError(f"IntraScaleSDE expects {self.channels} channels, got shape {tuple(x.shape)}")
        return T.scale_channels(x, self.gate(x))


def _down_extent(n):
    # stride-2, kernel-3, pad-1 convolution
    return (n - 1) // 2 + 1


class _DownPath(nn.Module):
    """Chain of stride-2 convs, one per octave, ReLU between links."""

    def __init__(self, widths):
        super().__init__()
        self.convs = nn.ModuleList(
            T.Conv3d(a, b, 3, stride=2) for a, b in zip(widths[:-1], widths[1:])
        )

    def forward(self, x, target):
        for k, conv in enumerate(self.convs):
            if k:
                x = T.relu(x)
            x = conv(x)
        return x


class _UpPath(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = T.Conv3d(in_channels, out_channels, 1)

    def forward(self, x, target):
        return T.trilinear_upsample(self.conv(x), target)


class _Identity(nn.Module):
    def forward(self, x, target):
        return x


class PMFModule(nn.Module):
    """Parallel multi-scale branches followed by fully connected cross-scale fusion.

    ``widths[i]`` is the channel count of branch ``i``; branch ``i + 1`` lives at
    half the resolution of branch ``i``. Every fused output is the ReLU of the
    sum of ``B`` resampled branch features.
    """

    def __init__(self, widths, intra_sde=False, sde_ratio=4):
        super().__init__()
        self.widths = list(widths)
        b = len(self.widths)
        if b < 1:
            raise ConfigurationError("PMFModule needs at least one branch")
        self.branches = nn.ModuleList()
        for w in self.widths:
            layers = [ConvBlock(w, w)]
            if intra_sde:
                layers.append(IntraScaleSDE(w, sde_ratio))
            self.branches.append(nn.Sequential(*layers))
        self.fuse = nn.ModuleList()
        for j in range(b):
            row = nn.ModuleList()
            for i in range(b):
                if i == j:
                    row.append(_Identity())
                elif i < j:
                    row.append(_DownPath(self.widths[i:j + 1]))
                else:
                    row.append(_UpPath(self.widths[i], self.widths[j]))
            self.fuse.append(row)

    @property
    def num_branches(self):
        return len(self.widths)

    def check_inputs(self, xs):
        if len(xs) != self.num_branches:
            raise ConfigurationError(f"PMFModule expects {self.num_branches} branch inputs, got {len(xs)}")
        for i, (x, w) in enumerate(zip(xs, self.widths)):
            if x.dim() != 5 or x.shape[1] != w:
                raise ConfigurationError(f"branch {i} expects {w} channels, got shape {tuple(x.shape)}")
            if i:
                want = tuple(_down_extent(n) for n in xs[i - 1].shape[2:])
                if tuple(x.shape[2:]) != want:
                    raise ConfigurationError(
                        f"branch {i} spatial extent {tuple(x.shape[2:])} is not half of branch {i - 1} "
                        f"({tuple(xs[i - 1].shape[2:])})"
                    )

    def forward(self, xs):
        self.check_inputs(xs)
        ys = [branch(x) for branch, x in zip(self.branches, xs)]
        out = []
        for j, row in enumerate(self.fuse):
            target = tuple(ys[j].shape[2:])
            acc = None
            for i, path in enumerate(row):
                term = path(ys[i], target)
                acc = term if acc is None else T.add(acc, term)
            out.append(T.relu(acc))
        return out


class InterScaleSDE(nn.Module):
    """Inject a one-channel global-context map from the coarsest branch into every branch.

    For branch ``j``: ``restore_j(concat(x_j, upsample(reduce_j(GAP(x_coarsest)))))``.
    """

    def __init__(self, widths):
        super().__init__()
        self.widths = list(widths)
        if len(self.widths) < 2:
            raise ConfigurationError("InterScaleSDE needs at least two branches (no coarser source otherwise)")
        src = self.widths[-1]
        self.reduce = nn.ModuleList(T.Conv3d(src, 1, 1) for _ in self.widths)
        self.restore = nn.ModuleList(T.Conv3d(w + 1, w, 1) for w in self.widths)

    def forward(self, xs):
        if len(xs) != len(self.widths):
            raise ConfigurationError(f"InterScaleSDE expects {len(self.widths)} branches, got {len(xs)}")
        for i, (x, w) in enumerate(zip(xs, self.widths)):
            if x.dim() != 5 or x.shape[1] != w:
                raise ConfigurationError(f"branch {i} expects {w} channels, got shape {tuple(x.shape)}")
        context = T.global_avg_pool(xs[-1])
        out = []
        for x, reduce, restore in zip(xs, self.reduce, self.restore):
            # 1x1x1 conv commutes with upsampling a 1x1x1 map, so reduce first
            g = T.trilinear_upsample(reduce(context), tuple(x.shape[2:]))
            out.append(restore(T.concat_channels([x, g])))
        return out


class EMAModule(nn.Module):
    """Expectation-maximization attention over ``K`` reconstruction bases.

    The flattened projection ``X`` (L x C per sample) alternates ``iterations``
    times between
        E-step: ``Z = softmax_K(temperature * X mu^T)``
        M-step: ``mu = l2_normalize_rows(Z^T X / colsum(Z))``
    and is reconstructed as ``Z mu``. The output is ``x + out_proj(Z mu)``.

    Bases that receive no responsibility (or collapse to the zero vector) keep
    their previous value. In training mode the running bases move towards the
    batch-mean of the final bases with ``momentum``; inference uses the running
    bases as the starting point.
    """

    def __init__(self, channels, num_bases=8, iterations=3, temperature=1.0, momentum=0.9):
        super().__init__()
        if num_bases < 1:
            raise ConfigurationError(f"EMAModule needs at least one base, got K={num_bases}")
        if iterations < 1:
            raise ConfigurationError(f"EMAModule needs at least one EM iteration, got T={iterations}")
        self.channels = channels
        self.num_bases = num_bases
        self.iterations = iterations
        self.temperature = temperature
        self.momentum = momentum
        self.in_proj = T.Conv3d(channels, channels, 1)
        self.out_proj = T.Conv3d(channels, channels, 1)
        bases = torch.randn(num_bases, channels) * (2.0 / num_bases) ** 0.5
        self.register_buffer("bases", _l2_rows(bases))
        self.record = False
        self.trace = []

    def em(self, X, mu):
        """Run the EM iterations on ``X`` (N x L x C) from initial bases ``mu`` (N x K x C)."""
        if self.record:
            self.trace = []
        z = None
        for _ in range(self.iterations):
            z = T.softmax(self.temperature * T.matmul_batched(X, mu.transpose(1, 2)), axis=2)
            mass = z.sum(dim=1)  # N x K
            raw = T.matmul_batched(z.transpose(1, 2), X) / mass.clamp_min(1e-30).unsqueeze(2)
            norm = raw.norm(dim=2, keepdim=True)
            ok = (mass.unsqueeze(2) > 0) & (norm > 1e-12)
            mu = torch.where(ok, raw / norm.clamp_min(1e-12), mu)
            if self.record:
                self.trace.append((z.detach().clone(), mu.detach().clone()))
        return z, mu

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != self.channels:
            raise ConfigurationError(f"EMAModule expects {self.channels} channels, got shape {tuple(x.shape)}")
        n, c = x.shape[:2]
        spatial = x.shape[2:]
        X = self.in_proj(x).reshape(n, c, -1).transpose(1, 2)
        mu0 = self.bases.detach().clone().to(X.dtype).unsqueeze(0).expand(n, -1, -1)
        z, mu = self.em(X, mu0)
        recon = T.matmul_batched(z, mu).transpose(1, 2).reshape(n, c, *spatial)
        if self.training:
            with torch.no_grad():
                batch_mu = mu.detach().mean(dim=0).to(self.bases.dtype)
                self.bases.copy_(_l2_rows(self.momentum * self.bases + (1 - self.momentum) * batch_mu))
        return T.add(x, self.out_proj(recon))


def _l2_rows(m):
    return m / m.norm(dim=-1, keepdim=True).clamp_min(1e-12)
