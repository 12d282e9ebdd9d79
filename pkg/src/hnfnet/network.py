"""Network assembly, ablation variants, parameter and FLOP accounting."""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from functools import partial

import torch
from torch import nn

from . import tensor as T
from .blocks import ConvBlock, DownBlock, EMAModule, InterScaleSDE, PMFModule
from .errors import ConfigurationError, InputError, NumericFaultError

NUM_SCALES = 5
BRANCH_COUNTS = (2, 3, 4, 4)
# inter-scale SDE sits between PMF module 3 and 4
INTER_SDE_AFTER = 3


@dataclass
class NetworkConfig:
    base_channels: int = 8
    in_channels: int = 4
    out_channels: int = 3
    channel_cap: int = 16
    ema_bases: int = 8
    ema_iterations: int = 3
    ema_temperature: float = 1.0
    ema_momentum: float = 0.9
    intra_sde: bool = True
    inter_sde: bool = True
    sde_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be positive")
        if self.ema_bases < 1:
            raise ConfigurationError(f"ema_bases must be >= 1, got {self.ema_bases}")
        if self.ema_iterations < 1:
            raise ConfigurationError(f"ema_iterations must be >= 1, got {self.ema_iterations}")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigurationError(f"ema_momentum must lie in [0, 1), got {self.ema_momentum}")

    @classmethod
    def full(cls, **kw):
        """Full-size setting: 32 channels at the input resolution, 256 EM bases."""
        return cls(**{"base_channels": 32, "ema_bases": 256, **kw})

    @classmethod
    def hnf_net(cls, **kw):
        """Baseline ablation without either SDE gate."""
        return cls(**{**kw, "intra_sde": False, "inter_sde": False})

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def config_hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def widths(self):
        """Channel count at each of the five scales (r, r/2, ..., r/16)."""
        c = self.base_channels
        return [min(c * 2 ** s, self.channel_cap * c) for s in range(NUM_SCALES)]


@dataclass
class ParameterReport:
    total: int
    breakdown: dict = field(default_factory=dict)

    def millions(self):
        return self.total / 1e6


class HNFNet(nn.Module):
    """Encoder-decoder with cascaded PMF modules at scales r/2..r/16 and EM attention.

    ``forward`` maps N x in_channels x D x H x W to N x out_channels x D x H x W
    region logits; every spatial extent must be divisible by 16.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        w = config.widths()
        c = w[0]
        self.enc1 = ConvBlock(config.in_channels, c)
        self.enc2 = ConvBlock(c, c)
        self.entry = DownBlock(c, w[1])
        # transitions[k] creates the new coarsest branch consumed by pmf[k]
        self.transitions = nn.ModuleList()
        self.pmf = nn.ModuleList()
        prev = 1
        for b in BRANCH_COUNTS:
            trans = nn.ModuleList(DownBlock(w[s], w[s + 1]) for s in range(prev, b))
            self.transitions.append(trans)
            self.pmf.append(PMFModule(w[1:b + 1], intra_sde=config.intra_sde, sde_ratio=config.sde_ratio))
            prev = b
        self.inter_sde = InterScaleSDE(w[1:BRANCH_COUNTS[INTER_SDE_AFTER - 1] + 1]) if config.inter_sde else None
        last = BRANCH_COUNTS[-1]
        self.recover = nn.ModuleList(T.Conv3d(w[s], w[1], 1) for s in range(2, last + 1))
        mixed = w[1] * last
        self.ema = EMAModule(
            mixed,
            num_bases=config.ema_bases,
            iterations=config.ema_iterations,
            temperature=config.ema_temperature,
            momentum=config.ema_momentum,
        )
        self.up = T.Conv3d(mixed, c, 1)
        self.dec1 = ConvBlock(c, c)
        self.dec2 = ConvBlock(c, c)
        self.head = T.Conv3d(c, config.out_channels, 1)
        self.check_finite = True
        for name, module in self.named_modules():
            if name:
                module.register_forward_hook(partial(_finite_hook, self, name))

    def validate_input(self, x):
        if x.dim() != 5:
            raise InputError(f"expected N x C x D x H x W input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise InputError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        for axis, n in zip("DHW", x.shape[2:]):
            if n % 16:
                raise InputError(f"spatial extent along axis {axis} is {n}, not divisible by 16")

    def forward(self, x):
        self.validate_input(x)
        skip = self.enc2(self.enc1(x))
        xs = [self.entry(skip)]
        for k, (trans, pmf) in enumerate(zip(self.transitions, self.pmf)):
            for down in trans:
                xs.append(down(xs[-1]))
            xs = pmf(xs)
            if self.inter_sde is not None and k + 1 == INTER_SDE_AFTER:
                xs = self.inter_sde(xs)
        half = tuple(xs[0].shape[2:])
        mixed = [xs[0]] + [T.trilinear_upsample(conv(f), half) for conv, f in zip(self.recover, xs[1:])]
        y = self.ema(T.concat_channels(mixed))
        y = T.trilinear_upsample(self.up(y), tuple(skip.shape[2:]))
        y = T.add(skip, y)
        return self.head(self.dec2(self.dec1(y)))


def _finite_hook(net, name, module, inputs, output):
    if not net.check_finite:
        return
    outs = output if isinstance(output, (list, tuple)) else [output]
    for o in outs:
        # a reduction is much cheaper than an elementwise scan; confirm before raising
        if isinstance(o, torch.Tensor) and not torch.isfinite(o.sum()) and not torch.isfinite(o).all():
            raise NumericFaultError(f"non-finite output from layer {name!r}", layer=name)


def build(config=None):
    """Construct a network with deterministic initialization from ``config.seed``."""
    config = config or NetworkConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = HNFNet(config)
    return net


def forward(net, x, mode="infer"):
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")
    net.train(mode == "train")
    if mode == "infer":
        with torch.no_grad():
            return net(x)
    return net(x)


def count_parameters(net):
    """Exact trainable-parameter count with a per-child breakdown (buffers excluded)."""
    breakdown = {}
    for name, child in net.named_children():
        n = sum(p.numel() for p in child.parameters())
        if n:
            breakdown[name] = n
    own = sum(p.numel() for name, p in net.named_parameters(recurse=False))
    if own:
        breakdown["<root>"] = own
    return ParameterReport(total=sum(breakdown.values()), breakdown=breakdown)


def estimate_flops(net, spatial=(128, 128, 128)):
    """Approximate FLOPs (2 x multiply-accumulates) of one forward pass at ``spatial``.

    Counts convolutions and the EM attention matrix products only.
    """
    macs = [0]

    def conv_hook(module, inputs, output):
        k = module.weight.shape
        macs[0] += output.numel() * k[1] * k[2] * k[3] * k[4]

    def ema_hook(module, inputs, output):
        x = inputs[0]
        n, c = x.shape[:2]
        length = x[0, 0].numel()
        kk = module.num_bases
        # two products per iteration plus the reconstruction
        macs[0] += n * (2 * module.iterations + 1) * length * kk * c

    handles = []
    for m in net.modules():
        if isinstance(m, T.Conv3d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, EMAModule):
            handles.append(m.register_forward_hook(ema_hook))
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            net(torch.zeros(1, net.config.in_channels, *spatial))
    finally:
        for h in handles:
            h.remove()
        net.train(was_training)
    return 2 * macs[0]
