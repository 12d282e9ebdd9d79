"""Center crop, sliding-window patching, flip TTA, overlap averaging and label reconstruction."""
import itertools
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from ..errors import ConfigurationError, InputError
from ..validation import check_label_volume, check_triple

# spatial axes of an N x C x D x H x W tensor; identity plus the seven non-empty subsets
TTA_FLIPS = [()] + [c for k in (1, 2, 3) for c in itertools.combinations((2, 3, 4), k)]


@dataclass
class InferConfig:
    center_crop: tuple = (176, 224, 155)
    patch: tuple = (128, 128, 128)
    stride: tuple = (32, 32, 27)
    tta_enabled: bool = True
    et_threshold: int = 200
    threshold: float = 0.5

    def __post_init__(self):
        self.center_crop = check_triple(self.center_crop, "center_crop")
        self.patch = check_triple(self.patch, "patch")
        self.stride = check_triple(self.stride, "stride", minimum=0)
        if min(self.stride) < 1:
            raise ConfigurationError(f"stride must be >= 1 per axis, got {self.stride}")
        if any(s > p for s, p in zip(self.stride, self.patch)):
            raise ConfigurationError(f"stride {self.stride} exceeds patch {self.patch}")
        if self.et_threshold < 0:
            raise ConfigurationError("et_threshold must be >= 0")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown inference config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def axis_starts(extent, patch, stride):
    """Window starts ``0, s, 2s, ...`` plus a final window flush with the end."""
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if patch > extent:
        raise ConfigurationError(f"patch {patch} larger than extent {extent}; pad first")
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


@dataclass
class PatchGrid:
    shape: tuple  # padded crop extent
    patch: tuple
    starts: tuple  # per-axis start lists
    pad: tuple  # voxels appended per axis to reach the patch size

    def __iter__(self):
        return iter(itertools.product(*self.starts))

    def __len__(self):
        return int(np.prod([len(s) for s in self.starts]))

    def slices(self, start):
        return tuple(slice(a, a + p) for a, p in zip(start, self.patch))

    def coverage(self):
        count = np.zeros(self.shape, dtype=np.int64)
        for start in self:
            count[self.slices(start)] += 1
        return count


def make_patch_grid(crop_shape, patch, stride):
    crop_shape = check_triple(crop_shape, "crop_shape")
    patch = check_triple(patch, "patch")
    stride = check_triple(stride, "stride", minimum=0)
    if min(stride) < 1:
        raise ConfigurationError(f"stride must be >= 1 per axis, got {stride}")
    pad = tuple(max(0, p - n) for p, n in zip(patch, crop_shape))
    shape = tuple(n + d for n, d in zip(crop_shape, pad))
    starts = tuple(axis_starts(n, p, s) for n, p, s in zip(shape, patch, stride))
    return PatchGrid(shape=shape, patch=patch, starts=starts, pad=pad)


def center_crop_slices(shape, crop):
    """Centered window of extent ``min(crop, shape)`` per axis."""
    out = []
    for n, c in zip(shape, crop):
        c = min(c, n)
        off = (n - c) // 2
        out.append(slice(off, off + c))
    return tuple(out)


def postprocess(labels, et_threshold=200):
    """Relabel enhancing tumor (4) as NCR/NET (1) when fewer than ``et_threshold`` voxels are predicted."""
    labels = check_label_volume(labels).copy()
    et = labels == 4
    n = int(et.sum())
    if 0 < n < et_threshold:
        labels[et] = 1
    return labels


def regions_to_labels(probs, threshold=0.5):
    """Nested reconstruction from (WT, TC, ET) probabilities.

    Probabilities are made monotone (TC <= WT, ET <= TC) before thresholding, so
    WT voxels become 2, TC voxels inside them 1 and ET voxels inside those 4.
    """
    p_wt = probs[0]
    p_tc = np.minimum(probs[1], p_wt)
    p_et = np.minimum(probs[2], p_tc)
    labels = np.zeros(p_wt.shape, dtype=np.uint8)
    labels[p_wt > threshold] = 2
    labels[p_tc > threshold] = 1
    labels[p_et > threshold] = 4
    return labels


def _as_predictors(net):
    nets = list(net) if isinstance(net, (list, tuple)) else [net]
    for n in nets:
        if isinstance(n, nn.Module):
            n.eval()
    return nets


def _param_dtype(net):
    if isinstance(net, nn.Module):
        for p in net.parameters():
            return p.dtype
    return torch.float32


def predict_patch(nets, patch, tta=True):
    """Mean sigmoid probability over networks and flip views for one (C, d, h, w) patch."""
    flips = TTA_FLIPS if tta else [()]
    x = torch.from_numpy(np.ascontiguousarray(patch))[None]
    total = None
    with torch.no_grad():
        for net in nets:
            xv = x.to(_param_dtype(net))
            batch = torch.cat([torch.flip(xv, f) if f else xv for f in flips])
            out = torch.sigmoid(net(batch))
            for k, f in enumerate(flips):
                view = out[k:k + 1]
                view = torch.flip(view, f) if f else view
                view = view[0].to(torch.float64).numpy()
                total = view if total is None else total + view
    return total / (len(flips) * len(nets))


def predict_probabilities(net, images, config=None):
    """Region probabilities (3, D, H, W) for a preprocessed (4, D, H, W) image; zero outside the crop."""
    config = config or InferConfig()
    images = np.asarray(images)
    if images.ndim != 4:
        raise InputError(f"images must be C x D x H x W, got {images.shape}")
    nets = _as_predictors(net)
    for n in nets:
        cfg = getattr(n, "config", None)
        if cfg is not None and cfg.in_channels != images.shape[0]:
            raise ConfigurationError(f"network expects {cfg.in_channels} channels, study has {images.shape[0]}")
    shape = images.shape[1:]
    crop_sl = center_crop_slices(shape, config.center_crop)
    crop = images[(slice(None),) + crop_sl]
    crop_shape = crop.shape[1:]
    grid = make_patch_grid(crop_shape, config.patch, config.stride)
    if any(grid.pad):
        crop = np.pad(crop, [(0, 0)] + [(0, d) for d in grid.pad])
    acc = None
    count = np.zeros(grid.shape, dtype=np.float64)
    # fixed iteration order keeps the f64 accumulation bitwise reproducible
    for start in grid:
        sl = grid.slices(start)
        probs = predict_patch(nets, crop[(slice(None),) + sl], config.tta_enabled)
        if acc is None:
            acc = np.zeros((probs.shape[0],) + grid.shape, dtype=np.float64)
        acc[(slice(None),) + sl] += probs
        count[sl] += 1.0
    probs = acc / count
    probs = probs[(slice(None),) + tuple(slice(0, n) for n in crop_shape)]
    full = np.zeros((probs.shape[0],) + tuple(shape), dtype=np.float64)
    full[(slice(None),) + crop_sl] = probs
    return full


def infer_study(net, study, config=None):
    """Label volume (original shape) for a preprocessed study."""
    config = config or InferConfig()
    images = study.images if hasattr(study, "images") else study
    probs = predict_probabilities(net, images, config)
    labels = regions_to_labels(probs, config.threshold)
    return postprocess(labels, config.et_threshold)
