"""Training-time patch sampling and online augmentation."""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..validation import check_triple


@dataclass(frozen=True)
class AugmentationParams:
    flip_prob: float = 0.5
    rotation_deg: float = 10.0
    shift_range: float = 0.1
    scale_range: tuple = (0.9, 1.1)
    crop_size: tuple = (128, 128, 128)
    foreground_prob: float = 0.5

    @classmethod
    def identity(cls, crop_size=(128, 128, 128)):
        return cls(flip_prob=0.0, rotation_deg=0.0, shift_range=0.0, scale_range=(1.0, 1.0),
                   crop_size=crop_size, foreground_prob=0.0)


def pad_to(images, label, size):
    """Zero-pad (at the far end) so every spatial extent is at least ``size``."""
    shape = images.shape[1:]
    pad = [(0, max(0, s - n)) for s, n in zip(size, shape)]
    if not any(p[1] for p in pad):
        return images, label
    images = np.pad(images, [(0, 0)] + pad)
    if label is not None:
        label = np.pad(label, pad)
    return images, label


def random_crop(images, label, size, rng, foreground_prob=0.5):
    """Crop a ``size`` patch at a uniform random corner.

    With probability ``foreground_prob`` (and if the label has foreground) the
    corner is drawn among those whose patch contains a randomly chosen
    foreground voxel.
    """
    size = check_triple(size, "crop_size")
    images, label = pad_to(images, label, size)
    shape = images.shape[1:]
    hi = [n - s for n, s in zip(shape, size)]
    corner = None
    if label is not None and foreground_prob > 0 and rng.random() < foreground_prob:
        fg = np.argwhere(label > 0)
        if len(fg):
            v = fg[rng.integers(len(fg))]
            corner = [int(rng.integers(max(0, c - s + 1), min(c, h) + 1)) for c, s, h in zip(v, size, hi)]
    if corner is None:
        corner = [int(rng.integers(0, h + 1)) for h in hi]
    sl = tuple(slice(c, c + s) for c, s in zip(corner, size))
    return images[(slice(None),) + sl], (label[sl] if label is not None else None)


def flip(images, label, axes):
    """Flip spatial ``axes`` (0, 1, 2) of the images and the label identically."""
    axes = tuple(axes)
    if not axes:
        return images, label
    images = np.flip(images, tuple(a + 1 for a in axes)).copy()
    if label is not None:
        label = np.flip(label, axes).copy()
    return images, label


def rotation_matrix(angles_deg):
    """Composite rotation about the three spatial axes (each angle in its own plane)."""
    m = np.eye(3)
    for axis, deg in enumerate(angles_deg):
        if deg == 0:
            continue
        t = np.deg2rad(deg)
        c, s = np.cos(t), np.sin(t)
        i, j = [a for a in range(3) if a != axis]
        r = np.eye(3)
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        m = r @ m
    return m


def rotate(images, label, angles_deg):
    """Rotate about the volume center; trilinear for images, nearest for labels, zero fill."""
    if not any(angles_deg):
        return images, label
    m = rotation_matrix(angles_deg)
    shape = np.array(images.shape[1:])
    center = (shape - 1) / 2.0
    # output -> input mapping: x_in = R^T (x_out - c) + c
    inv = m.T
    offset = center - inv @ center
    images = np.stack(
        [ndimage.affine_transform(ch, inv, offset=offset, order=1, mode="constant", cval=0.0) for ch in images]
    ).astype(images.dtype, copy=False)
    if label is not None:
        label = ndimage.affine_transform(label, inv, offset=offset, order=0, mode="constant", cval=0).astype(
            label.dtype, copy=False
        )
    return images, label


def intensity(images, scales, shifts):
    """Per-channel ``x * scale + shift`` applied to images only."""
    s = np.asarray(scales, dtype=np.float32).reshape(-1, 1, 1, 1)
    b = np.asarray(shifts, dtype=np.float32).reshape(-1, 1, 1, 1)
    return (images * s + b).astype(images.dtype, copy=False)


def augment(images, label, params, rng):
    """Random flips, rotations and per-channel intensity shift/scale for one patch."""
    axes = [a for a in range(3) if params.flip_prob > 0 and rng.random() < params.flip_prob]
    images, label = flip(images, label, axes)
    if params.rotation_deg > 0:
        angles = rng.uniform(-params.rotation_deg, params.rotation_deg, size=3)
        images, label = rotate(images, label, angles)
    lo, hi = params.scale_range
    c = images.shape[0]
    if params.shift_range > 0 or lo != 1.0 or hi != 1.0:
        scales = rng.uniform(lo, hi, size=c)
        shifts = rng.uniform(-params.shift_range, params.shift_range, size=c)
        images = intensity(images, scales, shifts)
    return images, label
