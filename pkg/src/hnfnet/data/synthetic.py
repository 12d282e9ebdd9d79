"""Seeded multi-modal phantoms with nested ellipsoidal lesions.

Stand-in for real BraTS studies so the whole pipeline can be trained and
verified on a laptop.
"""
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..errors import ConfigurationError, InputError
from .study import MODALITIES, Study

# relative intensity of (healthy brain, ED, NCR/NET, ET) per modality
CONTRASTS = {
    "t1": (1.0, 0.80, 0.45, 0.75),
    "t1ce": (1.0, 0.85, 0.50, 2.00),
    "t2": (1.0, 1.70, 2.00, 1.30),
    "flair": (1.0, 1.80, 1.20, 1.40),
}
BASE_INTENSITY = {"t1": 500.0, "t1ce": 600.0, "t2": 800.0, "flair": 400.0}


@dataclass(frozen=True)
class LesionSpec:
    """Radius ranges (voxels) of the three nested ellipsoids; each is clamped inside the next."""

    wt_radius: tuple = (9.0, 12.0)
    tc_radius: tuple = (6.0, 8.0)
    et_radius: tuple = (4.0, 5.5)
    anisotropy: float = 0.15
    noise: float = 0.04

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known})


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _ellipsoid(grid, center, axes):
    if min(axes) <= 0:
        return np.zeros(grid[0].shape, dtype=bool)
    d = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes))
    return d <= 1.0


def synth_study(rng, shape=(48, 48, 48), lesion_spec=LesionSpec(), study_id="synth"):
    """Generate one study; identical ``rng`` seed gives a bitwise-identical study."""
    rng = _as_rng(rng)
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 4:
        raise InputError(f"synthetic shape must be three extents >= 4, got {shape}")
    spec = lesion_spec
    r_wt = rng.uniform(*spec.wt_radius)
    r_tc = min(rng.uniform(*spec.tc_radius), r_wt)
    r_et = min(rng.uniform(*spec.et_radius), r_tc)
    aniso = rng.uniform(1 - spec.anisotropy, 1 + spec.anisotropy, size=3)
    brain_axes = np.array(shape) * 0.45
    wt_axes = r_wt * aniso
    if np.any(wt_axes >= brain_axes):
        raise InputError(f"lesion (semi-axes {np.round(wt_axes, 2).tolist()}) does not fit inside volume {shape}")
    center = np.array(shape, dtype=np.float64) / 2.0 - 0.5
    # keep the lesion inside the brain ellipsoid
    room = brain_axes - wt_axes
    lesion_center = center + rng.uniform(-0.4, 0.4, size=3) * room

    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    brain = _ellipsoid(grid, center, brain_axes)
    wt = _ellipsoid(grid, lesion_center, wt_axes) & brain
    tc = _ellipsoid(grid, lesion_center, r_tc * aniso) & wt
    et = _ellipsoid(grid, lesion_center, r_et * aniso) & tc

    label = np.zeros(shape, dtype=np.uint8)
    label[wt] = 2
    label[tc] = 1
    label[et] = 4

    images = np.zeros((len(MODALITIES),) + shape, dtype=np.float32)
    for i, m in enumerate(MODALITIES):
        healthy, ed, ncr, enh = CONTRASTS[m]
        rel = np.full(shape, healthy)
        rel[label == 2] = ed
        rel[label == 1] = ncr
        rel[label == 4] = enh
        texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=3.0)
        texture /= max(np.abs(texture).max(), 1e-12)
        vol = BASE_INTENSITY[m] * (rel + 0.15 * texture + spec.noise * rng.standard_normal(shape))
        vol = np.maximum(vol, 1.0)
        vol[~brain] = 0.0
        images[i] = vol.astype(np.float32)
    return Study(id=study_id, images=images, spacing=(1.0, 1.0, 1.0), label=label)


@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 4
    shape: tuple = (48, 48, 48)
    seed: int = 0
    lesion: LesionSpec = LesionSpec()

    @classmethod
    def from_dict(cls, d):
        if "count" not in d:
            raise ConfigurationError("synthetic dataset spec needs a 'count'")
        return cls(
            count=int(d["count"]),
            shape=tuple(d.get("shape", (48, 48, 48))),
            seed=int(d.get("seed", 0)),
            lesion=LesionSpec.from_dict(d.get("lesion", {})),
        )

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    def generate(self):
        seeds = np.random.SeedSequence(self.seed).spawn(self.count)
        return [
            synth_study(np.random.default_rng(s), self.shape, self.lesion, study_id=f"synth_{k:03d}")
            for k, s in enumerate(seeds)
        ]
