"""Per-sequence intensity normalization over the (nonzero) brain mask."""
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, InputError, PreprocessingError
from .study import MODALITIES


@dataclass(frozen=True)
class PreprocessParams:
    clip_low_pct: float = 0.5
    clip_high_pct: float = 99.5
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.clip_low_pct < self.clip_high_pct <= 100:
            raise ConfigurationError(
                f"need 0 <= clip_low_pct < clip_high_pct <= 100, got {self.clip_low_pct}, {self.clip_high_pct}"
            )


def percentile(values, p):
    """Linear interpolation between closest ranks: index ``p / 100 * (n - 1)`` of the sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise InputError("percentile of an empty set")
    if not 0 <= p <= 100:
        raise InputError(f"percentile p must lie in [0, 100], got {p}")
    pos = p / 100.0 * (v.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, v.size - 1)
    frac = pos - lo
    return float(v[lo] + (v[hi] - v[lo]) * frac)


def normalize_volume(vol, params=PreprocessParams(), name="volume"):
    """Clip brain voxels to their percentile window, then z-score them; background stays 0."""
    vol = np.asarray(vol)
    mask = vol != 0
    if not mask.any():
        raise PreprocessingError(f"{name} has no nonzero (brain) voxels")
    brain = vol[mask].astype(np.float64)
    lo = percentile(brain, params.clip_low_pct)
    hi = percentile(brain, params.clip_high_pct)
    brain = np.clip(brain, lo, hi)
    mean = brain.mean()
    std = max(brain.std(), params.eps)
    out = np.zeros(vol.shape, dtype=np.float32)
    out[mask] = ((brain - mean) / std).astype(np.float32)
    return out


def preprocess(study, params=PreprocessParams()):
    """Normalize each modality of ``study`` independently; labels are untouched."""
    images = np.stack(
        [normalize_volume(study.images[i], params, f"study {study.id} modality {m}") for i, m in enumerate(MODALITIES)]
    )
    return study.replace(images=images)
