"""Input validation helpers shared by the estimator, engine and metrics."""
import numpy as np

from .errors import InputError, LabelError

LABEL_VALUES = (0, 1, 2, 4)


def check_volume(vol, name="volume", ndim=3):
    vol = np.asarray(vol)
    if vol.ndim != ndim:
        raise InputError(f"{name} must be {ndim}-D, got shape {vol.shape}")
    if min(vol.shape) < 1:
        raise InputError(f"{name} has an empty axis: {vol.shape}")
    return vol


def check_label_volume(labels, name="labels"):
    """Return ``labels`` as an integer array, rejecting values outside {0, 1, 2, 4}."""
    labels = np.asarray(labels)
    if labels.dtype.kind == "f":
        if not np.all(np.mod(labels, 1) == 0):
            raise LabelError(f"{name} contains non-integer values")
    elif labels.dtype.kind not in "iub":
        raise LabelError(f"{name} has non-numeric dtype {labels.dtype}")
    present = np.unique(labels)
    bad = sorted(set(present.tolist()) - set(LABEL_VALUES))
    if bad:
        raise LabelError(f"{name} contains invalid label values {bad}; allowed {LABEL_VALUES}")
    return labels.astype(np.uint8, copy=False)


def check_binary(mask, name="mask"):
    mask = np.asarray(mask)
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise InputError(f"{name} must be binary")
        mask = mask.astype(bool)
    return mask


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise InputError(f"shape mismatch: {names[0]} {np.shape(a)} vs {names[1]} {np.shape(b)}")


def check_divisible(shape, k=16, name="input"):
    for axis, n in zip("DHW", shape):
        if n % k:
            raise InputError(f"{name} extent along axis {axis} is {n}, not divisible by {k}")


def check_triple(v, name, minimum=1):
    if np.isscalar(v):
        v = (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3 or min(v) < minimum:
        raise InputError(f"{name} must be three integers >= {minimum}, got {v}")
    return v
