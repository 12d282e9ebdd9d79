import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InputError
from ..validation import check_label_volume
from .nifti import read_nifti

MODALITIES = ("t1", "t1ce", "t2", "flair")


@dataclass
class Study:
    """One subject: four co-registered modality volumes, optional labels.

    ``images`` has shape (4, D, H, W) in MODALITIES order.
    """

    id: str
    images: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    label: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4 or self.images.shape[0] != len(MODALITIES):
            raise InputError(f"study {self.id}: images must be 4 x D x H x W, got {self.images.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3:
            raise InputError(f"study {self.id}: spacing must have three entries")
        if self.label is not None:
            self.label = check_label_volume(self.label, f"study {self.id} label")
            if self.label.shape != self.shape:
                raise InputError(f"study {self.id}: label shape {self.label.shape} != image shape {self.shape}")

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def replace(self, **kw):
        d = {"id": self.id, "images": self.images, "spacing": self.spacing, "label": self.label, "meta": self.meta}
        d.update(kw)
        return Study(**d)


def study_rng(seed, study_id):
    """Independent generator for one study, stable under any worker scheduling."""
    return np.random.default_rng([int(seed), zlib.crc32(str(study_id).encode())])


def load_study(entry, root="."):
    root = Path(root)
    paths = entry.get("modalities") or {}
    missing = [m for m in MODALITIES if m not in paths]
    if missing:
        raise InputError(f"study {entry.get('id')}: manifest lacks modalities {missing}")
    vols = []
    spacing = None
    for m in MODALITIES:
        vol, sp, _ = read_nifti(root / paths[m])
        if vol.ndim != 3:
            raise InputError(f"study {entry['id']}: modality {m} is {vol.ndim}-D")
        if vols and vol.shape != vols[0].shape:
            raise InputError(f"study {entry['id']}: modality {m} shape {vol.shape} != {vols[0].shape}")
        if spacing is not None and not np.allclose(sp, spacing):
            raise InputError(f"study {entry['id']}: modality {m} spacing {sp} != {spacing}")
        spacing = sp
        vols.append(vol.astype(np.float32))
    label = None
    if entry.get("label"):
        label, _, _ = read_nifti(root / entry["label"])
    return Study(id=str(entry["id"]), images=np.stack(vols), spacing=spacing, label=label)


def read_manifest(path):
    """Parse a dataset manifest: a JSON list of ``{id, modalities: {t1, t1ce, t2, flair}, label}``."""
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise InputError(f"{path}: manifest must be a JSON list")
    for e in entries:
        if "id" not in e:
            raise InputError(f"{path}: manifest entry without id")
    return entries


def load_manifest(path):
    path = Path(path)
    return [load_study(e, path.parent) for e in read_manifest(path)]


def write_manifest(studies_paths, path):
    Path(path).write_text(json.dumps(studies_paths, indent=2))


def load_dataset(path):
    """Studies from a manifest (JSON list) or a synthetic dataset spec (JSON object with ``count``)."""
    from .synthetic import SyntheticSpec

    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"{path}: cannot read dataset description ({e})") from e
    if isinstance(doc, list):
        return load_manifest(path)
    if isinstance(doc, dict):
        return SyntheticSpec.from_dict(doc).generate()
    raise InputError(f"{path}: expected a manifest list or a synthetic spec object")
