from .augmentation import AugmentationParams, augment, flip, random_crop, rotate
from .nifti import read_nifti, write_nifti
from .preprocessing import PreprocessParams, normalize_volume, percentile, preprocess
from .study import MODALITIES, Study, load_dataset, load_manifest, load_study, read_manifest, study_rng
from .synthetic import LesionSpec, SyntheticSpec, synth_study

__all__ = [
    "AugmentationParams",
    "LesionSpec",
    "MODALITIES",
    "PreprocessParams",
    "Study",
    "SyntheticSpec",
    "augment",
    "flip",
    "load_dataset",
    "load_manifest",
    "load_study",
    "normalize_volume",
    "percentile",
    "preprocess",
    "random_crop",
    "read_manifest",
    "read_nifti",
    "rotate",
    "study_rng",
    "synth_study",
    "write_nifti",
]
