"""scikit-learn style wrapper around the network, training loop and inference pipeline."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data.preprocessing import PreprocessParams, preprocess
from .data.study import MODALITIES, Study
from .engine.inference import InferConfig, infer_study, predict_probabilities
from .engine.training import TrainConfig, train
from .errors import InputError
from .metrics import dice, regions_from_labels
from .network import NetworkConfig, build
from .validation import check_label_volume


def _as_studies(X, y=None, prefix="case"):
    """Accept Study objects or a (N, 4, D, H, W) array (or list of (4, D, H, W) arrays)."""
    if isinstance(X, Study):
        X = [X]
    studies = []
    for k, x in enumerate(X):
        if isinstance(x, Study):
            s = x
            if y is not None:
                s = s.replace(label=y[k])
        else:
            x = np.asarray(x)
            if x.ndim != 4 or x.shape[0] != len(MODALITIES):
                raise InputError(f"sample {k}: expected 4 x D x H x W, got {x.shape}")
            s = Study(id=f"{prefix}_{k:04d}", images=x, label=None if y is None else y[k])
        studies.append(s)
    if not studies:
        raise InputError("no samples given")
    return studies


class HNFNetSegmenter(BaseEstimator):
    """Fit/predict interface: ``fit(X, y)`` trains from scratch, ``predict(X)`` returns label volumes.

    ``X`` is a sequence of 4-channel volumes (or ``Study`` objects), ``y`` the
    matching label volumes with values in {0, 1, 2, 4}.
    """

    def __init__(
        self,
        base_channels=8,
        ema_bases=8,
        intra_sde=True,
        inter_sde=True,
        epochs=250,
        warmup_epochs=5,
        batch_size=4,
        initial_lr=1e-3,
        weight_decay=1e-5,
        crop_size=(128, 128, 128),
        augment=True,
        patch=(128, 128, 128),
        stride=(32, 32, 27),
        center_crop=(176, 224, 155),
        tta=True,
        et_threshold=200,
        normalize=True,
        random_state=0,
    ):
        self.base_channels = base_channels
        self.ema_bases = ema_bases
        self.intra_sde = intra_sde
        self.inter_sde = inter_sde
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.initial_lr = initial_lr
        self.weight_decay = weight_decay
        self.crop_size = crop_size
        self.augment = augment
        self.patch = patch
        self.stride = stride
        self.center_crop = center_crop
        self.tta = tta
        self.et_threshold = et_threshold
        self.normalize = normalize
        self.random_state = random_state

    def network_config(self):
        return NetworkConfig(
            base_channels=self.base_channels,
            ema_bases=self.ema_bases,
            intra_sde=self.intra_sde,
            inter_sde=self.inter_sde,
            seed=self.random_state,
        )

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            warmup_epochs=self.warmup_epochs,
            batch_size=self.batch_size,
            initial_lr=self.initial_lr,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            crop_size=self.crop_size,
            augment=self.augment,
        )

    def infer_config(self):
        return InferConfig(
            center_crop=self.center_crop,
            patch=self.patch,
            stride=self.stride,
            tta_enabled=self.tta,
            et_threshold=self.et_threshold,
        )

    def _prepare(self, X, y=None):
        studies = _as_studies(X, y)
        if self.normalize:
            studies = [preprocess(s, PreprocessParams()) for s in studies]
        return studies

    def fit(self, X, y, out_dir=None):
        if y is None:
            raise InputError("HNFNetSegmenter.fit needs label volumes")
        y = [check_label_volume(v) for v in y]
        studies = self._prepare(X, y)
        self.network_ = build(self.network_config())
        self.history_ = train(self.network_, studies, self.train_config(), out_dir=out_dir)
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("HNFNetSegmenter is not fitted yet; call fit first")

    def predict_proba(self, X):
        """Region probabilities (WT, TC, ET) per sample, each (3, D, H, W)."""
        self._check_fitted()
        return [predict_probabilities(self.network_, s.images, self.infer_config()) for s in self._prepare(X)]

    def predict(self, X):
        self._check_fitted()
        return [infer_study(self.network_, s, self.infer_config()) for s in self._prepare(X)]

    def score(self, X, y):
        """Mean Dice over WT, TC and ET regions and all samples."""
        scores = []
        for pred, ref in zip(self.predict(X), y):
            p, g = regions_from_labels(pred), regions_from_labels(ref)
            scores.extend(dice(getattr(p, r), getattr(g, r)) for r in ("wt", "tc", "et"))
        return float(np.mean(scores))
