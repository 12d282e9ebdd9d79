"""Seeded training loop: patch sampling, augmentation, GDL + BCE, Adam with warmup/poly schedule."""
import csv
import logging
import math
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import save_checkpoint
from ..data.augmentation import AugmentationParams, augment, random_crop
from ..errors import ConfigurationError, InputError, NumericFaultError
from ..metrics import regions_from_labels
from .losses import region_loss
from .optim import AdamState, adam_step, lr_schedule

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "loss", "dice_wt", "dice_tc", "dice_et")


@dataclass
class TrainConfig:
    epochs: int = 250
    warmup_epochs: int = 5
    batch_size: int = 4
    betas: tuple = (0.9, 0.999)
    initial_lr: float = 1e-3
    weight_decay: float = 1e-5
    poly_power: float = 0.9
    seed: int = 0
    crop_size: tuple = (128, 128, 128)
    augment: bool = True
    foreground_prob: float = 0.5
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.crop_size = tuple(int(c) for c in self.crop_size)
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}, {self.epochs}")
        if self.initial_lr <= 0 or self.batch_size < 1 or self.poly_power <= 0:
            raise ConfigurationError("initial_lr, batch_size and poly_power must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def region_targets(label):
    return regions_from_labels(label).stack().astype(np.float32)


def _batch_dice(logits, targets):
    pred = logits.detach() > 0
    tgt = targets > 0.5
    out = []
    for c in range(pred.shape[1]):
        p, t = pred[:, c], tgt[:, c]
        total = int(p.sum()) + int(t.sum())
        out.append(1.0 if total == 0 else 2.0 * int((p & t).sum()) / total)
    return out


def _first_bad_grad(net):
    for name, p in net.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            return name
    return None


def sample_batch(studies, indices, config, epoch, aug=None):
    """Crop (and optionally augment) one patch per study index with per-(seed, study, epoch) generators."""
    imgs, tgts = [], []
    for i in indices:
        s = studies[i]
        if s.label is None:
            raise InputError(f"study {s.id} has no label; cannot train on it")
        rng = np.random.default_rng([config.seed, zlib.crc32(s.id.encode()), epoch])
        x, y = random_crop(s.images, s.label, config.crop_size, rng, config.foreground_prob)
        if aug is not None:
            x, y = augment(x, y, aug, rng)
        imgs.append(np.ascontiguousarray(x, dtype=np.float32))
        tgts.append(region_targets(y))
    return torch.from_numpy(np.stack(imgs)), torch.from_numpy(np.stack(tgts))


def train(net, studies, config=None, out_dir=None, aug=None, stop_after=None):
    """Train ``net`` in place; returns the per-epoch history (list of dicts).

    Writes ``train_log.csv`` and ``model.ckpt`` (plus periodic checkpoints) when
    ``out_dir`` is given. ``stop_after`` runs only the first epochs of the
    schedule, which reproduces a prefix of the full run bit for bit.
    """
    config = config or TrainConfig()
    studies = list(studies)
    if not studies:
        raise InputError("training dataset is empty")
    if config.augment and aug is None:
        aug = AugmentationParams(crop_size=config.crop_size, foreground_prob=config.foreground_prob)
    if not config.augment:
        aug = None
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = (out_dir / "train_log.csv").open("w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)

    params = [p for p in net.parameters() if p.requires_grad]
    state = AdamState()
    history = []
    torch.manual_seed(config.seed)
    n = len(studies)
    last = config.epochs if stop_after is None else min(int(stop_after), config.epochs)
    try:
        for epoch in range(last):
            lr = lr_schedule(epoch, config)
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            losses, dices = [], []
            net.train()
            for b in range(0, n, config.batch_size):
                x, y = sample_batch(studies, order[b:b + config.batch_size], config, epoch, aug)
                for p in params:
                    p.grad = None
                logits = net(x)
                loss = region_loss(logits, y)
                if not math.isfinite(float(loss.detach())):
                    raise NumericFaultError(f"non-finite loss at epoch {epoch}", layer="loss")
                loss.backward()
                bad = _first_bad_grad(net)
                if bad is not None:
                    raise NumericFaultError(f"non-finite gradient in {bad} at epoch {epoch}", layer=bad)
                adam_step(params, [p.grad for p in params], state, lr, config.betas, config.weight_decay)
                losses.append(float(loss.detach()))
                dices.append(_batch_dice(logits, y))
            d = np.mean(dices, axis=0)
            row = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)),
                   "dice_wt": float(d[0]), "dice_tc": float(d[1]), "dice_et": float(d[2])}
            history.append(row)
            log.info("epoch %d lr %.3g loss %.4f dice wt/tc/et %.3f/%.3f/%.3f", epoch, lr, row["loss"],
                     row["dice_wt"], row["dice_tc"], row["dice_et"])
            if writer is not None:
                writer.writerow([row[c] for c in LOG_COLUMNS])
                fh.flush()
                if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                    save_checkpoint(net, out_dir / f"checkpoint_epoch{epoch + 1:04d}.ckpt", {"epoch": epoch + 1})
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(net, out_dir / "model.ckpt", {"epoch": last, "train": config.to_dict()})
    return history
