import torch
import torch.nn.functional as F

from ..errors import ContractViolation


def gdl_weights(targets):
    """Per-region weights ``1 / (sum of target)^2``, normalized to sum to 1.

    An empty region borrows the largest weight among non-empty regions; if every
    region is empty all weights are equal.
    """
    gsum = targets.sum(dim=(0, 2, 3, 4))
    present = gsum > 0
    w = torch.zeros_like(gsum)
    w[present] = 1.0 / gsum[present] ** 2
    if present.any():
        w[~present] = w[present].max()
    else:
        w = torch.ones_like(gsum)
    return w / w.sum()


def generalized_dice_loss(logits, targets, smooth=1e-5):
    p = torch.sigmoid(logits)
    w = gdl_weights(targets)
    inter = (p * targets).sum(dim=(0, 2, 3, 4))
    union = (p + targets).sum(dim=(0, 2, 3, 4))
    return 1.0 - (2.0 * (w * inter).sum() + smooth) / ((w * union).sum() + smooth)


def region_loss(logits, targets):
    """Generalized Dice loss plus mean binary cross-entropy over sigmoid region channels."""
    if logits.shape != targets.shape:
        raise ContractViolation(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} differ in shape")
    if logits.dim() != 5:
        raise ContractViolation(f"expected N x C x D x H x W logits, got shape {tuple(logits.shape)}")
    if not torch.all((targets == 0) | (targets == 1)):
        raise ContractViolation("region targets must be binary")
    targets = targets.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, targets)
    return generalized_dice_loss(logits, targets) + bce
