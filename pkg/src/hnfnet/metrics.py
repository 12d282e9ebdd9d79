"""Region masks, Dice, HD95 and cohort aggregation for BraTS-style evaluation."""
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .data.preprocessing import percentile
from .errors import InputError
from .validation import check_binary, check_label_volume, check_same_shape

REGIONS = ("wt", "tc", "et")
COLUMNS = ("dice_et", "dice_tc", "dice_wt", "hd95_et", "hd95_tc", "hd95_wt")
# distance reported when exactly one mask is empty
HD95_EMPTY = 373.1288


@dataclass
class RegionMasks:
    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def stack(self):
        return np.stack([self.wt, self.tc, self.et])


def regions_from_labels(labels, spacing=(1.0, 1.0, 1.0)):
    """WT = {1, 2, 4}, TC = {1, 4}, ET = {4}."""
    labels = check_label_volume(labels)
    return RegionMasks(
        wt=np.isin(labels, (1, 2, 4)),
        tc=np.isin(labels, (1, 4)),
        et=labels == 4,
        spacing=tuple(spacing),
    )


def dice(a, b):
    """``2|a & b| / (|a| + |b|)``; two empty masks score 1."""
    check_same_shape(a, b)
    a = check_binary(a, "a")
    b = check_binary(b, "b")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(mask):
    """Set voxels with an unset 6-neighbour or lying on the volume border."""
    mask = check_binary(mask)
    if not mask.any():
        return np.zeros_like(mask)
    padded = np.pad(mask, 1, constant_values=False)
    eroded = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(mask.ndim, 1))
    return mask & ~eroded[(slice(1, -1),) * mask.ndim]


def directed_surface_distances(a, b, spacing=(1.0, 1.0, 1.0)):
    """Distance (mm) from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(surface_voxels(a)) * sp
    pb = np.argwhere(surface_voxels(b)) * sp
    d, _ = cKDTree(pb).query(pa, k=1)
    return np.asarray(d, dtype=np.float64)


def hd95(a, b, spacing=(1.0, 1.0, 1.0)):
    """Max of the two directed 95th-percentile surface distances."""
    check_same_shape(a, b)
    a = check_binary(a, "a")
    b = check_binary(b, "b")
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return HD95_EMPTY
    return max(
        percentile(directed_surface_distances(a, b, spacing), 95),
        percentile(directed_surface_distances(b, a, spacing), 95),
    )


def evaluate_case(pred_labels, gt_labels, spacing=(1.0, 1.0, 1.0), case_id="case"):
    check_same_shape(pred_labels, gt_labels, ("prediction", "reference"))
    p = regions_from_labels(pred_labels, spacing)
    g = regions_from_labels(gt_labels, spacing)
    row = {"id": case_id}
    for r in ("et", "tc", "wt"):
        row[f"dice_{r}"] = dice(getattr(p, r), getattr(g, r))
    for r in ("et", "tc", "wt"):
        row[f"hd95_{r}"] = hd95(getattr(p, r), getattr(g, r), spacing)
    return row


@dataclass
class EvalReport:
    rows: list
    mean: dict = field(default_factory=dict)
    median: dict = field(default_factory=dict)

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("id",) + COLUMNS)
            for row in self.rows:
                w.writerow([row["id"]] + [format_score(row[c]) for c in COLUMNS])
            w.writerow(["mean"] + [format_score(self.mean[c]) for c in COLUMNS])
            w.writerow(["median"] + [format_score(self.median[c]) for c in COLUMNS])
        return path


def format_score(v):
    return f"{v:.6f}"


def aggregate(rows):
    """Column-wise mean and median (even counts average the middle pair)."""
    rows = list(rows)
    if not rows:
        raise InputError("cannot aggregate an empty cohort")
    mean, median = {}, {}
    for c in COLUMNS:
        v = np.array([float(r[c]) for r in rows])
        mean[c] = float(v.mean())
        median[c] = float(np.median(v))
    return EvalReport(rows=rows, mean=mean, median=median)


def read_report_csv(path):
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))
