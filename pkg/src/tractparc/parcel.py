"""Parcellation assembly and evaluation metrics (SC, Dice, RSD, atlas Dice).

Cross-subject parcel correspondence is by shared label index: all
subjects are labeled against the same trained centroids, so parcel p of
one subject is compared directly with parcel p of another.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .volio import Labelmap, connected_components, Mask


@dataclass
class ParcellationResult:
    """A labeled nucleus: labels 1..c on the mask support, 0 elsewhere."""

    labelmap: Labelmap
    c: int
    subject_id: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.labelmap.data.max(initial=0) > self.c:
            raise ValueError(f"labels exceed c={self.c}")

    def parcel_mask(self, label):
        return self.labelmap.data == label


@dataclass
class MetricReport:
    """Per-parcel and aggregate quality metrics for a set of subjects."""

    per_parcel_sc: dict = field(default_factory=dict)
    mean_sc: float = float("nan")
    per_parcel_dice: dict = field(default_factory=dict)
    mean_dice: float = float("nan")
    per_parcel_rsd: dict = field(default_factory=dict)
    rsd: float = float("nan")
    atlas_dice_table: dict = field(default_factory=dict)
    atlas_dice_mean: float = float("nan")


def assemble_labelmap(labels, voxel_index_map, nucleus, c, subject_id="", provenance=None):
    """Place per-voxel labels onto the nucleus grid.

    Parameters
    ----------
    labels : array of int
        One label in 1..c per row of voxel_index_map.
    voxel_index_map : (V, 3) int array
        Row -> voxel (i, j, k), matching the feature matrix ordering.
    nucleus : Mask
    c : int
    """
    labels = np.asarray(labels, dtype=np.int64)
    vox = np.asarray(voxel_index_map, dtype=np.int64)
    if labels.shape[0] != vox.shape[0]:
        raise ValueError("labels and voxel_index_map length mismatch")
    if vox.shape[0] != nucleus.foreground_count:
        raise ValueError("voxel_index_map does not cover the nucleus mask")
    if np.any(nucleus.data[vox[:, 0], vox[:, 1], vox[:, 2]] == 0):
        raise ValueError("voxel_index_map points outside the nucleus mask")
    if labels.size and (labels.min() < 1 or labels.max() > c):
        raise ValueError(f"labels must be in 1..{c}")
    grid = np.zeros(nucleus.dims, dtype=np.int32)
    grid[vox[:, 0], vox[:, 1], vox[:, 2]] = labels
    labelmap = Labelmap(data=grid, affine=nucleus.affine, spacing=nucleus.spacing)
    return ParcellationResult(labelmap=labelmap, c=c, subject_id=subject_id, provenance=provenance or {})


def metric_sc(result, connectivity=26):
    """Spatial continuity: largest-component fraction per nonempty parcel.

    Returns (per_parcel, mean) where per_parcel maps label -> SC.
    """
    data = result.labelmap.data
    labels = [l for l in range(1, result.c + 1) if np.any(data == l)]
    if not labels:
        raise ValueError("labelmap has no foreground parcels")
    per_parcel = {}
    for label in labels:
        part = Mask(data=(data == label).astype(np.uint8), affine=result.labelmap.affine, spacing=result.labelmap.spacing)
        _, sizes = connected_components(part, connectivity=connectivity)
        per_parcel[label] = sizes[0] / float(part.foreground_count)
    return per_parcel, float(np.mean(list(per_parcel.values())))


def dice_coefficient(a, b):
    """Dice overlap 2|A n B| / (|A| + |B|) between two boolean arrays."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return float("nan")
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def metric_dice(results):
    """Mean pairwise Dice per parcel across subjects, and the average.

    Pairs where both parcels are empty are skipped; pairs where exactly
    one side is empty contribute 0. Returns (per_parcel, average).
    """
    if len(results) < 2:
        raise ValueError("pairwise Dice needs at least 2 subjects")
    c = results[0].c
    for r in results[1:]:
        if r.c != c:
            raise ValueError("all subjects must share the same parcel count")
        if not r.labelmap.same_grid(results[0].labelmap):
            raise ValueError("all subjects must share the same grid")
    per_parcel = {}
    for label in range(1, c + 1):
        masks = [r.parcel_mask(label) for r in results]
        scores = []
        for i in range(len(results)):
            for j in range(i + 1, len(results)):
                d = dice_coefficient(masks[i], masks[j])
                if not np.isnan(d):  # nan: both empty, pair skipped
                    scores.append(d)
        if scores:
            per_parcel[label] = float(np.mean(scores))
    average = float(np.mean(list(per_parcel.values()))) if per_parcel else float("nan")
    return per_parcel, average


def _rsd_contributions(result, fa, use_std=False):
    if not result.labelmap.same_grid(fa):
        raise ValueError("FA volume grid does not match the parcellation")
    contributions = {}
    for label in range(1, result.c + 1):
        sel = result.parcel_mask(label)
        n = int(sel.sum())
        if n == 0:
            continue
        vals = np.asarray(fa.data[sel], dtype=np.float64)
        mean = vals.mean()
        if mean == 0.0:
            warnings.warn(f"parcel {label} has zero mean FA; skipped in RSD")
            continue
        if n == 1:
            contributions[label] = 0.0
            continue
        spread = vals.std() if use_std else vals.var()  # population variance
        contributions[label] = float(spread / mean)
    return contributions


def metric_rsd(result, fa, use_std=False):
    """Mean over parcels of population var(FA) / mean(FA).

    With use_std=True the numerator is the population standard deviation
    instead (not the default; the variance form is used throughout).
    """
    contributions = _rsd_contributions(result, fa, use_std=use_std)
    if not contributions:
        raise ValueError("no parcel produced a valid RSD contribution")
    return float(np.mean(list(contributions.values())))


def atlas_dice(result, atlas):
    """Dice against a coarse atlas after many-to-one parcel mapping.

    Every parcel maps to the atlas region it overlaps most (ties toward
    the smaller region id); mapped parcels are unioned per region and
    Dice is computed region by region.

    Returns (per_region, average, parcel_to_region).
    """
    if not result.labelmap.same_grid(atlas):
        raise ValueError("atlas grid does not match the parcellation")
    pred = result.labelmap.data
    regions = atlas.labels
    if not regions or not np.any(atlas.data[pred > 0] > 0):
        raise ValueError("atlas has no labels over the parcellation support")
    mapping = {}
    for label in range(1, result.c + 1):
        sel = pred == label
        if not np.any(sel):
            continue
        overlaps = [int(np.logical_and(sel, atlas.data == region).sum()) for region in regions]
        mapping[label] = regions[int(np.argmax(overlaps))]
    per_region = {}
    for region in regions:
        union = np.zeros(pred.shape, dtype=bool)
        for label, mapped in mapping.items():
            if mapped == region:
                union |= pred == label
        per_region[region] = dice_coefficient(union, atlas.data == region)
        if np.isnan(per_region[region]):
            per_region[region] = 0.0
    average = float(np.mean(list(per_region.values())))
    return per_region, average, mapping


def export_parcel_fa_stats(results, fa_volumes, path):
    """Write per-(subject, parcel) FA statistics as CSV.

    Columns: subject, parcel, count, mean, median, std (population).
    """
    rows = []
    for result, fa in zip(results, fa_volumes):
        if not result.labelmap.same_grid(fa):
            raise ValueError(f"FA grid mismatch for subject {result.subject_id!r}")
        for label in range(1, result.c + 1):
            sel = result.parcel_mask(label)
            if not np.any(sel):
                continue
            vals = np.asarray(fa.data[sel], dtype=np.float64)
            rows.append(
                {
                    "subject": result.subject_id,
                    "parcel": label,
                    "count": int(vals.size),
                    "mean": float(vals.mean()),
                    "median": float(np.median(vals)),
                    "std": float(vals.std()),
                }
            )
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["subject", "parcel", "count", "mean", "median", "std"])
        writer.writeheader()
        writer.writerows(rows)
    return rows


def build_metric_report(results, fa_volumes=None, atlas=None, connectivity=26):
    """Aggregate SC / Dice / RSD (and optional atlas Dice) across subjects.

    SC and RSD are averaged across subjects per parcel; Dice is the mean
    over subject pairs per parcel, then averaged across parcels.
    """
    report = MetricReport()
    sc_acc = {}
    for r in results:
        per_parcel, _ = metric_sc(r, connectivity=connectivity)
        for label, value in per_parcel.items():
            sc_acc.setdefault(label, []).append(value)
    report.per_parcel_sc = {label: float(np.mean(v)) for label, v in sorted(sc_acc.items())}
    report.mean_sc = float(np.mean(list(report.per_parcel_sc.values())))

    if len(results) >= 2:
        report.per_parcel_dice, report.mean_dice = metric_dice(results)

    if fa_volumes is not None:
        rsd_acc = {}
        totals = []
        for r, fa in zip(results, fa_volumes):
            contributions = _rsd_contributions(r, fa)
            for label, value in contributions.items():
                rsd_acc.setdefault(label, []).append(value)
            if contributions:
                totals.append(float(np.mean(list(contributions.values()))))
        report.per_parcel_rsd = {label: float(np.mean(v)) for label, v in sorted(rsd_acc.items())}
        if totals:
            report.rsd = float(np.mean(totals))

    if atlas is not None:
        tables = []
        for r in results:
            per_region, average, _ = atlas_dice(r, atlas)
            tables.append((per_region, average))
        regions = sorted(tables[0][0])
        report.atlas_dice_table = {
            region: float(np.mean([t[0][region] for t in tables])) for region in regions
        }
        report.atlas_dice_mean = float(np.mean([t[1] for t in tables]))
    return report


def export_metric_report(report, path, c):
    """Write the per-parcel metric table: parcel, SC, Dice_mean, RSD_contribution."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["parcel", "SC", "Dice_mean", "RSD_contribution"])
        for label in range(1, c + 1):
            if label not in report.per_parcel_sc and label not in report.per_parcel_dice:
                continue
            writer.writerow(
                [
                    label,
                    _fmt(report.per_parcel_sc.get(label)),
                    _fmt(report.per_parcel_dice.get(label)),
                    _fmt(report.per_parcel_rsd.get(label)),
                ]
            )


def _fmt(value):
    return "" if value is None else repr(value)
