"""Synthetic nuclei, streamline bundles, and FA maps with known truth.

The nucleus is an ellipsoid split into angular sectors about its center
(in the axial plane, so every z-column of voxels belongs to exactly one
sector). Each sector is traversed by vertical, column-aligned streamline
bundles that exit toward a sector- and bundle-specific external target;
jitter displaces streamlines between columns of their own sector only,
so in-nucleus points never leave their sector.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score

from .parcel import dice_coefficient
from .tract import StreamlineSet, save_tck
from .volio import Labelmap, Mask, Volume3D, save_volume


@dataclass
class PhantomSpec:
    """Parameters of the synthetic phantom population."""

    dims: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    radii: tuple = (8.0, 8.0, 6.0)
    num_subdivisions: int = 4
    bundles_per_subdivision: int = 2
    streamlines_per_bundle: int = 50
    jitter_mm: float = 0.0
    fa_levels: tuple = None
    fa_noise: float = 0.02
    num_subjects: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_subdivisions < 2:
            raise ValueError("need at least 2 subdivisions")
        if self.bundles_per_subdivision < 1:
            raise ValueError("every subdivision needs at least 1 bundle")
        if min(self.radii) <= 1.0:
            raise ValueError("degenerate ellipsoid radii")
        if self.fa_levels is None:
            self.fa_levels = tuple(np.linspace(0.2, 0.6, self.num_subdivisions))
        self.fa_levels = tuple(float(v) for v in self.fa_levels)
        if len(self.fa_levels) != self.num_subdivisions:
            raise ValueError("need one FA level per subdivision")
        if any(not 0.0 < v < 1.0 for v in self.fa_levels):
            raise ValueError("FA levels must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("dims", "spacing", "radii"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("fa_levels") is not None:
            d["fa_levels"] = tuple(d["fa_levels"])
        return cls(**d)


@dataclass
class PhantomTruth:
    """Ground truth for one subject: sector labels, bundle ids, FA map."""

    labelmap: Labelmap
    bundle_ids: np.ndarray
    fa: Volume3D


@dataclass
class PhantomSubject:
    subject_id: str
    mask: Mask
    streamlines: StreamlineSet
    truth: PhantomTruth


@dataclass
class RecoveryReport:
    ari: float
    mean_dice: float
    match_table: dict


def _sector_of(spec, di, dj):
    theta = np.mod(np.arctan2(dj, di), 2.0 * np.pi)
    sector = np.floor(theta * spec.num_subdivisions / (2.0 * np.pi)).astype(np.int64)
    return np.minimum(sector, spec.num_subdivisions - 1)


class _Geometry:
    """Mask, sector truth, and per-sector column layout shared by subjects."""

    def __init__(self, spec):
        nx, ny, nz = spec.dims
        self.center = np.array([(nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0])
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        norm = (
            ((ii - self.center[0]) / spec.radii[0]) ** 2
            + ((jj - self.center[1]) / spec.radii[1]) ** 2
            + ((kk - self.center[2]) / spec.radii[2]) ** 2
        )
        mask = norm <= 1.0
        if mask.sum() < spec.num_subdivisions:
            raise ValueError("ellipsoid too small for the requested subdivisions")
        sectors = _sector_of(spec, ii - self.center[0], jj - self.center[1])
        self.mask = mask
        self.truth = np.where(mask, sectors + 1, 0).astype(np.int32)

        # z-extent of every occupied (i, j) column, grouped by sector
        self.columns = {g: [] for g in range(spec.num_subdivisions)}
        for i, j in np.argwhere(mask.any(axis=2)):
            zs = np.where(mask[i, j])[0]
            g = int(_sector_of(spec, i - self.center[0], j - self.center[1]))
            theta = float(np.mod(np.arctan2(j - self.center[1], i - self.center[0]), 2.0 * np.pi))
            self.columns[g].append((theta, int(i), int(j), int(zs.min()), int(zs.max())))
        for g in self.columns:
            self.columns[g].sort()
        self.column_lookup = {
            g: {(col[1], col[2]): col for col in cols} for g, cols in self.columns.items()
        }


def _bundle_target(spec, geometry, sector, bundle):
    width = 2.0 * np.pi / spec.num_subdivisions
    mid = (sector + 0.5) * width
    spread = width / (2.0 * spec.bundles_per_subdivision)
    phi = mid + (bundle - (spec.bundles_per_subdivision - 1) / 2.0) * spread
    reach = 3.0 * max(spec.radii)
    return np.array(
        [
            geometry.center[0] + reach * np.cos(phi),
            geometry.center[1] + reach * np.sin(phi),
            geometry.center[2] - 2.0 * spec.radii[2] - 6.0,
        ]
    )


def _make_streamline(col, target, offset):
    _, i, j, zmin, zmax = col
    x, y = i + offset[0], j + offset[1]
    through = [(x, y, z) for z in range(zmax + 3, zmin - 4, -1)]
    exit_point = np.array([x, y, zmin - 3.0])
    tail = [exit_point + t * (target - exit_point) for t in (0.34, 0.67, 1.0)]
    return np.array(through + [p.tolist() for p in tail], dtype=np.float64)


def _generate_subject(spec, geometry, subject_id, rng):
    streamlines = []
    bundle_ids = []
    jitter = float(spec.jitter_mm)
    for g in range(spec.num_subdivisions):
        cols = geometry.columns[g]
        lookup = geometry.column_lookup[g]
        for b in range(spec.bundles_per_subdivision):
            bundle_cols = cols[b :: spec.bundles_per_subdivision]
            target = _bundle_target(spec, geometry, g, b)
            for t in range(spec.streamlines_per_bundle):
                col = bundle_cols[t % len(bundle_cols)]
                offset = np.zeros(2)
                shot = target
                if jitter > 0:
                    raw = np.array([col[1], col[2]]) + rng.normal(0.0, jitter, size=2)
                    cand = (int(np.rint(raw[0])), int(np.rint(raw[1])))
                    if cand in lookup:  # jitter may only move within the sector
                        offset = np.clip(raw - cand, -0.4, 0.4)
                        col = lookup[cand]
                    else:
                        offset = np.clip(rng.uniform(-0.3, 0.3, size=2), -0.4, 0.4)
                    shot = target + rng.normal(0.0, jitter, size=3)
                streamlines.append(_make_streamline(col, shot, offset))
                bundle_ids.append(g * spec.bundles_per_subdivision + b + 1)

    fa = np.zeros(spec.dims, dtype=np.float64)
    for g in range(spec.num_subdivisions):
        sel = geometry.truth == g + 1
        fa[sel] = spec.fa_levels[g]
    noise = rng.normal(0.0, spec.fa_noise, size=spec.dims)
    fa = np.where(geometry.mask, np.clip(fa + noise, 0.01, 0.99), 0.0)

    spacing = spec.spacing
    mask = Mask(data=geometry.mask.astype(np.uint8), spacing=spacing)
    truth = PhantomTruth(
        labelmap=Labelmap(data=geometry.truth, spacing=spacing),
        bundle_ids=np.asarray(bundle_ids, dtype=np.int64),
        fa=Volume3D(data=fa.astype(np.float32), spacing=spacing),
    )
    return PhantomSubject(
        subject_id=subject_id,
        mask=mask,
        streamlines=StreamlineSet(streamlines=streamlines, subject_id=subject_id),
        truth=truth,
    )


def generate_phantom(spec, seed=None):
    """Generate the phantom population; subjects differ by jitter only."""
    base_seed = spec.seed if seed is None else seed
    geometry = _Geometry(spec)
    subjects = []
    for s in range(spec.num_subjects):
        rng = np.random.default_rng(base_seed + 1000 * s)
        subjects.append(_generate_subject(spec, geometry, f"s{s + 1:02d}", rng))
    return subjects


def write_phantom(spec, out_dir, seed=None):
    """Emit the phantom as NIfTI + TCK files plus a spec manifest.

    Layout: <out_dir>/phantom.json and per subject
    <out_dir>/<subject>/{mask,truth,fa}.nii.gz + tracks.tck.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = generate_phantom(spec, seed=seed)
    entries = []
    for subject in subjects:
        sdir = out_dir / subject.subject_id
        sdir.mkdir(exist_ok=True)
        save_volume(subject.mask, sdir / "mask.nii.gz")
        save_volume(subject.truth.labelmap, sdir / "truth.nii.gz")
        save_volume(subject.truth.fa, sdir / "fa.nii.gz")
        save_tck(subject.streamlines, sdir / "tracks.tck")
        entries.append(
            {
                "id": subject.subject_id,
                "mask": str(sdir / "mask.nii.gz"),
                "truth": str(sdir / "truth.nii.gz"),
                "fa": str(sdir / "fa.nii.gz"),
                "streamlines": str(sdir / "tracks.tck"),
            }
        )
    manifest = {"spec": spec.to_dict(), "subjects": entries}
    with open(out_dir / "phantom.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return subjects, manifest


def evaluate_recovery(pred, truth):
    """Compare a parcellation with phantom truth over the nucleus voxels.

    Returns a RecoveryReport with the adjusted Rand index, the best-match
    mean Dice (optimal one-to-one assignment when c <= G, many-to-one
    majority mapping when c > G), and the parcel -> sector match table.
    """
    if not pred.labelmap.same_grid(truth.labelmap):
        raise ValueError("prediction and truth grids differ")
    sel = truth.labelmap.data > 0
    t = truth.labelmap.data[sel]
    p = pred.labelmap.data[sel]
    ari = float(adjusted_rand_score(t, p))

    truth_labels = truth.labelmap.labels
    pred_labels = list(range(1, pred.c + 1))
    if pred.c > len(truth_labels):
        mapping = {}
        for label in pred_labels:
            psel = pred.labelmap.data == label
            if not np.any(psel):
                continue
            overlaps = [int(np.logical_and(psel, truth.labelmap.data == g).sum()) for g in truth_labels]
            mapping[label] = truth_labels[int(np.argmax(overlaps))]
        scores = []
        for g in truth_labels:
            union = np.zeros(pred.labelmap.dims, dtype=bool)
            for label, mapped in mapping.items():
                if mapped == g:
                    union |= pred.labelmap.data == label
            d = dice_coefficient(union, truth.labelmap.data == g)
            scores.append(0.0 if np.isnan(d) else d)
        return RecoveryReport(ari=ari, mean_dice=float(np.mean(scores)), match_table=mapping)

    dice = np.zeros((len(pred_labels), len(truth_labels)))
    for a, label in enumerate(pred_labels):
        for b, g in enumerate(truth_labels):
            d = dice_coefficient(pred.labelmap.data == label, truth.labelmap.data == g)
            dice[a, b] = 0.0 if np.isnan(d) else d
    rows, cols = linear_sum_assignment(-dice)
    mapping = {pred_labels[r]: truth_labels[c] for r, c in zip(rows, cols)}
    return RecoveryReport(ari=ari, mean_dice=float(dice[rows, cols].mean()), match_table=mapping)
