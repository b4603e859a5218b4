"""Voxel-wise connectivity features from cluster-labeled streamlines.

Each nucleus voxel gets one feature row with one column per streamline
cluster: 1 where the cluster traverses the voxel, and after dilation and
Gaussian distance smoothing a value in (0, 1] reflecting proximity to
the nearest traversed voxel, so no voxel is left with an all-zero row.
"""

import csv
import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tract import supersample_points
from .volio import _check_connectivity

FORMAT_VERSION = 1


@dataclass
class IntersectionMatrix:
    """Binary voxel-by-cluster intersections with a row -> voxel map."""

    values: np.ndarray
    voxel_index_map: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.voxel_index_map = np.asarray(self.voxel_index_map, dtype=np.int64)
        if self.values.ndim != 2:
            raise ValueError("intersection values must be a (V, K) matrix")
        if self.voxel_index_map.shape != (self.values.shape[0], 3):
            raise ValueError("voxel_index_map must be (V, 3) matching the rows")
        if not np.all(np.isin(self.values, (0, 1))):
            raise ValueError("intersection values must be binary")
        self.values = self.values.astype(np.uint8, copy=False)


@dataclass
class FeatureMatrix:
    """Real-valued voxel-by-cluster features in [0, 1]."""

    values: np.ndarray
    voxel_index_map: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.voxel_index_map = np.asarray(self.voxel_index_map, dtype=np.int64)
        if self.values.ndim != 2:
            raise ValueError("feature values must be a (V, K) matrix")
        if self.voxel_index_map.shape != (self.values.shape[0], 3):
            raise ValueError("voxel_index_map must be (V, 3) matching the rows")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValueError("feature values must lie in [0, 1]")


def nucleus_voxel_map(nucleus):
    """Foreground voxel indices in lexicographic (i, j, k) order."""
    return np.argwhere(nucleus.data > 0)


def compute_intersections(streamset, cluster_ids, nucleus, k=None):
    """Mark which streamline clusters traverse which nucleus voxels.

    Parameters
    ----------
    streamset : StreamlineSet
    cluster_ids : array of int
        1-based cluster id per streamline.
    nucleus : Mask
    k : int, optional
        Number of clusters (columns); defaults to max(cluster_ids).
    """
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
    if len(cluster_ids) != len(streamset):
        raise ValueError("cluster_ids length must equal the streamline count")
    vox = nucleus_voxel_map(nucleus)
    if len(vox) == 0:
        raise ValueError("nucleus mask is empty")
    if k is None:
        k = int(cluster_ids.max()) if cluster_ids.size else 0
    if cluster_ids.size and (cluster_ids.min() < 1 or cluster_ids.max() > k):
        raise ValueError(f"cluster ids must be in 1..{k}")

    row_grid = np.full(nucleus.dims, -1, dtype=np.int64)
    row_grid[vox[:, 0], vox[:, 1], vox[:, 2]] = np.arange(len(vox))

    values = np.zeros((len(vox), k), dtype=np.uint8)
    step = 0.5 * min(nucleus.spacing)
    dims = nucleus.dims
    for s, cid in zip(streamset.streamlines, cluster_ids):
        dense = supersample_points(s, step)
        idx = np.rint(nucleus.world_to_index(dense)).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        rows = row_grid[idx[inside, 0], idx[inside, 1], idx[inside, 2]]
        rows = rows[rows >= 0]
        values[rows, cid - 1] = 1
    return IntersectionMatrix(values=values, voxel_index_map=vox)


def dilate_features(matrix, nucleus, connectivity=26):
    """Fill empty voxels from their neighbors' intersections.

    A voxel whose row is all zero inherits bit j whenever an adjacent
    nucleus voxel (under the chosen connectivity) intersects cluster j;
    rows that already have intersections are left untouched.
    """
    structure = _check_connectivity(connectivity)
    offsets = np.argwhere(structure) - 1
    offsets = offsets[np.any(offsets != 0, axis=1)]

    vox = matrix.voxel_index_map
    values = matrix.values
    row_grid = np.full(nucleus.dims, -1, dtype=np.int64)
    row_grid[vox[:, 0], vox[:, 1], vox[:, 2]] = np.arange(len(vox))

    out = values.copy()
    empty_rows = np.where(values.sum(axis=1) == 0)[0]
    dims = np.asarray(nucleus.dims)
    for r in empty_rows:
        nbrs = vox[r] + offsets
        ok = np.all((nbrs >= 0) & (nbrs < dims), axis=1)
        nbr_rows = row_grid[nbrs[ok, 0], nbrs[ok, 1], nbrs[ok, 2]]
        nbr_rows = nbr_rows[nbr_rows >= 0]
        if len(nbr_rows):
            out[r] = values[nbr_rows].max(axis=0)
    return IntersectionMatrix(values=out, voxel_index_map=vox)


def smooth_features(matrix, nucleus, units="index"):
    """Replace remaining zeros with a Gaussian of the distance to the cluster.

    For every entry still 0 after dilation, the feature becomes
    exp(-d^2 / 2) where d is the minimum distance from the voxel to any
    nucleus voxel intersecting that cluster; intersecting entries stay 1.
    Clusters intersecting nothing yield an all-zero column.

    Parameters
    ----------
    units : {"index", "mm"}
        Distance units: voxel-index steps (default) or millimeters via
        the mask spacing.
    """
    if units not in ("index", "mm"):
        raise ValueError(f"units must be 'index' or 'mm', got {units!r}")
    scale = np.asarray(nucleus.spacing) if units == "mm" else np.ones(3)
    vox = matrix.voxel_index_map
    values = matrix.values
    out = np.zeros(values.shape, dtype=np.float64)
    for j in range(values.shape[1]):
        hit_rows = values[:, j] > 0
        if not np.any(hit_rows):
            continue
        hit_grid = np.zeros(nucleus.dims, dtype=bool)
        hits = vox[hit_rows]
        hit_grid[hits[:, 0], hits[:, 1], hits[:, 2]] = True
        nearest = ndimage.distance_transform_edt(
            ~hit_grid, sampling=scale, return_distances=False, return_indices=True
        )
        near = nearest[:, vox[:, 0], vox[:, 1], vox[:, 2]].T  # (V, 3)
        delta = (vox - near) * scale[None, :]
        d2 = np.sum(delta * delta, axis=1)
        out[:, j] = np.exp(-0.5 * d2)
        out[hit_rows, j] = 1.0
    return FeatureMatrix(values=out, voxel_index_map=vox)


def binary_features(matrix):
    """Pass intersections through unchanged as a [0, 1] feature matrix."""
    return FeatureMatrix(values=matrix.values.astype(np.float64), voxel_index_map=matrix.voxel_index_map)


def augment_cyclic(row):
    """Expand a length-K feature row into its K x K circulant matrix.

    Row r of the output is the input cyclically rotated left by r
    positions; row 0 is the input itself.
    """
    row = np.asarray(row, dtype=np.float64).ravel()
    k = row.shape[0]
    if k == 0:
        raise ValueError("cannot augment an empty feature row")
    shifted = np.empty((k, k), dtype=row.dtype)
    for r in range(k):
        shifted[r] = np.roll(row, -r)
    return shifted


def augment_all(values):
    """Stack the circulant augmentation of every row: (V, K, K) float32."""
    if isinstance(values, FeatureMatrix):
        values = values.values
    values = np.asarray(values)
    return np.stack([augment_cyclic(row) for row in values]).astype(np.float32)


def mask_checksum(mask):
    return hashlib.sha256(np.ascontiguousarray(mask.data).tobytes()).hexdigest()


def save_features(feature_matrix, prefix, mask_sha256="", params=None):
    """Persist features as <prefix>.json + .bin (float32 rows) + .csv map."""
    v, k = feature_matrix.values.shape
    manifest = {
        "format_version": FORMAT_VERSION,
        "v": v,
        "k": k,
        "mask_sha256": mask_sha256,
        "params": params or {},
    }
    with open(f"{prefix}.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    feature_matrix.values.astype("<f4").tofile(f"{prefix}.bin")
    with open(f"{prefix}.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "i", "j", "k"])
        for r, (i, j, kk) in enumerate(feature_matrix.voxel_index_map):
            writer.writerow([r, i, j, kk])


def load_features(prefix):
    """Load a FeatureMatrix written by save_features; returns (matrix, manifest)."""
    with open(f"{prefix}.json") as f:
        manifest = json.load(f)
    v, k = int(manifest["v"]), int(manifest["k"])
    values = np.fromfile(f"{prefix}.bin", dtype="<f4")
    if values.size != v * k:
        raise ValueError(f"{prefix}.bin: expected {v * k} float32 values, found {values.size}")
    values = values.reshape(v, k).astype(np.float64)
    vox = np.zeros((v, 3), dtype=np.int64)
    with open(f"{prefix}.csv", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["row", "i", "j", "k"]:
            raise ValueError(f"{prefix}.csv: unexpected header {header}")
        for line in reader:
            vox[int(line[0])] = [int(line[1]), int(line[2]), int(line[3])]
    return FeatureMatrix(values=values, voxel_index_map=vox), manifest
