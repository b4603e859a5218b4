"""Streamline ingestion, nucleus filtering, and groupwise fiber clustering.

Streamlines are ordered polylines in world millimeters. Clustering pools
streamlines across training subjects, resamples them to a fixed point
count, and runs k-medoids (PAM) on the symmetric mean-closest-point
distance; the medoids then assign cluster ids to any subject's set.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np


class TckFormatError(ValueError):
    """Raised when a file is not a readable TCK tractography file."""


@dataclass
class StreamlineSet:
    """A collection of streamlines for one subject."""

    streamlines: list
    subject_id: str = ""
    affine: np.ndarray = None

    def __post_init__(self):
        self.streamlines = [np.asarray(s, dtype=np.float64) for s in self.streamlines]
        for s in self.streamlines:
            if s.ndim != 2 or s.shape[1] != 3:
                raise ValueError("each streamline must be an (N, 3) array of points")
            if s.shape[0] < 2:
                raise ValueError("streamlines need at least 2 points")
            if not np.all(np.isfinite(s)):
                raise ValueError("streamline coordinates must be finite")

    def __len__(self):
        return len(self.streamlines)


@dataclass
class ClusterModel:
    """K medoid streamlines, each resampled to the same point count."""

    medoids: list
    point_count: int
    seed: int = 0

    def __post_init__(self):
        self.medoids = [np.asarray(m, dtype=np.float64) for m in self.medoids]
        for m in self.medoids:
            if m.shape != (self.point_count, 3):
                raise ValueError(f"every medoid must have exactly {self.point_count} points")

    @property
    def k(self):
        return len(self.medoids)


# ---------------------------------------------------------------------------
# TCK file format
# ---------------------------------------------------------------------------

_TCK_MAGIC = "mrtrix tracks"


def load_tck(path, subject_id=""):
    """Load an MRtrix .tck tractography file.

    Coordinates are kept in the file's scanner/world mm space.
    """
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"END")
    if end < 0 or not raw[: len(_TCK_MAGIC)].decode("latin-1").startswith(_TCK_MAGIC):
        raise TckFormatError(f"{path}: missing 'mrtrix tracks' header")
    header = {}
    for line in raw[:end].decode("latin-1").splitlines()[1:]:
        if ":" in line:
            key, value = line.split(":", 1)
            header[key.strip()] = value.strip()

    datatype = header.get("datatype", "")
    if datatype == "Float32LE":
        dtype = np.dtype("<f4")
    elif datatype == "Float32BE":
        dtype = np.dtype(">f4")
    else:
        raise TckFormatError(f"{path}: unsupported datatype {datatype!r}, expected Float32LE/Float32BE")

    file_field = header.get("file", "")
    parts = file_field.split()
    if len(parts) != 2 or parts[0] != ".":
        raise TckFormatError(f"{path}: unsupported 'file' field {file_field!r} (single-file only)")
    offset = int(parts[1])

    body = raw[offset:]
    if len(body) % (3 * dtype.itemsize) != 0:
        raise TckFormatError(f"{path}: truncated track data")
    triplets = np.frombuffer(body, dtype=dtype).reshape(-1, 3).astype(np.float64)

    inf_rows = np.where(np.all(np.isinf(triplets), axis=1))[0]
    if inf_rows.size == 0:
        raise TckFormatError(f"{path}: missing infinity stream terminator")
    triplets = triplets[: inf_rows[0]]

    streamlines = []
    breaks = np.where(np.any(np.isnan(triplets), axis=1))[0]
    start = 0
    for b in list(breaks) + [len(triplets)]:
        track = triplets[start:b]
        start = b + 1
        if len(track) == 0:
            continue
        if len(track) < 2:
            raise TckFormatError(f"{path}: track with fewer than 2 points")
        streamlines.append(track)
    return StreamlineSet(streamlines=streamlines, subject_id=subject_id)


def save_tck(streamlines, path):
    """Write streamlines (a StreamlineSet or list of (N, 3) arrays) as TCK."""
    if isinstance(streamlines, StreamlineSet):
        streamlines = streamlines.streamlines
    lines = [_TCK_MAGIC, "datatype: Float32LE", f"count: {len(streamlines)}"]
    # the offset appears inside the header, so its width must stabilize
    offset = 0
    for _ in range(4):
        text = "\n".join(lines + [f"file: . {offset}", "END"]) + "\n"
        if len(text.encode()) == offset:
            break
        offset = len(text.encode())
    chunks = [text.encode()]
    nan_row = np.full((1, 3), np.nan, dtype="<f4")
    for i, s in enumerate(streamlines):
        chunks.append(np.asarray(s, dtype="<f4").tobytes())
        if i < len(streamlines) - 1:
            chunks.append(nan_row.tobytes())
    chunks.append(np.full((1, 3), np.inf, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def save_cluster_model(model, tck_path, manifest_path):
    """Persist a ClusterModel as a medoid TCK plus a JSON manifest."""
    save_tck(model.medoids, tck_path)
    manifest = {"k": model.k, "point_count": model.point_count, "seed": model.seed}
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_cluster_model(tck_path, manifest_path):
    with open(manifest_path) as f:
        manifest = json.load(f)
    medoids = load_tck(tck_path).streamlines
    model = ClusterModel(medoids=medoids, point_count=int(manifest["point_count"]), seed=int(manifest.get("seed", 0)))
    if model.k != int(manifest["k"]):
        raise ValueError(f"{tck_path}: medoid count {model.k} does not match manifest k={manifest['k']}")
    return model


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def supersample_points(points, step):
    """Densify a polyline so consecutive samples are at most `step` apart."""
    points = np.asarray(points, dtype=np.float64)
    segments = np.diff(points, axis=0)
    lengths = np.linalg.norm(segments, axis=1)
    out = [points[:1]]
    for i, length in enumerate(lengths):
        n = max(1, int(np.ceil(length / step)))
        ts = np.arange(1, n + 1)[:, None] / n
        out.append(points[i] + ts * segments[i])
    return np.concatenate(out, axis=0)


def filter_by_mask(streamset, inclusion):
    """Keep streamlines with at least one point inside the inclusion mask.

    Segments are supersampled at half the minimum voxel spacing before
    the inside test, so a segment crossing a voxel between its vertices
    still counts as passing through it.
    """
    if inclusion.foreground_count == 0:
        warnings.warn("inclusion mask is empty; no streamlines retained")
        return StreamlineSet(streamlines=[], subject_id=streamset.subject_id, affine=streamset.affine)
    step = 0.5 * min(inclusion.spacing)
    dims = inclusion.dims
    kept = []
    for s in streamset.streamlines:
        dense = supersample_points(s, step)
        idx = np.rint(inclusion.world_to_index(dense)).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        if not np.any(inside):
            continue
        idx = idx[inside]
        if np.any(inclusion.data[idx[:, 0], idx[:, 1], idx[:, 2]] > 0):
            kept.append(s)
    return StreamlineSet(streamlines=kept, subject_id=streamset.subject_id, affine=streamset.affine)


def resample_streamline(points, num_points):
    """Resample a streamline to `num_points` at equal arc-length spacing."""
    if num_points < 2:
        raise ValueError(f"num_points must be >= 2, got {num_points}")
    points = np.asarray(points, dtype=np.float64)
    seg_lengths = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg_lengths)])
    total = arc[-1]
    if total <= 0:
        raise ValueError("cannot resample a zero-length streamline")
    targets = np.linspace(0.0, total, num_points)
    resampled = np.empty((num_points, 3))
    for c in range(3):
        resampled[:, c] = np.interp(targets, arc, points[:, c])
    resampled[0] = points[0]
    resampled[-1] = points[-1]
    return resampled


def streamline_distance(a, b):
    """Symmetric mean-closest-point distance between two resampled streamlines.

    Returns the minimum over the direct and flipped orientation of `b` of
    the symmetrized mean of per-point nearest-point distances.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"point counts differ: {a.shape[0]} vs {b.shape[0]}")

    def sym(u, v):
        d2 = np.sum((u[:, None, :] - v[None, :, :]) ** 2, axis=2)
        d_uv = np.sqrt(d2.min(axis=1)).mean()
        d_vu = np.sqrt(d2.min(axis=0)).mean()
        return 0.5 * (d_uv + d_vu)

    return min(sym(a, b), sym(a, b[::-1]))


def pairwise_distance_matrix(points, chunk_bytes=1 << 27):
    """Symmetric mean-closest-point distances for (N, P, 3) resampled tracks.

    Nearest-point distances are invariant to reversing either streamline,
    so the orientation flip of streamline_distance never changes the value
    and the direct orientation is computed alone.
    """
    points = np.asarray(points, dtype=np.float64)
    n, p, _ = points.shape
    sq = np.sum(points**2, axis=2)  # (N, P)
    matrix = np.empty((n, n), dtype=np.float64)
    start = 0
    while start < n:
        rest = points[start:]  # symmetry: only j >= start is computed
        rows = max(1, int(chunk_bytes // max(1, len(rest) * p * p * 8)))
        stop = min(n, start + rows)
        m = stop - start
        cross = points[start:stop].reshape(m * p, 3) @ rest.reshape(-1, 3).T
        d2 = (
            sq[start:stop, :, None, None]
            + sq[None, None, start:, :]
            - 2.0 * cross.reshape(m, p, len(rest), p)
        )
        np.maximum(d2, 0.0, out=d2)
        d_ab = np.sqrt(d2.min(axis=3)).mean(axis=1)  # nearest over q, mean over p
        d_ba = np.sqrt(d2.min(axis=1)).mean(axis=2)  # nearest over p, mean over q
        block = 0.5 * (d_ab + d_ba)
        matrix[start:stop, start:] = block
        matrix[start:, start:stop] = block.T
        start = stop
    np.fill_diagonal(matrix, 0.0)
    return matrix


# ---------------------------------------------------------------------------
# Groupwise k-medoids clustering
# ---------------------------------------------------------------------------

def _pool_streamlines(sets, max_pool, rng):
    """Sample up to max_pool streamlines, as evenly as possible per subject."""
    counts = [len(s) for s in sets]
    total = sum(counts)
    if total <= max_pool:
        quotas = counts
    else:
        quotas = [0] * len(sets)
        remaining = max_pool
        active = sorted(range(len(sets)), key=lambda i: counts[i])
        while remaining > 0 and active:
            share = max(1, remaining // len(active))
            next_active = []
            for i in active:
                take = min(share, counts[i] - quotas[i], remaining)
                quotas[i] += take
                remaining -= take
                if quotas[i] < counts[i]:
                    next_active.append(i)
                if remaining == 0:
                    break
            active = next_active
    pooled = []
    for s, quota in zip(sets, quotas):
        if quota == len(s):
            pooled.extend(s.streamlines)
        else:
            chosen = rng.choice(len(s), size=quota, replace=False)
            pooled.extend(s.streamlines[j] for j in sorted(chosen))
    return pooled


def _pam_build(matrix, k):
    n = matrix.shape[0]
    medoids = [int(np.argmin(matrix.sum(axis=1, dtype=np.float64)))]
    nearest = matrix[medoids[0]].copy()
    while len(medoids) < k:
        gain = np.minimum(matrix, nearest[None, :]).sum(axis=1, dtype=np.float64)
        gain[medoids] = np.inf
        best = int(np.argmin(gain))
        medoids.append(best)
        nearest = np.minimum(nearest, matrix[best])
    return medoids


def _pam_swap(matrix, medoids, max_iter=100):
    n = matrix.shape[0]
    medoids = list(medoids)
    for _ in range(max_iter):
        med = np.asarray(medoids)
        dist_to_med = matrix[:, med]  # (N, K)
        order = np.argsort(dist_to_med, axis=1, kind="stable")
        nearest_pos = order[:, 0]
        d1 = dist_to_med[np.arange(n), nearest_pos]
        d2 = dist_to_med[np.arange(n), order[:, 1]] if len(medoids) > 1 else np.full(n, np.inf)
        base_cost = d1.sum(dtype=np.float64)

        # cost after adding candidate h, before removing any medoid
        t = np.minimum(matrix, d1[:, None]).sum(axis=0, dtype=np.float64)  # (N,)
        best_delta = 0.0
        best_swap = None
        for pos in range(len(medoids)):
            members = nearest_pos == pos
            if not np.any(members):
                correction = np.zeros(n)
            else:
                dm = matrix[members, :]  # (M, N candidates)
                correction = (
                    np.minimum(dm, d2[members][:, None]) - np.minimum(dm, d1[members][:, None])
                ).sum(axis=0, dtype=np.float64)
            cost = t + correction
            cost[med] = np.inf
            h = int(np.argmin(cost))
            delta = cost[h] - base_cost
            if delta < best_delta - 1e-12:
                best_delta = delta
                best_swap = (pos, h)
        if best_swap is None:
            break
        medoids[best_swap[0]] = best_swap[1]
    return sorted(medoids)


def cluster_streamlines(sets, k, num_points=15, seed=0, max_pool=20000):
    """Groupwise k-medoids clustering of streamlines across subjects.

    Parameters
    ----------
    sets : list of StreamlineSet
        Training subjects; streamlines are pooled evenly across them.
    k : int
        Number of streamline clusters.
    num_points : int
        Arc-length resampling point count applied before clustering.
    seed : int
        Seed for the pooling subsample; the PAM refinement itself is
        deterministic given the pooled data.
    max_pool : int
        Upper bound on pooled streamlines (bounds the O(n^2) matrix).

    Returns
    -------
    ClusterModel
    """
    pooled = _pool_streamlines(sets, max_pool, np.random.default_rng(seed))
    if len(pooled) < k:
        raise ValueError(f"need at least k={k} streamlines, got {len(pooled)}")
    resampled = np.stack([resample_streamline(s, num_points) for s in pooled])
    matrix = pairwise_distance_matrix(resampled)
    medoid_idx = _pam_swap(matrix, _pam_build(matrix, k))
    return ClusterModel(medoids=[resampled[i] for i in medoid_idx], point_count=num_points, seed=seed)


def assign_clusters(streamset, model):
    """Assign each streamline to its nearest medoid.

    Returns 1-based cluster ids; ties break toward the lowest id.
    """
    ids = np.empty(len(streamset), dtype=np.int64)
    for i, s in enumerate(streamset.streamlines):
        r = resample_streamline(s, model.point_count)
        dists = [streamline_distance(r, m) for m in model.medoids]
        ids[i] = int(np.argmin(dists)) + 1
    return ids
