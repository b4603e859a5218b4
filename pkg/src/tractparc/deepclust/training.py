"""Two-stage training: MSE pretraining, then joint reconstruction + k-means.

The joint stage alternates, per batch: nearest-centroid assignment,
one gradient step on lam * MSE(d(e(x)), x) + beta * ||e(x) - m||^2 with
centroids held fixed, an incremental centroid update with a 1/count step
size, and an occupancy check that replaces starved centroids with the
mean of the others.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.cluster import KMeans

from .network import NetworkConfig, build_autoencoder

CHECKPOINT_VERSION = 1


@dataclass
class Centroids:
    """c latent centroids plus per-centroid update counts."""

    values: np.ndarray
    update_counts: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("centroids must be a (c, latent_dim) matrix")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("centroids must be finite")
        if self.update_counts is None:
            self.update_counts = np.zeros(len(self.values), dtype=np.int64)
        self.update_counts = np.asarray(self.update_counts, dtype=np.int64)
        if self.update_counts.shape != (len(self.values),):
            raise ValueError("update_counts must have one entry per centroid")

    @property
    def c(self):
        return len(self.values)


@dataclass
class TrainReport:
    """Per-epoch losses, cluster occupancy, and rescue-event counts."""

    recon_loss: list = field(default_factory=list)
    centroid_loss: list = field(default_factory=list)
    total_loss: list = field(default_factory=list)
    occupancy: list = field(default_factory=list)
    rescues: list = field(default_factory=list)

    @property
    def epochs(self):
        return len(self.total_loss)


def set_deterministic(enabled=True):
    """Single-threaded torch execution for bit-reproducible training."""
    if enabled:
        torch.set_num_threads(1)


def _epoch_batches(n, batch_size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _log_epoch(report, lam, beta, recon_sum, cent_sum, n, occupancy, rescues):
    recon = recon_sum / n
    cent = cent_sum / n
    report.recon_loss.append(recon)
    report.centroid_loss.append(cent)
    report.total_loss.append(lam * recon + beta * cent)
    report.occupancy.append([int(o) for o in occupancy])
    report.rescues.append(int(rescues))


def pretrain(model, data, cfg):
    """Minimize reconstruction MSE over augmented samples.

    Parameters
    ----------
    model : ConvAutoencoder
    data : ndarray, shape (n, k, k)
    cfg : NetworkConfig

    Returns
    -------
    (model, TrainReport)
    """
    data = np.asarray(data, dtype=np.float32)
    if data.shape[0] == 0:
        raise ValueError("pretraining data is empty")
    tensor = torch.from_numpy(data).unsqueeze(1)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_pretrain)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    model.train()
    for epoch in range(cfg.pretrain_epochs):
        loss_sum = 0.0
        for idx in _epoch_batches(len(data), cfg.batch_size, rng):
            x = tensor[idx]
            _, recon = model(x)
            loss = torch.mean((recon.squeeze(1) - x.squeeze(1)) ** 2)
            if not torch.isfinite(loss):
                raise RuntimeError(f"NaN pretraining loss at epoch {epoch} (lr={cfg.lr_pretrain})")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.detach()) * len(idx)
        _log_epoch(report, cfg.lam, cfg.beta, loss_sum, 0.0, len(data), [0] * cfg.c, 0)
    return model, report


def init_centroids(latent, c, seed=0, restarts=8):
    """Seeded k-means over latent vectors; best of `restarts` runs."""
    latent = np.asarray(latent, dtype=np.float32)
    if len(np.unique(latent, axis=0)) < c:
        raise ValueError(f"need at least {c} distinct latent vectors")
    km = KMeans(n_clusters=c, n_init=restarts, random_state=seed).fit(latent)
    return Centroids(values=km.cluster_centers_.astype(np.float32))


def assign(latent, centroids):
    """Nearest-centroid labels in 1..c; ties break toward the lowest index."""
    latent = np.asarray(latent, dtype=np.float64)
    values = centroids.values if isinstance(centroids, Centroids) else np.asarray(centroids)
    d2 = np.sum((latent[:, None, :] - values[None, :, :].astype(np.float64)) ** 2, axis=2)
    return np.argmin(d2, axis=1) + 1


def joint_loss(z, recon, x, centroid_values, assignment, lam, beta):
    """Training loss given forward outputs and a fixed assignment.

    Returns (total, recon_term, cent_term) with
    total = lam * recon_term + beta * cent_term.
    """
    recon_term = torch.mean((recon.squeeze(1) - x.squeeze(1)) ** 2)
    cent_term = torch.mean(torch.sum((z - centroid_values[assignment]) ** 2, dim=1))
    return lam * recon_term + beta * cent_term, recon_term, cent_term


class _frozen_batchnorm:
    """Context that stops batch-norm running-stat updates (momentum 0)."""

    def __init__(self, model):
        self.model = model
        self.saved = []

    def __enter__(self):
        for module in self.model.modules():
            if isinstance(module, torch.nn.modules.batchnorm._BatchNorm):
                self.saved.append((module, module.momentum))
                module.momentum = 0.0

    def __exit__(self, *exc):
        for module, momentum in self.saved:
            module.momentum = momentum


def _update_centroids(centroids, latent, labels):
    """Incremental per-centroid mean update with 1/count step size."""
    for k in np.unique(labels):
        members = latent[labels == k].astype(np.float64)
        n0 = int(centroids.update_counts[k])
        m = len(members)
        merged = (n0 * centroids.values[k].astype(np.float64) + members.sum(axis=0)) / (n0 + m)
        centroids.values[k] = merged.astype(np.float32)
        centroids.update_counts[k] = n0 + m


def rescue_centroids(centroids, batch_occupancy, threshold):
    """Replace centroids below the strict occupancy threshold.

    Each starved centroid becomes the arithmetic mean of the other c - 1
    centroids (pre-rescue values), and its update count restarts.
    """
    starved = np.where(batch_occupancy < threshold)[0]
    if starved.size == 0 or starved.size == centroids.c:
        return 0
    before = centroids.values.copy()
    for k in starved:
        others = np.delete(before, k, axis=0)
        centroids.values[k] = np.mean(others.astype(np.float64), axis=0).astype(np.float32)
        centroids.update_counts[k] = 0
    return int(starved.size)


def joint_train(model, centroids, data, cfg):
    """Jointly fine-tune the autoencoder and the latent k-means centroids.

    Returns
    -------
    (model, centroids, TrainReport)
    """
    data = np.asarray(data, dtype=np.float32)
    if cfg.c > len(data):
        raise ValueError(f"c={cfg.c} exceeds the {len(data)} pooled samples")
    tensor = torch.from_numpy(data).unsqueeze(1)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_joint)
    rng = np.random.default_rng(cfg.seed + 1)
    report = TrainReport()
    model.train()
    for epoch in range(cfg.joint_epochs):
        recon_sum = 0.0
        cent_sum = 0.0
        occupancy = np.zeros(cfg.c, dtype=np.int64)
        rescues = 0
        for idx in _epoch_batches(len(data), cfg.batch_size, rng):
            x = tensor[idx]
            z, recon = model(x)
            labels = assign(z.detach().numpy(), centroids) - 1
            occupancy += np.bincount(labels, minlength=cfg.c)

            centroid_values = torch.from_numpy(centroids.values.copy())
            assignment = torch.from_numpy(labels)
            total, recon_term, cent_term = joint_loss(z, recon, x, centroid_values, assignment, cfg.lam, cfg.beta)
            if not torch.isfinite(total):
                raise RuntimeError(f"NaN joint loss at epoch {epoch} (lr={cfg.lr_joint})")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            recon_sum += float(recon_term.detach()) * len(idx)
            cent_sum += float(cent_term.detach()) * len(idx)

            with torch.no_grad(), _frozen_batchnorm(model):
                z_after = model.encode(x).numpy()
            _update_centroids(centroids, z_after, labels)
            if cfg.adaptive_rescue:
                batch_occ = np.bincount(labels, minlength=cfg.c)
                rescues += rescue_centroids(centroids, batch_occ, cfg.empty_fraction * len(idx))
        _log_epoch(report, cfg.lam, cfg.beta, recon_sum, cent_sum, len(data), occupancy, rescues)
    return model, centroids, report


def encode(model, data, batch_size=1024):
    """Deterministic inference-mode latent vectors (batch norm running stats)."""
    data = np.asarray(data, dtype=np.float32)
    tensor = torch.from_numpy(data).unsqueeze(1)
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            out.append(model.encode(tensor[start : start + batch_size]).numpy())
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.latent_dim), dtype=np.float32)


def export_report(report, path, c):
    """Write a TrainReport as CSV: losses, occupancy_1..c, rescues."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["epoch", "recon_loss", "centroid_loss", "total_loss"]
            + [f"occupancy_{i + 1}" for i in range(c)]
            + ["rescues"]
        )
        for e in range(report.epochs):
            writer.writerow(
                [e, repr(report.recon_loss[e]), repr(report.centroid_loss[e]), repr(report.total_loss[e])]
                + list(report.occupancy[e])
                + [report.rescues[e]]
            )


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + concatenated float32 payload
# ---------------------------------------------------------------------------

def save_checkpoint(model, centroids, cfg, prefix):
    """Persist model weights, centroids, and config as <prefix>.json + .bin."""
    tensors = []
    int_values = {}
    chunks = []
    if model is not None:
        for name, tensor in model.state_dict().items():
            if tensor.is_floating_point():
                arr = tensor.detach().numpy().astype("<f4")
                tensors.append({"name": name, "shape": list(arr.shape)})
                chunks.append(arr.tobytes())
            else:
                int_values[name] = int(tensor.item())
    chunks.append(centroids.values.astype("<f4").tobytes())
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "has_model": model is not None,
        "tensors": tensors,
        "int_values": int_values,
        "centroids": {
            "shape": list(centroids.values.shape),
            "update_counts": [int(n) for n in centroids.update_counts],
        },
    }
    with open(f"{prefix}.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    with open(f"{prefix}.bin", "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(prefix):
    """Load a checkpoint; returns (model or None, Centroids, NetworkConfig)."""
    with open(f"{prefix}.json") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{prefix}.json: unsupported checkpoint version {manifest.get('format_version')}")
    cfg = NetworkConfig.from_dict(manifest["config"])
    payload = np.fromfile(f"{prefix}.bin", dtype="<f4")

    cent_shape = tuple(manifest["centroids"]["shape"])
    expected = int(np.prod(cent_shape))
    tensor_sizes = [int(np.prod(t["shape"])) for t in manifest["tensors"]]
    expected += sum(tensor_sizes)
    if payload.size != expected:
        raise ValueError(f"{prefix}.bin: payload has {payload.size} values, manifest expects {expected}")

    model = None
    pos = 0
    if manifest["has_model"]:
        model = build_autoencoder(cfg)
        state = model.state_dict()
        new_state = {}
        for meta, size in zip(manifest["tensors"], tensor_sizes):
            name, shape = meta["name"], tuple(meta["shape"])
            if name not in state or tuple(state[name].shape) != shape:
                raise ValueError(f"{prefix}: tensor {name} with shape {shape} does not fit the configured model")
            new_state[name] = torch.from_numpy(payload[pos : pos + size].reshape(shape).copy())
            pos += size
        for name, value in manifest["int_values"].items():
            if name not in state:
                raise ValueError(f"{prefix}: unexpected integer entry {name}")
            new_state[name] = torch.tensor(value, dtype=state[name].dtype)
        model.load_state_dict(new_state)
        model.eval()
    centroids = Centroids(
        values=payload[pos : pos + int(np.prod(cent_shape))].reshape(cent_shape).copy(),
        update_counts=np.asarray(manifest["centroids"]["update_counts"], dtype=np.int64),
    )
    return model, centroids, cfg
