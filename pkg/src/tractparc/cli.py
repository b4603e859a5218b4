"""Command-line pipeline: phantom, cluster, features, train, parcellate, sweep.

Every subcommand reads a YAML config (flags override config values),
consumes only persisted artifacts from previous stages, and writes a run
manifest with input checksums so deterministic runs are reproducible.
"""

import argparse
import copy
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, deepclust, features as feat, parcel, phantom as ph, tract, volio

BASELINES = ("ours", "kmeans", "feat-orig", "net-orig")

DEFAULT_CONFIG = {
    "seed": 0,
    "baseline": "ours",
    "deterministic": False,
    "paths": {
        "out": "runs/tractparc",
        "phantom_dir": None,
        "subjects": [],
        "atlas": None,
    },
    "train_subjects": None,
    "phantom": {},
    "tract": {
        "k": 8,
        "points": 15,
        "max_pool": 20000,
        "dilation_radius": 2,
        "connectivity": 26,
    },
    "features": {
        "connectivity": 26,
        "units": "index",
    },
    "network": {
        "latent_dim": 10,
        "num_levels": 3,
        "channels": [16, 32, 64],
        "c": 4,
        "lam": 15000.0,
        "beta": 0.5,
        "batch_size": 256,
        "pretrain_epochs": 100,
        "joint_epochs": 50,
        "lr_pretrain": 1e-3,
        "lr_joint": 1e-4,
        "empty_fraction": 1.0 / 80.0,
    },
    "sweep": {"k": [], "c": []},
}


def _deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides=None):
    """Merge defaults <- YAML config file <- command-line overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a mapping")
        cfg = _deep_merge(cfg, loaded)
    cfg = _deep_merge(cfg, overrides or {})
    if cfg["baseline"] not in BASELINES:
        raise ValueError(f"baseline must be one of {BASELINES}, got {cfg['baseline']!r}")
    return cfg


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, command, cfg, inputs, outputs):
    manifest = {
        "tool": "tractparc",
        "version": __version__,
        "command": command,
        "seed": cfg["seed"],
        "baseline": cfg["baseline"],
        "config": cfg,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    path = Path(directory) / f"manifest_{command}.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _resolve_subjects(cfg):
    """Subject records {id, mask, streamlines, fa?, truth?} from config."""
    phantom_dir = cfg["paths"].get("phantom_dir")
    if phantom_dir:
        with open(Path(phantom_dir) / "phantom.json") as f:
            manifest = json.load(f)
        return manifest["subjects"]
    subjects = cfg["paths"].get("subjects") or []
    if not subjects:
        raise ValueError("no subjects configured: set paths.subjects or paths.phantom_dir")
    for s in subjects:
        for key in ("id", "mask", "streamlines"):
            if key not in s:
                raise ValueError(f"subject entry missing required key {key!r}: {s}")
    return subjects


def _train_ids(cfg, subjects):
    ids = cfg.get("train_subjects") or [s["id"] for s in subjects]
    known = {s["id"] for s in subjects}
    missing = [i for i in ids if i not in known]
    if missing:
        raise ValueError(f"unknown train subjects: {missing}")
    return ids


def _network_config(cfg, k):
    net = cfg["network"]
    baseline = cfg["baseline"]
    return deepclust.NetworkConfig(
        k=k,
        c=int(net["c"]),
        latent_dim=int(net["latent_dim"]),
        num_levels=int(net["num_levels"]),
        channels=tuple(net["channels"]),
        lam=float(net["lam"]),
        beta=float(net["beta"]),
        batch_size=int(net["batch_size"]),
        pretrain_epochs=int(net["pretrain_epochs"]),
        joint_epochs=int(net["joint_epochs"]),
        lr_pretrain=float(net["lr_pretrain"]),
        lr_joint=float(net["lr_joint"]),
        seed=int(cfg["seed"]),
        empty_fraction=float(net["empty_fraction"]),
        dense_connections=baseline != "net-orig",
        adaptive_rescue=baseline != "net-orig",
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(cfg, force=False):
    out = Path(cfg["paths"]["out"])
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty; pass --force to overwrite")
    spec = ph.PhantomSpec.from_dict({**cfg["phantom"], "seed": cfg["seed"]})
    subjects, manifest = ph.write_phantom(spec, out)
    outputs = [entry[key] for entry in manifest["subjects"] for key in ("mask", "truth", "fa", "streamlines")]
    write_manifest(out, "phantom", cfg, [], outputs + [str(out / "phantom.json")])
    print(f"phantom: wrote {len(subjects)} subjects to {out}")
    return out


def cmd_cluster(cfg):
    out = Path(cfg["paths"]["out"]) / "cluster"
    out.mkdir(parents=True, exist_ok=True)
    (out / "assignments").mkdir(exist_ok=True)
    (out / "filtered").mkdir(exist_ok=True)
    tcfg = cfg["tract"]
    subjects = _resolve_subjects(cfg)
    train_ids = _train_ids(cfg, subjects)

    inputs = []
    filtered = {}
    for s in subjects:
        mask = volio.as_mask(volio.load_volume(s["mask"]))
        inclusion = volio.dilate_mask(mask, tcfg["dilation_radius"], tcfg["connectivity"])
        streams = tract.load_tck(s["streamlines"], subject_id=s["id"])
        kept = tract.filter_by_mask(streams, inclusion)
        inputs.extend([s["mask"], s["streamlines"]])
        if len(kept) == 0:
            print(f"cluster: warning: subject {s['id']} has no streamlines in the inclusion mask; excluded")
            continue
        filtered[s["id"]] = kept

    training_sets = [filtered[i] for i in train_ids if i in filtered]
    if not training_sets:
        raise ValueError("no training subject retained any streamlines")
    model = tract.cluster_streamlines(
        training_sets,
        k=int(tcfg["k"]),
        num_points=int(tcfg["points"]),
        seed=int(cfg["seed"]),
        max_pool=int(tcfg["max_pool"]),
    )
    tract.save_cluster_model(model, out / "medoids.tck", out / "model.json")

    outputs = [out / "medoids.tck", out / "model.json"]
    for sid, kept in filtered.items():
        ids = tract.assign_clusters(kept, model)
        tck_path = out / "filtered" / f"{sid}.tck"
        tract.save_tck(kept, tck_path)
        csv_path = out / "assignments" / f"{sid}.csv"
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["streamline", "cluster"])
            for i, cid in enumerate(ids):
                writer.writerow([i, int(cid)])
        outputs.extend([tck_path, csv_path])
    write_manifest(out, "cluster", cfg, inputs, outputs)
    print(f"cluster: k={model.k} medoids from {len(training_sets)} training subjects -> {out}")
    return out


def _load_assignments(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["streamline", "cluster"]:
            raise ValueError(f"{path}: unexpected header {header}")
        return np.array([int(row[1]) for row in reader], dtype=np.int64)


def cmd_features(cfg):
    root = Path(cfg["paths"]["out"])
    cluster_dir = root / "cluster"
    out = root / "features"
    out.mkdir(parents=True, exist_ok=True)
    fcfg = cfg["features"]
    baseline = cfg["baseline"]
    with open(cluster_dir / "model.json") as f:
        k = int(json.load(f)["k"])

    subjects = _resolve_subjects(cfg)
    inputs, outputs = [], []
    for s in subjects:
        tck_path = cluster_dir / "filtered" / f"{s['id']}.tck"
        csv_path = cluster_dir / "assignments" / f"{s['id']}.csv"
        if not tck_path.exists():
            print(f"features: warning: no filtered streamlines for {s['id']}; skipped")
            continue
        mask = volio.as_mask(volio.load_volume(s["mask"]))
        streams = tract.load_tck(tck_path, subject_id=s["id"])
        ids = _load_assignments(csv_path)
        if len(ids) != len(streams):
            raise ValueError(f"{csv_path}: {len(ids)} assignments for {len(streams)} streamlines")
        matrix = feat.compute_intersections(streams, ids, mask, k=k)
        if baseline in ("feat-orig", "kmeans"):
            fm = feat.binary_features(matrix)
        else:
            matrix = feat.dilate_features(matrix, mask, connectivity=fcfg["connectivity"])
            fm = feat.smooth_features(matrix, mask, units=fcfg["units"])
        prefix = out / s["id"]
        feat.save_features(
            fm,
            prefix,
            mask_sha256=feat.mask_checksum(mask),
            params={
                "baseline": baseline,
                "connectivity": fcfg["connectivity"],
                "units": fcfg["units"],
                "k": k,
            },
        )
        inputs.extend([s["mask"], tck_path, csv_path])
        outputs.extend([f"{prefix}.json", f"{prefix}.bin", f"{prefix}.csv"])
    write_manifest(out, "features", cfg, inputs, outputs)
    print(f"features: wrote {len(outputs) // 3} subjects -> {out}")
    return out


def cmd_train(cfg):
    root = Path(cfg["paths"]["out"])
    out = root / "train"
    out.mkdir(parents=True, exist_ok=True)
    subjects = _resolve_subjects(cfg)
    train_ids = _train_ids(cfg, subjects)
    baseline = cfg["baseline"]

    rows = []
    inputs = []
    k = None
    for sid in train_ids:
        prefix = root / "features" / sid
        fm, manifest = feat.load_features(prefix)
        k = int(manifest["k"])
        rows.append(fm.values)
        inputs.extend([f"{prefix}.json", f"{prefix}.bin", f"{prefix}.csv"])
    pooled = np.concatenate(rows, axis=0)
    net_cfg = _network_config(cfg, k)
    if net_cfg.c >= len(pooled):
        raise ValueError(f"c={net_cfg.c} requires more than {len(pooled)} pooled voxels")

    if baseline == "kmeans":
        centroids = deepclust.init_centroids(pooled.astype(np.float32), net_cfg.c, seed=net_cfg.seed)
        deepclust.save_checkpoint(None, centroids, net_cfg, out / "centroids")
        outputs = [out / "centroids.json", out / "centroids.bin"]
        write_manifest(out, "train", cfg, inputs, outputs)
        print(f"train: kmeans baseline centroids -> {out}")
        return out

    data = np.concatenate([feat.augment_all(r) for r in rows])
    model = deepclust.build_autoencoder(net_cfg)
    model, pre_report = deepclust.pretrain(model, data, net_cfg)
    latent = deepclust.encode(model, data)
    centroids = deepclust.init_centroids(latent, net_cfg.c, seed=net_cfg.seed)
    model, centroids, joint_report = deepclust.joint_train(model, centroids, data, net_cfg)
    deepclust.save_checkpoint(model, centroids, net_cfg, out / "checkpoint")
    deepclust.export_report(pre_report, out / "pretrain_report.csv", net_cfg.c)
    deepclust.export_report(joint_report, out / "joint_report.csv", net_cfg.c)
    outputs = [out / "checkpoint.json", out / "checkpoint.bin", out / "pretrain_report.csv", out / "joint_report.csv"]
    write_manifest(out, "train", cfg, inputs, outputs)
    print(
        f"train: {baseline} done (pretrain {net_cfg.pretrain_epochs} epochs, "
        f"joint {net_cfg.joint_epochs} epochs, rescues {sum(joint_report.rescues)}) -> {out}"
    )
    return out


def cmd_parcellate(cfg):
    root = Path(cfg["paths"]["out"])
    out = root / "parcellate"
    out.mkdir(parents=True, exist_ok=True)
    baseline = cfg["baseline"]
    subjects = _resolve_subjects(cfg)

    ckpt_prefix = root / "train" / ("centroids" if baseline == "kmeans" else "checkpoint")
    model, centroids, net_cfg = deepclust.load_checkpoint(ckpt_prefix)
    provenance = {"checkpoint": str(ckpt_prefix), "baseline": baseline}

    results, fa_volumes, truths = [], [], []
    inputs, outputs = [], []
    for s in subjects:
        prefix = root / "features" / s["id"]
        fm, manifest = feat.load_features(prefix)
        if int(manifest["k"]) != net_cfg.k:
            raise ValueError(f"feature k={manifest['k']} does not match checkpoint k={net_cfg.k}")
        mask = volio.as_mask(volio.load_volume(s["mask"]))
        if baseline == "kmeans":
            labels = deepclust.assign(fm.values.astype(np.float32), centroids)
        else:
            latent = deepclust.encode(model, feat.augment_all(fm))
            labels = deepclust.assign(latent, centroids)
            emb_path = out / f"{s['id']}_embeddings.csv"
            with open(emb_path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["row"] + [f"latent_{i}" for i in range(latent.shape[1])])
                for r, vec in enumerate(latent):
                    writer.writerow([r] + [repr(float(v)) for v in vec])
            outputs.append(emb_path)
        result = parcel.assemble_labelmap(
            labels, fm.voxel_index_map, mask, net_cfg.c, subject_id=s["id"],
            provenance={**provenance, "features": feat.mask_checksum(mask)},
        )
        label_path = out / f"{s['id']}_labels.nii.gz"
        volio.save_volume(result.labelmap, label_path)
        results.append(result)
        inputs.extend([f"{prefix}.bin", s["mask"]])
        outputs.append(label_path)
        if s.get("fa"):
            fa_volumes.append(volio.load_volume(s["fa"]))
            inputs.append(s["fa"])
        if s.get("truth"):
            truth_lm = volio.as_labelmap(volio.load_volume(s["truth"]))
            truths.append(
                ph.PhantomTruth(labelmap=truth_lm, bundle_ids=np.zeros(0, dtype=np.int64), fa=None)
            )
            inputs.append(s["truth"])

    atlas = None
    if cfg["paths"].get("atlas"):
        atlas = volio.as_labelmap(volio.load_volume(cfg["paths"]["atlas"]))
        inputs.append(cfg["paths"]["atlas"])
    report = parcel.build_metric_report(
        results,
        fa_volumes=fa_volumes if len(fa_volumes) == len(results) else None,
        atlas=atlas,
        connectivity=cfg["features"]["connectivity"],
    )
    parcel.export_metric_report(report, out / "metrics.csv", net_cfg.c)
    outputs.append(out / "metrics.csv")
    if fa_volumes and len(fa_volumes) == len(results):
        parcel.export_parcel_fa_stats(results, fa_volumes, out / "fa_stats.csv")
        outputs.append(out / "fa_stats.csv")

    summary = {
        "baseline": baseline,
        "c": net_cfg.c,
        "k": net_cfg.k,
        "subjects": [r.subject_id for r in results],
        "mean_sc": report.mean_sc,
        "mean_dice": report.mean_dice,
        "rsd": report.rsd,
    }
    if atlas is not None:
        summary["atlas_dice_mean"] = report.atlas_dice_mean
        summary["atlas_dice_table"] = {str(k_): v for k_, v in report.atlas_dice_table.items()}
    if len(truths) == len(results):
        recoveries = [ph.evaluate_recovery(r, t) for r, t in zip(results, truths)]
        summary["ari"] = {r.subject_id: rec.ari for r, rec in zip(results, recoveries)}
        summary["recovery_dice"] = {r.subject_id: rec.mean_dice for r, rec in zip(results, recoveries)}
        summary["mean_ari"] = float(np.mean([rec.ari for rec in recoveries]))
        summary["mean_recovery_dice"] = float(np.mean([rec.mean_dice for rec in recoveries]))
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    outputs.append(out / "summary.json")
    write_manifest(out, "parcellate", cfg, inputs, outputs)
    print(f"parcellate: {len(results)} subjects, mean SC {report.mean_sc:.3f} -> {out}")
    return out


def cmd_sweep(cfg):
    root = Path(cfg["paths"]["out"])
    out = root / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    grid_k = cfg["sweep"]["k"]
    grid_c = cfg["sweep"]["c"]
    if not grid_k or not grid_c:
        raise ValueError("sweep requires non-empty sweep.k and sweep.c grids")
    rows = []
    for k in grid_k:
        for c in grid_c:
            cell_cfg = copy.deepcopy(cfg)
            cell_cfg["tract"]["k"] = int(k)
            cell_cfg["network"]["c"] = int(c)
            cell_cfg["paths"]["out"] = str(out / f"k{k}_c{c}")
            row = {"k": k, "c": c, "dice": "", "sc": "", "rsd": "", "error": ""}
            try:
                cmd_cluster(cell_cfg)
                cmd_features(cell_cfg)
                cmd_train(cell_cfg)
                cmd_parcellate(cell_cfg)
                with open(Path(cell_cfg["paths"]["out"]) / "parcellate" / "summary.json") as f:
                    summary = json.load(f)
                row["dice"] = _fmt_cell(summary.get("mean_dice"))
                row["sc"] = _fmt_cell(summary.get("mean_sc"))
                row["rsd"] = _fmt_cell(summary.get("rsd"))
            except Exception as exc:  # cell failures recorded, sweep continues
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    with open(out / "sweep.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["k", "c", "dice", "sc", "rsd", "error"])
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(out, "sweep", cfg, [], [out / "sweep.csv"])
    print(f"sweep: {len(rows)} cells -> {out / 'sweep.csv'}")
    return out


def _fmt_cell(value):
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return ""
    return repr(value)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="tractparc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"tractparc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("phantom", "generate a synthetic phantom population"),
        ("cluster", "filter streamlines and fit the groupwise cluster model"),
        ("features", "build voxel connectivity feature matrices"),
        ("train", "pretrain and jointly train the clustering autoencoder"),
        ("parcellate", "label voxels and compute metrics"),
        ("sweep", "run the pipeline over a (k, c) hyperparameter grid"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--baseline", choices=BASELINES, help="method variant to run")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--deterministic", action="store_true", help="single-threaded bit-reproducible mode")
        if name != "phantom":
            p.add_argument("--phantom", help="phantom directory to take subjects from")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["paths"] = {"out": args.out}
    if args.baseline:
        overrides["baseline"] = args.baseline
    if args.deterministic:
        overrides["deterministic"] = True
    if getattr(args, "phantom", None):
        overrides.setdefault("paths", {})["phantom_dir"] = args.phantom
    cfg = load_config(args.config, overrides)
    if cfg["deterministic"]:
        deepclust.set_deterministic(True)

    commands = {
        "phantom": lambda: cmd_phantom(cfg, force=args.force),
        "cluster": lambda: cmd_cluster(cfg),
        "features": lambda: cmd_features(cfg),
        "train": lambda: cmd_train(cfg),
        "parcellate": lambda: cmd_parcellate(cfg),
        "sweep": lambda: cmd_sweep(cfg),
    }
    try:
        commands[args.command]()
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
