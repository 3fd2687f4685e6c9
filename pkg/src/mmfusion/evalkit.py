"""Metrics, significance tests, trajectory dumps, and the ablation harness.

Conventions used throughout (documented here once):
  - metric values are percentages in [0, 100];
  - precision, recall, and f1 fall back to 0 when their denominator is 0;
  - the paired t-test returns 1.0 for all-zero differences and 0.0 for a
    constant nonzero difference (zero variance, unbounded t statistic);
  - cluster-validity ratios treat 0/0 as 0.
"""

import dataclasses
import json
import math
import os

import numpy as np
import torch
from scipy import stats

from .cfd import reverse_step
from .cohort import load_cohort, split_folds
from .errors import ConfigurationError
from .model import collate, predict_records
from .trainer import TrainConfig, load_checkpoint, train_model

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")
TRAJECTORY_FORMAT = "mmfusion-trajectory-v1"
ABLATION_GRIDS = ("ablation", "table3")

_LOW_POWER_NOTE = ("paired t-test over 3 folds has very low statistical power; "
                   "treat p-values as indicative only")


def _as_binary(values, name):
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.size == 0:
        raise ConfigurationError(f"{name} must be a nonempty 1-D sequence")
    if not np.isin(arr, (0, 1)).all():
        raise ConfigurationError(f"{name} must contain only 0/1 labels")
    return arr.astype(np.int64)


def classification_metrics(pred_labels, true_labels):
    """Confusion-matrix metrics for one fold, as percentages.

    Positive class is 1. Returns {"accuracy", "precision", "recall",
    "f1"}; ratios with a zero denominator are reported as 0.
    """
    pred = _as_binary(pred_labels, "pred_labels")
    true = _as_binary(true_labels, "true_labels")
    if pred.shape != true.shape:
        raise ConfigurationError(
            f"length mismatch: {pred.size} predictions vs {true.size} labels")
    tp = int(np.sum((pred == 1) & (true == 1)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    accuracy = (tp + tn) / pred.size
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": 100.0 * accuracy, "precision": 100.0 * precision,
            "recall": 100.0 * recall, "f1": 100.0 * f1}


def aggregate_metrics(fold_reports):
    """Mean and sample std (ddof=1; 0 for a single fold) per metric."""
    if not fold_reports:
        raise ConfigurationError("no fold reports to aggregate")
    out = {}
    for name in METRIC_NAMES:
        values = np.array([float(r[name]) for r in fold_reports])
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        out[name] = {"mean": float(values.mean()), "std": std,
                     "per_fold": values.tolist()}
    return out


def paired_t_test(metric_a, metric_b):
    """Two-sided paired t-test on fold-wise differences.

    Degenerate conventions: identical lists give p = 1.0; a constant
    nonzero difference (zero variance) gives p = 0.0.
    """
    a = np.asarray(metric_a, dtype=np.float64)
    b = np.asarray(metric_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigurationError("paired t-test needs two equal-length 1-D lists")
    if a.size < 2:
        raise ConfigurationError("paired t-test needs at least 2 folds")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        return 1.0 if float(d.mean()) == 0.0 else 0.0
    t = float(d.mean()) / (sd / math.sqrt(d.size))
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), df=d.size - 1)))


def davies_bouldin(points, labels):
    """Davies-Bouldin index with Euclidean centroid distances.

    Lower is better; 0 means every cluster has zero scatter. Requires
    at least 2 distinct labels.
    """
    x = np.asarray(points, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ConfigurationError("points must be (n, m) with one label per row")
    classes = np.unique(y)
    if classes.size < 2:
        raise ConfigurationError("Davies-Bouldin index needs >= 2 clusters")
    centroids = np.stack([x[y == c].mean(axis=0) for c in classes])
    scatters = np.array([np.linalg.norm(x[y == c] - centroids[i], axis=1).mean()
                         for i, c in enumerate(classes)])
    worst = np.zeros(classes.size)
    for i in range(classes.size):
        for j in range(classes.size):
            if i == j:
                continue
            spread = scatters[i] + scatters[j]
            gap = float(np.linalg.norm(centroids[i] - centroids[j]))
            if gap == 0.0:
                ratio = 0.0 if spread == 0.0 else math.inf
            else:
                ratio = spread / gap
            worst[i] = max(worst[i], ratio)
    return float(worst.mean())


def pca_projection(points, n_components=2):
    """Exact PCA via covariance eigendecomposition.

    Returns (coords (n, k), components (k, m)). Sign is fixed so each
    component's largest-magnitude entry is positive, making the
    projection deterministic.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigurationError("points must be a 2-D array")
    n, m = x.shape
    k = int(n_components)
    if not 1 <= k <= m:
        raise ConfigurationError(f"n_components must be in [1, {m}]")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(1, n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    components = eigvecs[:, order].T
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return centered @ components.T, components


@dataclasses.dataclass
class TrajectoryDump:
    timesteps: list          # T, T-1, ..., 0
    embeddings: list         # per step: (n, 2) float32, mean y_t over chains
    pca_coords: list         # per step: (n, 2) float64
    db_scores: list          # per step
    labels: np.ndarray       # (n,) true labels
    record_ids: list
    chains: int

    def __len__(self):
        return len(self.timesteps)


def _resolve_checkpoint(checkpoint):
    if isinstance(checkpoint, (str, os.PathLike)):
        checkpoint = load_checkpoint(checkpoint)
    if not checkpoint.history:
        raise ConfigurationError("checkpoint has no training history; "
                                 "refusing to export a trajectory")
    return checkpoint


def export_trajectory(checkpoint, test_records, chains=100, rng=None,
                      out_path=None, reverse_mode="card_posterior",
                      batch_size=64):
    """Reverse-chain snapshots for a test split, one per timestep.

    Starts K chains per record at y_T = f + standard noise, records the
    chain-mean y_t after every reverse transition (T+1 snapshots
    including the start), scores each snapshot's class separation with
    the Davies-Bouldin index, and projects it to 2-D. With out_path the
    dump is written as a JSON manifest plus float32 binary blobs.
    """
    checkpoint = _resolve_checkpoint(checkpoint)
    model = checkpoint.model
    if model.spec.variant != "full":
        raise ConfigurationError(
            f"trajectory export needs the diffusion variant, got {model.spec.variant}")
    if not test_records:
        raise ConfigurationError("test split is empty")
    labels = np.array([int(r.label) for r in test_records])
    if np.unique(labels).size < 2:
        raise ConfigurationError("test split has a single class; "
                                 "cluster scores are undefined")
    if rng is None:
        rng = np.random.default_rng()
    schedule = model.schedule
    k = int(chains)
    per_step = [[] for _ in range(schedule.timesteps + 1)]
    with torch.no_grad():
        for start in range(0, len(test_records), batch_size):
            batch = collate(test_records[start:start + batch_size])
            f = model.guidance_forward(batch, mode="infer").probs
            f_k = f.expand((k,) + tuple(f.shape))
            y = f_k + torch.as_tensor(rng.standard_normal(tuple(f_k.shape)),
                                      dtype=f.dtype)
            per_step[0].append(y.mean(dim=0).numpy())
            for i, t in enumerate(range(schedule.timesteps, 0, -1), start=1):
                y = reverse_step(y, f_k, t, model.cfd, schedule, rng,
                                 mode=reverse_mode)
                per_step[i].append(y.mean(dim=0).numpy())
    embeddings = [np.concatenate(snaps).astype(np.float32) for snaps in per_step]
    pca_coords = [pca_projection(e)[0] for e in embeddings]
    db_scores = [davies_bouldin(e, labels) for e in embeddings]
    dump = TrajectoryDump(
        timesteps=list(range(schedule.timesteps, -1, -1)),
        embeddings=embeddings, pca_coords=pca_coords, db_scores=db_scores,
        labels=labels, record_ids=[r.id for r in test_records], chains=k)
    if out_path is not None:
        _write_trajectory(dump, out_path)
    return dump


def _write_trajectory(dump, out_path):
    """JSON manifest at out_path; per-step blobs alongside it."""
    out_path = os.fspath(out_path)
    directory = os.path.dirname(out_path) or "."
    stem = os.path.splitext(os.path.basename(out_path))[0]
    os.makedirs(directory, exist_ok=True)
    blobs = {}
    for t, emb, coords in zip(dump.timesteps, dump.embeddings, dump.pca_coords):
        name_y = f"{stem}_t{t}_y.bin"
        name_p = f"{stem}_t{t}_pca.bin"
        emb.astype("<f4").tofile(os.path.join(directory, name_y))
        coords.astype("<f4").tofile(os.path.join(directory, name_p))
        blobs[str(t)] = {"embeddings": name_y, "pca": name_p,
                         "shape": list(emb.shape)}
    manifest = {
        "format": TRAJECTORY_FORMAT,
        "timesteps": dump.timesteps,
        "chains": dump.chains,
        "dtype": "<f4",
        "db_scores": dump.db_scores,
        "labels": dump.labels.tolist(),
        "record_ids": dump.record_ids,
        "blobs": blobs,
    }
    with open(out_path, "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_trajectory(path):
    """Read back a trajectory dump written by export_trajectory."""
    path = os.fspath(path)
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != TRAJECTORY_FORMAT:
        raise ConfigurationError(f"not a trajectory dump: {path}")
    directory = os.path.dirname(path) or "."
    embeddings, coords = [], []
    for t in manifest["timesteps"]:
        entry = manifest["blobs"][str(t)]
        shape = tuple(entry["shape"])
        emb = np.fromfile(os.path.join(directory, entry["embeddings"]),
                          dtype="<f4").reshape(shape)
        pca = np.fromfile(os.path.join(directory, entry["pca"]),
                          dtype="<f4").reshape(shape[0], -1)
        embeddings.append(emb)
        coords.append(pca.astype(np.float64))
    return TrajectoryDump(
        timesteps=list(manifest["timesteps"]), embeddings=embeddings,
        pca_coords=coords, db_scores=list(manifest["db_scores"]),
        labels=np.array(manifest["labels"]), record_ids=list(manifest["record_ids"]),
        chains=int(manifest["chains"]))


def ablation_rows(grid):
    """Row definitions for a replacement study: (name, config overrides)."""
    if grid == "ablation":
        return [(v, {"variant": v}) for v in ("base1", "base2", "base3", "full")]
    if grid == "table3":
        rows = []
        for arch in ("resnet_small", "densenet_small"):
            for gnn in ("gcn", "gat"):
                for masked in (True, False):
                    name = f"{arch}+{gnn}+{'mask' if masked else 'nomask'}"
                    rows.append((name, {"variant": "full", "architecture": arch,
                                        "gnn": gnn,
                                        "mask_ratio": 0.15 if masked else 0.0}))
        return rows
    raise ConfigurationError(f"grid must be one of {ABLATION_GRIDS}")


def _annotated(exc, row_name):
    try:
        return type(exc)(f"[{row_name}] {exc}")
    except Exception:
        return RuntimeError(f"[{row_name}] {exc}")


def run_ablation(cohort, config=None, grid="ablation", folds=3, seeds=(0,),
                 fold_seed=0, progress=None):
    """Train and evaluate every row of a replacement study.

    cohort: record list or a saved-cohort path. Each row retrains from
    scratch per fold and seed; metrics aggregate over all runs, and each
    row is compared against the reference row (the fully equipped model)
    with a fold-paired t-test on per-fold means.
    """
    if isinstance(cohort, (str, os.PathLike)):
        cohort = load_cohort(cohort)
    if config is None:
        config = TrainConfig()
    rows = ablation_rows(grid)
    reference = "full" if grid == "ablation" else "resnet_small+gat+mask"
    splits = split_folds(cohort, k=int(folds), seed=int(fold_seed))
    by_id = {r.id: r for r in cohort}
    pick = lambda ids: [by_id[i] for i in ids]

    results = {"grid": grid, "folds": int(folds), "seeds": [int(s) for s in seeds],
               "config": config.to_dict(), "rows": []}
    fold_means = {}
    for name, overrides in rows:
        per_fold = []
        for j, split in enumerate(splits):
            fold_runs = []
            for s in seeds:
                cfg = TrainConfig.from_dict({**config.to_dict(), **overrides,
                                             "seed": int(s)})
                try:
                    ck = train_model(pick(split.train_ids), pick(split.val_ids), cfg)
                except Exception as exc:
                    raise _annotated(exc, name) from exc
                rng = np.random.default_rng([int(s), 17, j])
                pred, _ = predict_records(ck.model, pick(split.test_ids), rng=rng,
                                          chains=cfg.sample_chains)
                truth = [by_id[i].label for i in split.test_ids]
                fold_runs.append(classification_metrics(pred, truth))
                if progress is not None:
                    progress(name, j, int(s), fold_runs[-1])
            per_fold.append({m: float(np.mean([r[m] for r in fold_runs]))
                             for m in METRIC_NAMES})
        fold_means[name] = per_fold
        results["rows"].append({"name": name, "overrides": overrides,
                                "metrics": aggregate_metrics(per_fold)})

    results["p_values"] = {}
    for name, _ in rows:
        if name == reference:
            continue
        results["p_values"][name] = {
            m: paired_t_test([f[m] for f in fold_means[reference]],
                             [f[m] for f in fold_means[name]])
            for m in METRIC_NAMES}
    results["reference"] = reference
    if int(folds) == 3:
        results["note"] = _LOW_POWER_NOTE
    return results
