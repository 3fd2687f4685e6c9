"""Synthetic multi-modal cohort: generation, persistence, splits, augmentation.

Each record carries one tumor volume, three node volumes, and three
tabular vectors (clinical, hematology, radiomics) plus a binary label.
The label is planted as a cross-modal rule: an XOR-style combination of
a latent factor u, expressed in the tumor blob amplitude and size (with
a weak echo in the node volumes), and a factor v, expressed in
radiomics coordinate 0. Clinical and hematology vectors are correlated nuisance.
A model reading a single modality therefore tops out near chance on the
rule component it cannot see, while a fused model can reach the Bayes
rate, which is 1 - flip rate with flip rate = min(0.5, noise_level / 2).
"""

import dataclasses
import json
import os
import tempfile

import numpy as np

from .errors import CohortFormatError, ConfigurationError

COHORT_FORMAT = "mmfusion-cohort-v1"

# seed-stream tags so the factor table, per-record content, and split
# shuffles never share a stream
_FACTOR_TAG = 7919
_RECORD_TAG = 104729
_SPLIT_TAG = 1299709


@dataclasses.dataclass
class SyntheticConfig:
    n_patients: int = 1354
    grid_shape: tuple = (16, 32, 32)
    vector_dims: tuple = (8, 12, 16)  # (clinical, hematology, radiomics)
    signal_strength: float = 1.0
    noise_level: float = 0.1
    prevalence: float = 0.3
    seed: int = 0

    def validate(self):
        if int(self.n_patients) < 10:
            raise ConfigurationError("n_patients must be >= 10")
        if len(self.grid_shape) != 3 or any(int(s) < 4 for s in self.grid_shape):
            raise ConfigurationError("grid_shape must be three dims, each >= 4")
        if len(self.vector_dims) != 3 or any(int(d) < 1 for d in self.vector_dims):
            raise ConfigurationError("vector_dims must be three positive counts")
        if not (0.0 < float(self.prevalence) < 1.0):
            raise ConfigurationError("prevalence must lie strictly inside (0, 1)")
        for name in ("signal_strength", "noise_level"):
            val = float(getattr(self, name))
            if not np.isfinite(val) or val < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0")

    @classmethod
    def from_dict(cls, payload):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(payload) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**payload)
        cfg.grid_shape = tuple(int(s) for s in cfg.grid_shape)
        cfg.vector_dims = tuple(int(d) for d in cfg.vector_dims)
        return cfg


@dataclasses.dataclass(eq=False)
class PatientRecord:
    id: str
    tumor_volume: np.ndarray        # (D, H, W) float32
    node_volumes: list              # three (D, H, W) float32 arrays
    clinical: np.ndarray            # (C,) float32
    hematology: np.ndarray          # (H_b,) float32
    radiomics: np.ndarray           # (R_d,) float32
    label: int


@dataclasses.dataclass
class FoldSplit:
    train_ids: list
    val_ids: list
    test_ids: list


def _flip_rate(noise_level):
    return min(0.5, 0.5 * float(noise_level))


def _draw_factors(config):
    """Latent factor table (u, v, flip) behind every record's content.

    Drawn centrally so the realized prevalence can be kept inside the
    +-5 point tolerance by bounded resampling; per-record content stays
    independently seeded.  Returns (u, v, flips, labels) as int arrays.
    """
    n = int(config.n_patients)
    prevalence = float(config.prevalence)
    flip = _flip_rate(config.noise_level)
    if flip >= 0.5:
        p0 = 0.5
    else:
        p0 = np.clip((prevalence - flip) / (1.0 - 2.0 * flip), 0.0, 1.0)
    invert = p0 > 0.5
    q = min(p0, 1.0 - p0)
    # P(u xor v = 1) = 2a(1-a) = q with a below
    a = 0.5 * (1.0 + np.sqrt(1.0 - 2.0 * q))
    rng = np.random.default_rng([int(config.seed), _FACTOR_TAG])
    best = None
    for _ in range(200):
        u = (rng.random(n) < a).astype(np.int64)
        v = (rng.random(n) < a).astype(np.int64)
        flips = (rng.random(n) < flip).astype(np.int64)
        rule = u ^ v
        if invert:
            rule = 1 - rule
        labels = rule ^ flips
        err = abs(labels.mean() - prevalence)
        if best is None or err < best[0]:
            best = (err, u, v, flips, labels)
        if err <= 0.05:
            break
    _, u, v, flips, labels = best
    return u, v, flips, labels


def planted_factors(config):
    """Recompute the latent factors generate_cohort used for this config.

    Returns (u, v, flips, labels); labels[i] equals the stored record
    label, u drives the tumor blob amplitude and size, v drives
    radiomics[0].
    """
    config.validate()
    return _draw_factors(config)


def _gaussian_blob(rng, shape, amplitude, sigma_frac, center_jitter, noise_sigma):
    center = 0.5 + center_jitter * rng.uniform(-1.0, 1.0, size=3)
    sigma = sigma_frac * (1.0 + 0.15 * rng.uniform(-1.0, 1.0))
    axes = [(np.arange(s) + 0.5) / s for s in shape]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    r2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    vol = amplitude * np.exp(-r2 / (2.0 * sigma**2))
    vol = vol + rng.normal(0.0, noise_sigma, size=shape)
    return vol.astype(np.float32)


def _make_record(config, index, rid, u, v, label):
    rng = np.random.default_rng([int(config.seed), _RECORD_TAG, int(index)])
    s = float(config.signal_strength)
    nl = float(config.noise_level)
    bg = 0.5 * nl

    # u modulates blob size as well as amplitude: normalization layers in
    # volume encoders largely cancel a pure amplitude scaling, so the
    # geometric channel is what keeps u recoverable at low signal strength
    grow = min(s, 2.0) * (2 * u - 1)
    amp_t = 1.0 + 0.4 * s * (2 * u - 1) + 0.2 * nl * rng.standard_normal()
    tumor = _gaussian_blob(rng, config.grid_shape, amp_t, 0.18 * (1.0 + 0.22 * grow),
                           0.08, bg)

    nodes = []
    for _ in range(3):
        amp_n = 0.8 + 0.15 * s * (2 * u - 1) + 0.1 * nl * rng.standard_normal()
        nodes.append(_gaussian_blob(rng, config.grid_shape, amp_n,
                                    0.12 * (1.0 + 0.10 * grow), 0.12, bg))

    c_dim, h_dim, r_dim = (int(d) for d in config.vector_dims)
    clinical = rng.standard_normal(c_dim)
    clinical[0] = rng.standard_normal()                      # age-like
    if c_dim > 1:
        clinical[1] = 1.0 if rng.random() < 0.83 else -1.0   # sex-like
    if c_dim > 2:
        clinical[2] = rng.integers(0, 5) / 4.0 - 0.5         # KPS-like ordinal
    latent = rng.standard_normal()
    hematology = 0.3 * latent + 0.95 * rng.standard_normal(h_dim)
    radiomics = rng.standard_normal(r_dim)
    radiomics[0] = (v - 0.5) * s + rng.normal(0.0, nl)

    return PatientRecord(
        id=rid,
        tumor_volume=tumor,
        node_volumes=nodes,
        clinical=clinical.astype(np.float32),
        hematology=hematology.astype(np.float32),
        radiomics=radiomics.astype(np.float32),
        label=int(label),
    )


def generate_cohort(config: SyntheticConfig):
    """Generate the synthetic cohort. Deterministic for a fixed seed."""
    config.validate()
    u, v, _, labels = _draw_factors(config)
    n = int(config.n_patients)
    width = max(4, len(str(n - 1)))
    cohort = []
    for i in range(n):
        rid = f"p{i:0{width}d}"
        cohort.append(_make_record(config, i, rid, int(u[i]), int(v[i]), int(labels[i])))
    return cohort


def split_folds(cohort, k, seed):
    """Rotating stratified k-fold splits.

    Test blocks partition the cohort (round-robin deal inside each
    class, so block sizes and class counts differ by at most one); the
    remainder of each fold splits train:val in 7:1 per class.
    """
    if int(k) < 2:
        raise ConfigurationError("k must be >= 2")
    k = int(k)
    if len(cohort) < 10 * k:
        raise ConfigurationError(
            f"cohort too small for {k} folds: {len(cohort)} records, need >= {10 * k}"
        )
    rng = np.random.default_rng([int(seed), _SPLIT_TAG])
    by_class = {0: [], 1: []}
    for rec in cohort:
        by_class[int(rec.label)].append(rec.id)
    dealt = []
    for label in (0, 1):
        ids = np.array(by_class[label], dtype=object)
        rng.shuffle(ids)
        dealt.extend(ids.tolist())
    groups = [[] for _ in range(k)]
    for pos, rid in enumerate(dealt):
        groups[pos % k].append(rid)

    label_of = {rec.id: int(rec.label) for rec in cohort}
    folds = []
    for j in range(k):
        test_ids = list(groups[j])
        test_set = set(test_ids)
        rest = {0: [], 1: []}
        for rid in dealt:
            if rid not in test_set:
                rest[label_of[rid]].append(rid)
        fold_rng = np.random.default_rng([int(seed), _SPLIT_TAG, j])
        train_ids, val_ids = [], []
        for label in (0, 1):
            ids = np.array(rest[label], dtype=object)
            fold_rng.shuffle(ids)
            n_val = int(round(len(ids) / 8.0))
            val_ids.extend(ids[:n_val].tolist())
            train_ids.extend(ids[n_val:].tolist())
        folds.append(FoldSplit(train_ids=train_ids, val_ids=val_ids, test_ids=test_ids))
    return folds


def augment_volume(volume, flip_prob, noise_prob, noise_sigma, rng):
    """Random axis flip then additive Gaussian noise.

    Consumes rng in a fixed order: flip coin, axis choice (only if the
    flip fires), noise coin, noise field (only if the noise fires).
    """
    for name, p in (("flip_prob", flip_prob), ("noise_prob", noise_prob)):
        if not (0.0 <= float(p) <= 1.0):
            raise ConfigurationError(f"{name} must lie in [0, 1]")
    if float(noise_sigma) < 0:
        raise ConfigurationError("noise_sigma must be >= 0")
    out = np.asarray(volume)
    dtype = out.dtype
    if rng.random() < float(flip_prob):
        axis = int(rng.integers(out.ndim))
        out = np.flip(out, axis=axis)
    if rng.random() < float(noise_prob):
        out = out + rng.normal(0.0, float(noise_sigma), size=out.shape)
    return np.ascontiguousarray(out, dtype=dtype)


def _require(condition, message):
    if not condition:
        raise CohortFormatError(message)


def save_cohort(cohort, path):
    """Write a cohort directory: JSON manifest + per-record volume blob.

    Blobs are little-endian float32, tumor volume then the three node
    volumes, C order. Vectors and labels live in the manifest; floats
    survive the JSON round trip exactly because float32 values are
    representable in the decimal repr json emits.
    """
    os.makedirs(path, exist_ok=True)
    records = []
    grid_shape = None
    vector_dims = None
    for rec in cohort:
        if len(rec.node_volumes) != 3:
            raise ConfigurationError(f"record {rec.id}: expected 3 node volumes")
        shape = tuple(rec.tumor_volume.shape)
        dims = (len(rec.clinical), len(rec.hematology), len(rec.radiomics))
        if grid_shape is None:
            grid_shape, vector_dims = shape, dims
        elif shape != grid_shape or dims != vector_dims:
            raise ConfigurationError(f"record {rec.id}: shape or vector dims differ from the rest")
        rel = os.path.join("volumes", f"{rec.id}.bin")
        blob = np.concatenate(
            [rec.tumor_volume[None]] + [v[None] for v in rec.node_volumes], axis=0
        )
        os.makedirs(os.path.join(path, "volumes"), exist_ok=True)
        with open(os.path.join(path, rel), "wb") as fh:
            fh.write(np.ascontiguousarray(blob, dtype="<f4").tobytes())
        records.append(
            {
                "id": rec.id,
                "label": int(rec.label),
                "clinical": [float(x) for x in np.asarray(rec.clinical, dtype=np.float32)],
                "hematology": [float(x) for x in np.asarray(rec.hematology, dtype=np.float32)],
                "radiomics": [float(x) for x in np.asarray(rec.radiomics, dtype=np.float32)],
                "volume_file": rel.replace(os.sep, "/"),
            }
        )
    manifest = {
        "format": COHORT_FORMAT,
        "grid_shape": list(grid_shape) if grid_shape else None,
        "vector_dims": list(vector_dims) if vector_dims else None,
        "records": records,
    }
    fd, tmp = tempfile.mkstemp(dir=path, suffix=".manifest.tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp, os.path.join(path, "manifest.json"))


def load_cohort(path):
    """Inverse of save_cohort. Parse failures name the offending record id."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise CohortFormatError(f"no manifest.json under {path}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CohortFormatError(f"manifest.json is not valid JSON: {exc}") from exc
    _require(manifest.get("format") == COHORT_FORMAT,
             f"unrecognized cohort format {manifest.get('format')!r}")
    entries = manifest.get("records")
    _require(isinstance(entries, list), "manifest has no record list")
    if not entries:
        return []
    grid_shape = tuple(int(s) for s in manifest["grid_shape"])
    c_dim, h_dim, r_dim = (int(d) for d in manifest["vector_dims"])
    voxels = int(np.prod(grid_shape))
    cohort = []
    for entry in entries:
        rid = entry.get("id", "<missing id>")
        for key in ("label", "clinical", "hematology", "radiomics", "volume_file"):
            _require(key in entry, f"record {rid}: missing field {key!r}")
        _require(entry["label"] in (0, 1), f"record {rid}: label must be 0 or 1")
        vectors = {}
        for key, dim in (("clinical", c_dim), ("hematology", h_dim), ("radiomics", r_dim)):
            vec = np.asarray(entry[key], dtype="<f4")
            _require(vec.shape == (dim,), f"record {rid}: {key} has length {vec.size}, expected {dim}")
            _require(bool(np.isfinite(vec).all()), f"record {rid}: non-finite {key} entries")
            vectors[key] = vec
        blob_path = os.path.join(path, entry["volume_file"])
        _require(os.path.exists(blob_path), f"record {rid}: volume file missing")
        raw = np.fromfile(blob_path, dtype="<f4")
        _require(raw.size == 4 * voxels,
                 f"record {rid}: volume payload has {raw.size} floats, expected {4 * voxels}")
        vols = raw.reshape((4,) + grid_shape)
        cohort.append(
            PatientRecord(
                id=str(entry["id"]),
                tumor_volume=np.ascontiguousarray(vols[0]),
                node_volumes=[np.ascontiguousarray(vols[i]) for i in (1, 2, 3)],
                clinical=vectors["clinical"],
                hematology=vectors["hematology"],
                radiomics=vectors["radiomics"],
                label=int(entry["label"]),
            )
        )
    return cohort
