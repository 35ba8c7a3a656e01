"""Datasets: synthetic multi-domain generation, binary and csv storage.

Synthetic domains share one set of class centroids; each domain sees
them through its own rotation, translation and noise, which is the
shift the clustering model has to undo. The binary container (PCDD)
round-trips float64 features bitwise.
"""

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .numkit import as_matrix, as_prob_vector, derive_rng

MAGIC = b"PCDD"
FORMAT_VERSION = 1
FLAG_LABELS = 1


@dataclass
class FeatureDataset:
    domain: str
    features: np.ndarray          # (n, d) float64
    labels: np.ndarray = None     # (n,) int64 or None
    ids: np.ndarray = None        # (n,) stable sample keys

    def __post_init__(self):
        self.features = as_matrix(self.features, "features")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ValueError("labels length does not match features")
        if self.ids is None:
            self.ids = np.arange(self.features.shape[0], dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)
            if self.ids.shape != (self.features.shape[0],):
                raise ValueError("ids length does not match features")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def class_proportions(self, k):
        if self.labels is None:
            raise ValueError("dataset has no labels")
        return np.bincount(self.labels, minlength=k) / self.n


@dataclass(frozen=True)
class SyntheticSpec:
    k: int = 5
    dim: int = 20
    n_sources: int = 3
    samples_per_domain: int = 500
    proportions: tuple = None         # None means uniform
    centroid_spread: float = 3.0
    rotation_scale: float = 0.2
    translation_scale: float = 1.0
    noise_sigma: float = 0.6
    seed: int = 0

    def validate(self):
        if self.k < 2 or self.dim < 2:
            raise ValueError("need k >= 2 and dim >= 2")
        if self.n_sources < 1:
            raise ValueError("need at least one source domain")
        if self.samples_per_domain < self.k:
            raise ValueError("need at least one sample per class")
        for name in ("centroid_spread", "rotation_scale", "translation_scale",
                     "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.proportions is not None:
            p = as_prob_vector(np.asarray(self.proportions), "proportions")
            if p.shape[0] != self.k:
                raise ValueError(
                    f"proportions has {p.shape[0]} entries for k={self.k}"
                )


def exact_counts(proportions, n):
    """Integer class counts summing to n, largest remainder rule.

    Remainder ties go to the lowest class index so the split is unique.
    """
    p = as_prob_vector(proportions, "proportions")
    raw = p * n
    counts = np.floor(raw).astype(np.int64)
    frac = raw - counts
    short = n - int(counts.sum())
    order = np.lexsort((np.arange(p.shape[0]), -frac))
    for idx in order[:short]:
        counts[idx] += 1
    return counts


def _cayley_rotation(dim, scale, rng):
    """Orthogonal matrix from a skew generator; scale 0 gives identity."""
    a = rng.normal(size=(dim, dim))
    s = scale * (a - a.T) / 2.0
    eye = np.eye(dim)
    return (eye - s) @ np.linalg.inv(eye + s)


def generate(spec):
    """Build (sources, target) domain datasets from one centroid set."""
    spec.validate()
    rng = derive_rng(spec.seed, "synthetic", "centroids")
    centroids = spec.centroid_spread * rng.normal(size=(spec.k, spec.dim))
    props = (
        np.full(spec.k, 1.0 / spec.k)
        if spec.proportions is None
        else np.asarray(spec.proportions, dtype=np.float64)
    )
    names = [f"source{i}" for i in range(spec.n_sources)] + ["target"]
    datasets = []
    for name in names:
        drng = derive_rng(spec.seed, "synthetic", "domain", name)
        rot = _cayley_rotation(spec.dim, spec.rotation_scale, drng)
        direction = drng.normal(size=spec.dim)
        shift = spec.translation_scale * direction / np.linalg.norm(direction)
        counts = exact_counts(props, spec.samples_per_domain)
        labels = np.repeat(np.arange(spec.k), counts)
        noise = drng.normal(scale=spec.noise_sigma, size=(labels.shape[0], spec.dim))
        points = (centroids[labels] + noise) @ rot.T + shift
        order = drng.permutation(labels.shape[0])
        datasets.append(FeatureDataset(name, points[order], labels[order]))
    return datasets[:-1], datasets[-1]


def subsample_imbalanced(dataset, seed, drop_fraction=0.7, k=None):
    """Thin the first floor(k/2) classes by dropping rows at random.

    Each row whose label falls in the thinned range survives an
    independent coin flip with keep probability 1 - drop_fraction, so
    the surviving class counts are binomial but fully determined by the
    seed. Kept rows retain their original ids. drop_fraction=0 returns
    the dataset unchanged.
    """
    if dataset.labels is None:
        raise ValueError("imbalanced subsampling needs labels")
    if not 0 <= drop_fraction < 1:
        raise ValueError("drop_fraction must be in [0, 1)")
    if drop_fraction == 0:
        return dataset
    if k is None:
        k = int(dataset.labels.max()) + 1
    rng = derive_rng(seed, "subsample", dataset.domain)
    draws = rng.random(dataset.n)
    thinned = dataset.labels < k // 2
    keep = ~thinned | (draws < 1.0 - drop_fraction)
    if not keep.any():
        raise ValueError("subsampling removed every row")
    return FeatureDataset(
        dataset.domain,
        dataset.features[keep],
        dataset.labels[keep],
        ids=dataset.ids[keep],
    )


def split(dataset, fraction, seed):
    """Stratified split into (first, second) with first ~= fraction.

    Per-class counts follow the largest remainder rule, so sizes are off
    by at most one sample per class from the exact fraction.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    if dataset.labels is None:
        raise ValueError("stratified split needs labels")
    rng = derive_rng(seed, "split", dataset.domain)
    take = np.zeros(dataset.n, dtype=bool)
    for cls in np.unique(dataset.labels):
        rows = np.flatnonzero(dataset.labels == cls)
        n_take = int(round(fraction * rows.shape[0]))
        chosen = rng.choice(rows, size=n_take, replace=False)
        take[chosen] = True
    first = FeatureDataset(
        dataset.domain, dataset.features[take], dataset.labels[take], dataset.ids[take]
    )
    second = FeatureDataset(
        dataset.domain, dataset.features[~take], dataset.labels[~take], dataset.ids[~take]
    )
    return first, second


# ---------------------------------------------------------------------------
# storage


def save_dataset(dataset, path):
    """Write the PCDD container; features round-trip bitwise."""
    n, d = dataset.features.shape
    flags = FLAG_LABELS if dataset.labels is not None else 0
    parts = [
        MAGIC,
        struct.pack("<IIII", FORMAT_VERSION, n, d, flags),
        np.ascontiguousarray(dataset.features, dtype="<f8").tobytes(),
    ]
    if dataset.labels is not None:
        if np.any(dataset.labels < 0):
            raise ValueError("labels must be nonnegative to serialize")
        parts.append(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_dataset(path, domain):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 20:
        raise ValueError(f"truncated header: {len(blob)} bytes")
    version, n, d, flags = struct.unpack_from("<IIII", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    off = 20
    need = n * d * 8
    if len(blob) < off + need:
        raise ValueError(
            f"truncated features at offset {off}: need {need} bytes, "
            f"have {len(blob) - off}"
        )
    feats = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off)
    feats = feats.reshape(n, d).astype(np.float64)
    off += need
    labels = None
    if flags & FLAG_LABELS:
        need = n * 4
        if len(blob) < off + need:
            raise ValueError(f"truncated labels at offset {off}")
        labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off).astype(np.int64)
        off += need
    if off != len(blob):
        raise ValueError(f"{len(blob) - off} trailing bytes after dataset")
    return FeatureDataset(domain, feats, labels)


def save_csv(dataset, path):
    """Text export with a header row; floats use repr round-tripping."""
    n, d = dataset.features.shape
    header = [f"f{i}" for i in range(d)]
    if dataset.labels is not None:
        header.append("label")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(n):
            row = [np.format_float_scientific(v, unique=True) for v in dataset.features[i]]
            if dataset.labels is not None:
                row.append(str(int(dataset.labels[i])))
            writer.writerow(row)


def load_csv(path, domain):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ValueError("empty csv file")
        has_labels = header[-1] == "label"
        width = len(header) - (1 if has_labels else 0)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"line {lineno}: expected {len(header)} fields")
            feats.append([float(v) for v in row[:width]])
            if has_labels:
                labels.append(int(row[width]))
    if not feats:
        raise ValueError("csv has no data rows")
    return FeatureDataset(
        domain,
        np.array(feats, dtype=np.float64),
        np.array(labels, dtype=np.int64) if has_labels else None,
    )
