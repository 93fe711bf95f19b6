"""Synthetic non-i.i.d. data generation, label-skew partitioning, and
dataset file loading (IDX and CSV)."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngs
from .errors import ConfigError, DataFormatError

SYNTH_KINDS = ("linear", "logistic")
SIGNAL_SCALE = 4.0       # per-coordinate scale of the ground truth; large enough
                         # margins for a pooled fit to separate cleanly
LINEAR_NOISE_STD = 0.1   # fixed observation noise for the regression tasks
IDX_UBYTE = 0x08


@dataclass(frozen=True)
class Dataset:
    """Shared feature/label arrays; clients index into these."""

    x: np.ndarray  # (N, d) float64
    y: np.ndarray  # (N,) int64 class labels or float64 targets


@dataclass(frozen=True)
class SyntheticData:
    dataset: Dataset
    partitions: list          # per-client index arrays into dataset
    thetas: np.ndarray        # (K, dim) ground-truth per-client parameters


def _sigmoid(t):
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def generate_synthetic(kind: str, num_clients: int, samples_per_client: int,
                       dim: int, heterogeneity: float, seed: int) -> SyntheticData:
    """Per-client data from client-specific ground-truth parameters.

    Client k draws labels from ``theta_k = scale * (shared + h * delta_k)``
    with standard-normal features; ``h = 0`` makes every client identical.
    Logistic labels are Bernoulli draws from the model probabilities,
    linear targets carry fixed Gaussian observation noise.
    """
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    if num_clients < 1 or samples_per_client < 1 or dim < 1:
        raise ConfigError("num_clients, samples_per_client, and dim must be positive")
    if heterogeneity < 0:
        raise ConfigError(f"heterogeneity must be >= 0, got {heterogeneity}")
    rng = rngs.stream(seed, rngs.DATA)
    shared = rng.standard_normal(dim)
    deltas = rng.standard_normal((num_clients, dim))
    thetas = SIGNAL_SCALE * (shared[None, :] + heterogeneity * deltas)
    xs, ys, partitions = [], [], []
    offset = 0
    for k in range(num_clients):
        x = rng.standard_normal((samples_per_client, dim))
        logits = x @ thetas[k]
        if kind == "logistic":
            y = (rng.random(samples_per_client) < _sigmoid(logits)).astype(np.int64)
        else:
            y = logits + LINEAR_NOISE_STD * rng.standard_normal(samples_per_client)
        xs.append(x)
        ys.append(y)
        partitions.append(np.arange(offset, offset + samples_per_client, dtype=np.int64))
        offset += samples_per_client
    dataset = Dataset(x=np.concatenate(xs), y=np.concatenate(ys))
    return SyntheticData(dataset=dataset, partitions=partitions, thetas=thetas)


def partition_by_label(labels, num_clients: int, shards_per_client: int, seed: int):
    """Classic label-skew split: sort by label, shard, deal shards at random.

    Indices are sorted by label (stable), cut into ``K * shards_per_client``
    equal shards (the remainder is dropped), and each client receives
    ``shards_per_client`` shards of a random deal. Partitions are disjoint
    by construction.
    """
    labels = np.asarray(labels)
    total_shards = num_clients * shards_per_client
    if num_clients < 1 or shards_per_client < 1:
        raise ConfigError("num_clients and shards_per_client must be positive")
    if total_shards > labels.size:
        raise ConfigError(
            f"insufficient data: {labels.size} samples cannot fill {total_shards} shards"
        )
    order = np.argsort(labels, kind="stable")
    shard_size = labels.size // total_shards
    deal = rngs.stream(seed, rngs.PARTITION).permutation(total_shards)
    partitions = []
    for k in range(num_clients):
        mine = deal[k * shards_per_client: (k + 1) * shards_per_client]
        chunks = [order[s * shard_size: (s + 1) * shard_size] for s in mine]
        partitions.append(np.sort(np.concatenate(chunks)).astype(np.int64))
    return partitions


def split_train_test(indices, holdout_frac: float, rng: np.random.Generator):
    """Shuffled holdout split with at least one sample on each side."""
    indices = np.asarray(indices)
    if indices.size < 2:
        raise ConfigError(f"cannot split a partition of {indices.size} samples")
    perm = rng.permutation(indices)
    n_test = min(perm.size - 1, max(1, int(round(holdout_frac * perm.size))))
    return perm[n_test:], perm[:n_test]


def scale_unit_interval(x) -> np.ndarray:
    """Scale byte-range features into [0, 1]; already-scaled input passes
    through unchanged, so the operation is idempotent."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and x.max() > 1.0:
        return x / 255.0
    return x


def _read_idx(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated IDX header at byte {len(raw)}")
    if raw[0] != 0 or raw[1] != 0:
        raise DataFormatError(f"{path}: bad IDX magic at byte 0")
    if raw[2] != IDX_UBYTE:
        raise DataFormatError(f"{path}: unsupported IDX type code 0x{raw[2]:02x} at byte 2")
    ndim = raw[3]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(f"{path}: truncated IDX dimensions at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - header_end != count:
        raise DataFormatError(
            f"{path}: expected {count} data bytes after offset {header_end}, "
            f"found {len(raw) - header_end}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def _labels_path_for(images_path: Path) -> Path:
    name = images_path.name.replace("images", "labels").replace("idx3", "idx1")
    if name == images_path.name:
        raise DataFormatError(
            f"{images_path}: cannot derive a labels filename (expected 'images'/'idx3' in the name)"
        )
    return images_path.with_name(name)


def _load_idx_pair(path: Path):
    images = _read_idx(path)
    if images.ndim < 2:
        raise DataFormatError(f"{path}: IDX image file must have at least 2 dimensions")
    labels_path = _labels_path_for(path)
    if not labels_path.exists():
        raise FileNotFoundError(f"labels file not found: {labels_path}")
    labels = _read_idx(labels_path)
    if labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: IDX label file must be 1-dimensional")
    if labels.shape[0] != images.shape[0]:
        raise DataFormatError(
            f"{path}: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    x = scale_unit_interval(images.reshape(images.shape[0], -1))
    return x, labels.astype(np.int64)


def _load_csv(path: Path):
    features, labels = [], []
    width = None
    with open(path, "r", encoding="ascii") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
                if width < 2:
                    raise DataFormatError(f"{path}:{lineno}: need a label and at least one feature")
            elif len(parts) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} fields, got {len(parts)}")
            try:
                row = [float(p) for p in parts]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric field") from None
            labels.append(row[0])
            features.append(row[1:])
    if not features:
        raise DataFormatError(f"{path}: no data rows")
    x = np.array(features, dtype=np.float64)
    y = np.array(labels)
    if np.all(np.isfinite(y)) and np.all(y == np.round(y)):
        y = y.astype(np.int64)
    return x, y


def load_dataset(path, format: str):
    """Load ``(features, labels)`` from disk.

    ``idx`` expects the canonical big-endian IDX layout and takes the
    images file path; the labels file is the sibling with ``images`` ->
    ``labels`` and ``idx3`` -> ``idx1`` substituted. Pixel bytes are scaled
    to [0, 1]. ``csv`` expects headerless numeric rows with the label
    first.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    if format == "idx":
        return _load_idx_pair(path)
    if format == "csv":
        return _load_csv(path)
    raise ConfigError(f"unknown dataset format {format!r}; expected 'idx' or 'csv'")
