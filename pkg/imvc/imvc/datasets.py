"""
Multi-view datasets with an availability mask: loading from CSV, synthetic
Gaussian generation, missing-ratio masks and per-view normalisation.
"""
from dataclasses import asdict, dataclass, field
import json
import math
import os
import re

import numpy as np
import pandas as pd
from sklearn.preprocessing import MinMaxScaler
import torch
from torch.utils.data import Dataset

from .base import ConfigError, DataError, MetadataBase

MASK_FILE = "mask.csv"
LABELS_FILE = "labels.txt"
SPEC_FILE = "spec.json"
_VIEW_FILE = re.compile(r"view_(\d+)\.csv$")


def view_file(v):
    return f"view_{v}.csv"


@dataclass
class ViewBatch:
    indices: torch.Tensor
    views: list
    mask: torch.Tensor

    def __len__(self):
        return len(self.indices)


class ViewDataset(MetadataBase, Dataset):
    """
    V views of the same N samples. mask[i, v] == 1 iff sample i is observed in
    view v; unobserved rows are zero-padded.

    Items are sample indices; `collate` slices every view by the same index
    batch so rows stay aligned across views.
    """
    def __init__(self, views, mask=None, labels=None):
        self.views = [np.asarray(x, dtype=np.float64) for x in views]
        n = len(self.views[0]) if self.views else 0
        self.mask = (
            np.ones((n, len(self.views)), dtype=np.int64)
            if mask is None
            else np.asarray(mask, dtype=np.int64)
        )
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self._tensors = None

    @property
    def n(self):
        return len(self.mask)

    @property
    def v_count(self):
        return len(self.views)

    @property
    def dims(self):
        return [x.shape[1] for x in self.views]

    @property
    def observed_counts(self):
        return self.mask.sum(axis=0).tolist()

    def validate(self):
        if not self.views:
            raise DataError("dataset has no views")
        for v, x in enumerate(self.views):
            if x.ndim != 2:
                raise DataError(f"view {v} is not a matrix")
            if len(x) != self.n:
                raise DataError(f"view {v} has {len(x)} rows, expected {self.n}")
            if not np.isfinite(x).all():
                raise DataError(f"view {v} contains non-finite values")
        if self.mask.shape != (self.n, self.v_count):
            raise DataError(f"mask shape {self.mask.shape} != {(self.n, self.v_count)}")
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError("mask entries must be 0 or 1")
        empty = np.flatnonzero(self.mask.sum(axis=1) == 0)
        if len(empty):
            raise DataError(f"sample observed in no view (row {empty[0]})")
        for v, x in enumerate(self.views):
            if np.any(x[self.mask[:, v] == 0] != 0):
                raise DataError(f"view {v} has non-zero values in missing rows")
        if self.labels is not None and len(self.labels) != self.n:
            raise DataError(f"{len(self.labels)} labels for {self.n} samples")
        return self

    def tensors(self):
        if self._tensors is None:
            self._tensors = (
                [torch.from_numpy(x) for x in self.views],
                torch.from_numpy(self.mask.astype(np.float64)),
            )
        return self._tensors

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        return i

    def collate(self, indices):
        idx = torch.as_tensor(indices, dtype=torch.long)
        views, mask = self.tensors()
        return ViewBatch(idx, [x[idx] for x in views], mask[idx])

    def full_batch(self):
        return self.collate(list(range(self.n)))

    def get_metadata(self):
        return super().get_metadata() | {
            "n": self.n,
            "v_count": self.v_count,
            "dims": self.dims,
            "observed_counts": self.observed_counts,
        }


@dataclass
class SyntheticSpec:
    n: int = 300
    v_count: int = 2
    k: int = 3
    latent_dim: int = 4
    view_dims: list = field(default_factory=lambda: [20, 12])
    separation: float = 6.0
    noise: float = 0.1
    seed: int = 0

    def validate(self):
        if self.n < 1 or self.v_count < 1 or self.latent_dim < 1:
            raise ConfigError("n, v_count and latent_dim must be positive")
        if self.k < 1:
            raise ConfigError(f"k must be positive, got {self.k}")
        if len(self.view_dims) != self.v_count or min(self.view_dims) < 1:
            raise ConfigError(f"need {self.v_count} positive view dims, got {self.view_dims}")
        if self.separation <= 0:
            raise ConfigError("separation must be positive")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        return self

    def to_dict(self):
        return asdict(self)


def synthesize(spec: SyntheticSpec) -> ViewDataset:
    """
    Draws N points from k unit-variance Gaussians whose centres are pairwise
    `separation` apart (when latent_dim >= k), and maps them into every view by
    an independent random linear map plus Gaussian noise.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    labels = rng.permutation(np.arange(spec.n) % spec.k)
    if spec.latent_dim >= spec.k:
        centers = np.eye(spec.k, spec.latent_dim)
    else:
        centers = rng.standard_normal((spec.k, spec.latent_dim))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= spec.separation / math.sqrt(2)
    z = centers[labels] + rng.standard_normal((spec.n, spec.latent_dim))

    views = []
    for d in spec.view_dims:
        projection = rng.standard_normal((spec.latent_dim, d)) / math.sqrt(spec.latent_dim)
        views.append(z @ projection + spec.noise * rng.standard_normal((spec.n, d)))

    return ViewDataset(views, labels=labels).validate()


def generate_mask(n, v_count, eta, seed, max_attempts=1000):
    """
    Removes round(eta * n) rows from every view while keeping each sample in
    at least one view. Views are masked in turn, drawing only from rows that
    can still spare a view; a draw that runs out of such rows is restarted.
    """
    if not 0 <= eta < 1:
        raise ConfigError(f"missing ratio must be in [0, 1), got {eta}")
    drop = int(math.floor(eta * n + 0.5))
    if drop * v_count > n * (v_count - 1):
        raise ConfigError(
            f"missing ratio {eta} removes {drop * v_count} entries but at most "
            f"{n * (v_count - 1)} can go while keeping one view per sample"
        )

    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        mask = np.ones((n, v_count), dtype=np.int64)
        for v in range(v_count):
            spare = np.flatnonzero(mask.sum(axis=1) >= 2)
            if len(spare) < drop:
                break
            mask[rng.choice(spare, size=drop, replace=False), v] = 0
        else:
            return mask
    raise ConfigError(f"could not draw a mask for missing ratio {eta} in {max_attempts} attempts")


def apply_mask(dataset: ViewDataset, mask) -> ViewDataset:
    mask = np.asarray(mask, dtype=np.int64)
    views = [np.where(mask[:, [v]] == 1, x, 0.0) for v, x in enumerate(dataset.views)]
    return ViewDataset(views, mask, dataset.labels).validate()


def normalize(dataset: ViewDataset) -> ViewDataset:
    """
    Min-max scales every feature column to [0, 1] using observed rows only.
    Missing rows stay zero and constant columns map to zero.
    """
    views = []
    for v, x in enumerate(dataset.views):
        observed = dataset.mask[:, v] == 1
        scaled = np.zeros_like(x)
        if observed.any():
            scaled[observed] = MinMaxScaler().fit_transform(x[observed])
        views.append(scaled)
    return ViewDataset(views, dataset.mask, dataset.labels).validate()


def _read_matrix(path, dtype=np.float64):
    try:
        return pd.read_csv(path, header=None).to_numpy(dtype=dtype)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file")
    except (pd.errors.EmptyDataError, pd.errors.ParserError, ValueError) as e:
        raise DataError(f"{path}: {e}")


def load_views(paths, mask_path=None, labels_path=None) -> ViewDataset:
    if not paths:
        raise DataError("no view files given")
    views = [_read_matrix(p) for p in paths]
    n = len(views[0])
    for p, x in zip(paths, views):
        if len(x) != n:
            raise DataError(f"{p} has {len(x)} rows, expected {n}")

    if mask_path is None:
        mask = np.ones((n, len(views)), dtype=np.int64)
    else:
        raw = _read_matrix(mask_path)
        if raw.shape != (n, len(views)):
            raise DataError(f"{mask_path}: mask shape {raw.shape}, expected {(n, len(views))}")
        if not np.isin(raw, (0, 1)).all():
            raise DataError(f"{mask_path}: mask entries must be 0 or 1")
        mask = raw.astype(np.int64)
        empty = np.flatnonzero(mask.sum(axis=1) == 0)
        if len(empty):
            raise DataError(f"{mask_path}: sample observed in no view (row {empty[0]})")

    labels = None
    if labels_path is not None:
        labels = _read_matrix(labels_path, dtype=np.int64).reshape(-1)

    views = [np.where(mask[:, [v]] == 1, x, 0.0) for v, x in enumerate(views)]
    return ViewDataset(views, mask, labels).validate()


@dataclass
class DataSources:
    """
    File locations of a dataset on disk.
    """
    views: list
    mask: str = None
    labels: str = None

    @classmethod
    def from_dir(cls, directory):
        if not os.path.isdir(directory):
            raise DataError(f"{directory}: no such data directory")
        found = sorted(
            (int(m.group(1)), name)
            for name in os.listdir(directory)
            if (m := _VIEW_FILE.match(name))
        )
        if not found:
            raise DataError(f"{directory}: no view_<v>.csv files")
        views = [os.path.join(directory, name) for _, name in found]
        mask = os.path.join(directory, MASK_FILE)
        labels = os.path.join(directory, LABELS_FILE)
        return cls(
            views,
            mask if os.path.exists(mask) else None,
            labels if os.path.exists(labels) else None,
        )

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"views", "mask", "labels"}
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        return cls(list(d["views"]), d.get("mask"), d.get("labels"))

    def load(self) -> ViewDataset:
        return load_views(self.views, self.mask, self.labels)

    def to_dict(self):
        return asdict(self)


def export_dataset(dataset: ViewDataset, directory, spec: SyntheticSpec = None, eta=None):
    """
    Writes view_<v>.csv, mask.csv, labels.txt and (for synthetic data) a
    spec.json sidecar.
    """
    os.makedirs(directory, exist_ok=True)
    for v, x in enumerate(dataset.views):
        pd.DataFrame(x).to_csv(os.path.join(directory, view_file(v)), header=False, index=False)
    pd.DataFrame(dataset.mask).to_csv(os.path.join(directory, MASK_FILE), header=False, index=False)
    if dataset.labels is not None:
        write_labels(os.path.join(directory, LABELS_FILE), dataset.labels)
    if spec is not None:
        with open(os.path.join(directory, SPEC_FILE), "w") as f:
            json.dump(spec.to_dict() | {"eta": eta}, f, indent=2, sort_keys=True)
            f.write("\n")
    return DataSources.from_dir(directory)


def write_labels(path, labels):
    with open(path, "w") as f:
        f.writelines(f"{int(y)}\n" for y in labels)


def read_labels(path):
    return _read_matrix(path, dtype=np.int64).reshape(-1)
