"""Synthetic data, label-skew partitioning and CSV ingestion.

A client's shard is built from two parts: ``(1 - pi)`` of its samples come
from a single *home* label and the remaining ``pi`` fraction is dealt from
the other classes. ``pi = 1`` is the IID case, where every shard gets an
equal share of every class.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.model_selection import train_test_split

from .exceptions import DataParseError, PartitionError, SchemaError

__all__ = [
    "Dataset",
    "ClientShard",
    "PartitionSpec",
    "gen_synthetic_classification",
    "partition_heterogeneous",
    "partition_manifest",
    "split_train_test",
    "load_csv_dataset",
    "save_csv_dataset",
]


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled samples: ``features`` is ``(n, m)``, ``labels`` are ints in ``[0, n_classes)``."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError("labels must be 1-D with one entry per feature row")
        if X.shape[0] == 0:
            raise ValueError("dataset must contain at least one sample")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite values")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("labels must be integers")
        y = y.astype(np.int64)
        if self.n_classes < 1 or y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True, eq=False)
class ClientShard:
    """One client's local data together with its aggregation weight ``q_k = D_k / D``."""

    dataset: Dataset
    client_id: int
    weight: float
    home_label: Optional[int] = None
    indices: Optional[np.ndarray] = None
    # (wanted_label, used_label, count) for home samples taken from another class
    substitutions: tuple = field(default_factory=tuple)

    @property
    def size(self) -> int:
        return self.dataset.n


@dataclass(frozen=True)
class PartitionSpec:
    K: int
    pi: float
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError("pi must lie in [0, 1]")


def gen_synthetic_classification(n, m, C, separation, seed) -> Dataset:
    """Draw ``n`` samples from ``C`` unit-variance Gaussian clusters in ``m`` dimensions.

    Each class mean sits at distance ``separation`` from the origin along its
    own direction (orthonormal directions when ``m >= C``, random unit
    directions otherwise). Labels are balanced to within one sample.
    """
    if n <= 0 or m <= 0 or C <= 0:
        raise ValueError("n, m and C must be positive")
    if n < C:
        raise ValueError("n must be at least C")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    if m >= C:
        directions = np.eye(C, m)
    else:
        directions = rng.standard_normal((C, m))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(n) % C)
    means = separation * directions
    X = means[labels] + rng.standard_normal((n, m))
    return Dataset(X, labels, C)


def split_train_test(ds: Dataset, test_fraction, seed):
    """Stratified held-out split; returns ``(train, test)``."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    idx = np.arange(ds.n)
    counts = ds.class_counts()
    stratify = ds.labels if counts[counts > 0].min() >= 2 else None
    train_idx, test_idx = train_test_split(
        idx, test_size=test_fraction, random_state=seed % (2**32), stratify=stratify
    )
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(test_idx))


def _shard_sizes(n, K):
    base, extra = divmod(n, K)
    return [base + (1 if k < extra else 0) for k in range(K)]


def _iid_assignment(ds, K, rng):
    # stratified deal: every class is spread round-robin over the clients
    order = np.concatenate(
        [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.n_classes)]
    )
    owners = np.arange(ds.n) % K
    return [np.sort(order[owners == k]) for k in range(K)]


def partition_heterogeneous(ds: Dataset, spec: PartitionSpec, strict=False):
    """Split ``ds`` across ``spec.K`` clients with label skew controlled by ``spec.pi``.

    Client ``k`` has home label ``k mod C``. When a home label runs out, the
    shortfall is filled from the most plentiful remaining class and logged in
    ``ClientShard.substitutions``; with ``strict=True`` a
    :class:`PartitionError` is raised instead.
    """
    K, pi, C = spec.K, float(spec.pi), ds.n_classes
    if ds.n < K:
        raise ValueError(f"dataset has {ds.n} samples, fewer than K={K} clients")
    rng = np.random.default_rng(spec.seed)
    sizes = _shard_sizes(ds.n, K)
    homes = [k % C for k in range(K)]

    if pi == 1.0:
        members = _iid_assignment(ds, K, rng)
        subs = [() for _ in range(K)]
        homes = [None] * K
    else:
        pools = [list(rng.permutation(np.flatnonzero(ds.labels == c))) for c in range(C)]
        members = [[] for _ in range(K)]
        subs = [[] for _ in range(K)]
        # home portions first so that shared draws cannot starve a home label
        for k in range(K):
            need = int(math.floor((1.0 - pi) * sizes[k] + 0.5))
            take = min(need, len(pools[homes[k]]))
            members[k].extend(pools[homes[k]][:take])
            del pools[homes[k]][:take]
            short = need - take
            if short and strict:
                raise PartitionError(
                    f"class {homes[k]} has too few samples for client {k}'s home portion "
                    f"({take} of {need})",
                    label=homes[k],
                )
            while short:
                donor = int(np.argmax([len(p) for p in pools]))
                got = min(short, len(pools[donor]))
                members[k].extend(pools[donor][:got])
                del pools[donor][:got]
                subs[k].append((homes[k], donor, got))
                short -= got
        leftover = np.array([i for p in pools for i in p], dtype=np.int64)
        leftover = leftover[rng.permutation(leftover.size)]
        need = np.array([sizes[k] - len(members[k]) for k in range(K)])
        home_arr = np.array(homes)
        for i in leftover:
            lab = ds.labels[i]
            eligible = (need > 0) & (home_arr != lab)
            if not eligible.any():
                eligible = need > 0
            cand = np.flatnonzero(eligible)
            k = cand[np.argmax(need[cand])]
            members[k].append(int(i))
            need[k] -= 1
        members = [np.sort(np.asarray(mb, dtype=np.int64)) for mb in members]
        subs = [tuple(s) for s in subs]

    shards = []
    for k in range(K):
        idx = members[k]
        shards.append(
            ClientShard(
                dataset=ds.subset(idx),
                client_id=k,
                weight=idx.size / ds.n,
                home_label=homes[k],
                indices=_frozen(idx),
                substitutions=subs[k],
            )
        )
    return shards


def partition_manifest(shards) -> list:
    """JSON-ready description of a partition, one dict per client."""
    return [
        {
            "client_id": s.client_id,
            "size": s.size,
            "home_label": s.home_label,
            "class_histogram": s.dataset.class_counts().tolist(),
        }
        for s in shards
    ]


def load_csv_dataset(
    path,
    label_column: str,
    feature_columns: Optional[Sequence[str]] = None,
    normalize: bool = False,
    n_classes: Optional[int] = None,
) -> Dataset:
    """Read a headered UTF-8 CSV into a :class:`Dataset`.

    ``feature_columns`` defaults to every column except the label. Row numbers
    in error messages count data rows from 1 (the header is not counted).
    With ``normalize=True`` each feature is min-max scaled to ``[0, 1]``;
    constant columns map to 0.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: file is empty") from None
        if label_column not in header:
            raise SchemaError(f"{path}: missing label column {label_column!r}")
        if feature_columns is None:
            feature_columns = [h for h in header if h != label_column]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing feature column(s) {missing}")
        li = header.index(label_column)
        fi = [header.index(c) for c in feature_columns]

        X, y = [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataParseError(
                    f"{path}: row {row_no} has {len(row)} fields, expected {len(header)}",
                    row=row_no,
                )
            try:
                label = int(row[li])
            except ValueError:
                raise DataParseError(
                    f"{path}: row {row_no}, column {label_column!r}: "
                    f"cannot parse label {row[li]!r} as an integer",
                    row=row_no,
                    column=label_column,
                ) from None
            vals = []
            for j, name in zip(fi, feature_columns):
                try:
                    vals.append(float(row[j]))
                except ValueError:
                    raise DataParseError(
                        f"{path}: row {row_no}, column {name!r}: cannot parse {row[j]!r} as a number",
                        row=row_no,
                        column=name,
                    ) from None
            X.append(vals)
            y.append(label)
    if not y:
        raise SchemaError(f"{path}: no data rows")
    X = np.asarray(X, dtype=np.float64).reshape(len(y), len(fi))
    y = np.asarray(y, dtype=np.int64)
    if y.min() < 0:
        raise DataParseError(f"{path}: labels must be non-negative", column=label_column)
    if normalize:
        lo, hi = X.min(axis=0), X.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        X = (X - lo) / span
    C = int(y.max()) + 1 if n_classes is None else int(n_classes)
    return Dataset(X, y, C)


def save_csv_dataset(ds: Dataset, path, label_column="label", feature_names=None):
    """Write ``ds`` as CSV; floats use ``repr`` so a reload is lossless."""
    if feature_names is None:
        feature_names = [f"x{j}" for j in range(ds.m)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(feature_names) + [label_column])
        for row, lab in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
