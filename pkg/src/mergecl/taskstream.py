"""Class-incremental task streams: synthetic Gaussian blobs plus CSV ingestion.

CSV dataset format: header-less UTF-8 rows "label,f1,...,fd" with '.'
decimals and '\\n' line endings.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import CsvParseError, InputError

TEST_FRACTION = 0.2


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray            # (N, d) float64
    labels: np.ndarray              # (N,) int64
    class_set: tuple[int, ...]      # sorted distinct ids

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        labs = np.array(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labs.ndim != 1 or feats.shape[0] != labs.shape[0]:
            raise InputError(f"features {feats.shape} and labels {labs.shape} must pair up")
        if feats.shape[0] < 1:
            raise InputError("dataset must contain at least one sample")
        cset = tuple(sorted(int(c) for c in set(self.class_set)))
        if not set(labs.tolist()) <= set(cset):
            raise InputError("every label must belong to class_set")
        feats.flags.writeable = False
        labs.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)
        object.__setattr__(self, "class_set", cset)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class StreamConfig:
    num_tasks: int
    classes_per_task: int
    samples_per_class: int
    feature_dim: int
    class_separation: float
    within_class_std: float
    seed: int = 0

    def __post_init__(self):
        if self.num_tasks < 1 or self.classes_per_task < 1 or self.feature_dim < 1:
            raise InputError("num_tasks, classes_per_task and feature_dim must be >= 1")
        if self.samples_per_class < 2:
            raise InputError("samples_per_class must be >= 2 (train/test split needs both sides)")
        if self.class_separation <= 0 or self.within_class_std <= 0:
            raise InputError("class_separation and within_class_std must be > 0")
        if self.seed < 0:
            raise InputError("seed must be a nonnegative integer")


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[tuple[LabeledDataset, LabeledDataset], ...]   # (train, test) per task

    def __post_init__(self):
        seen: set[int] = set()
        for train, test in self.tasks:
            if train.class_set != test.class_set:
                raise InputError("train/test of a task must share the same class_set")
            if seen.intersection(train.class_set):
                raise InputError("class sets must be pairwise disjoint across tasks")
            seen.update(train.class_set)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def all_classes(self) -> tuple[int, ...]:
        out: list[int] = []
        for train, _ in self.tasks:
            out.extend(train.class_set)
        return tuple(out)


def _split_indices(n: int, seed_key: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 80/20 split: rank per-index scores, lowest go to test."""
    scores = np.random.default_rng(seed_key).random(n)
    n_test = max(1, int(round(TEST_FRACTION * n)))
    order = np.argsort(scores, kind="stable")
    test = np.sort(order[:n_test])
    train = np.sort(order[n_test:])
    return train, test


def gen_gaussian_stream(config: StreamConfig) -> TaskStream:
    """Isotropic Gaussian blob per class, means uniform on a sphere.

    Every draw is keyed on (seed, purpose, class_id), so the stream is a
    pure function of the config and stable under iteration order.
    """
    mean_rng = np.random.default_rng((config.seed, 101))
    n_classes = config.num_tasks * config.classes_per_task
    means = []
    for _ in range(n_classes):
        v = mean_rng.normal(size=config.feature_dim)
        means.append(config.class_separation * v / np.linalg.norm(v))
    tasks = []
    for t in range(config.num_tasks):
        class_ids = range(t * config.classes_per_task, (t + 1) * config.classes_per_task)
        tr_f, tr_l, te_f, te_l = [], [], [], []
        for cid in class_ids:
            rng = np.random.default_rng((config.seed, 211, cid))
            samples = means[cid] + config.within_class_std * rng.normal(
                size=(config.samples_per_class, config.feature_dim)
            )
            tr_idx, te_idx = _split_indices(config.samples_per_class, (config.seed, 307, cid))
            tr_f.append(samples[tr_idx])
            te_f.append(samples[te_idx])
            tr_l.extend([cid] * len(tr_idx))
            te_l.extend([cid] * len(te_idx))
        cset = tuple(class_ids)
        tasks.append(
            (
                LabeledDataset(np.concatenate(tr_f), np.array(tr_l), cset),
                LabeledDataset(np.concatenate(te_f), np.array(te_l), cset),
            )
        )
    return TaskStream(tuple(tasks))


def save_csv_dataset(dataset: LabeledDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for label, row in zip(dataset.labels, dataset.features):
            fh.write(f"{int(label)}," + ",".join(format(v, ".17g") for v in row) + "\n")


def save_csv_stream(stream: TaskStream, path) -> None:
    """Write every task's train and test rows (in task order) to one CSV."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for train, test in stream:
            for ds in (train, test):
                for label, row in zip(ds.labels, ds.features):
                    fh.write(f"{int(label)}," + ",".join(format(v, ".17g") for v in row) + "\n")


def load_csv_dataset(path) -> LabeledDataset:
    """Parse a header-less "label,f1,...,fd" CSV into one dataset."""
    labels: list[int] = []
    rows: list[list[float]] = []
    width = None
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record:
                continue
            if len(record) < 2:
                raise CsvParseError(f"line {lineno}: expected 'label,f1,...,fd', got {len(record)} fields")
            if width is None:
                width = len(record)
            elif len(record) != width:
                raise CsvParseError(f"line {lineno}: expected {width} fields, got {len(record)}")
            try:
                labels.append(int(record[0]))
            except ValueError:
                raise CsvParseError(f"line {lineno}: label {record[0]!r} is not an integer") from None
            try:
                rows.append([float(v) for v in record[1:]])
            except ValueError:
                bad = next(v for v in record[1:] if not _is_float(v))
                raise CsvParseError(f"line {lineno}: feature {bad!r} is not a number") from None
    if not rows:
        raise CsvParseError("line 1: file contains no data rows")
    feats = np.array(rows)
    labs = np.array(labels)
    return LabeledDataset(feats, labs, tuple(sorted(set(labels))))


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def load_csv_stream(path, task_partition, *, split_seed: int = 0) -> TaskStream:
    """Partition a CSV's rows by class into tasks.

    Each class is split 80/20 into train/test by the same deterministic
    index-scoring rule the generator uses, keyed on split_seed.
    """
    whole = load_csv_dataset(path)
    partition = [tuple(int(c) for c in group) for group in task_partition]
    flat = [c for group in partition for c in group]
    if len(set(flat)) != len(flat):
        raise InputError("task_partition groups must be disjoint")
    missing = set(whole.class_set) - set(flat)
    if missing:
        raise InputError(f"labels {sorted(missing)} are outside the task partition")
    tasks = []
    for group in partition:
        tr_f, tr_l, te_f, te_l = [], [], [], []
        for cid in group:
            idx = np.flatnonzero(whole.labels == cid)
            if idx.size == 0:
                raise InputError(f"partition names class {cid} but the file has no such rows")
            tr_idx, te_idx = _split_indices(idx.size, (split_seed, 307, cid))
            tr_f.append(whole.features[idx[tr_idx]])
            te_f.append(whole.features[idx[te_idx]])
            tr_l.extend([cid] * len(tr_idx))
            te_l.extend([cid] * len(te_idx))
        tasks.append(
            (
                LabeledDataset(np.concatenate(tr_f), np.array(tr_l), group),
                LabeledDataset(np.concatenate(te_f), np.array(te_l), group),
            )
        )
    return TaskStream(tuple(tasks))


def frozen_feature_projection(
    stream: TaskStream, proj_dim: int, seed: int, *, matrix: np.ndarray | None = None
) -> TaskStream:
    """Replace features with tanh(R x) for one fixed random R shared by all tasks.

    `matrix` overrides the seeded draw (test hook for the identity case).
    """
    if proj_dim < 1:
        raise InputError("proj_dim must be >= 1")
    d = stream[0][0].features.shape[1]
    if matrix is None:
        R = np.random.default_rng((seed, 401)).normal(0.0, 1.0 / np.sqrt(d), size=(proj_dim, d))
    else:
        R = np.asarray(matrix, dtype=np.float64)
        if R.shape != (proj_dim, d):
            raise InputError(f"projection matrix must be ({proj_dim}, {d}), got {R.shape}")
    tasks = []
    for train, test in stream:
        tasks.append(
            tuple(
                LabeledDataset(np.tanh(ds.features @ R.T), ds.labels, ds.class_set)
                for ds in (train, test)
            )
        )
    return TaskStream(tuple(tasks))
