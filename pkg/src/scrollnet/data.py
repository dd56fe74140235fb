"""Task-stream construction: class-incremental splits, synthetic streams, loaders.

A task stream is an ordered list of (train, test) dataset pairs with
pairwise-disjoint global class sets. Labels inside a task are head-local;
each task records the global class behind every local label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ParseError


@dataclass
class LabeledDataset:
    samples: np.ndarray            # (n, d) or (n, C, H, W), float64
    labels: np.ndarray             # (n,), int64
    num_classes: int
    mean: np.ndarray | None = None  # normalization stats applied, if any
    std: np.ndarray | None = None

    def __len__(self):
        return len(self.samples)

    def subset(self, indices, labels=None, num_classes=None):
        return LabeledDataset(
            samples=self.samples[indices],
            labels=self.labels[indices] if labels is None else labels,
            num_classes=self.num_classes if num_classes is None else num_classes,
            mean=self.mean,
            std=self.std,
        )


@dataclass
class Task:
    task_id: int
    train: LabeledDataset   # labels are head-local
    test: LabeledDataset
    classes: tuple          # global class per local label


@dataclass
class TaskStream:
    tasks: list
    class_order: np.ndarray
    num_classes_total: int

    def __len__(self):
        return len(self.tasks)

    @property
    def input_shape(self):
        return self.tasks[0].train.samples.shape[1:]

    def global_label(self, task_id, local_label):
        return self.tasks[task_id].classes[local_label]


def _make_dataset(samples, labels, num_classes, mean=None, std=None):
    return LabeledDataset(
        samples=np.asarray(samples, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        num_classes=num_classes,
        mean=mean,
        std=std,
    )


def split_classes(train, test, num_tasks, seed=0):
    """Partition classes into contiguous groups of a seeded permutation.

    When the class count is not divisible by the task count, the earlier
    tasks receive one extra class each.
    """
    k = train.num_classes
    if num_tasks > k:
        raise ConfigError(f"cannot split {k} classes into {num_tasks} tasks")
    order = np.random.default_rng(seed).permutation(k)
    base, extra = divmod(k, num_tasks)
    tasks, start = [], 0
    for t in range(num_tasks):
        size = base + (1 if t < extra else 0)
        group = tuple(int(c) for c in order[start:start + size])
        start += size
        local = np.full(k, -1, dtype=np.int64)
        for j, c in enumerate(group):
            local[c] = j
        tr_idx = np.flatnonzero(np.isin(train.labels, group))
        te_idx = np.flatnonzero(np.isin(test.labels, group))
        tasks.append(Task(
            task_id=t,
            train=train.subset(tr_idx, labels=local[train.labels[tr_idx]],
                               num_classes=size),
            test=test.subset(te_idx, labels=local[test.labels[te_idx]],
                             num_classes=size),
            classes=group,
        ))
    return TaskStream(tasks=tasks, class_order=order, num_classes_total=k)


def synthetic_gaussian_tasks(classes_per_task, tasks, dim, separation, seed=0,
                             train_per_class=200, test_per_class=100):
    """Isotropic Gaussian classes with means on a sphere of radius ``separation``.

    Train and test splits are drawn i.i.d. from the same class
    distributions. ``separation=0`` makes every class identical (chance-level
    streams for negative controls).
    """
    if separation < 0:
        raise InputError(f"separation must be >= 0, got {separation}")
    rng = np.random.default_rng(seed)
    k = classes_per_task * tasks
    means = []
    for _ in range(k):
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
        means.append(separation * v / norm if norm > 0 else np.zeros(dim))
    out = []
    for t in range(tasks):
        group = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        tr_x, tr_y, te_x, te_y = [], [], [], []
        for local, gc in enumerate(group):
            tr_x.append(rng.standard_normal((train_per_class, dim)) + means[gc])
            tr_y.append(np.full(train_per_class, local, dtype=np.int64))
            te_x.append(rng.standard_normal((test_per_class, dim)) + means[gc])
            te_y.append(np.full(test_per_class, local, dtype=np.int64))
        out.append(Task(
            task_id=t,
            train=_make_dataset(np.concatenate(tr_x), np.concatenate(tr_y),
                                classes_per_task),
            test=_make_dataset(np.concatenate(te_x), np.concatenate(te_y),
                               classes_per_task),
            classes=group,
        ))
    return TaskStream(tasks=out, class_order=np.arange(k),
                      num_classes_total=k)


def normalize_dataset(dataset, stats=None):
    """Zero-mean unit-variance per channel (images) or per feature (flat).

    With ``stats`` given, applies those instead of computing new ones, which
    is how test splits reuse training-split statistics.
    """
    x = dataset.samples
    axes = tuple(i for i in range(x.ndim) if i != 1) if x.ndim == 4 else (0,)
    if stats is None:
        mean = x.mean(axis=axes)
        std = x.std(axis=axes)
        std = np.where(std == 0.0, 1.0, std)
    else:
        mean, std = stats
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    dataset.samples = (x - mean.reshape(shape)) / std.reshape(shape)
    dataset.mean = mean
    dataset.std = std
    return dataset


def _parse_csv(path, has_header):
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if lineno == 1 and has_header:
                continue
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
                if width < 2:
                    raise ParseError("rows need at least one feature and a label",
                                     line=lineno)
            elif len(parts) != width:
                raise ParseError(
                    f"row has {len(parts)} columns, expected {width}", line=lineno)
            try:
                values = [float(v) for v in parts]
            except ValueError:
                raise ParseError(f"non-numeric value in row: {line!r}", line=lineno)
            label = values[-1]
            if label != int(label) or label < 0:
                raise ParseError(f"label {label!r} is not a nonnegative integer",
                                 line=lineno)
            rows.append((values[:-1], int(label)))
    if not rows:
        raise ParseError("no data rows", line=1)
    samples = np.array([r[0] for r in rows], dtype=np.float64)
    labels = np.array([r[1] for r in rows], dtype=np.int64)
    return samples, labels


IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _parse_idx_images(path):
    data = open(path, "rb").read()
    if len(data) < 16:
        raise ParseError("image file shorter than its header", offset=len(data))
    magic = int.from_bytes(data[0:4], "big")
    if magic != IDX_IMAGE_MAGIC:
        raise ParseError(f"bad image magic 0x{magic:08x}", offset=0)
    n = int.from_bytes(data[4:8], "big")
    h = int.from_bytes(data[8:12], "big")
    w = int.from_bytes(data[12:16], "big")
    expected = 16 + n * h * w
    if len(data) != expected:
        raise ParseError(f"expected {expected} bytes, found {len(data)}",
                         offset=len(data))
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16)
    return pixels.reshape(n, 1, h, w).astype(np.float64) / 255.0


def _parse_idx_labels(path, n_expected):
    data = open(path, "rb").read()
    if len(data) < 8:
        raise ParseError("label file shorter than its header", offset=len(data))
    magic = int.from_bytes(data[0:4], "big")
    if magic != IDX_LABEL_MAGIC:
        raise ParseError(f"bad label magic 0x{magic:08x}", offset=0)
    n = int.from_bytes(data[4:8], "big")
    if n != n_expected:
        raise ParseError(f"label count {n} != image count {n_expected}", offset=4)
    if len(data) != 8 + n:
        raise ParseError(f"expected {8 + n} bytes, found {len(data)}",
                         offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)


def load_dataset(path, format, labels_path=None, has_header=False,
                 normalize=True, stats=None):
    """Load a CSV (final column = integer label) or IDX image/label file pair.

    Parsing is atomic: any malformed content raises before a dataset is
    built. Normalization uses the file's own statistics unless ``stats`` is
    given (pass the training split's ``(mean, std)`` when loading test data).
    """
    if format == "csv":
        samples, labels = _parse_csv(path, has_header)
    elif format == "idx-image":
        if labels_path is None:
            raise InputError("idx-image format requires labels_path")
        samples = _parse_idx_images(path)
        labels = _parse_idx_labels(labels_path, len(samples))
    else:
        raise InputError(f"unknown dataset format {format!r}")
    num_classes = int(labels.max()) + 1 if len(labels) else 0
    ds = _make_dataset(samples, labels, num_classes)
    if normalize:
        normalize_dataset(ds, stats=stats)
    return ds
