"""Synthetic datasets, benchmark allocations and CSV round-tripping."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .numerics import seeded_rng

ALLOCATION_KINDS = (
    "extended-data",
    "extended-class",
    "enlarged-backbone-data",
    "enlarged-backbone-class",
)


@dataclass
class LabeledDataset:
    """Feature rows with integer labels.

    ``labels`` are dense in ``[0, class_count)``.  ``source_classes[k]`` is the
    original class id behind dense label ``k`` (identity unless the set was
    re-indexed by an extended-class allocation).
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    source_classes: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features must be N x d with one label per row")
        if self.source_classes is None:
            self.source_classes = np.arange(self.class_count, dtype=np.int64)
        self.source_classes = np.asarray(self.source_classes, dtype=np.int64)
        if len(self.source_classes) != self.class_count:
            raise DataError("source_classes must have one entry per class")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def source_labels(self) -> np.ndarray:
        """Labels expressed as original class ids."""
        return self.source_classes[self.labels]

    def validate(self) -> "LabeledDataset":
        if len(self) == 0:
            raise DataError("empty dataset")
        if np.any(self.labels < 0) or np.any(self.labels >= self.class_count):
            raise DataError(f"label outside [0, {self.class_count})")
        if len(np.unique(self.labels)) != self.class_count:
            raise DataError("every class id must appear at least once")
        if not np.all(np.isfinite(self.features)):
            raise DataError("non-finite feature values")
        return self

    def subset(self, rows) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(
            self.features[rows], self.labels[rows], self.class_count, self.source_classes
        )


def gen_synthetic(
    n_classes: int, n_per_class: int, d_in: int, spread: float, seed: int
) -> LabeledDataset:
    """Gaussian blobs of scale ``spread`` around random unit-sphere anchors."""
    if n_classes < 2 or n_per_class < 2 or d_in < 1:
        raise ConfigError("need at least 2 classes, 2 samples per class and d_in >= 1")
    if spread < 0:
        raise ConfigError("spread must be non-negative")
    rng = seeded_rng(seed, "synthetic")
    anchors = rng.standard_normal((n_classes, d_in))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    noise = rng.standard_normal((len(labels), d_in))
    features = anchors[labels] + spread * noise
    return LabeledDataset(features, labels, n_classes)


@dataclass(frozen=True)
class AllocationSpec:
    kind: str = "extended-data"
    fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ALLOCATION_KINDS:
            raise ConfigError(f"unknown allocation kind {self.kind!r}; choose from {ALLOCATION_KINDS}")
        if not 0.0 < self.fraction < 1.0:
            raise ConfigError("allocation fraction must lie in (0, 1)")

    @property
    def by_class(self) -> bool:
        return self.kind.endswith("class")

    @property
    def enlarged_backbone(self) -> bool:
        return self.kind.startswith("enlarged-backbone")


def _canonical_order(ds: LabeledDataset, rows: np.ndarray) -> np.ndarray:
    """Sort row indices by (label, feature bytes) so selection ignores input order."""
    keys = [(int(ds.labels[r]), ds.features[r].tobytes()) for r in rows]
    order = sorted(range(len(rows)), key=keys.__getitem__)
    return rows[np.array(order, dtype=np.int64)]


def allocate(ds: LabeledDataset, spec: AllocationSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Split into (old_train, new_train); new_train is always the full set."""
    rng = seeded_rng(spec.seed, f"allocate/{spec.kind}")
    if spec.by_class:
        n_old = int(np.floor(spec.fraction * ds.class_count))
        if n_old < 1:
            raise ConfigError("fraction keeps no classes for the old model")
        old_classes = np.sort(rng.permutation(ds.class_count)[:n_old])
        remap = np.full(ds.class_count, -1, dtype=np.int64)
        remap[old_classes] = np.arange(n_old)
        rows = np.flatnonzero(remap[ds.labels] >= 0)
        rows = _canonical_order(ds, rows)
        old = LabeledDataset(
            ds.features[rows], remap[ds.labels[rows]], n_old, ds.source_classes[old_classes]
        )
    else:
        picked = []
        for k in range(ds.class_count):
            rows = _canonical_order(ds, np.flatnonzero(ds.labels == k))
            keep = int(np.floor(spec.fraction * len(rows)))
            if keep < 1:
                raise ConfigError(
                    f"fraction {spec.fraction} keeps no sample of class {k} ({len(rows)} rows)"
                )
            picked.append(np.sort(rows[rng.permutation(len(rows))[:keep]]))
        old = ds.subset(np.concatenate(picked))
    return old, ds


def split_eval(
    ds: LabeledDataset, queries_per_class: int, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Pick ``queries_per_class`` query rows per class; the rest is the gallery."""
    if queries_per_class < 1:
        raise ConfigError("queries_per_class must be >= 1")
    rng = seeded_rng(seed, "split_eval")
    query_rows = []
    for k in range(ds.class_count):
        rows = np.flatnonzero(ds.labels == k)
        if len(rows) <= queries_per_class:
            raise DataError(
                f"class {k} has {len(rows)} samples; need more than {queries_per_class}"
            )
        query_rows.append(rows[rng.permutation(len(rows))[:queries_per_class]])
    q = np.sort(np.concatenate(query_rows))
    mask = np.ones(len(ds), dtype=bool)
    mask[q] = False
    return ds.subset(q), ds.subset(np.flatnonzero(mask))


def holdout_split(
    ds: LabeledDataset, eval_per_class: int, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Reserve ``eval_per_class`` rows per class for retrieval evaluation."""
    evaluation, train = split_eval(ds, eval_per_class, seed + 1)
    return train, evaluation


def write_csv(ds: LabeledDataset, path) -> None:
    Path(path).write_text(dumps_csv(ds), newline="")


def dumps_csv(ds: LabeledDataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label"] + [f"f{j}" for j in range(ds.dim)])
    for label, row in zip(ds.source_labels, ds.features):
        writer.writerow([int(label)] + [repr(float(v)) for v in row])
    return buf.getvalue()


def read_csv(path) -> LabeledDataset:
    with open(path, newline="") as fh:
        return loads_csv(fh.read())


def loads_csv(text: str) -> LabeledDataset:
    """Parse ``label,f0,f1,...`` rows; labels are original class ids.

    Labels are re-indexed densely in sorted order; the original ids survive
    in ``source_classes``.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("missing header row") from None
    if not header or header[0] != "label":
        raise DataError("header must start with 'label'")
    width = len(header)
    labels, rows = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataError(f"line {lineno}: expected {width} columns, got {len(row)}")
        try:
            label = int(row[0])
            values = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        if label < 0:
            raise DataError(f"line {lineno}: negative label")
        labels.append(label)
        rows.append(values)
    if not labels:
        raise DataError("dataset file has no data rows")
    source = np.unique(labels)
    dense = np.searchsorted(source, labels)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), width - 1)
    if not np.all(np.isfinite(features)):
        raise DataError("non-finite feature values")
    return LabeledDataset(features, dense, len(source), source)
