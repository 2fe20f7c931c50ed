"""KNN evaluation over extracted features, plus the feature file formats.

Binary feature file (little-endian)::

    b"FEATS1"
    u32 M, u32 D
    M x (u32 label, D x f32 features)

The CSV alternative has a header ``id,label,f0,...,f{D-1}``.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

FEATS_MAGIC = b"FEATS1"
DEFAULT_K = 20

PathLike = Union[str, Path]


@dataclass
class FeatureSet:
    features: np.ndarray  # (M, D) float32
    labels: np.ndarray  # (M,) int
    ids: Optional[list[str]] = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be (M, D), got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows")
        if self.ids is None:
            self.ids = [str(i) for i in range(len(self.labels))]
        if len(self.ids) != len(self.labels):
            raise ValueError("ids and labels differ in length")
        if not np.isfinite(self.features).all():
            raise ValueError("feature matrix contains non-finite entries")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def to_bytes(self) -> bytes:
        m, d = self.features.shape
        rows = np.zeros(m, dtype=[("label", "<u4"), ("x", "<f4", (d,))])
        rows["label"] = self.labels
        rows["x"] = self.features
        return FEATS_MAGIC + struct.pack("<II", m, d) + rows.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FeatureSet":
        if blob[:6] != FEATS_MAGIC:
            raise ValueError("not a FEATS1 file")
        if len(blob) < 14:
            raise ValueError("truncated feature file header")
        m, d = struct.unpack_from("<II", blob, 6)
        dtype = np.dtype([("label", "<u4"), ("x", "<f4", (d,))])
        if len(blob) != 14 + m * dtype.itemsize:
            raise ValueError(f"expected {14 + m * dtype.itemsize} bytes, found {len(blob)}")
        rows = np.frombuffer(blob, dtype=dtype, count=m, offset=14)
        return cls(rows["x"].reshape(m, d).copy(), rows["label"].astype(np.int64))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "label"] + [f"f{j}" for j in range(self.dim)])
        for ident, label, row in zip(self.ids, self.labels, self.features):
            # repr of a float32 round-trips exactly
            writer.writerow([ident, int(label)] + [repr(float(x)) for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FeatureSet":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header[:2] != ["id", "label"]:
            raise ValueError("feature CSV must start with id,label columns")
        ids, labels, rows = [], [], []
        for rec in reader:
            ids.append(rec[0])
            labels.append(int(rec[1]))
            rows.append([float(x) for x in rec[2:]])
        features = np.asarray(rows, dtype=np.float32).reshape(len(rows), len(header) - 2)
        return cls(features, np.asarray(labels), ids)

    def save(self, path: PathLike) -> None:
        path = Path(path)
        if path.suffix.lower() == ".csv":
            path.write_text(self.to_csv())
        else:
            path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: PathLike) -> "FeatureSet":
        path = Path(path)
        blob = path.read_bytes()
        if blob.startswith(FEATS_MAGIC):
            return cls.from_bytes(blob)
        return cls.from_csv(blob.decode("utf-8"))


def knn_classify(train: FeatureSet, query: np.ndarray, k: int = DEFAULT_K) -> int:
    """Majority vote of the ``k`` nearest training rows (Euclidean).

    Distance ties go to the lower row index; vote ties to the smaller label.
    ``k`` larger than the training set uses every row.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (train.dim,):
        raise ValueError(f"query has shape {query.shape}, expected ({train.dim},)")
    diff = train.features.astype(np.float64) - query
    dist = np.einsum("ij,ij->i", diff, diff)
    nearest = np.argsort(dist, kind="stable")[:k]
    votes = np.bincount(train.labels[nearest])
    return int(np.argmax(votes))


def knn_predict(train: FeatureSet, queries: np.ndarray, k: int = DEFAULT_K) -> np.ndarray:
    return np.array([knn_classify(train, q, k) for q in np.asarray(queries)], dtype=np.int64)


def metrics(predictions: Sequence[int], labels: Sequence[int], num_classes: Optional[int] = None) -> dict[str, float]:
    """Accuracy, balanced accuracy (mean recall over classes present in
    ``labels``) and support-weighted F1."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions for {true.size} labels")
    if true.size == 0:
        raise ValueError("no samples")
    if num_classes is None:
        num_classes = int(max(pred.max(), true.max())) + 1
    if min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)

    present = support > 0
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=present)
    denom = support + predicted
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return {
        "accuracy": float(tp.sum() / true.size),
        "balanced_accuracy": float(recall[present].mean()),
        "weighted_f1": float((f1 * support).sum() / support.sum()),
    }
