"""Separability of learned features: geometric separability index and
mean within-class Euclidean distance over the GAP-layer outputs."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import Sample, stack_samples
from .nn import ModelParams, ShapeMismatch, predict_proba


class TooFewVectors(ValueError):
    pass


class DuplicateConflict(UserWarning):
    pass


@dataclass
class FeatureSet:
    vectors: np.ndarray    # (N, L)
    labels: np.ndarray     # (N,) in {0, 1}

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.vectors.shape[0] != self.labels.shape[0]:
            raise ShapeMismatch(f"{self.vectors.shape[0]} vectors, {self.labels.shape[0]} labels")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return self.vectors.shape[0]


def extract_features(samples: Sequence[Sample], params: ModelParams,
                     batch_size: int = 256) -> FeatureSet:
    x, y = stack_samples(samples)
    if x.shape[1] != len(params.arch.leads):
        raise ShapeMismatch(f"samples have {x.shape[1]} leads, model expects "
                            f"{len(params.arch.leads)}")
    _, feats = predict_proba(x, params, batch_size)
    return FeatureSet(feats, y)


def nearest_neighbors(vectors: np.ndarray, chunk: int | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Index of and distance to each vector's nearest other vector (lowest index on ties)."""
    X = np.asarray(vectors, dtype=np.float64)
    n = X.shape[0]
    if chunk is None:
        chunk = max(1, int(2e7 // max(1, n * X.shape[1])))
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    for s in range(0, n, chunk):
        block = X[s:s + chunk]
        d2 = np.sum((block[:, None, :] - X[None, :, :]) ** 2, axis=-1)
        rows = np.arange(len(block))
        d2[rows, s + rows] = np.inf
        j = np.argmin(d2, axis=1)
        idx[s:s + chunk] = j
        dist[s:s + chunk] = np.sqrt(d2[rows, j])
    return idx, dist


def gsi(fs: FeatureSet) -> float:
    """Fraction of vectors whose nearest neighbour carries the same label."""
    if len(fs) < 2:
        raise TooFewVectors("GSI needs at least two vectors")
    nn_idx, nn_dist = nearest_neighbors(fs.vectors)
    same = fs.labels[nn_idx] == fs.labels
    conflicts = int(np.sum((nn_dist == 0) & ~same))
    if conflicts:
        warnings.warn(f"{conflicts} vectors coincide with a vector of the other class",
                      DuplicateConflict, stacklevel=2)
    # (f(x) + f(x') + 1) mod 2 is 1 exactly when the labels agree
    return float(np.sum((fs.labels + fs.labels[nn_idx] + 1) % 2)) / len(fs)


def intra_class_distance(fs: FeatureSet, k: int) -> float:
    """Mean Euclidean distance over unordered pairs of class-``k`` vectors."""
    X = fs.vectors[fs.labels == k]
    n = X.shape[0]
    if n < 2:
        raise TooFewVectors(f"class {k} has {n} vector(s); need 2")
    total = 0.0
    for i in range(n - 1):
        total += float(np.sum(np.sqrt(np.sum((X[i + 1:] - X[i]) ** 2, axis=1))))
    return total / (n * (n - 1) / 2)


@dataclass
class QualityReport:
    gsi: float
    d_hc: float
    d_imi: float
    n_hc: int
    n_imi: int

    def as_dict(self) -> dict:
        return {"gsi": self.gsi, "d_e_hc": self.d_hc, "d_e_imi": self.d_imi,
                "n_hc": self.n_hc, "n_imi": self.n_imi}

    def table(self, method: str = "CNN") -> str:
        from .evaluate import format_table
        return format_table(["Method", "GSI", "D_E^HC", "D_E^IMI"],
                            [[method, f"{self.gsi:.4f}", f"{self.d_hc:.2f}",
                              f"{self.d_imi:.2f}"]])


def quality_report(fs: FeatureSet) -> QualityReport:
    return QualityReport(gsi(fs), intra_class_distance(fs, 0), intra_class_distance(fs, 1),
                         int(np.sum(fs.labels == 0)), int(np.sum(fs.labels == 1)))


def save_features(path: str | Path, fs: FeatureSet, samples: Sequence[Sample] | None = None,
                  meta: dict | None = None) -> Path:
    """Write a JSON manifest and an (N, L) little-endian float32 matrix next to it."""
    path = Path(path)
    blob = path.with_suffix(".f32")
    np.ascontiguousarray(fs.vectors, dtype="<f4").tofile(blob)
    rows = []
    for i, lab in enumerate(fs.labels):
        row = {"row": i, "label": int(lab)}
        if samples is not None:
            s = samples[i]
            row.update(patient_id=s.patient_id, record=s.record_name,
                       segment_index=s.segment_index)
        rows.append(row)
    manifest = {"format": "imicnn-features", "version": 1, "n": len(fs),
                "dim": int(fs.vectors.shape[1]), "dtype": "float32-le", "blob": blob.name,
                "meta": meta or {}, "rows": rows}
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_features(path: str | Path) -> FeatureSet:
    path = Path(path)
    manifest = json.loads(path.read_text())
    data = np.fromfile(path.parent / manifest["blob"], dtype="<f4")
    vectors = data.reshape(manifest["n"], manifest["dim"]).astype(np.float64)
    return FeatureSet(vectors, [r["label"] for r in manifest["rows"]])
