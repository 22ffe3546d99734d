"""ECG preprocessing: resampling, baseline removal, smoothing and segmentation.

The chain applied to every lead is

    1000 Hz -> 250 Hz -> two-stage median baseline removal (125, 249)
    -> Savitzky-Golay (order 3, frame 15) -> 64 Hz -> 196-sample windows

and the windows of leads II, III and aVF taken at the same position form one
3 x 196 sample.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage, signal

from .ingest import REQUIRED_LEADS, EcgRecord, Label, MissingLead, Patient, PatientSet

log = logging.getLogger(__name__)


class EmptyInput(ValueError):
    pass


class EvenWindow(ValueError):
    pass


class BadFrame(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    fs_in: float = 1000
    fs_mid: float = 250
    fs_out: float = 64
    median_w1: int = 125
    median_w2: int = 249
    sg_order: int = 3
    sg_frame: int = 15
    segment_len: int = 196

    def __post_init__(self):
        if self.median_w1 % 2 == 0 or self.median_w2 % 2 == 0:
            raise EvenWindow("median windows must be odd")
        if self.sg_frame % 2 == 0 or self.sg_frame <= self.sg_order:
            raise BadFrame("sg_frame must be odd and larger than sg_order")
        if self.segment_len <= 0:
            raise ValueError("segment_len must be positive")
        if not self.fs_in > self.fs_mid > self.fs_out > 0:
            raise ValueError("need fs_in > fs_mid > fs_out > 0")


@dataclass
class Sample:
    x: np.ndarray          # (3, segment_len), leads II, III, aVF
    label: int
    patient_id: str
    record_name: str
    segment_index: int


# ---------------------------------------------------------------------------
# stages

def resample(x: np.ndarray, p: int, q: int) -> np.ndarray:
    """Rational resampling by ``p/q`` with a Kaiser-windowed sinc polyphase filter.

    Output length is ``ceil(len(x) * p / q)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("cannot resample an empty series")
    if p < 1 or q < 1 or math.gcd(p, q) != 1:
        raise ValueError(f"p={p}, q={q} must be coprime positive integers")
    if p == q == 1:
        return x.copy()
    return signal.resample_poly(x, p, q, window=("kaiser", 5.0))


def rate_ratio(fs_from: float, fs_to: float) -> tuple[int, int]:
    r = Fraction(fs_to).limit_denominator(10**6) / Fraction(fs_from).limit_denominator(10**6)
    return r.numerator, r.denominator


def _lower_median(values: np.ndarray) -> float:
    k = len(values)
    return float(np.partition(values, (k - 1) // 2)[(k - 1) // 2])


def median_filter(x: np.ndarray, w: int) -> np.ndarray:
    """Sliding median over a centred window of odd width ``w``.

    Near the ends the window is truncated to the available samples; an even
    number of samples takes the lower median.
    """
    if w < 1 or w % 2 == 0:
        raise EvenWindow(f"median window must be odd and positive, got {w}")
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if w == 1 or n == 0:
        return x.copy()
    h = w // 2
    out = ndimage.median_filter(x, size=w, mode="nearest")
    for i in range(min(h, n)):
        out[i] = _lower_median(x[: min(n, i + h + 1)])
    for i in range(max(n - h, h), n):
        out[i] = _lower_median(x[max(0, i - h):])
    return out


def remove_baseline(x: np.ndarray, w1: int, w2: int) -> np.ndarray:
    baseline = median_filter(median_filter(x, w1), w2)
    return np.asarray(x, dtype=np.float64) - baseline


def _poly_projection(positions: np.ndarray, order: int, scale: float) -> np.ndarray:
    """Rows map window samples to the least-squares polynomial value at each position."""
    u = positions / scale
    vander = np.vander(u, order + 1, increasing=True)
    return vander @ np.linalg.pinv(vander)


def savgol_coeffs(order: int, frame: int) -> np.ndarray:
    """Smoothing kernel for the centre of a ``frame``-point window."""
    if frame % 2 == 0 or frame <= order:
        raise BadFrame(f"frame {frame} must be odd and larger than order {order}")
    h = frame // 2
    pos = np.arange(-h, h + 1, dtype=np.float64)
    return _poly_projection(pos, order, max(h, 1))[h]


def savgol(x: np.ndarray, order: int, frame: int) -> np.ndarray:
    """Savitzky-Golay smoothing.

    Interior points use the symmetric kernel. The first and last ``frame // 2``
    points take the value of the polynomial fitted to the ``frame`` samples at
    that end of the series, so polynomials up to ``order`` pass unchanged
    everywhere.
    """
    c = savgol_coeffs(order, frame)
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    h = frame // 2
    if n == 0:
        return x.copy()
    if n < frame:
        deg = min(order, n - 1)
        pos = np.arange(n, dtype=np.float64) - (n - 1) / 2
        return _poly_projection(pos, deg, max((n - 1) / 2, 1.0)) @ x

    out = np.empty(n)
    out[h:n - h] = np.correlate(x, c, mode="valid")
    edge = _poly_projection(np.arange(frame, dtype=np.float64) - h, order, max(h, 1))
    out[:h] = edge[:h] @ x[:frame]
    out[n - h:] = edge[frame - h:] @ x[n - frame:]
    return out


def segment(x: np.ndarray, seg_len: int) -> list[np.ndarray]:
    if seg_len < 1:
        raise ValueError("seg_len must be >= 1")
    n = len(x) // seg_len
    return [np.asarray(x[i * seg_len:(i + 1) * seg_len]) for i in range(n)]


def expected_sample_count(n: int, cfg: PipelineConfig = PipelineConfig()) -> int:
    p1, q1 = rate_ratio(cfg.fs_in, cfg.fs_mid)
    p2, q2 = rate_ratio(cfg.fs_mid, cfg.fs_out)
    mid = -(-n * p1 // q1)
    out = -(-mid * p2 // q2)
    return out // cfg.segment_len


def preprocess_lead(x: np.ndarray, cfg: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """Run one lead through the chain up to (not including) segmentation."""
    p1, q1 = rate_ratio(cfg.fs_in, cfg.fs_mid)
    p2, q2 = rate_ratio(cfg.fs_mid, cfg.fs_out)
    y = resample(x, p1, q1)
    y = remove_baseline(y, cfg.median_w1, cfg.median_w2)
    y = savgol(y, cfg.sg_order, cfg.sg_frame)
    return resample(y, p2, q2)


def make_samples(record: EcgRecord, cfg: PipelineConfig = PipelineConfig()) -> list[Sample]:
    leads = {k.lower(): v for k, v in record.leads.items()}
    missing = [n for n in REQUIRED_LEADS if n not in leads]
    if missing:
        raise MissingLead(f"record {record.record_name} lacks leads {missing}")
    if record.sampling_rate != cfg.fs_in:
        raise ValueError(f"record {record.record_name} is at {record.sampling_rate} Hz, "
                         f"pipeline expects {cfg.fs_in} Hz")
    label = int(Label.from_diagnosis(record.diagnosis))
    if record.n_samples == 0 or expected_sample_count(record.n_samples, cfg) == 0:
        return []
    segs = [segment(preprocess_lead(leads[n], cfg), cfg.segment_len) for n in REQUIRED_LEADS]
    return [
        Sample(np.stack(parts), label, record.patient_id, record.record_name, k)
        for k, parts in enumerate(zip(*segs))
    ]


def samples_for_patients(patients: PatientSet | Iterable[Patient],
                         cfg: PipelineConfig = PipelineConfig()) -> list[Sample]:
    out = []
    for patient in patients:
        for rec in patient.records:
            out.extend(make_samples(rec, cfg))
    return out


def stack_samples(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.x for s in samples]).astype(np.float64)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# dataset files: JSON manifest + flat little-endian float32 blob

def save_dataset(path: str | Path, samples: Sequence[Sample], meta: dict | None = None) -> Path:
    """Write ``<path>`` (manifest) and ``<path>`` with suffix ``.f32`` (blob).

    Each sample takes ``3 * segment_len`` floats, lead-major; ``offset`` in the
    manifest is the byte offset of the sample in the blob.
    """
    path = Path(path)
    blob_path = path.with_suffix(".f32")
    entries = []
    seg_len = samples[0].x.shape[1] if samples else 0
    stride = 3 * seg_len * 4
    with open(blob_path, "wb") as fh:
        for i, s in enumerate(samples):
            if s.x.shape != (3, seg_len):
                raise ValueError(f"sample {i} has shape {s.x.shape}")
            fh.write(np.ascontiguousarray(s.x, dtype="<f4").tobytes())
            entries.append({"patient_id": s.patient_id, "record": s.record_name,
                            "segment_index": s.segment_index, "label": int(s.label),
                            "offset": i * stride})
    manifest = {"format": "imicnn-dataset", "version": 1, "n_leads": 3,
                "segment_len": seg_len, "dtype": "float32-le", "blob": blob_path.name,
                "meta": meta or {}, "samples": entries}
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(path: str | Path) -> tuple[list[Sample], dict]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    seg_len = int(manifest["segment_len"])
    blob = np.fromfile(path.parent / manifest["blob"], dtype="<f4")
    per = 3 * seg_len
    samples = []
    for e in manifest["samples"]:
        start = e["offset"] // 4
        chunk = blob[start:start + per]
        if chunk.size != per:
            raise ValueError(f"dataset blob truncated at sample {e['record']}:{e['segment_index']}")
        samples.append(Sample(chunk.reshape(3, seg_len).astype(np.float64), int(e["label"]),
                              e["patient_id"], e["record"], int(e["segment_index"])))
    return samples, manifest


def config_dict(cfg: PipelineConfig) -> dict:
    return asdict(cfg)
