"""Reading PTB-style WFDB records and building labelled patient sets.

Only what the PTB diagnostic database needs is supported: single-segment
records whose signals are all stored in WFDB format 16 (interleaved
little-endian signed 16-bit) in one ``.dat`` file.
"""
from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

REQUIRED_LEADS = ("ii", "iii", "avf")
DEFAULT_LOCALIZATIONS = ("inferior",)
# WFDB: a zero or missing ADC gain means "uncalibrated", nominally 200 units/mV
DEFAULT_GAIN = 200.0


class WfdbError(ValueError):
    pass


class MalformedHeader(WfdbError):
    pass


class UnsupportedFormat(WfdbError):
    pass


class LengthMismatch(WfdbError):
    pass


class MissingLead(KeyError):
    pass


class ConflictingLabels(ValueError):
    def __init__(self, patient_id: str):
        super().__init__(f"patient {patient_id!r} has records with different diagnoses")
        self.patient_id = patient_id


class Diagnosis(enum.Enum):
    HEALTHY_CONTROL = "HealthyControl"
    INFERIOR_MI = "InferiorMI"
    OTHER = "Other"


class Label(enum.IntEnum):
    HC = 0
    IMI = 1

    @classmethod
    def from_diagnosis(cls, diagnosis: Diagnosis) -> "Label":
        if diagnosis is Diagnosis.HEALTHY_CONTROL:
            return cls.HC
        if diagnosis is Diagnosis.INFERIOR_MI:
            return cls.IMI
        raise ValueError(f"no binary label for diagnosis {diagnosis}")

    def to_diagnosis(self) -> Diagnosis:
        return Diagnosis.INFERIOR_MI if self is Label.IMI else Diagnosis.HEALTHY_CONTROL


@dataclass(frozen=True)
class SignalSpec:
    lead_name: str
    file_name: str
    storage_format: str
    gain: float
    baseline: int


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    sampling_rate: float
    n_samples: int
    signal_specs: tuple[SignalSpec, ...]
    comments: tuple[str, ...] = ()


@dataclass
class EcgRecord:
    patient_id: str
    record_name: str
    sampling_rate: float
    leads: dict[str, np.ndarray]
    diagnosis: Diagnosis = Diagnosis.OTHER

    def __post_init__(self):
        lengths = {len(v) for v in self.leads.values()}
        if len(lengths) > 1:
            raise ValueError(f"record {self.record_name}: lead lengths differ {sorted(lengths)}")

    @property
    def n_samples(self) -> int:
        return len(next(iter(self.leads.values()))) if self.leads else 0


@dataclass(frozen=True)
class Patient:
    patient_id: str
    records: tuple[EcgRecord, ...]
    label: Label


@dataclass(frozen=True)
class PatientSet:
    patients: tuple[Patient, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    @property
    def records(self) -> list[EcgRecord]:
        return [r for p in self.patients for r in p.records]


# ---------------------------------------------------------------------------
# header / signal parsing

_GAIN_RE = re.compile(r"^(?P<gain>[-+0-9.eE]+)?(?:\((?P<baseline>[-+]?\d+)\))?(?:/(?P<units>.*))?$")


def _parse_record_line(tokens: list[str]) -> tuple[str, int, float, int]:
    if len(tokens) < 2:
        raise MalformedHeader("record line needs at least a name and a signal count")
    name = tokens[0]
    if "/" in name:
        raise UnsupportedFormat(f"multi-segment record {name!r} is not supported")
    try:
        n_signals = int(tokens[1])
        fs = float(tokens[2].split("/")[0]) if len(tokens) > 2 else 250.0
        n_samples = int(tokens[3]) if len(tokens) > 3 else -1
    except ValueError as exc:
        raise MalformedHeader(f"bad record line {' '.join(tokens)!r}") from exc
    if n_signals < 1:
        raise MalformedHeader(f"record declares {n_signals} signals")
    if fs <= 0:
        raise MalformedHeader(f"non-positive sampling rate {fs}")
    if n_samples < 0:
        raise MalformedHeader("record line lacks the number of samples per signal")
    return name, n_signals, fs, n_samples


def _parse_signal_line(tokens: list[str], index: int) -> SignalSpec:
    if len(tokens) < 2:
        raise MalformedHeader(f"signal line {index} is truncated")
    file_name, fmt = tokens[0], tokens[1]
    if fmt != "16":
        raise UnsupportedFormat(f"signal {index}: storage format {fmt!r} (only 16 is supported)")

    gain, baseline = DEFAULT_GAIN, None
    if len(tokens) > 2:
        m = _GAIN_RE.match(tokens[2])
        if m is None:
            raise MalformedHeader(f"signal {index}: bad gain field {tokens[2]!r}")
        if m["gain"]:
            gain = float(m["gain"]) or DEFAULT_GAIN
        if m["baseline"] is not None:
            baseline = int(m["baseline"])
    adc_zero = 0
    if len(tokens) > 4:
        try:
            adc_zero = int(tokens[4])
        except ValueError as exc:
            raise MalformedHeader(f"signal {index}: bad ADC zero {tokens[4]!r}") from exc
    if baseline is None:
        baseline = adc_zero
    description = " ".join(tokens[8:]) if len(tokens) > 8 else f"sig{index}"
    return SignalSpec(description, file_name, fmt, gain, baseline)


def parse_header(payload: bytes | str) -> RecordHeader:
    """Parse the text of a WFDB ``.hea`` file.

    Comment lines (first non-blank character ``#``) are kept verbatim, in order.
    """
    text = payload.decode("latin-1") if isinstance(payload, (bytes, bytearray)) else payload
    comments: list[str] = []
    content: list[list[str]] = []
    for raw in text.splitlines():
        line = raw.rstrip("\r\n")
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            comments.append(line)
            continue
        content.append(stripped.split())

    if not content:
        raise MalformedHeader("header has no record line")
    name, n_signals, fs, n_samples = _parse_record_line(content[0])
    spec_lines = content[1:]
    if len(spec_lines) != n_signals:
        raise MalformedHeader(
            f"header declares {n_signals} signals but has {len(spec_lines)} signal lines")
    specs = tuple(_parse_signal_line(t, i) for i, t in enumerate(spec_lines))
    return RecordHeader(name, n_signals, fs, n_samples, specs, tuple(comments))


def deinterleave(payload: bytes, n_signals: int) -> np.ndarray:
    """Format-16 bytes to an int16 array of shape (n_samples, n_signals)."""
    if len(payload) % (2 * n_signals):
        raise LengthMismatch(
            f"{len(payload)} octets is not a whole number of {n_signals}-signal frames")
    return np.frombuffer(payload, dtype="<i2").reshape(-1, n_signals)


def interleave(raw: np.ndarray) -> bytes:
    """Inverse of :func:`deinterleave`; ``raw`` has shape (n_samples, n_signals)."""
    return np.ascontiguousarray(raw, dtype="<i2").tobytes()


def read_signals(header: RecordHeader, payload: bytes) -> dict[str, np.ndarray]:
    """Decode a format-16 payload into physical units (mV), keyed by lowercase lead name."""
    for spec in header.signal_specs:
        if spec.storage_format != "16":
            raise UnsupportedFormat(f"storage format {spec.storage_format!r}")
    expected = header.n_signals * header.n_samples * 2
    if len(payload) != expected:
        raise LengthMismatch(f"expected {expected} octets, got {len(payload)}")
    raw = deinterleave(payload, header.n_signals)
    out = {}
    for j, spec in enumerate(header.signal_specs):
        out[spec.lead_name.lower()] = (raw[:, j].astype(np.float64) - spec.baseline) / spec.gain
    return out


def select_leads(leads: Mapping[str, np.ndarray], names: Sequence[str] = REQUIRED_LEADS):
    lookup = {k.lower(): v for k, v in leads.items()}
    missing = [n for n in names if n.lower() not in lookup]
    if missing:
        raise MissingLead(f"missing leads {missing}; have {sorted(lookup)}")
    return {n.lower(): lookup[n.lower()] for n in names}


# ---------------------------------------------------------------------------
# labels

def _comment_value(comments: Iterable[str], key: str) -> str | None:
    key = key.lower()
    for c in comments:
        body = c.strip().lstrip("#").strip()
        if body.lower().startswith(key):
            return body[len(key):].strip()
    return None


def classify_diagnosis(comments: Sequence[str],
                       localizations: Iterable[str] = DEFAULT_LOCALIZATIONS) -> Diagnosis:
    """Map PTB header comments to HealthyControl / InferiorMI / Other.

    A record is InferiorMI when the admission reason mentions myocardial
    infarction and the localization comment equals (case-insensitively) one of
    ``localizations``.
    """
    reason = _comment_value(comments, "reason for admission:")
    if reason is None:
        return Diagnosis.OTHER
    reason = reason.lower()
    if "healthy control" in reason:
        return Diagnosis.HEALTHY_CONTROL
    if "myocardial infarction" in reason:
        where = _comment_value(comments, "acute infarction (localization):")
        wanted = {s.strip().lower() for s in localizations}
        if where is not None and where.lower() in wanted:
            return Diagnosis.INFERIOR_MI
    return Diagnosis.OTHER


def build_patient_set(records: Iterable[EcgRecord]) -> PatientSet:
    grouped: dict[str, list[EcgRecord]] = {}
    for rec in records:
        if rec.diagnosis is Diagnosis.OTHER:
            raise ValueError(f"record {rec.record_name} has diagnosis Other")
        grouped.setdefault(rec.patient_id, []).append(rec)
    patients = []
    for pid in sorted(grouped):
        recs = grouped[pid]
        if len({r.diagnosis for r in recs}) > 1:
            raise ConflictingLabels(pid)
        patients.append(Patient(pid, tuple(recs), Label.from_diagnosis(recs[0].diagnosis)))
    return PatientSet(tuple(patients))


# ---------------------------------------------------------------------------
# files on disk

def read_record(hea_path: str | Path, patient_id: str | None = None,
                localizations: Iterable[str] = DEFAULT_LOCALIZATIONS,
                leads: Sequence[str] | None = REQUIRED_LEADS) -> EcgRecord:
    hea_path = Path(hea_path)
    header = parse_header(hea_path.read_bytes())
    files = {s.file_name for s in header.signal_specs}
    if len(files) != 1:
        raise UnsupportedFormat(f"{hea_path}: signals spread over {len(files)} files")
    payload = (hea_path.parent / files.pop()).read_bytes()
    signals = read_signals(header, payload)
    if leads is not None:
        signals = select_leads(signals, leads)
    return EcgRecord(
        patient_id=patient_id or hea_path.parent.name,
        record_name=header.record_name,
        sampling_rate=header.sampling_rate,
        leads=signals,
        diagnosis=classify_diagnosis(header.comments, localizations),
    )


def scan_directory(data_dir: str | Path,
                   localizations: Iterable[str] = DEFAULT_LOCALIZATIONS) -> list[EcgRecord]:
    """Read every ``.hea`` under ``data_dir`` and keep the HC / IMI records.

    The patient id is the name of the directory holding the header (PTB layout
    ``patientNNN/sNNNN_re.hea``); headers at the top level use their record name.
    """
    data_dir = Path(data_dir)
    localizations = tuple(localizations)
    kept = []
    for hea in sorted(data_dir.rglob("*.hea")):
        pid = hea.parent.name if hea.parent != data_dir else hea.stem
        header = parse_header(hea.read_bytes())
        diagnosis = classify_diagnosis(header.comments, localizations)
        if diagnosis is Diagnosis.OTHER:
            log.debug("skipping %s (%s)", hea, diagnosis.value)
            continue
        kept.append(read_record(hea, pid, localizations))
    return kept


def write_record(directory: str | Path, record: EcgRecord, gain: float = 2000.0,
                 comments: Sequence[str] | None = None) -> Path:
    """Write ``record`` as a format-16 WFDB pair; returns the ``.hea`` path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = list(record.leads)
    raw = np.stack([np.round(record.leads[n] * gain) for n in names], axis=1)
    raw = np.clip(raw, -32768, 32767).astype("<i2")
    dat_name = f"{record.record_name}.dat"
    (directory / dat_name).write_bytes(interleave(raw))

    fs = f"{record.sampling_rate:g}"
    lines = [f"{record.record_name} {len(names)} {fs} {raw.shape[0]}"]
    for j, n in enumerate(names):
        lines.append(f"{dat_name} 16 {gain:g}/mV 16 0 {int(raw[0, j])} 0 0 {n}")
    if comments is None:
        comments = _diagnosis_comments(record.diagnosis)
    lines.extend(c if c.startswith("#") else f"# {c}" for c in comments)
    hea = directory / f"{record.record_name}.hea"
    hea.write_text("\n".join(lines) + "\n")
    return hea


def _diagnosis_comments(diagnosis: Diagnosis) -> list[str]:
    if diagnosis is Diagnosis.HEALTHY_CONTROL:
        return ["# Reason for admission: Healthy control"]
    if diagnosis is Diagnosis.INFERIOR_MI:
        return ["# Reason for admission: Myocardial infarction",
                "# Acute infarction (localization): inferior"]
    return ["# Reason for admission: n/a"]


# ---------------------------------------------------------------------------
# synthetic data

# (amplitude mV, offset from R peak s, width s) for P, Q, R, S, T
_HC_WAVES = ((0.15, -0.20, 0.025), (-0.10, -0.035, 0.010), (1.00, 0.0, 0.012),
             (-0.25, 0.035, 0.010), (0.30, 0.25, 0.045))
_LEAD_GAINS = {"ii": 1.0, "iii": 0.6, "avf": 0.8}


def _template(label: Label):
    waves = [list(w) for w in _HC_WAVES]
    if label is Label.IMI:
        waves[1][0] = -0.45   # pathological Q
        waves[1][2] = 0.016
        waves[4][0] = -0.30   # inverted T
    return waves


def synth_record(label: Label | str | int, duration: float, rate: float, seed: int,
                 noise: bool = True, patient_id: str | None = None) -> EcgRecord:
    """Generate a three-lead ECG-like record made of Gaussian P-QRS-T bumps.

    Beats repeat at roughly 72 bpm. With ``noise`` on, a slow (< 0.5 Hz)
    sinusoidal baseline drift and white noise are added. All random draws come
    from ``seed`` and do not depend on ``label``, so an HC and an IMI record
    with the same seed share rhythm, gains and noise.
    """
    if duration <= 0 or rate <= 0:
        raise ValueError("duration and rate must be positive")
    label = Label[label] if isinstance(label, str) else Label(label)
    rng = np.random.default_rng(seed)
    n = int(round(duration * rate))
    t = np.arange(n) / rate

    bpm = 72.0 + rng.uniform(-4.0, 4.0)
    rr = 60.0 / bpm
    n_beats = int(duration / rr) + 3
    beat_times = (np.arange(n_beats) - 1) * rr + rng.uniform(0, rr) \
        + rng.normal(0, 0.01 * rr, n_beats)
    amp = rng.uniform(0.85, 1.15, size=len(_LEAD_GAINS))
    drift_f = rng.uniform(0.05, 0.45, size=len(_LEAD_GAINS))
    drift_a = rng.uniform(0.05, 0.3, size=len(_LEAD_GAINS))
    drift_ph = rng.uniform(0, 2 * np.pi, size=len(_LEAD_GAINS))
    white = rng.normal(0.0, 0.02, size=(len(_LEAD_GAINS), n))

    clean = np.zeros(n)
    for a, mu, sigma in _template(label):
        for bt in beat_times:
            clean += a * np.exp(-0.5 * ((t - bt - mu) / sigma) ** 2)

    leads = {}
    for j, (name, g) in enumerate(_LEAD_GAINS.items()):
        x = g * amp[j] * clean
        if noise:
            x = x + drift_a[j] * np.sin(2 * np.pi * drift_f[j] * t + drift_ph[j]) + white[j]
        leads[name] = x
    return EcgRecord(
        patient_id=patient_id or f"synth{seed:04d}",
        record_name=f"{label.name.lower()}{seed:04d}",
        sampling_rate=float(rate),
        leads=leads,
        diagnosis=label.to_diagnosis(),
    )
