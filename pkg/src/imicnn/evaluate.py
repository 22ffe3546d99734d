"""Accuracy / sensitivity / specificity and leave-one-patient-out evaluation.

IMI is the positive class throughout.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import PipelineConfig, Sample, samples_for_patients, stack_samples
from .ingest import PatientSet
from .nn import ModelParams, predict_proba
from .train import TrainConfig, fit

log = logging.getLogger(__name__)


class EmptyConfusion(ValueError):
    pass


class InsufficientPatients(ValueError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.tn + other.tn,
                         self.fp + other.fp, self.fn + other.fn)

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "Confusion":
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        return cls(int(np.sum(t & p)), int(np.sum(~t & ~p)),
                   int(np.sum(~t & p)), int(np.sum(t & ~p)))

    def as_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def metrics(c: Confusion) -> tuple[float, float | None, float | None]:
    """(Ac%, Se%, Sp%); Se is None without positives, Sp None without negatives."""
    if c.total <= 0:
        raise EmptyConfusion("confusion matrix is empty")
    ac = 100.0 * (c.tp + c.tn) / c.total
    se = 100.0 * c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    sp = 100.0 * c.tn / (c.tn + c.fp) if c.tn + c.fp else None
    return ac, se, sp


def predict_labels(probs) -> np.ndarray:
    """Argmax over (HC, IMI) probabilities; an exact tie goes to IMI."""
    probs = np.asarray(probs)
    return (probs[:, 1] >= probs[:, 0]).astype(np.int64)


@dataclass
class FoldReport:
    held_out_patient: str
    confusion: Confusion
    ac: float
    se: float | None
    sp: float | None
    probabilities: list[float]
    train_patients: list[str] = field(default_factory=list)
    n_train_samples: int = 0
    epochs: int = 0

    @property
    def n_samples(self) -> int:
        return self.confusion.total

    def as_dict(self) -> dict:
        return {"held_out_patient": self.held_out_patient,
                "confusion": self.confusion.as_dict(),
                "ac": self.ac, "se": self.se, "sp": self.sp,
                "n_samples": self.n_samples, "n_train_samples": self.n_train_samples,
                "n_train_patients": len(self.train_patients), "epochs": self.epochs,
                "probabilities": self.probabilities}


@dataclass
class CvReport:
    folds: list[FoldReport]
    avg_ac: float
    avg_se: float | None
    avg_sp: float | None
    n_se_folds: int
    n_sp_folds: int
    pooled: Confusion
    seed: int = 0

    def as_dict(self) -> dict:
        return {"n_folds": len(self.folds), "seed": self.seed,
                "avg_ac": self.avg_ac, "avg_se": self.avg_se, "avg_sp": self.avg_sp,
                "n_se_folds": self.n_se_folds, "n_sp_folds": self.n_sp_folds,
                "pooled": self.pooled.as_dict(),
                "folds": [f.as_dict() for f in self.folds]}

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.as_dict(), indent=1, sort_keys=True) + "\n")
        return path

    def table(self, method: str = "CNN on raw ECG") -> str:
        return format_table(
            ["Method", "Avg. Ac%", "Se%", "Sp%"],
            [[method, _pct(self.avg_ac), _pct(self.avg_se), _pct(self.avg_sp)]],
        ) + (f"folds: {len(self.folds)} (Se over {self.n_se_folds}, "
             f"Sp over {self.n_sp_folds})\n")


def _pct(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.2f}"


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    cols = [header] + [list(r) for r in rows]
    widths = [max(len(str(r[i])) for r in cols) for i in range(len(header))]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    out = [sep]
    for j, r in enumerate(cols):
        out.append("| " + " | ".join(str(v).rjust(w) for v, w in zip(r, widths)) + " |")
        if j == 0:
            out.append(sep)
    out.append(sep)
    return "\n".join(out) + "\n"


def confusion_table(c: Confusion) -> str:
    """Confusion matrix laid out with actual classes as rows, HC first."""
    return format_table(
        ["Actual \\ Predicted", "HC", "IMI"],
        [["HC", str(c.tn), str(c.fp)], ["IMI", str(c.fn), str(c.tp)]],
    )


def _mean_defined(values) -> tuple[float | None, int]:
    vals = [v for v in values if v is not None]
    return (float(np.mean(vals)) if vals else None), len(vals)


def evaluate(samples: Sequence[Sample], params: ModelParams) -> tuple[Confusion, np.ndarray]:
    x, y = stack_samples(samples)
    probs, _ = predict_proba(x, params)
    return Confusion.from_labels(y, predict_labels(probs)), probs


def _run_fold(args) -> FoldReport:
    pid, train, test, cfg, fold_seed = args
    params, tlog = fit(train, None, replace(cfg, seed=fold_seed))
    conf, probs = evaluate(test, params)
    ac, se, sp = metrics(conf)
    log.info("fold %s: ac=%.2f se=%s sp=%s", pid, ac, _pct(se), _pct(sp))
    return FoldReport(pid, conf, ac, se, sp, [float(p) for p in probs[:, 1]],
                      sorted({s.patient_id for s in train}), len(train), len(tlog.epochs))


def lopo_samples(samples: Sequence[Sample], cfg: TrainConfig = TrainConfig(),
                 n_jobs: int = 1) -> CvReport:
    """Leave-one-patient-out over already preprocessed samples.

    Fold ``i`` (patients in sorted id order) trains a fresh model seeded with
    ``cfg.seed + i`` on every other patient's samples and tests on patient ``i``.
    """
    by_patient: dict[str, list[Sample]] = {}
    for s in samples:
        by_patient.setdefault(s.patient_id, []).append(s)
    if len(by_patient) < 2:
        raise InsufficientPatients(f"need at least 2 patients, got {len(by_patient)}")
    if len({s.label for s in samples}) < 2:
        raise InsufficientPatients("both classes must be present")

    pids = sorted(by_patient)
    jobs = []
    for i, pid in enumerate(pids):
        train = [s for q in pids if q != pid for s in by_patient[q]]
        jobs.append((pid, train, by_patient[pid], cfg, cfg.seed + i))
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            folds = list(ex.map(_run_fold, jobs))
    else:
        folds = [_run_fold(j) for j in jobs]

    avg_ac = float(np.mean([f.ac for f in folds]))
    avg_se, n_se = _mean_defined(f.se for f in folds)
    avg_sp, n_sp = _mean_defined(f.sp for f in folds)
    pooled = Confusion()
    for f in folds:
        pooled = pooled + f.confusion
    return CvReport(folds, avg_ac, avg_se, avg_sp, n_se, n_sp, pooled, cfg.seed)


def lopo(patients: PatientSet, cfg: TrainConfig = TrainConfig(),
         pipeline: PipelineConfig = PipelineConfig(), n_jobs: int = 1) -> CvReport:
    if len(patients) < 2:
        raise InsufficientPatients(f"need at least 2 patients, got {len(patients)}")
    return lopo_samples(samples_for_patients(patients, pipeline), cfg, n_jobs)
