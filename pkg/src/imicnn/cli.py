"""Command-line entry point.

    imicnn synth       write a synthetic PTB-like WFDB directory
    imicnn preprocess  records -> dataset manifest + float32 blob
    imicnn train       train on the whole dataset -> checkpoint + log
    imicnn loso        leave-one-patient-out evaluation
    imicnn features    GAP features + separability report for a checkpoint
    imicnn eval        confusion matrix and metrics for a checkpoint

Exit codes: 0 ok, 2 parse error, 3 empty selection, 4 dataset/shape error,
5 missing artifact.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import dsp, evaluate, featquality, ingest, nn, train

log = logging.getLogger("imicnn")

EXIT_OK, EXIT_PARSE, EXIT_EMPTY, EXIT_DATASET, EXIT_MISSING = 0, 2, 3, 4, 5
SYNTH_SPEC = "synthetic.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    data_dir: Path = Path(".")
    output_dir: Path = Path("out")
    pipeline: dsp.PipelineConfig = field(default_factory=dsp.PipelineConfig)
    train: train.TrainConfig = field(default_factory=train.TrainConfig)
    imi_localizations: tuple[str, ...] = ingest.DEFAULT_LOCALIZATIONS

    @property
    def seed(self) -> int:
        return self.train.seed


# ---------------------------------------------------------------------------
# configuration

def _coerce(cls, section: dict[str, str]) -> dict:
    out = {}
    types = {f.name: f.type for f in fields(cls)}
    for key, raw in section.items():
        key = key.replace("-", "_")
        if key not in types:
            raise CliError(EXIT_PARSE, f"unknown option {key!r} for {cls.__name__}")
        t = str(types[key])
        try:
            out[key] = int(raw) if t == "int" else float(raw)
        except ValueError as exc:
            raise CliError(EXIT_PARSE, f"bad value {raw!r} for {key}") from exc
    return out


def load_config(args: argparse.Namespace) -> RunConfig:
    """Merge the optional INI file and command-line overrides.

    INI sections: ``[paths]`` (data_dir, output_dir), ``[ingest]``
    (localizations, comma separated), ``[pipeline]`` and ``[train]`` (field
    names of the respective config classes).
    """
    parser = configparser.ConfigParser()
    if args.config:
        if not Path(args.config).is_file():
            raise CliError(EXIT_MISSING, f"config file {args.config} not found")
        try:
            parser.read(args.config)
        except configparser.Error as exc:
            raise CliError(EXIT_PARSE, f"cannot parse {args.config}: {exc}") from exc

    paths = dict(parser["paths"]) if parser.has_section("paths") else {}
    pipe = _coerce(dsp.PipelineConfig, dict(parser["pipeline"])) \
        if parser.has_section("pipeline") else {}
    tr = _coerce(train.TrainConfig, dict(parser["train"])) if parser.has_section("train") else {}
    locs = parser.get("ingest", "localizations", fallback=None)

    for f in fields(train.TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            tr[f.name] = v
    if args.localizations:
        locs = args.localizations
    try:
        cfg = RunConfig(
            data_dir=Path(args.data_dir or paths.get("data_dir", ".")),
            output_dir=Path(args.out_dir or paths.get("output_dir", "out")),
            pipeline=dsp.PipelineConfig(**pipe),
            train=train.TrainConfig(**tr),
        )
    except ValueError as exc:
        raise CliError(EXIT_PARSE, f"invalid configuration: {exc}") from exc
    if locs:
        cfg.imi_localizations = tuple(s.strip() for s in locs.split(",") if s.strip())
    return cfg


# ---------------------------------------------------------------------------
# synthetic data

def synthetic_records(spec: dict) -> list[ingest.EcgRecord]:
    """Records described by a synthetic spec.

    ``{"rate": 1000, "duration": 32, "seed": 0, "n_hc": 3, "n_imi": 3,
    "records_per_patient": 1}``; an explicit ``"patients": [{"id", "label",
    "records"}]`` list replaces the counts.
    """
    rate = float(spec.get("rate", 1000))
    duration = float(spec.get("duration", 32))
    seed = int(spec.get("seed", 0))
    per = int(spec.get("records_per_patient", 1))
    patients = spec.get("patients")
    if patients is None:
        patients = [{"id": f"patient{i + 1:03d}", "label": "HC"}
                    for i in range(int(spec.get("n_hc", 0)))]
        off = len(patients)
        patients += [{"id": f"patient{off + i + 1:03d}", "label": "IMI"}
                     for i in range(int(spec.get("n_imi", 0)))]
    records = []
    k = 0
    for p in patients:
        for _ in range(int(p.get("records", per))):
            r = ingest.synth_record(p["label"], duration, rate, seed + k, patient_id=p["id"])
            r.record_name = f"s{seed + k:04d}_syn"
            records.append(r)
            k += 1
    return records


def _load_records(cfg: RunConfig) -> list[ingest.EcgRecord]:
    if not cfg.data_dir.is_dir():
        raise CliError(EXIT_MISSING, f"data directory {cfg.data_dir} not found")
    spec_path = cfg.data_dir / SYNTH_SPEC
    try:
        if spec_path.is_file():
            records = synthetic_records(json.loads(spec_path.read_text()))
        else:
            records = ingest.scan_directory(cfg.data_dir, cfg.imi_localizations)
    except (ingest.WfdbError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CliError(EXIT_PARSE, f"cannot read records: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# commands

def _dataset_path(args, cfg: RunConfig) -> Path:
    return Path(args.dataset) if args.dataset else cfg.output_dir / "dataset.json"


def _load_samples(args, cfg: RunConfig) -> tuple[list[dsp.Sample], dict]:
    path = _dataset_path(args, cfg)
    if not path.is_file():
        raise CliError(EXIT_MISSING, f"dataset {path} not found")
    try:
        samples, manifest = dsp.load_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_DATASET, f"cannot load dataset {path}: {exc}") from exc
    if not samples:
        raise CliError(EXIT_DATASET, f"dataset {path} holds no samples")
    seg = cfg.pipeline.segment_len
    if any(s.x.shape != (3, seg) for s in samples):
        raise CliError(EXIT_DATASET, f"dataset samples are not 3 x {seg}")
    return samples, manifest


def _load_model(args, cfg: RunConfig) -> tuple[nn.ModelParams, dict]:
    path = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / "model.json"
    if not path.is_file() or not path.with_suffix(".f32").is_file():
        raise CliError(EXIT_MISSING, f"checkpoint {path} not found")
    try:
        return nn.load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_DATASET, f"bad checkpoint {path}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = {"rate": cfg.pipeline.fs_in, "duration": args.duration, "seed": cfg.seed,
            "n_hc": args.n_hc, "n_imi": args.n_imi, "records_per_patient": args.records}
    out = cfg.output_dir
    for rec in synthetic_records(spec):
        ingest.write_record(out / rec.patient_id, rec)
    print(f"wrote {args.n_hc} HC and {args.n_imi} IMI synthetic patients to {out}")
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig) -> int:
    records = _load_records(cfg)
    if not records:
        raise CliError(EXIT_EMPTY, f"no HC or IMI records under {cfg.data_dir}")
    try:
        patients = ingest.build_patient_set(records)
        samples = dsp.samples_for_patients(patients, cfg.pipeline)
    except (ingest.ConflictingLabels, ingest.MissingLead, ValueError) as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    if not samples:
        raise CliError(EXIT_EMPTY, "records are too short to yield any sample")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    meta = {"pipeline": asdict(cfg.pipeline), "seed": cfg.seed,
            "localizations": list(cfg.imi_localizations),
            "n_patients": len(patients), "n_records": len(records)}
    dsp.save_dataset(cfg.output_dir / "dataset.json", samples, meta)
    n_imi = sum(s.label == 1 for s in samples)
    print(f"IMI: {n_imi}, HC: {len(samples) - n_imi}")
    print(f"patients: {len(patients)}, records: {len(records)}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    samples, _ = _load_samples(args, cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    params, tlog = train.fit(samples, None, cfg.train)
    nn.save_checkpoint(cfg.output_dir / "model.json", params, cfg.seed,
                       extra={"train": asdict(cfg.train), "stop_reason": tlog.stop_reason,
                              "epochs": len(tlog.epochs)})
    tlog.write(cfg.output_dir / "train_log.jsonl")
    tlog.write(cfg.output_dir / "train_timing.jsonl", with_timing=True)
    tlog.write_summary(cfg.output_dir / "train_summary.json")
    print(f"epochs: {len(tlog.epochs)} ({tlog.stop_reason}), final loss {tlog.final_loss:.6f}, "
          f"best loss {tlog.best_loss:.6f} at epoch {tlog.best_epoch}")
    return EXIT_OK


def cmd_loso(args, cfg: RunConfig) -> int:
    samples, _ = _load_samples(args, cfg)
    try:
        report = evaluate.lopo_samples(samples, cfg.train, n_jobs=args.jobs)
    except evaluate.InsufficientPatients as exc:
        raise CliError(EXIT_EMPTY, str(exc)) from exc
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    report.write_json(cfg.output_dir / "cv_report.json")
    table = report.table()
    (cfg.output_dir / "cv_table.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_features(args, cfg: RunConfig) -> int:
    params, header = _load_model(args, cfg)
    samples, _ = _load_samples(args, cfg)
    try:
        fs = featquality.extract_features(samples, params)
        report = featquality.quality_report(fs)
    except (nn.ShapeMismatch, featquality.TooFewVectors) as exc:
        raise CliError(EXIT_DATASET, str(exc)) from exc
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    featquality.save_features(cfg.output_dir / "features.json", fs, samples,
                              meta={"seed": header.get("seed")})
    _write_json(cfg.output_dir / "feature_report.json", report.as_dict())
    table = report.table()
    (cfg.output_dir / "feature_report.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    params, header = _load_model(args, cfg)
    samples, _ = _load_samples(args, cfg)
    try:
        conf, _ = evaluate.evaluate(samples, params)
    except nn.ShapeMismatch as exc:
        raise CliError(EXIT_DATASET, str(exc)) from exc
    ac, se, sp = evaluate.metrics(conf)
    text = evaluate.confusion_table(conf) + (
        f"Ac%: {evaluate._pct(ac)}  Se%: {evaluate._pct(se)}  Sp%: {evaluate._pct(sp)}\n")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.output_dir / "eval_report.json",
                {"confusion": conf.as_dict(), "ac": ac, "se": se, "sp": sp,
                 "seed": header.get("seed")})
    print(text, end="")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
            "loso": cmd_loso, "features": cmd_features, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--data-dir", help="directory of .hea/.dat records or synthetic.json")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--dataset", help="dataset manifest (default OUT/dataset.json)")
    common.add_argument("--checkpoint", help="checkpoint header (default OUT/model.json)")
    common.add_argument("--localizations",
                        help="comma-separated infarct localizations counted as IMI")
    common.add_argument("-v", "--verbose", action="count", default=0)
    hyper = common.add_argument_group("training hyperparameters")
    for f in fields(train.TrainConfig):
        typ = int if str(f.type) == "int" else float
        hyper.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=typ,
                           default=None, help=f"default {f.default}")

    parser = argparse.ArgumentParser(prog="imicnn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="write synthetic WFDB records")
    p.add_argument("--n-hc", type=int, default=3)
    p.add_argument("--n-imi", type=int, default=3)
    p.add_argument("--records", type=int, default=1, help="records per patient")
    p.add_argument("--duration", type=float, default=32.0, help="seconds per record")
    sub.add_parser("preprocess", parents=[common], help="build the dataset files")
    sub.add_parser("train", parents=[common], help="train on every sample")
    p = sub.add_parser("loso", parents=[common], help="leave-one-patient-out evaluation")
    p.add_argument("--jobs", type=int, default=1, help="folds run in parallel")
    sub.add_parser("features", parents=[common], help="GAP features and GSI / D_E")
    sub.add_parser("eval", parents=[common], help="confusion matrix of a checkpoint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"imicnn: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
