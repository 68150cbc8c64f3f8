"""Command-line entry point: ``noisyflow <stage> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import augment as aug
from . import bench, detector, pipeline
from .autoencoder import encode_batch, load_ae, save_ae
from .config import PipelineConfig, parse_config
from .density import fit_density, log_density_batch, save_density_report, save_made
from .flows import FlowFileError, _data_lines, assemble_flows, load_flow_file, load_labeled_flows, \
    load_packet_file, sample_ids, save_flow_file, save_labeled_flows
from .relabel import CorrectionResult, LabeledSample, correction_report, save_correction_report
from .store import load_features, save_features

log = logging.getLogger("noisyflow")


class MissingArtifact(FileNotFoundError):
    def __init__(self, stage: str, path: str | Path):
        super().__init__(f"stage {stage}: required artifact missing: {path}")
        self.stage = stage
        self.path = str(path)


class JsonLineFormatter(logging.Formatter):
    def __init__(self, stage: str):
        super().__init__()
        self.stage = stage

    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({
            "ts": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(record.created)) + f".{int(record.msecs):03d}Z",
            "stage": self.stage, "level": record.levelname.lower(), "msg": record.getMessage(),
        })


def setup_logging(stage: str, level: str = "info") -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_noisyflow", False):
            root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter(stage))
    handler._noisyflow = True
    root.addHandler(handler)
    root.setLevel(level.upper())


def _require(stage: str, *paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise MissingArtifact(stage, p)


def _read_flows(path) -> tuple[list, list[int] | None]:
    try:
        flows, labels = load_labeled_flows(path)
        return flows, labels
    except FlowFileError as exc:
        if "expected 8" not in exc.reason:
            raise
    return load_flow_file(path), None


def _read_truth(path) -> dict[str, int]:
    truth = {}
    for line_no, line in _data_lines(path):
        parts = line.split(",")
        if len(parts) < 2 or parts[1] not in ("0", "1"):
            raise FlowFileError(line_no, "expected sample_id,label[,...] with label 0 or 1")
        truth[parts[0]] = int(parts[1])
    return truth


def _header_values(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# ") and " = " in line:
                k, v = line[2:].split(" = ", 1)
                out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# stages

def stage_synth(cfg: PipelineConfig, a) -> None:
    out = Path(a.outdir)
    out.mkdir(parents=True, exist_ok=True)
    ccfg = cfg.corpus()
    ccfg = bench.CorpusConfig(**{**ccfg.__dict__, "seed": a.seed,
                                 "train_normal": a.train_per_class, "train_malicious": a.train_per_class})
    train, test = bench.synth_corpus(ccfg)
    noisy = bench.inject_noise(train.labels, bench.NoiseSpec(a.noise_mode, a.noise_ratio), a.seed, train.templates)
    prov = pipeline.provenance("synth", cfg, a.seed, [])
    prov["noise"] = {"mode": a.noise_mode, "ratio": a.noise_ratio}
    hdr = pipeline.provenance_header(prov)
    save_labeled_flows(train.flows, noisy, out / "train.flows", hdr)
    save_labeled_flows(test.flows, test.labels, out / "test.flows", hdr)
    from .flows import _write_lines
    _write_lines(out / "train.truth", (f"{i},{int(y)},{t}" for i, y, t in
                                       zip(sample_ids(len(train)), train.labels, train.templates)), hdr)
    log.info("wrote %d training and %d test flows to %s", len(train), len(test), out)


def stage_ingest(cfg: PipelineConfig, a) -> None:
    _require("ingest", a.packets)
    flows = assemble_flows(load_packet_file(a.packets))
    save_flow_file(flows, a.output, pipeline.provenance_header(pipeline.provenance("ingest", cfg, a.seed, [a.packets])))
    log.info("assembled %d flows", len(flows))


def stage_extract(cfg: PipelineConfig, a) -> None:
    _require("extract", a.flows, a.load_model)
    flows, labels = _read_flows(a.flows)
    if a.load_model:
        model = load_ae(a.load_model)
    else:
        model = pipeline.fit_autoencoder(flows, cfg, a.seed)
    X = encode_batch(model, pipeline.tokens_of(flows, cfg))
    inputs = [a.flows] + ([a.load_model] if a.load_model else [])
    prov = pipeline.provenance("extract", cfg, a.seed, inputs)
    save_features(a.output, sample_ids(len(flows)), X, labels, header=pipeline.provenance_header(prov))
    if a.model and not a.load_model:
        save_ae(model, a.model, prov)
    log.info("encoded %d flows into %d-dimensional features", len(flows), X.shape[1])


def stage_density(cfg: PipelineConfig, a) -> None:
    _require("density", a.features)
    table = load_features(a.features)
    normal = table.X[table.labels == 0]
    if len(normal) < 2:
        raise ValueError("density stage needs at least two normal-labeled samples")
    made = fit_density(normal, seed=a.seed, **cfg.density_kwargs())
    prov = pipeline.provenance("density", cfg, a.seed, [a.features])
    save_density_report(a.output, table.ids, log_density_batch(made, table.X), pipeline.provenance_header(prov))
    if a.model:
        save_made(made, a.model, prov)


def stage_correct(cfg: PipelineConfig, a) -> None:
    _require("correct", a.features, a.truth)
    table = load_features(a.features)
    if (table.labels < 0).any():
        raise ValueError("correction needs a noisy label on every sample")
    result = pipeline.correct(table.X, table.labels, cfg, a.seed, table.ids)
    inputs = [a.features] + ([a.truth] if a.truth else [])
    prov = pipeline.provenance("correct", cfg, a.seed, inputs)
    hdr = pipeline.provenance_header(prov)
    report = None
    if a.truth:
        truth = _read_truth(a.truth)
        samples = [LabeledSample(i, x, int(n), truth.get(i)) for i, x, n in zip(table.ids, table.X, table.labels)]
        report = correction_report(result, samples)
        hdr += [f"remaining_noise_ratio = {report.remaining_noise_ratio!r}"]
        log.info("remaining noise %.4f, corrected proportion %.4f", report.remaining_noise_ratio,
                 report.corrected_noise_proportion)
    save_features(a.output, table.ids, table.X, result.labels, header=hdr)
    if a.report:
        save_correction_report(a.report, result, table.labels, report, pipeline.provenance_header(prov))


def stage_augment(cfg: PipelineConfig, a) -> None:
    _require("augment", a.corrected)
    table = load_features(a.corrected)
    batch = pipeline.augment(table.X, table.labels, cfg, a.seed)
    ids = [f"syn{i:06d}" for i in range(len(batch))]
    prov = pipeline.provenance("augment", cfg, a.seed, [a.corrected])
    save_features(a.output, ids, batch.vectors.reshape(len(batch), -1) if len(batch) else
                  np.zeros((0, table.X.shape[1])), batch.labels, [str(r) for r in batch.regions],
                  pipeline.provenance_header(prov))
    log.info("synthesized %d vectors", len(batch))


def stage_train(cfg: PipelineConfig, a) -> None:
    _require("train", a.corrected, a.synthetic)
    table = load_features(a.corrected)
    X, y = table.X, table.labels
    inputs = [a.corrected]
    if a.synthetic:
        syn = load_features(a.synthetic, with_extra=True)
        if len(syn):
            X, y = np.vstack([X, syn.X]), np.concatenate([y, syn.labels])
        inputs.append(a.synthetic)
    if (y < 0).any():
        raise ValueError("training features need labels")
    prov = pipeline.provenance("train", cfg, a.seed, inputs)
    if a.plain:
        model = detector.train_plain(X, y, cfg.detector_config(), a.seed)
    else:
        est = _header_values(a.corrected).get("remaining_noise_ratio")
        sched = cfg.schedule(float(est) if est is not None else None)
        model = detector.train_detector(X, y, sched, cfg.detector_config(), a.seed)
    detector.save_detector(model, a.output, prov)


def stage_predict(cfg: PipelineConfig, a) -> None:
    _require("predict", a.model, a.features)
    model = detector.load_detector(a.model)
    table = load_features(a.features)
    preds = detector.predict(model, table.X)
    prov = pipeline.provenance("predict", cfg, a.seed, [a.model, a.features])
    detector.save_predictions(a.output, table.ids, preds, pipeline.provenance_header(prov))


def stage_evaluate(cfg: PipelineConfig, a) -> None:
    _require("evaluate", a.predictions, a.truth)
    ids, preds = detector.load_predictions(a.predictions)
    truth = load_features(a.truth)
    if (truth.labels < 0).any():
        raise ValueError("truth file has unlabeled samples")
    m = bench.compute_metrics(preds.labels, truth.labels, ids, truth.ids)
    text = (f"tp,fp,fn,tn,precision,recall,f1\n{m.tp},{m.fp},{m.fn},{m.tn},"
            f"{m.precision:.6f},{m.recall:.6f},{m.f1:.6f}\n")
    _emit(a.output, text)


def stage_experiment(cfg: PipelineConfig, a) -> None:
    grid = bench.Grid(tuple(a.sizes), tuple(a.ratios), tuple(a.modes), a.trials, a.control)
    rows = bench.run_experiment(grid, cfg, a.seed)
    prov = pipeline.provenance("experiment", cfg, a.seed, [])
    prov["grid"] = {"sizes": list(grid.sizes), "ratios": list(grid.ratios), "modes": list(grid.modes),
                    "trials": grid.trials, "control": grid.control}
    _emit(a.output, "\n".join("# " + h for h in pipeline.provenance_header(prov)) + "\n" + bench.format_table(rows))


def _emit(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


STAGES = {
    "synth": stage_synth, "ingest": stage_ingest, "extract": stage_extract, "density": stage_density,
    "correct": stage_correct, "augment": stage_augment, "train": stage_train, "predict": stage_predict,
    "evaluate": stage_evaluate, "experiment": stage_experiment,
}


def run_stage(name: str, cfg: PipelineConfig, args) -> None:
    if name not in STAGES:
        raise ValueError(f"unknown stage {name!r}")
    STAGES[name](cfg, args)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noisyflow", description="Noise-robust encrypted-traffic detection pipeline")
    sub = p.add_subparsers(dest="stage", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value config file (defaults when omitted)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--log-level", default="info")
        return sp

    sp = add("synth", "generate a synthetic labeled corpus")
    sp.add_argument("outdir")
    sp.add_argument("--train-per-class", type=int, default=500)
    sp.add_argument("--noise-ratio", type=float, default=0.0)
    sp.add_argument("--noise-mode", choices=("symmetric", "template"), default="symmetric")

    sp = add("ingest", "assemble packet records into flows")
    sp.add_argument("packets")
    sp.add_argument("output")

    sp = add("extract", "fit the autoencoder and write feature vectors")
    sp.add_argument("flows")
    sp.add_argument("output")
    sp.add_argument("--model", help="where to save the fitted autoencoder")
    sp.add_argument("--load-model", help="encode with an existing autoencoder instead of fitting")

    sp = add("density", "fit the normal-class density model and report log-densities")
    sp.add_argument("features")
    sp.add_argument("output")
    sp.add_argument("--model")

    sp = add("correct", "relabel a noisy feature file")
    sp.add_argument("features")
    sp.add_argument("output")
    sp.add_argument("--truth", help="sample_id,true_label file for the noise report")
    sp.add_argument("--report")

    sp = add("augment", "synthesize region samples from corrected features")
    sp.add_argument("corrected")
    sp.add_argument("output")

    sp = add("train", "train the co-teaching detector")
    sp.add_argument("corrected")
    sp.add_argument("output")
    sp.add_argument("--synthetic")
    sp.add_argument("--plain", action="store_true", help="single network, no co-teaching")

    sp = add("predict", "score feature vectors")
    sp.add_argument("model")
    sp.add_argument("features")
    sp.add_argument("output")

    sp = add("evaluate", "precision, recall and F1 against labeled features")
    sp.add_argument("predictions")
    sp.add_argument("truth")
    sp.add_argument("output", nargs="?", default="-")

    sp = add("experiment", "run an experiment grid on synthetic corpora")
    sp.add_argument("output", nargs="?", default="-")
    sp.add_argument("--sizes", type=int, nargs="+", default=[500])
    sp.add_argument("--ratios", type=float, nargs="+", default=[0.3])
    sp.add_argument("--modes", nargs="+", choices=("symmetric", "template"), default=["symmetric"])
    sp.add_argument("--trials", type=int, default=1)
    sp.add_argument("--control", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.stage, args.log_level)
    try:
        cfg = parse_config(args.config)
        run_stage(args.stage, cfg, args)
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
