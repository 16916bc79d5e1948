"""Command-line driver: one subcommand per pipeline stage.

Every stage reads and writes plain files (JSON manifests, CSV tables, GSTN
tensor blobs), so stages can be chained from a shell or CI job. Failures
print a single ``graphstad: error stage=... kind=... message="..."`` line
on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import pipeline as P
from .anomaly import AnomalyReport, ScoreCalibration
from .config import ConfigError, PipelineConfig, load_config
from .data import load_dataset, save_dataset
from .geometry import ChannelCoordinate, GeometryConfig, GeometryError, coord_to_index
from .model import VARIANTS, GraphSTAD
from .renorm import RenormModel, depth_totals, renorm_summary, renormalize_dataset
from .simlab import (GroundTruth, SyntheticWorld, ablation_rows, evaluate, generate_dataset, inject,
                     median_fpr, write_median_csv, write_sweep_csv)
from .training import ScalingStats

log = logging.getLogger("graphstad")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class StageError(RuntimeError):
    pass


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _need(path: str | None, what: str) -> Path:
    if not path:
        raise StageError(f"missing required input: {what}")
    p = Path(path)
    if not p.exists():
        raise StageError(f"{what} not found: {p}")
    return p


def _out(args) -> Path:
    if not args.out:
        raise StageError("--out is required")
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config, args.geometry)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_preprocessor(directory: Path) -> P.Preprocessor:
    return P.Preprocessor(RenormModel.load(directory / "renorm"), ScalingStats.load(directory / "scaling"))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: PipelineConfig) -> None:
    out = _out(args)
    world = SyntheticWorld(cfg.geometry, cfg.world)
    ds = generate_dataset(world)
    save_dataset(ds, out)
    world.seg.write_csv(out / "segmentation.csv")
    _write_json(out / "config.json", cfg.to_dict())
    print(f"wrote {len(ds)} maps for {len(ds.runs())} runs to {out}")


def cmd_train_renorm(args, cfg: PipelineConfig) -> None:
    ds = load_dataset(_need(args.data, "--data dataset"))
    out = _out(args)
    pre = P.fit_preprocessor(ds, cfg)
    pre.renorm.save(out / "renorm")
    pre.scaling.save(out / "scaling")
    mask = ds.segmentation.active_mask
    rows = ds.split_indices("train")
    summary = renorm_summary(depth_totals(ds.values[rows], mask),
                             depth_totals(renormalize_dataset(ds, pre.renorm)[rows], mask), pre.renorm.active_depths)
    summary["K"] = pre.renorm.K
    _write_json(out / "summary.json", summary)
    print(f"renorm K={pre.renorm.K:.4g}: mean CV raw {summary['mean_cv_raw']:.4f} -> "
          f"normalized {summary['mean_cv_norm']:.4f} ({100 * summary['reduction']:.1f}% reduction)")


def cmd_train_ae(args, cfg: PipelineConfig) -> None:
    ds = load_dataset(_need(args.data, "--data dataset"))
    pre = _load_preprocessor(_need(args.renorm, "--renorm directory"))
    out = _out(args)
    scaled = pre.apply(ds)
    model, result = P.train_autoencoder(ds, scaled, cfg, args.variant)
    meta = {"variant": args.variant, "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
            "initial_val_loss": result.initial_val_loss, "epochs_run": len(result.history),
            "stopped_early": result.stopped_early, "train": cfg.train.to_dict(), "loss": cfg.loss.to_dict()}
    model.save(out / "model", meta)
    result.write_csv(out / "history.csv")
    P.calibrate_model(model, ds, scaled, cfg).save(out / "calibration")
    print(f"trained {args.variant}: best val loss {result.best_val_loss:.6g} at epoch {result.best_epoch} "
          f"(initial {result.initial_val_loss:.6g})")


def cmd_inject(args, cfg: PipelineConfig) -> None:
    ds = load_dataset(_need(args.data, "--data dataset"))
    out = _out(args)
    spec = P.make_spec(ds, cfg, args.kind, args.factor)
    ds2, truth = inject(ds, spec)
    save_dataset(ds2, out)
    truth.write_csv(out / "ground_truth.csv")
    _write_json(out / "injection.json", {"kind": spec.kind, "factor": spec.factor, "persistence": spec.persistence,
                                         "window": spec.window, "targets": [list(t) for t in spec.targets],
                                         "channels": list(spec.channels), "n_cells": len(truth)})
    print(f"injected {spec.kind} (R_D={spec.factor}) into {len(truth)} cells "
          f"({len(spec.targets)} windows x {len(spec.channels)} channels)")


def cmd_score(args, cfg: PipelineConfig) -> None:
    ds = load_dataset(_need(args.data, "--data dataset"))
    pre = _load_preprocessor(_need(args.renorm, "--renorm directory"))
    ae = _need(args.model, "--model directory")
    out = _out(args)
    model = GraphSTAD.load(ae / "model")
    calibration = ScoreCalibration.load(ae / "calibration")
    report = P.score_dataset(model, ds, pre.apply(ds), calibration, cfg)
    report.write_csv(out / "report.csv", ds.geometry)
    report.save_arrays(out / "arrays")
    _write_json(out / "summary.json", report.summary())
    _write_json(out / "geometry.json", ds.geometry.to_dict())
    print(f"scored {report.s.size} cells ({report.mode}); {int(report.flag.sum())} flagged at alpha={report.alpha}")


def _read_scores_csv(path: Path, geometry_shape) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    scores, keys = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            c = coord_to_index(ChannelCoordinate(int(row["ieta"]), int(row["iphi"]), int(row["depth"])), geometry_shape)
            keys.append((int(row["run"]), int(row["ls"]), c))
            scores.append(float(row["s"]))
    return np.array(scores), keys


def _geometry(path) -> GeometryConfig:
    doc = json.loads(path.read_text())
    return GeometryConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})


def _load_report(directory: Path) -> AnomalyReport:
    summary = json.loads((directory / "summary.json").read_text())
    return AnomalyReport.load_arrays(directory / "arrays", summary["alpha"], summary["mode"])


def _smoke_paths():
    base = resources.files("graphstad") / "smoke"
    return base / "scores.csv", base / "ground_truth.csv", base / "geometry.json"


def cmd_evaluate(args, cfg: PipelineConfig) -> None:
    anchors = cfg.evaluation.anchors
    if args.scores:
        sdir = _need(args.scores, "--scores directory")
        truth_path = _need(args.truth, "--truth ground-truth CSV")
        geom = _geometry(sdir / "geometry.json")
        report = _load_report(sdir)
        truth = GroundTruth.read_csv(truth_path, geom)
        result = P.evaluate_report(report, truth, anchors)
    else:
        scores_csv, truth_csv, geom_json = _smoke_paths()
        geom = _geometry(geom_json)
        scores, keys = _read_scores_csv(Path(str(scores_csv)), geom.shape)
        truth = GroundTruth.read_csv(Path(str(truth_csv)), geom).cell_set()
        labels = np.array([k in truth for k in keys])
        result = evaluate(scores, labels, anchors)
    print(result.table())
    if args.out:
        out = _out(args)
        result.write_csv(out / "eval.csv")


def cmd_ablate(args, cfg: PipelineConfig) -> None:
    out = _out(args)
    ev = cfg.evaluation
    rows = []
    for seed in ev.seeds:
        scfg = cfg.with_seed(seed)
        ds = generate_dataset(SyntheticWorld(scfg.geometry, scfg.world))
        pre = P.fit_preprocessor(ds, scfg)
        scaled = pre.apply(ds)
        for variant in ev.variants:
            model, _ = P.train_autoencoder(ds, scaled, scfg, variant)
            calibration = P.calibrate_model(model, ds, scaled, scfg)
            for factor in ev.factors:
                kind = "dead" if factor == 0 else ("hot" if factor > 1 else "degraded")
                spec = P.make_spec(ds, scfg, kind, factor)
                ds2, truth = inject(ds, spec)
                report = P.score_dataset(model, ds2, pre.apply(ds2), calibration, scfg)
                rows += ablation_rows(variant, seed, kind, factor, P.evaluate_report(report, truth, ev.anchors))
            log.info("seed %d variant %s done", seed, variant)
    write_sweep_csv(rows, out / "ablation.csv", reference=ev.variants[0])
    write_median_csv(rows, out / "ablation_median.csv")
    print(f"{'config':>12} {'R_D':>5} " + " ".join(f"{'fpr@' + format(a, '.2f'):>11}" for a in ev.anchors))
    for variant in ev.variants:
        for factor in ev.factors:
            vals = " ".join(f"{median_fpr(rows, variant, factor, a):>11.4e}" for a in ev.anchors)
            print(f"{variant:>12} {factor:>5.2f} {vals}")


def cmd_gradcheck(args, cfg: PipelineConfig) -> None:
    from .diagnostics import gradient_suite
    results = gradient_suite(seed=args.seed or 0)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        extra = f" kinks={r.kinks}" if r.kinks else ""
        print(f"{r.name:<24} max_rel_err={r.max_rel_error:.3e} tol={r.tolerance:.0e} {status}{extra}")
        failed += not r.passed
    if failed:
        raise StageError(f"{failed} gradient checks exceeded tolerance")


def cmd_report(args, cfg: PipelineConfig) -> None:
    ds = load_dataset(_need(args.data, "--data dataset"))
    out = _out(args)
    mask = ds.segmentation.active_mask
    raw = depth_totals(ds.values, mask)
    with open(out / "depth_totals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        if args.renorm:
            pre = _load_preprocessor(_need(args.renorm, "--renorm directory"))
            norm = depth_totals(renormalize_dataset(ds, pre.renorm), mask)
            w.writerow(["run", "ls", "events", "lumi", "depth", "raw_total", "renormalized_total"])
        else:
            norm = None
            w.writerow(["run", "ls", "events", "lumi", "depth", "raw_total"])
        for i, m in enumerate(ds.metas):
            for d in np.flatnonzero(mask.any(axis=(0, 1))):
                row = [m.run_id, m.ls, repr(m.events), repr(m.lumi), d + 1, repr(float(raw[i, d]))]
                w.writerow(row + ([repr(float(norm[i, d]))] if norm is not None else []))
    if args.scores:
        sdir = _need(args.scores, "--scores directory")
        report = _load_report(sdir)
        labels = None
        if args.truth:
            labels = report.labels(GroundTruth.read_csv(_need(args.truth, "--truth CSV"), ds.geometry).cell_set())
        edges = np.linspace(0.0, max(float(np.ceil(report.s.max())), 1.0), args.bins + 1)
        with open(out / "score_histogram.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            if labels is None:
                w.writerow(["bin_lo", "bin_hi", "count"])
                counts, _ = np.histogram(report.s, edges)
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
            else:
                w.writerow(["bin_lo", "bin_hi", "healthy", "anomalous"])
                ch, _ = np.histogram(report.s[~labels], edges)
                ca, _ = np.histogram(report.s[labels], edges)
                for lo, hi, a, b in zip(edges[:-1], edges[1:], ch, ca):
                    w.writerow([repr(float(lo)), repr(float(hi)), int(a), int(b)])
    print(f"wrote report tables to {out}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic healthy dataset"),
    "train-renorm": (cmd_train_renorm, "fit the renormalization regressor and channel scaling"),
    "train-ae": (cmd_train_ae, "train the autoencoder and calibrate score normalizers"),
    "inject": (cmd_inject, "inject dead/hot/degraded channels into a dataset's test range"),
    "score": (cmd_score, "score a dataset with a trained autoencoder"),
    "evaluate": (cmd_evaluate, "recall-anchored evaluation (bundled smoke data when no inputs are given)"),
    "ablate": (cmd_ablate, "train variants over seeds and tabulate FPR per severity"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suite"),
    "report": (cmd_report, "emit depth-total and score-histogram CSV series"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON pipeline config")
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    common.add_argument("--geometry", choices=("full", "toy"), default=None, help="geometry preset")
    common.add_argument("--variant", choices=VARIANTS, default="graphstad", help="model variant")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="graphstad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name in ("train-renorm", "train-ae", "inject", "score", "report"):
            p.add_argument("--data", help="dataset directory")
        if name in ("train-ae", "score", "report"):
            p.add_argument("--renorm", help="train-renorm output directory")
        if name == "score":
            p.add_argument("--model", help="train-ae output directory")
        if name in ("evaluate", "report"):
            p.add_argument("--scores", help="score output directory")
            p.add_argument("--truth", help="ground_truth.csv from inject")
        if name == "inject":
            p.add_argument("--kind", choices=("dead", "hot", "degraded"), default=None)
            p.add_argument("--factor", type=float, default=None, help="R_D (defaults per kind)")
        if name == "report":
            p.add_argument("--bins", type=int, default=50)
    return parser


def _one_line(msg: str) -> str:
    return " ".join(str(msg).split()).replace('"', "'")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg = _config(args)
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                func(args, cfg)
        else:
            func(args, cfg)
    except (ConfigError, StageError, GeometryError, FileNotFoundError) as exc:
        print(f'graphstad: error stage={args.command} kind={type(exc).__name__} message="{_one_line(exc)}"',
              file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # surfaced as one line; the traceback goes to the debug log
        log.debug("stage failure", exc_info=True)
        print(f'graphstad: error stage={args.command} kind={type(exc).__name__} message="{_one_line(exc)}"',
              file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
