"""
Command-line entry point for the staged OoD experiment.

    python src/cli.py [--config F] [--seed S] [--out DIR] [--threads N] <command> ...

    simulate            data/<dataset_id>.txt for train, test and every intervention
    train KIND          models/<KIND>.npz and models/<KIND>.trace.csv
                        (KIND: predictor, flow-snf, flow-bnf, dpgmm)
    extract-features    features/<dataset_id>.csv
    score [EST ...]     scores/<EST>/<dataset_id>.csv
    report              report/ tables, NLL table, density CSV/SVG
    run                 all of the above in order

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import ESTIMATORS, ExperimentConfig, load_config
from data_handler import ScoreTable, read_dataset, read_scores, write_scores
from dpgmm import VariationalPosterior, fit_advi, fit_truncation_sweep, posterior_draws, posterior_log_lik
from flows import FlowStack, log_prob, train_flow
from ood_stats import (LikelihoodSamples, aggregate_by_trajectory, density_csv, density_export, format_nll_table,
                       format_report, nll_table, ood_report, report_csv)
from plotting import plot_density_panels
from predictor import FeatureMatrix, PredictorModel, extract_features, score_entropy, train_predictor
from simulation import simulate_dataset
from utils import (ConfigError, NumericalError, atomic_write_text, format_float, make_rng, setup_logging,
                   sha256_bytes, sha256_file)

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
MODEL_KINDS = ("predictor", "flow-snf", "flow-bnf", "dpgmm")
DENSITY_ESTIMATORS = ("flow-snf", "flow-bnf", "dpgmm")


# ----- run manifest --------------------------------------------------------------------
@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    tool_version: str = TOOL_VERSION
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def add_input(self, path: Path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path: Path) -> None:
        self.outputs[str(path)] = sha256_file(path)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifests" / f"{self.command}.json"
        atomic_write_text(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


class Workspace:
    """Artifact paths under one output directory."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    def dataset(self, dataset_id: str) -> Path:
        return self.root / "data" / f"{dataset_id}.txt"

    def model(self, kind: str) -> Path:
        return self.root / "models" / f"{kind}.npz"

    def trace(self, kind: str) -> Path:
        return self.root / "models" / f"{kind}.trace.csv"

    def features(self, dataset_id: str) -> Path:
        return self.root / "features" / f"{dataset_id}.csv"

    def scores(self, estimator: str, dataset_id: str) -> Path:
        return self.root / "scores" / estimator / f"{dataset_id}.csv"

    def report(self, name: str) -> Path:
        return self.root / "report" / name

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"{path} not found (run '{hint}' first)")
        return path


def _write_trace(path: Path, header: str, rows: Sequence[Sequence[float]]) -> None:
    out = io.StringIO()
    out.write(header + "\n")
    for i, row in enumerate(rows, start=1):
        out.write(f"{i}," + ",".join(format_float(v) for v in row) + "\n")
    atomic_write_text(path, out.getvalue())


# ----- commands --------------------------------------------------------------------------
def cmd_simulate(config: ExperimentConfig, ws: Workspace, manifest: RunManifest,
                 only: Optional[Sequence[str]] = None, workers: Optional[int] = None) -> List[Path]:
    ids = list(only) if only else config.simulator.dataset_ids
    workers = workers or config.simulator.workers
    paths = []
    for dataset_id in ids:
        path = ws.dataset(dataset_id)
        simulate_dataset(config.simulator.manifest(dataset_id, config.seed), path, workers=workers)
        manifest.add_output(path)
        paths.append(path)
        logger.info("[simulate] wrote %s", path)
    return paths


def _load_features(ws: Workspace, dataset_id: str, manifest: RunManifest) -> FeatureMatrix:
    path = ws.require(ws.features(dataset_id), "extract-features")
    manifest.add_input(path)
    return FeatureMatrix.load(path)


def cmd_train(config: ExperimentConfig, ws: Workspace, manifest: RunManifest, kind: str,
              sweep: bool = False) -> Path:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind '{kind}' (choose from {MODEL_KINDS})")
    out = ws.model(kind)
    rng = make_rng(config.seed, kind)
    if kind == "predictor":
        path = ws.require(ws.dataset("train"), "simulate")
        manifest.add_input(path)
        _, trajectories = read_dataset(path)
        model = train_predictor(trajectories, config.predictor, rng)
        model.save(out)
        _write_trace(ws.trace(kind), "step,loss", [[v] for v in model.loss_trace])
    elif kind in ("flow-snf", "flow-bnf"):
        features = _load_features(ws, "train", manifest)
        flow_config = config.flow if kind == "flow-snf" else config.flow.bijective()
        if kind == "flow-snf" and not flow_config.surjection_layers:
            raise ConfigError("flow-snf needs at least one surjection layer")
        stack = train_flow(features, flow_config, rng, tag=kind)
        stack.save(out)
        val = stack.val_trace or [float("nan")] * len(stack.nll_trace)
        _write_trace(ws.trace(kind), "epoch,train_nll,val_nll", list(zip(stack.nll_trace, val)))
    else:
        features = _load_features(ws, "train", manifest)
        if sweep:
            results = fit_truncation_sweep(features, config.dpgmm)
            _write_trace(ws.report("dpgmm_sweep.csv"), "index,K,final_elbo",
                         [[k, elbo] for k, (_, elbo) in sorted(results.items())])
            manifest.add_output(ws.report("dpgmm_sweep.csv"))
            posterior = results.get(config.dpgmm.truncation, next(iter(results.values())))[0]
        else:
            posterior = fit_advi(features, config.dpgmm, rng)
        posterior.save(out)
        _write_trace(ws.trace(kind), "step,elbo", [[v] for v in posterior.elbo_trace])
    manifest.add_output(out)
    manifest.add_output(ws.trace(kind))
    logger.info("[train] wrote %s", out)
    return out


def _available_datasets(config: ExperimentConfig, ws: Workspace, only: Optional[Sequence[str]]) -> List[str]:
    if only:
        return list(only)
    return [ds for ds in config.simulator.dataset_ids if ws.dataset(ds).exists()]


def cmd_extract_features(config: ExperimentConfig, ws: Workspace, manifest: RunManifest,
                         only: Optional[Sequence[str]] = None) -> List[Path]:
    model_path = ws.require(ws.model("predictor"), "train predictor")
    manifest.add_input(model_path)
    model = PredictorModel.load(model_path)
    paths = []
    for dataset_id in _available_datasets(config, ws, only):
        data_path = ws.require(ws.dataset(dataset_id), "simulate")
        manifest.add_input(data_path)
        _, trajectories = read_dataset(data_path)
        features = extract_features(model, trajectories, dataset_id=dataset_id)
        out = ws.features(dataset_id)
        features.save(out)
        manifest.add_output(out)
        paths.append(out)
        logger.info("[features] %s: %d windows x %d dims", dataset_id, len(features), features.dim)
    return paths


def _score_rows(estimator: str, ws: Workspace, dataset_id: str, manifest: RunManifest, models: Dict):
    """(trajectory_ids, window_starts, values) for one dataset."""
    if estimator == "entropy":
        path = ws.require(ws.dataset(dataset_id), "simulate")
        manifest.add_input(path)
        _, trajectories = read_dataset(path)
        values, tids, starts = score_entropy(models[estimator], trajectories)
        return tids, starts, values
    features = _load_features(ws, dataset_id, manifest)
    if estimator == "dpgmm":
        values = posterior_log_lik(features.rows, models[estimator])
    else:
        values = log_prob(models[estimator], features.rows)
    return features.trajectory_ids, features.window_starts, values


def _load_estimator(estimator: str, ws: Workspace, config: ExperimentConfig, manifest: RunManifest):
    kind = "predictor" if estimator == "entropy" else estimator
    path = ws.require(ws.model(kind), f"train {kind}")
    manifest.add_input(path)
    if kind == "predictor":
        return PredictorModel.load(path)
    if kind == "dpgmm":
        posterior = VariationalPosterior.load(path)
        # one set of posterior draws shared by every dataset
        return posterior_draws(posterior, config.dpgmm.n_draws, make_rng(config.seed, "dpgmm-draws"))
    return FlowStack.load(path)


def cmd_score(config: ExperimentConfig, ws: Workspace, manifest: RunManifest,
              estimators: Optional[Sequence[str]] = None, per_trajectory: Optional[bool] = None,
              only: Optional[Sequence[str]] = None) -> List[Path]:
    estimators = list(estimators or config.stats.estimators)
    unknown = [e for e in estimators if e not in ESTIMATORS]
    if unknown:
        raise ValueError(f"unknown estimators {unknown} (choose from {ESTIMATORS})")
    per_trajectory = config.stats.per_trajectory if per_trajectory is None else per_trajectory
    models = {est: _load_estimator(est, ws, config, manifest) for est in estimators}
    paths = []
    for dataset_id in _available_datasets(config, ws, only):
        for est in estimators:
            tids, starts, values = _score_rows(est, ws, dataset_id, manifest, models)
            if per_trajectory:
                tids, values = aggregate_by_trajectory(tids, values)
                starts = np.full(len(tids), -1, dtype=np.int64)
            out = ws.scores(est, dataset_id)
            write_scores(out, ScoreTable(dataset_id, est, tids, starts, values))
            manifest.add_output(out)
            paths.append(out)
            logger.info("[score] %s on %s: %d rows, mean %.4f", est, dataset_id, len(values), float(np.mean(values)))
    return paths


def cmd_report(config: ExperimentConfig, ws: Workspace, manifest: RunManifest) -> List[Path]:
    estimators = [e for e in config.stats.estimators if (ws.root / "scores" / e).is_dir()]
    if not estimators:
        raise FileNotFoundError(f"no score directories under {ws.root / 'scores'} (run 'score' first)")
    datasets = config.simulator.dataset_ids
    missing = [f"{e}/{ds}" for e in estimators for ds in datasets if not ws.scores(e, ds).exists()]
    if missing:
        raise ValueError(f"missing score files for: {', '.join(missing)}")

    scores: Dict[str, Dict[str, LikelihoodSamples]] = {}
    for est in estimators:
        scores[est] = {}
        for ds in datasets:
            path = ws.scores(est, ds)
            manifest.add_input(path)
            scores[est][ds] = LikelihoodSamples(ds, read_scores(path, est).values, est)

    report = ood_report(scores, config.stats.test_config(), reference_id="train", candidates=datasets)
    outputs: Dict[str, str] = {
        "ttest.txt": format_report(report, "mean_p"),
        "wasserstein.txt": format_report(report, "mean_w"),
        "report.csv": report_csv(report),
    }
    density_scores = {e: s for e, s in scores.items() if e in DENSITY_ESTIMATORS}
    if density_scores:
        table = nll_table(density_scores)
        outputs["nll.txt"] = format_nll_table(table)
        outputs["nll.csv"] = "estimator,dataset_id,mean_nll\n" + "".join(
            f"{e},{ds},{format_float(v)}\n" for e, row in table.items() for ds, v in row.items())
    curves = {}
    for est in estimators:
        curves[est] = density_export([scores[est][ds] for ds in datasets])
        outputs[f"density_{est}.csv"] = density_csv(curves[est])
    for name, text in outputs.items():
        atomic_write_text(ws.report(name), text)
    for est, est_curves in curves.items():
        plot_density_panels(est_curves, ws.report(f"density_{est}.svg"), estimator=est)

    paths = [ws.report(name) for name in outputs] + [ws.report(f"density_{est}.svg") for est in curves]
    for path in paths:
        manifest.add_output(path)
    print(format_report(report, "mean_p"))
    logger.info("[report] wrote %d files under %s", len(paths), ws.root / "report")
    return paths


def cmd_run(config: ExperimentConfig, ws: Workspace, manifest: RunManifest, workers: Optional[int] = None) -> None:
    cmd_simulate(config, ws, manifest, workers=workers)
    cmd_train(config, ws, manifest, "predictor")
    cmd_extract_features(config, ws, manifest)
    estimators = list(config.stats.estimators)
    for kind in estimators:
        if kind in DENSITY_ESTIMATORS:
            cmd_train(config, ws, manifest, kind)
    cmd_score(config, ws, manifest, estimators)
    cmd_report(config, ws, manifest)


# ----- argument parsing -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Feature-density OoD detection on simulated mobility trajectories")
    parser.add_argument("--config", type=str, default=None, help="YAML config (default: built-in desk profile)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", type=str, default="out", help="output directory")
    parser.add_argument("--threads", type=int, default=None, help="simulation worker processes")
    parser.add_argument("--log-level", type=str, default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate observational and interventional datasets")
    p.add_argument("--only", nargs="+", default=None, metavar="DATASET_ID")

    p = sub.add_parser("train", help="train a predictor or density estimator")
    p.add_argument("kind", choices=MODEL_KINDS)
    p.add_argument("--sweep", action="store_true", help="dpgmm: fit every truncation level in the grid")

    p = sub.add_parser("extract-features", help="predictor features for every dataset")
    p.add_argument("--only", nargs="+", default=None, metavar="DATASET_ID")

    p = sub.add_parser("score", help="per-window likelihoods for every dataset")
    p.add_argument("estimators", nargs="*", metavar="ESTIMATOR", help=f"any of {', '.join(ESTIMATORS)}")
    p.add_argument("--per-trajectory", action="store_true", default=None)
    p.add_argument("--only", nargs="+", default=None, metavar="DATASET_ID")

    sub.add_parser("report", help="OoD tables, NLL table and density panels")
    sub.add_parser("run", help="the whole pipeline")
    return parser


def dispatch(args: argparse.Namespace, config: ExperimentConfig, ws: Workspace, manifest: RunManifest) -> None:
    if args.command == "simulate":
        cmd_simulate(config, ws, manifest, args.only, args.threads)
    elif args.command == "train":
        cmd_train(config, ws, manifest, args.kind, args.sweep)
    elif args.command == "extract-features":
        cmd_extract_features(config, ws, manifest, args.only)
    elif args.command == "score":
        cmd_score(config, ws, manifest, args.estimators or None, args.per_trajectory, args.only)
    elif args.command == "report":
        cmd_report(config, ws, manifest)
    elif args.command == "run":
        cmd_run(config, ws, manifest, args.threads)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        ws = Workspace(Path(args.out))
        resolved = config.to_yaml()
        atomic_write_text(ws.root / "config.resolved.yaml", resolved)
        manifest = RunManifest(args.command, sha256_bytes(resolved.encode("utf-8")), config.seed)
        started = time.perf_counter()
        dispatch(args, config, ws, manifest)
        manifest.wall_clock_seconds = round(time.perf_counter() - started, 3)
        manifest.write(ws.root)
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return 2
    except (ValueError, FileNotFoundError, OSError) as exc:
        logger.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
