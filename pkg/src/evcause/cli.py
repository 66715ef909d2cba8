"""Command-line entry point: synth, train-causal, train-predict, eval, robustness, emit-plots.

One master ``--seed`` flag drives every stage through fixed offsets (see
``seeding``), so a run is reproducible end to end while each stage remains
independently reproducible. Every artifact written here embeds the hash of
the run configuration that produced it.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import causal as cc
from . import evaluation as ev
from . import predict as ep
from . import synthetic as syn
from .checkpoint import config_hash
from .data import DatasetConfig, EventCube, build_samples, load_adjacency_csv, \
    load_event_csv, split
from .errors import ConfigError, EvcauseError, ParameterError
from .seeding import stage_seed

CONFIG_DIR_ENV = "EVCAUSE_CONFIG_DIR"

ROBUSTNESS_DEFAULTS = {
    "mode": "test-noise",
    "lambdas": [0.0, 5.0, 15.0],
    "flag_sets": ["none", "F", "L", "FL"],
    "seeds": [0, 1, 2, 3, 4],
}


@dataclass
class RunConfig:
    """Merged run configuration with a content hash embedded in artifacts."""

    data: DatasetConfig | None = None
    synth: syn.SyntheticConfig | None = None
    causal: cc.CausalModelConfig | None = None
    predictor: ep.PredictorConfig | None = None
    robustness: dict | None = None
    raw: dict | None = None

    KNOWN_SECTIONS = ("data", "synth", "causal", "predictor", "robustness")

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        resolved = Path(path)
        if not resolved.exists() and os.environ.get(CONFIG_DIR_ENV):
            candidate = Path(os.environ[CONFIG_DIR_ENV]) / path
            if candidate.exists():
                resolved = candidate
        try:
            with open(resolved) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        unknown = set(raw) - set(cls.KNOWN_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            cfg = cls(raw=raw)
            if "data" in raw:
                cfg.data = DatasetConfig.from_dict(raw["data"])
            if "synth" in raw:
                cfg.synth = syn.SyntheticConfig.from_dict(raw["synth"])
            if "causal" in raw:
                cfg.causal = cc.CausalModelConfig.from_dict(raw["causal"])
            if "predictor" in raw:
                cfg.predictor = ep.PredictorConfig.from_dict(raw["predictor"])
            if "robustness" in raw:
                section = dict(ROBUSTNESS_DEFAULTS)
                extra = set(raw["robustness"]) - set(ROBUSTNESS_DEFAULTS)
                if extra:
                    raise ConfigError(f"unknown robustness config keys: {sorted(extra)}")
                section.update(raw["robustness"])
                cfg.robustness = section
        except (ParameterError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    @property
    def hash(self) -> str:
        return config_hash(self.raw or {})

    def require(self, *sections: str) -> "RunConfig":
        missing = [name for name in sections if getattr(self, name) is None]
        if missing:
            raise ConfigError(f"config file is missing required sections: {missing}")
        return self


def apply_master_seed(cfg: RunConfig, master: int | None):
    if master is None:
        return
    if cfg.synth is not None:
        cfg.synth.seed = stage_seed(master, "synth")
    if cfg.data is not None:
        cfg.data.seed = stage_seed(master, "split")
    if cfg.causal is not None:
        cfg.causal.seed = stage_seed(master, "causal")
    if cfg.predictor is not None:
        cfg.predictor.seed = stage_seed(master, "predictor")


# -- dataset directory I/O ---------------------------------------------------------


def write_event_csv(path, cube: EventCube):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["location_id", "time_index", "event_type", "count"])
        m, e, steps = cube.counts.shape
        for i in range(m):
            for j in range(e):
                for t in range(steps):
                    value = cube.counts[i, j, t]
                    if value:
                        writer.writerow([cube.location_ids[i], t, j, int(value)])


def write_adjacency_csv(path, adjacency: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in adjacency:
            writer.writerow([f"{value:.12g}" for value in row])


def load_dataset_dir(data_dir) -> tuple[EventCube, DatasetConfig]:
    data_dir = Path(data_dir)
    dataset_cfg = DatasetConfig.load(data_dir / "dataset.json")
    cube = load_event_csv(data_dir / "events.csv", num_locations=dataset_cfg.M,
                          num_event_types=dataset_cfg.E, num_steps=dataset_cfg.T)
    adjacency_path = data_dir / "adjacency.csv"
    if adjacency_path.exists():
        cube.geo_adjacency = load_adjacency_csv(adjacency_path, dataset_cfg.M)
    return cube, dataset_cfg


def split_from_dir(data_dir):
    cube, dataset_cfg = load_dataset_dir(data_dir)
    samples = build_samples(cube, dataset_cfg.window, dataset_cfg.lead,
                            dataset_cfg.target_type)
    return cube, dataset_cfg, split(samples, dataset_cfg.ratios, seed=dataset_cfg.seed,
                                    chronological=dataset_cfg.chronological)


# -- subcommands ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = RunConfig.load(args.config).require("synth")
    apply_master_seed(cfg, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cube, truth = syn.generate(cfg.synth)
    write_event_csv(out_dir / "events.csv", cube)
    write_adjacency_csv(out_dir / "adjacency.csv", cube.geo_adjacency)
    dataset_cfg = cfg.data or DatasetConfig(
        M=cfg.synth.M, E=cfg.synth.E, T=cfg.synth.T, window=cfg.synth.window,
        lead=cfg.synth.lead, target_type=cfg.synth.target_type,
    )
    dataset_dict = dataset_cfg.to_dict()
    dataset_dict.update({"M": cfg.synth.M, "E": cfg.synth.E, "T": cfg.synth.T,
                         "window": cfg.synth.window, "lead": cfg.synth.lead,
                         "target_type": cfg.synth.target_type})
    if args.seed is not None:
        dataset_dict["seed"] = stage_seed(args.seed, "split")
    with open(out_dir / "dataset.json", "w") as fh:
        json.dump(dataset_dict, fh, indent=2)
    truth_blob = truth.to_json_dict()
    truth_blob["config_hash"] = cfg.hash
    with open(out_dir / "truth.json", "w") as fh:
        json.dump(truth_blob, fh)
    print(f"wrote synthetic dataset to {out_dir} "
          f"(M={cfg.synth.M}, E={cfg.synth.E}, T={cfg.synth.T})")
    return 0


def cmd_train_causal(args) -> int:
    cfg = RunConfig.load(args.config).require("causal")
    apply_master_seed(cfg, args.seed)
    _, dataset_cfg, dataset = split_from_dir(args.data_dir)
    if args.seed is not None:
        dataset = split(dataset.all_samples(), dataset_cfg.ratios,
                        seed=stage_seed(args.seed, "split"),
                        chronological=dataset_cfg.chronological)
    result = cc.train_causal(dataset, cfg.causal, dataset_cfg.M, log_path=args.log,
                             att_treatment=args.att_treatment)
    for j, fraction in sorted(result.positivity.items()):
        print(f"treatment {j}: treated fraction {fraction:.3f}")
    model = result.model
    run_hash = cfg.hash
    config = model.config.to_dict()
    config.update({"M": model.num_locations, "E": model.num_event_types,
                   "window": model.window, "run_config_hash": run_hash})
    from .checkpoint import save_checkpoint

    save_checkpoint(args.out, "causal", config, model.store.export_arrays())
    print(f"best epoch {result.best_epoch} (val loss {result.best_val_loss:.4f}); "
          f"checkpoint at {args.out}")
    return 0


def cmd_train_predict(args) -> int:
    cfg = RunConfig.load(args.config).require("predictor")
    apply_master_seed(cfg, args.seed)
    pred_cfg = cfg.predictor
    if args.predictor is not None:
        pred_cfg.predictor = args.predictor
    if args.use_reweight:
        pred_cfg.use_reweight = True
    if args.use_constraint:
        pred_cfg.use_constraint = True
    if args.mu is not None:
        pred_cfg.mu = args.mu
    _, dataset_cfg, dataset = split_from_dir(args.data_dir)
    if args.seed is not None:
        dataset = split(dataset.all_samples(), dataset_cfg.ratios,
                        seed=stage_seed(args.seed, "split"),
                        chronological=dataset_cfg.chronological)
    needs_causal = pred_cfg.use_reweight or (pred_cfg.use_constraint and pred_cfg.mu > 0)
    causal_model = None
    if needs_causal:
        if args.causal_ckpt is None:
            raise ConfigError("--causal-ckpt is required with --use-reweight/--use-constraint")
        causal_model = cc.load_causal_model(args.causal_ckpt)
    result = ep.train_predictor(dataset, pred_cfg, dataset_cfg.M,
                                causal_model=causal_model, log_path=args.log)
    grids_window = dataset.train[0].covariates.shape
    config = pred_cfg.to_dict()
    config.update({"M": dataset_cfg.M, "E": grids_window[0], "window": grids_window[1],
                   "run_config_hash": cfg.hash})
    from .checkpoint import save_checkpoint

    save_checkpoint(args.out, "predictor", config, result.predictor.store.export_arrays())
    print(f"best epoch {result.best_epoch} (val loss {result.best_val_loss:.4f}); "
          f"checkpoint at {args.out}")
    return 0


def cmd_eval(args) -> int:
    causal_model = cc.load_causal_model(args.causal_ckpt)
    _, dataset_cfg, dataset = split_from_dir(args.data_dir)
    if args.seed is not None:
        dataset = split(dataset.all_samples(), dataset_cfg.ratios,
                        seed=stage_seed(args.seed, "split"),
                        chronological=dataset_cfg.chronological)
    predictor = reweighter = None
    if args.predictor_ckpt:
        predictor, reweighter = ep.load_predictor_bundle(args.predictor_ckpt)
    treatments = ([int(tok) for tok in args.treatments.split(",")]
                  if args.treatments else list(range(dataset_cfg.E)))
    run_hash = RunConfig.load(args.config).hash if args.config else ""
    report = ev.metrics_report(causal_model, predictor, reweighter, dataset,
                               dataset_cfg.M, treatments,
                               seed=args.seed if args.seed is not None else dataset_cfg.seed,
                               config_hash=run_hash, part=args.split)
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)
    shown = {k: v for k, v in report["att_error"].items()}
    print(f"att_error: {shown}")
    if "bacc" in report:
        print(f"bacc: {report['bacc']:.4f}")
    print(f"report at {args.out}")
    return 0


def cmd_robustness(args) -> int:
    cfg = RunConfig.load(args.config).require("causal", "predictor", "robustness")
    section = dict(cfg.robustness)
    if args.mode is not None:
        section["mode"] = args.mode
    if args.data_dir:
        cube, dataset_cfg = load_dataset_dir(args.data_dir)
    else:
        cfg.require("synth")
        cube, _ = syn.generate(cfg.synth)
        dataset_cfg = cfg.data or DatasetConfig(
            M=cfg.synth.M, E=cfg.synth.E, T=cfg.synth.T, window=cfg.synth.window,
            lead=cfg.synth.lead, target_type=cfg.synth.target_type,
        )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = ev.robustness_experiment(
        cube, dataset_cfg, cfg.causal, cfg.predictor,
        mode=section["mode"], lambdas=section["lambdas"],
        flag_sets=section["flag_sets"], seeds=section["seeds"],
        progress=lambda row: print(
            f"lambda={row['lambda']:g} flags={row['flags']} seed={row['seed']} "
            f"bacc={row['bacc']:.4f}"
        ),
    )
    rows_path = out_dir / "robustness.csv"
    with open(rows_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["mode", "lambda", "flags", "seed", "bacc"])
        writer.writeheader()
        writer.writerows(rows)
    manifest = {"config_hash": cfg.hash, "robustness": section,
                "dataset": dataset_cfg.to_dict()}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"wrote {len(rows)} rows to {rows_path}")
    return 0


def cmd_emit_plots(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote = []
    if args.robustness:
        with open(args.robustness, newline="") as fh:
            rows = list(csv.DictReader(fh))
        series = ev.robustness_series(rows)
        by_mode: dict[str, dict] = {}
        for (mode, flags), points in series.items():
            by_mode.setdefault(mode, {})[flags] = points
        for mode, flag_series in by_mode.items():
            lambdas = sorted({lam for points in flag_series.values() for lam in points})
            flags_order = [f for f in ev.FLAG_SETS if f in flag_series]
            path = out_dir / f"robustness_{mode}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                header = ["lambda"]
                for flags in flags_order:
                    header += [f"{flags}_mean", f"{flags}_std"]
                writer.writerow(header)
                for lam in lambdas:
                    row = [lam]
                    for flags in flags_order:
                        mean, std = flag_series[flags].get(lam, (float("nan"), float("nan")))
                        row += [f"{mean:.6f}", f"{std:.6f}"]
                    writer.writerow(row)
            wrote.append(path)
    if args.report:
        with open(args.report) as fh:
            report = json.load(fh)
        att_path = out_dir / "att_error.csv"
        with open(att_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["treatment", "att_error"])
            for j, value in sorted(report.get("att_error", {}).items(), key=lambda kv: int(kv[0])):
                writer.writerow([j, "" if value is None else f"{value:.6f}"])
        wrote.append(att_path)
        for j, summary in sorted(report.get("ite_summary", {}).items(), key=lambda kv: int(kv[0])):
            path = out_dir / f"ite_treatment_{j}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["ite"])
                for value in summary["values"]:
                    writer.writerow([f"{value:.6f}"])
            wrote.append(path)
    if not wrote:
        raise ConfigError("emit-plots needs --robustness and/or --report input")
    for path in wrote:
        print(f"wrote {path}")
    return 0


# -- argument parsing --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evcause",
        description="Event-data treatment-effect estimation and causally guided forecasting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="master seed for all stages")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-causal", help="stage 1: train the causal inference model")
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="per-epoch JSON-lines log path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--att-treatment", type=int, default=None,
                   help="also log the validation ATT error for this treatment")
    p.set_defaults(func=cmd_train_causal)

    p = sub.add_parser("train-predict", help="stage 2: train the event predictor")
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--causal-ckpt", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--predictor", choices=["baseline", "external-stub"], default=None)
    p.add_argument("--use-reweight", action="store_true")
    p.add_argument("--use-constraint", action="store_true")
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_predict)

    p = sub.add_parser("eval", help="metrics report: ATT error, BACC, ITE summaries")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--causal-ckpt", required=True)
    p.add_argument("--predictor-ckpt", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="run config, hashed into the report")
    p.add_argument("--treatments", default=None, help="comma-separated indices")
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robustness", help="noise-robustness grid over the full pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir", default=None,
                   help="existing dataset directory; omitted = generate from the synth section")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=["test-noise", "train-noise"], default=None)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("emit-plots", help="convert reports into per-figure CSV series")
    p.add_argument("--robustness", default=None, help="robustness.csv from the harness")
    p.add_argument("--report", default=None, help="report.json from eval")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_emit_plots)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 3
    except EvcauseError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


def console_main():
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
