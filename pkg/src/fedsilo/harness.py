"""Experiment configuration, the ``fedsilo`` command line, and summary tables."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import cat_train, centralized_train
from .data import EvalSplit, SyntheticTaskSpec, load_csv, make_task, write_task
from .errors import ConfigError, FedSiloError, NumericError, ValidationError
from .federation import TrainingConfig, WeightStrategy, evaluate, run_training
from .model import mean_loss
from .transform import apply
from .transport import load_checkpoint, save_checkpoint

log = logging.getLogger("fedsilo")

RUN_MODES = ("fedavg", "caft", "caft_pt", "centralized", "cat")

SUMMARY_COLUMNS = ("mode", "eta", "T", "weighting", "seed", "train_loss_per_client", "eval_loss_per_split",
                   "mean_eval_loss", "total_bytes", "rounds")


@dataclass
class ExperimentConfig:
    """A run or sweep description, stored as JSON.

    ``data`` holds either ``{"synthetic": {...generator fields...}}`` or
    ``{"clients": [paths], "eval": [{"path", "owner"}], "num_classes": C}``.
    """

    training: TrainingConfig = field(default_factory=TrainingConfig)
    run_mode: str = "fedavg"
    data: dict = field(default_factory=lambda: {"synthetic": {}})
    out_dir: str = "runs"
    sweep: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)

    def validate(self, *, check_paths: bool = True) -> ExperimentConfig:
        if self.run_mode not in RUN_MODES:
            raise ConfigError(f"mode must be one of {RUN_MODES}, got {self.run_mode!r}")
        for axis, values in self.sweep.items():
            if axis not in ("eta", "T", "weighting"):
                raise ConfigError(f"unknown sweep axis {axis!r}")
            if not values:
                raise ConfigError(f"sweep axis {axis!r} is empty")
        if ("synthetic" in self.data) == ("clients" in self.data):
            raise ConfigError("data must name exactly one of 'synthetic' or 'clients'")
        if "clients" in self.data and check_paths:
            paths = list(self.data["clients"]) + [e["path"] for e in self.data.get("eval", [])]
            for p in paths:
                if not Path(p).exists():
                    raise ConfigError(f"data file {p} does not exist")
        if self.training.init_checkpoint and check_paths and not Path(self.training.init_checkpoint).exists():
            raise ConfigError(f"checkpoint {self.training.init_checkpoint} does not exist")
        return self

    def to_json(self) -> dict:
        return {"training": self.training.to_json(), "mode": self.run_mode, "data": self.data,
                "out_dir": self.out_dir, "sweep": self.sweep, "seeds": self.seeds}

    @classmethod
    def from_json(cls, obj: dict) -> ExperimentConfig:
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(obj) - {"training", "mode", "data", "out_dir", "sweep", "seeds"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        training = dict(obj.get("training", {}))
        mode = obj.get("mode", training.get("mode", "fedavg"))
        if mode in ("fedavg", "caft", "caft_pt"):
            training["mode"] = mode
        return cls(TrainingConfig.from_json(training), mode, obj.get("data", {"synthetic": {}}),
                   obj.get("out_dir", "runs"), dict(obj.get("sweep", {})), list(obj.get("seeds", [])))

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            obj = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_json(obj)


def load_data(cfg: ExperimentConfig, seed: int):
    """Return ``(datasets, eval_splits, skews_or_None)`` for one seed."""
    if "synthetic" in cfg.data:
        obj = dict(cfg.data["synthetic"])
        obj["seed"] = seed
        task = make_task(SyntheticTaskSpec.from_json(obj))
        return task.datasets, task.eval_splits, task.skews
    C = cfg.data.get("num_classes", cfg.training.num_classes)
    datasets = [load_csv(p, client_id=i, num_classes=C) for i, p in enumerate(cfg.data["clients"])]
    splits = []
    for j, e in enumerate(cfg.data.get("eval", [])):
        ds = load_csv(e["path"], num_classes=C)
        splits.append(EvalSplit(e.get("name", f"S{j + 1}"), ds.features, ds.labels, e.get("owner")))
    return datasets, splits, None


def execute(cfg: ExperimentConfig, training: TrainingConfig, out_dir: Path | None = None):
    """Train once; optionally write ``model.ckpt`` and ``metrics.jsonl``. Returns a summary row."""
    datasets, splits, _ = load_data(cfg, training.seed)
    reports = []
    transforms = {}
    if cfg.run_mode == "centralized":
        params = centralized_train(datasets, training, splits, reports)
    elif cfg.run_mode == "cat":
        params, transforms = cat_train(datasets, training, training.transform, splits, reports)
    else:
        params, transforms, reports = run_training(training, datasets, splits)
    spec = training.model_spec(datasets[0].dim)
    train_loss = {}
    for ds in datasets:
        X = apply(transforms[ds.client_id], ds.features) if ds.client_id in transforms else ds.features
        train_loss[ds.client_id] = mean_loss(params, X, ds.labels, spec)
    eval_loss = evaluate(params, splits, spec, transforms)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        n_epochs = training.schedule()[0]
        save_checkpoint(out_dir / "model.ckpt", params, transforms, epoch=n_epochs,
                        round=training.rounds if cfg.run_mode in ("fedavg", "caft", "caft_pt") else 1)
        with (out_dir / "metrics.jsonl").open("w") as fh:
            for r in reports:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
        # wall-clock timings vary run to run, so they live outside the reproducible metrics file
        with (out_dir / "timing.jsonl").open("w") as fh:
            for r in reports:
                fh.write(json.dumps({"epoch": r.epoch, "round": r.round, "wall_time": r.wall_time}) + "\n")
    total_bytes = sum(r.bytes_up + r.bytes_down for r in reports)
    rounds = sum(1 for r in reports if r.epoch > 0)
    return {
        "mode": cfg.run_mode, "eta": training.global_lr, "T": training.rounds, "weighting": str(training.weighting),
        "seed": training.seed, "train_loss_per_client": train_loss, "eval_loss_per_split": eval_loss,
        "mean_eval_loss": float(np.mean(list(eval_loss.values()))) if eval_loss else float("nan"),
        "total_bytes": total_bytes, "rounds": rounds,
    }


def _fmt_map(m: dict) -> str:
    return ";".join(f"{k}={v:.6f}" for k, v in m.items())


def emit_summary(rows, path) -> Path:
    """Write one CSV line per completed run with the fixed ``SUMMARY_COLUMNS`` header."""
    rows = list(rows)
    if not rows:
        raise ValidationError("no completed runs to summarize")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS)
            for r in rows:
                w.writerow([r["mode"], r["eta"], r["T"], r["weighting"], r["seed"],
                            _fmt_map(r["train_loss_per_client"]), _fmt_map(r["eval_loss_per_split"]),
                            f"{r['mean_eval_loss']:.6f}", r["total_bytes"], r["rounds"]])
    except OSError as exc:
        raise OSError(f"cannot write summary {path}: {exc}") from exc
    return path


def sweep_cells(cfg: ExperimentConfig):
    """Every (eta, T, weighting, seed) combination the config asks for."""
    base = cfg.training
    etas = cfg.sweep.get("eta", [base.global_lr])
    Ts = cfg.sweep.get("T", [base.rounds])
    weightings = cfg.sweep.get("weighting", [str(base.weighting)])
    seeds = cfg.seeds or [base.seed]
    for eta, T, wgt, seed in itertools.product(etas, Ts, weightings, seeds):
        yield replace(base, global_lr=float(eta), rounds=int(T), weighting=WeightStrategy.parse(wgt), seed=int(seed))


def run_sweep(cfg: ExperimentConfig, out_dir: Path, threads: int = 1):
    cells = list(sweep_cells(cfg))

    def one(k_cell):
        k, cell = k_cell
        return execute(cfg, cell, out_dir / f"cell{k:03d}")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, enumerate(cells)))
    else:
        rows = [one(kc) for kc in enumerate(cells)]
    emit_summary(rows, out_dir / "summary.csv")
    return rows


# --- CLI -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--mode", choices=RUN_MODES)
    common.add_argument("--quiet", action="store_true")

    p = _Parser(prog="fedsilo", description="Cross-silo federated training on synthetic or CSV client data.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("gen-data", parents=[common], help="write synthetic client CSVs plus metadata.json")
    sub.add_parser("train", parents=[common], help="run one training job")
    sub.add_parser("sweep", parents=[common], help="grid over eta / T / weighting and seeds")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the eval splits")
    ev.add_argument("--checkpoint", required=True)
    sub.add_parser("verify", parents=[common], help="run the built-in invariant and oracle checks")
    return p


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.mode:
        cfg.run_mode = args.mode
        if args.mode in ("fedavg", "caft", "caft_pt"):
            cfg.training = replace(cfg.training, mode=args.mode)
    if args.seed is not None:
        cfg.training = replace(cfg.training, seed=args.seed)
        cfg.seeds = [args.seed]
    if args.out:
        cfg.out_dir = args.out
    return cfg.validate()


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = _load_config(args)
        out = Path(cfg.out_dir)
        if args.command == "gen-data":
            if "synthetic" not in cfg.data:
                raise ConfigError("gen-data needs a synthetic data section")
            obj = dict(cfg.data["synthetic"], seed=cfg.training.seed)
            meta = write_task(make_task(SyntheticTaskSpec.from_json(obj)), out)
            log.info("wrote %d clients and %d eval splits to %s", len(meta["clients"]), len(meta["eval_splits"]), out)
        elif args.command == "train":
            row = execute(cfg, cfg.training, out)
            emit_summary([row], out / "summary.csv")
            log.info("%s: mean eval loss %.6f, %d bytes over %d rounds", cfg.run_mode, row["mean_eval_loss"],
                     row["total_bytes"], row["rounds"])
        elif args.command == "sweep":
            threads = int(os.environ.get("FEDSILO_THREADS", "1") or 1)
            rows = run_sweep(cfg, out, max(1, threads))
            log.info("%d sweep rows written to %s", len(rows), out / "summary.csv")
        elif args.command == "eval":
            params, transforms, _ = load_checkpoint(args.checkpoint)
            datasets, splits, _ = load_data(cfg, cfg.training.seed)
            losses = evaluate(params, splits, cfg.training.model_spec(datasets[0].dim), transforms)
            print(json.dumps(losses, sort_keys=True))
        elif args.command == "verify":
            from .checks import run_checks
            return 0 if run_checks(verbose=not args.quiet) else 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except (FedSiloError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    raise SystemExit(run_cli())


if __name__ == "__main__":
    main()
