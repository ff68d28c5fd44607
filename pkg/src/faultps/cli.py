"""Experiment harness CLI: run one strategy under one failure plan, export
metrics, and compare two finished runs.

Exit codes: 0 completed, 2 config error, 3 dataset missing, 4 full chain death.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

from . import chaos, data, metrics, nn
from .strategies import (ChainDeadError, ConfigError, RunResult, StrategyConfig,
                         run_strategy)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_CHAIN_DEAD = 4

MODELS = {
    "cnn": nn.fashion_cnn,
    "small-cnn": nn.small_cnn,
    "mlp": nn.mlp,
}


@dataclass
class RunConfig:
    """One experiment: strategy settings + dataset + failure plan + output."""

    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    dataset: str = "synthetic"
    dataset_images: Optional[str] = None
    dataset_labels: Optional[str] = None
    subset: int = 6000
    synthetic_n: int = 2000
    synthetic_noise: float = 0.35
    model: str = "small-cnn"
    failures: List[dict] = field(default_factory=list)
    out_dir: str = "runs/out"
    run_id: str = ""

    def problems(self) -> List[str]:
        out = self.strategy.problems()
        if self.dataset not in ("synthetic", "fashion"):
            out.append(f"unknown dataset {self.dataset!r}; valid: fashion, synthetic")
        if self.model not in MODELS:
            out.append(f"unknown model {self.model!r}; valid: {', '.join(MODELS)}")
        try:
            chaos.FailurePlan.from_dicts(self.failures)
        except (chaos.ChaosError, TypeError) as exc:
            out.append(f"bad failure plan: {exc}")
        return out

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        doc = dict(doc)
        strat_keys = {f.name for f in fields(StrategyConfig)}
        strat = {k: doc.pop(k) for k in list(doc) if k in strat_keys}
        run_keys = {f.name for f in fields(RunConfig)}
        unknown = [k for k in doc if k not in run_keys]
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = RunConfig(**doc)
        cfg.strategy = StrategyConfig(**strat)
        return cfg

    def to_dict(self) -> dict:
        doc = asdict(self)
        strat = doc.pop("strategy")
        doc.update(strat)
        return doc


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(doc)


def build_dataset(cfg: RunConfig) -> data.Dataset:
    if cfg.dataset == "fashion":
        if not cfg.dataset_images or not cfg.dataset_labels:
            raise FileNotFoundError("fashion dataset needs dataset_images/dataset_labels paths")
        ds = data.load_idx(cfg.dataset_images, cfg.dataset_labels)
        return data.shuffled_subset(ds, min(cfg.subset, len(ds)), cfg.strategy.seed)
    return data.synthetic(cfg.synthetic_n, seed=cfg.strategy.seed,
                          noise=cfg.synthetic_noise)


def execute(cfg: RunConfig, out_dir: Path) -> RunResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    dataset = build_dataset(cfg)
    plan = chaos.FailurePlan.from_dicts(cfg.failures) if cfg.failures else None
    result = run_strategy(cfg.strategy, dataset, model_spec=MODELS[cfg.model](),
                          run_dir=out_dir, plan=plan, run_id=cfg.run_id)
    result.metrics.export_csv(out_dir / "metrics.csv")
    result.trace.export_jsonl(out_dir / "trace.jsonl")
    lines = [f"{k}: {v}" for k, v in result.summary.items()]
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    return result


def cmd_run(args, strip_failures: bool = False) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg.strategy.seed = args.seed
    if args.dataset is not None:
        cfg.dataset = args.dataset
    if strip_failures:
        cfg.failures = []
    problems = cfg.problems()
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out) if args.out else Path(cfg.out_dir)
    try:
        result = execute(cfg, out_dir)
    except FileNotFoundError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except (data.DataError, OSError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except ChainDeadError as exc:
        print(f"fatal: {exc}", file=sys.stderr)
        return EXIT_CHAIN_DEAD
    print(f"run complete: {result.summary['strategy']} "
          f"final_step={result.summary['final_step']} "
          f"accuracy={result.summary['final_accuracy']:.4f} "
          f"grads={result.summary['grads_produced']} -> {out_dir}")
    return EXIT_OK


def compare(dir_a, dir_b) -> dict:
    """Per-downtime-interval and whole-run deltas between two finished runs (B - A)."""
    rows_a = metrics.read_csv(Path(dir_a) / "metrics.csv")
    rows_b = metrics.read_csv(Path(dir_b) / "metrics.csv")
    if not rows_a or not rows_b:
        raise ValueError("empty metrics log")

    def totals(rows):
        last = rows[-1]
        return {"accuracy": last["accuracy"],
                "grads_produced": last["grads_produced"],
                "grads_applied": last["grads_applied"],
                "busy_mean": sum(r["worker_busy_fraction"] for r in rows) / len(rows)}

    ta, tb = totals(rows_a), totals(rows_b)
    report = {
        "final_accuracy_delta": tb["accuracy"] - ta["accuracy"],
        "grads_produced_delta": tb["grads_produced"] - ta["grads_produced"],
        "grads_applied_delta": tb["grads_applied"] - ta["grads_applied"],
        "busy_mean_delta": tb["busy_mean"] - ta["busy_mean"],
        "intervals": [],
    }

    def interval_stats(rows, lo, hi):
        inside = [r for r in rows if lo <= r["wall_time_s"] <= hi]
        if not inside:
            return {"busy": 0.0, "grads": 0, "accuracy": 0.0}
        return {"busy": sum(r["worker_busy_fraction"] for r in inside) / len(inside),
                "grads": inside[-1]["grads_produced"] - inside[0]["grads_produced"],
                "accuracy": inside[-1]["accuracy"]}

    downs_a = metrics.down_intervals(rows_a)
    downs_b = metrics.down_intervals(rows_b)
    for i, (ia, ib) in enumerate(zip(downs_a, downs_b)):
        sa = interval_stats(rows_a, *ia)
        sb = interval_stats(rows_b, *ib)
        report["intervals"].append({
            "index": i,
            "accuracy_delta": sb["accuracy"] - sa["accuracy"],
            "busy_delta": sb["busy"] - sa["busy"],
            "grads_delta": sb["grads"] - sa["grads"],
        })
    return report


def cmd_compare(args) -> int:
    try:
        report = compare(args.dir_a, args.dir_b)
    except FileNotFoundError as exc:
        print(f"compare error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"compare error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"final_accuracy_delta: {report['final_accuracy_delta']:+.4f}")
    print(f"grads_produced_delta: {report['grads_produced_delta']:+d}")
    print(f"grads_applied_delta: {report['grads_applied_delta']:+d}")
    print(f"busy_mean_delta: {report['busy_mean_delta']:+.4f}")
    for iv in report["intervals"]:
        print(f"downtime interval {iv['index']}: accuracy_delta={iv['accuracy_delta']:+.4f} "
              f"busy_delta={iv['busy_delta']:+.4f} grads_delta={iv['grads_delta']:+d}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="faultps",
        description="Parameter-server failure-recovery laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one strategy under a failure plan")
    p_run.add_argument("config", help="JSON run config")
    p_run.add_argument("--out", help="output directory (overrides config)")
    p_run.add_argument("--seed", type=int, help="override the run seed")
    p_run.add_argument("--dataset", choices=["fashion", "synthetic"],
                       help="override the dataset selector")

    p_base = sub.add_parser("baseline", help="run the config with failures stripped")
    p_base.add_argument("config")
    p_base.add_argument("--out")
    p_base.add_argument("--seed", type=int)
    p_base.add_argument("--dataset", choices=["fashion", "synthetic"])

    p_cmp = sub.add_parser("compare", help="report deltas between two run directories")
    p_cmp.add_argument("dir_a")
    p_cmp.add_argument("dir_b")

    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "baseline":
        return cmd_run(args, strip_failures=True)
    return cmd_compare(args)


if __name__ == "__main__":
    sys.exit(main())
