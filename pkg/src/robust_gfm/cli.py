"""Command-line experiment harness: data generation, pre-training, fine-tuning, attacks, ablations."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema

from .checkpoint import load_ensemble, save_ensemble
from .finetune import (EvalSetup, FinetuneConfig, Metrics, TargetContext, config_hash, evaluate,
                       export_loss_trace, write_metrics)
from .graph import Dataset, PerturbationSpec, generate_sbm, load_dataset, save_dataset
from .pretrain import PretrainConfig, pretrain_all
from .routing import export_routing_trace

log = logging.getLogger("robust_gfm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
ABLATIONS = ("no-augment-ib", "no-routing", "no-gsl")

_DATASET_SCHEMA = {
    "type": "object",
    "required": ["name"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "path": {"type": "string"},
        "sbm": {
            "type": "object",
            "required": ["num_nodes", "num_classes", "p_in", "p_out", "feature_dim", "class_mean_separation", "seed"],
            "properties": {
                "num_nodes": {"type": "integer", "minimum": 2},
                "num_classes": {"type": "integer", "minimum": 1},
                "p_in": {"type": "number", "minimum": 0, "maximum": 1},
                "p_out": {"type": "number", "minimum": 0, "maximum": 1},
                "feature_dim": {"type": "integer", "minimum": 1},
                "class_mean_separation": {"type": "number", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "oneOf": [{"required": ["path"]}, {"required": ["sbm"]}],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["sources", "target"],
    "properties": {
        "sources": {"type": "array", "minItems": 1, "items": _DATASET_SCHEMA},
        "target": _DATASET_SCHEMA,
        "d0": {"type": "integer", "minimum": 1},
        "pretrain": {"type": "object"},
        "finetune": {"type": "object"},
        "m": {"type": "integer", "minimum": 1},
        "query_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "task_kind": {"enum": ["node", "graph"]},
        "perturbations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind"],
                "properties": {
                    "kind": {"enum": ["feature-gaussian", "edge-drop", "targeted"]},
                    "rate": {"type": "number", "minimum": 0, "maximum": 1},
                    "budget": {"type": "integer", "minimum": 1},
                    "mode": {"enum": ["evasion", "poisoning"]},
                    "support_only": {"type": "boolean"},
                },
                "additionalProperties": False,
            },
        },
        "ablations": {"type": "array", "items": {"enum": list(ABLATIONS)}, "uniqueItems": True},
        "repeats": {"type": "integer", "minimum": 1},
        "workers": {"type": "integer", "minimum": 1},
        "attack_targets": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
    },
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    path: str | None = None
    sbm: dict | None = None

    def load(self) -> Dataset:
        if self.sbm is not None:
            return generate_sbm(**self.sbm, domain_id=self.name)
        d = Path(self.path)
        labels = d / "labels.csv"
        return load_dataset(d / "edges.txt", d / "features.csv", labels if labels.exists() else None, self.name)


@dataclass(frozen=True)
class ExperimentConfig:
    sources: tuple
    target: DatasetSpec
    d0: int = 16
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    m: int = 5
    query_fraction: float = 1.0
    task_kind: str = "node"
    perturbations: tuple = ()
    ablations: tuple = ()
    repeats: int = 20
    workers: int = 1
    attack_targets: int = 20
    output_dir: str = "runs"
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def _build(cls, values: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from exc
    sources = tuple(DatasetSpec(**s) for s in doc["sources"])
    target = DatasetSpec(**doc["target"])
    for s in sources:
        if s.name == target.name or (s.sbm is not None and s.sbm == target.sbm) or (s.path and s.path == target.path):
            raise ConfigError(f"target {target.name!r} is also a source; pre-training and fine-tuning graphs must differ")
    if len({s.name for s in sources}) != len(sources):
        raise ConfigError("source names must be unique")
    for spec in (*sources, target):
        if spec.sbm is not None and spec.sbm["p_in"] < spec.sbm["p_out"]:
            raise ConfigError(f"{spec.name}: p_in < p_out")
    perturbations = []
    for i, p in enumerate(doc.get("perturbations", [])):
        p = dict(p)
        if p["kind"] != "targeted":
            p.setdefault("mode", "poisoning")
        perturbations.append(_build(PerturbationSpec, p, f"perturbations/{i}"))
    return ExperimentConfig(
        sources=sources,
        target=target,
        d0=doc.get("d0", 16),
        pretrain=_build(PretrainConfig, doc.get("pretrain", {}), "pretrain"),
        finetune=_build(FinetuneConfig, doc.get("finetune", {}), "finetune"),
        m=doc.get("m", 5),
        query_fraction=doc.get("query_fraction", 1.0),
        task_kind=doc.get("task_kind", "node"),
        perturbations=tuple(perturbations),
        ablations=tuple(doc.get("ablations", ())),
        repeats=doc.get("repeats", 20),
        workers=doc.get("workers", 1),
        attack_targets=doc.get("attack_targets", 20),
        output_dir=doc.get("output_dir", "runs"),
        raw=doc,
    )


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(doc)


# -- report ----------------------------------------------------------------------------
@dataclass
class RunReport:
    config_hash: str
    seeds: list
    rows: list = field(default_factory=list)  # one dict per (variant, setting)
    timings: dict = field(default_factory=dict)

    def add(self, variant: str, setting: str, metrics: Metrics, trace_dir: str | None = None) -> None:
        self.rows.append({
            "variant": variant,
            "setting": setting,
            "mean": metrics.mean,
            "std": metrics.std,
            "accuracies": list(metrics.accuracies),
            "seeds": list(metrics.seeds),
            "final_alpha": [list(r.routing_trace[-1]) if r.routing_trace else [] for r in metrics.runs],
            "trace_dir": trace_dir,
        })

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


# -- stages ----------------------------------------------------------------------------
def _seeds(base: int, repeats: int) -> list[int]:
    return [base + i for i in range(repeats)]


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> list[Path]:
    data_dir = out / "data"
    written = []
    for spec in (*cfg.sources, cfg.target):
        if spec.sbm is None:
            continue
        written.append(save_dataset(spec.load(), data_dir / spec.name))
    return written


def _pretrain(cfg: ExperimentConfig, augment: bool = True, lambda_ib: float | None = None):
    pcfg = cfg.pretrain if lambda_ib is None else replace(cfg.pretrain, lambda_ib=lambda_ib)
    datasets = [s.load() for s in cfg.sources]
    return pretrain_all(datasets, pcfg, d0=cfg.d0, augment=augment, workers=cfg.workers)


def cmd_pretrain(cfg: ExperimentConfig, out: Path) -> dict:
    start = time.perf_counter()
    ensemble = _pretrain(cfg)
    elapsed = time.perf_counter() - start
    save_ensemble(ensemble, out / "checkpoints")
    summary = {"config_hash": cfg.hash, "domains": [e.domain_id for e in ensemble],
               "param_hashes": [e.param_hash() for e in ensemble], "seconds": elapsed}
    (out / "pretrain_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _evaluate_variant(cfg, report, out, variant, ensemble, ft_cfg, augment, seeds, target):
    settings = [None, *cfg.perturbations]
    clean_ctx = TargetContext.build(target, cfg.d0, ft_cfg.ppr_alpha, ft_cfg.T, augment)
    for spec in settings:
        name = "clean" if spec is None else spec.label
        setup = EvalSetup(target, tuple(ensemble), ft_cfg, cfg.d0, cfg.m, cfg.query_fraction, cfg.task_kind,
                          augment, spec, cfg.attack_targets, clean_ctx)
        t0 = time.perf_counter()
        metrics = evaluate(setup, len(seeds), seeds, workers=cfg.workers)
        report.timings[f"{variant}/{name}"] = time.perf_counter() - t0
        sub = out / "metrics" / variant
        sub.mkdir(parents=True, exist_ok=True)
        write_metrics(metrics, sub / f"{name}.csv", sub / f"{name}.json", cfg.raw)
        trace_dir = out / "traces" / variant / name
        trace_dir.mkdir(parents=True, exist_ok=True)
        for run in metrics.runs:
            export_loss_trace(run.loss_trace, trace_dir / f"seed{run.seed}_loss.csv")
            export_routing_trace(run.routing_trace, trace_dir / f"seed{run.seed}_routing.csv")
        report.add(variant, name, metrics, str(trace_dir.relative_to(out)))
        log.info("%s/%s: %.4f +- %.4f", variant, name, metrics.mean, metrics.std)


def _load_checkpoints(checkpoint_dir: Path):
    if not (checkpoint_dir / "ensemble.json").exists():
        raise FileNotFoundError(f"no checkpoints in {checkpoint_dir}; run `pretrain` first")
    return load_ensemble(checkpoint_dir)


def cmd_finetune(cfg: ExperimentConfig, out: Path, seed: int, checkpoint_dir: Path | None = None) -> RunReport:
    ensemble = _load_checkpoints(checkpoint_dir or out / "checkpoints")
    seeds = _seeds(seed, cfg.repeats)
    report = RunReport(cfg.hash, seeds)
    _evaluate_variant(cfg, report, out, "full", ensemble, cfg.finetune, True, seeds, cfg.target.load())
    report.write(out / "report.json")
    return report


def cmd_ablate(cfg: ExperimentConfig, out: Path, seed: int, checkpoint_dir: Path | None = None) -> RunReport:
    ensemble = _load_checkpoints(checkpoint_dir or out / "checkpoints")
    seeds = _seeds(seed, cfg.repeats)
    report = RunReport(cfg.hash, seeds)
    target = cfg.target.load()
    _evaluate_variant(cfg, report, out, "full", ensemble, cfg.finetune, True, seeds, target)
    for variant in cfg.ablations or ABLATIONS:
        if variant == "no-augment-ib":
            raw = _pretrain(cfg, augment=False, lambda_ib=0.0)
            _evaluate_variant(cfg, report, out, variant, raw, cfg.finetune, False, seeds, target)
        elif variant == "no-routing":
            _evaluate_variant(cfg, report, out, variant, ensemble, replace(cfg.finetune, use_routing=False),
                              True, seeds, target)
        else:
            _evaluate_variant(cfg, report, out, variant, ensemble, replace(cfg.finetune, use_gsl=False),
                              True, seeds, target)
    report.write(out / "ablation_report.json")
    return report


# -- entry point ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-gfm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "pretrain", "finetune", "attack-eval", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON document")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, default=0, help="first evaluation seed")
        p.add_argument("--repeats", type=int, help="number of seeded runs (overrides config)")
        p.add_argument("--checkpoints", help="checkpoint directory (default <out>/checkpoints)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.repeats is not None:
            if args.repeats < 1:
                raise ConfigError("--repeats must be >= 1")
            cfg = replace(cfg, repeats=args.repeats)
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if args.command == "attack-eval" and not cfg.perturbations:
            raise ConfigError("attack-eval needs at least one perturbation")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.output_dir)
    ckpt = Path(args.checkpoints) if args.checkpoints else None
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            for p in cmd_gen_data(cfg, out):
                print(p)
        elif args.command == "pretrain":
            print(json.dumps(cmd_pretrain(cfg, out), indent=2))
        elif args.command in ("finetune", "attack-eval"):
            _print_report(cmd_finetune(cfg, out, args.seed, ckpt))
        else:
            _print_report(cmd_ablate(cfg, out, args.seed, ckpt))
    except Exception as exc:  # any runtime failure maps to exit code 3
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _print_report(report: RunReport) -> None:
    for row in report.rows:
        print(f"{row['variant']:>14}  {row['setting']:<14} {row['mean']:.4f} +- {row['std']:.4f}")


if __name__ == "__main__":
    sys.exit(main())
