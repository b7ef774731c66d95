"""Command-line experiment runner.

Subcommands ``pretrain``, ``finetune``, ``eval``, ``sweep`` and ``report``
all read one JSON experiment file and write their artifacts under
``<output_dir>/<name>/<subcommand>``.  ``DESMOE_OUTPUT_DIR`` overrides the
configured output directory.

Exit codes: 0 success, 1 configuration error, 2 missing input, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datagen import DomainSpec, build_suite, default_domains, exact_match_eval, general_spec, predictions
from .moe_core import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .specialization import snapshot_csv
from .trainer import (POLICIES, PretrainConfig, TrainConfig, Trainer, forgetting_report, metrics_csv, pretrain,
                      sweep_domains)

log = logging.getLogger("desmoe")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ENV = "DESMOE_OUTPUT_DIR"
SWEEP_COLUMNS = ["n", "policy", "seed", "before", "after", "retention", "overlap"]


class ConfigError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


@dataclass
class SweepSettings:
    seeds: list[int] = field(default_factory=lambda: [0])
    steps_per_domain: int = 50
    general_size: int = 128
    policies: list[str] = field(default_factory=lambda: list(POLICIES))

    def __post_init__(self):
        if not self.seeds or self.steps_per_domain <= 0 or self.general_size <= 0:
            raise ConfigError("sweep needs at least one seed and positive step/suite sizes")
        bad = set(self.policies) - set(POLICIES)
        if bad:
            raise ConfigError(f"unknown policies in sweep: {sorted(bad)}")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    output_dir: str = "runs"
    checkpoint: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    domains: list[DomainSpec] = field(default_factory=lambda: default_domains(6))
    sweep: SweepSettings = field(default_factory=SweepSettings)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kw = {k: d[k] for k in ("name", "output_dir", "checkpoint") if k in d}
            if "model" in d:
                kw["model"] = ModelConfig.from_dict(d["model"])
            if "pretrain" in d:
                kw["pretrain"] = PretrainConfig.from_dict(d["pretrain"])
            if "train" in d:
                kw["train"] = TrainConfig.from_dict(d["train"])
            if "domains" in d:
                kw["domains"] = [DomainSpec.from_dict(x) for x in d["domains"]]
            if "sweep" in d:
                s = d["sweep"]
                extra = set(s) - {f.name for f in dataclasses.fields(SweepSettings)}
                if extra:
                    raise ConfigError(f"unknown sweep keys: {sorted(extra)}")
                kw["sweep"] = SweepSettings(**s)
            cfg = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        kinds = [s.kind for s in cfg.domains]
        if len(set(kinds)) != len(kinds):
            raise ConfigError("task kinds must be distinct within an experiment")
        if not cfg.domains:
            raise ConfigError("at least one domain is required")
        return cfg

    def to_dict(self) -> dict:
        return {
            "name": self.name, "output_dir": self.output_dir, "checkpoint": self.checkpoint,
            "model": dataclasses.asdict(self.model), "pretrain": dataclasses.asdict(self.pretrain),
            "train": dataclasses.asdict(self.train), "domains": [s.to_dict() for s in self.domains],
            "sweep": dataclasses.asdict(self.sweep),
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingInput(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw)


# -- run directory -------------------------------------------------------------------


class RunDir:
    """Artifact writer for one subcommand invocation."""

    def __init__(self, cfg: ExperimentConfig, sub: str):
        root = Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)
        self.path = root / cfg.name / sub
        self.path.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self._events = open(self.path / "events.log", "w")
        self.write_json("config-echo.json", cfg.to_dict())

    def write_json(self, name: str, obj) -> Path:
        p = self.path / name
        p.write_text(dump_json(obj))
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path / name
        p.write_text(text)
        return p

    def event(self, **rec) -> None:
        rec = {"time": time.strftime("%Y-%m-%dT%H:%M:%S"), **rec}
        self._events.write(json.dumps(_finite(rec), sort_keys=True, default=_jsonable) + "\n")
        self._events.flush()

    def summary(self, **body) -> Path:
        return self.write_json("summary.json", {"config_hash": self.cfg.hash(), "experiment": self.cfg.name, **body})

    def close(self) -> None:
        self._events.close()


def _finite(obj):
    """NaN/inf become null so the output stays strict JSON."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def dump_json(obj) -> str:
    return json.dumps(_finite(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _pretrained_path(cfg: ExperimentConfig, override: str | None) -> Path:
    if override:
        return Path(override)
    if cfg.checkpoint:
        return Path(cfg.checkpoint)
    root = Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)
    return root / cfg.name / "pretrain" / "model.ckpt"


def _load(path: Path):
    if not path.is_file():
        raise MissingInput(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# -- subcommands -----------------------------------------------------------------------


def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    run = RunDir(cfg, "pretrain")
    suite = build_suite(cfg.domains + [general_spec(cfg.domains[0].seed)], cfg.pretrain.eval_size)
    run.event(event="start", command="pretrain", steps=cfg.pretrain.steps)
    try:
        model, records = pretrain(cfg.model, cfg.domains, cfg.pretrain, suite)
    except nx.NumericError as exc:
        run.event(event="numeric_failure", message=str(exc))
        run.close()
        raise
    run.write_text("metrics.csv", metrics_csv(records))
    save_checkpoint(model, run.path / "model.ckpt", extra={"config_hash": cfg.hash()})
    final = records[-1].accuracy if records else exact_match_eval(model, suite)
    run.summary(command="pretrain", parameters=model.num_parameters(), accuracy=final)
    run.event(event="done", checkpoint=str(run.path / "model.ckpt"))
    run.close()
    print(f"pretrained checkpoint: {run.path / 'model.ckpt'}")
    return EXIT_OK


def cmd_finetune(cfg: ExperimentConfig, args) -> int:
    policy = args.policy or cfg.train.policy
    train = dataclasses.replace(cfg.train, policy=policy)
    src = _pretrained_path(cfg, args.checkpoint)
    base, _ = _load(src)
    run = RunDir(cfg, f"finetune-{policy}")
    suite = build_suite(cfg.domains + [general_spec(cfg.domains[0].seed)], train.eval_size)
    before = exact_match_eval(base, suite)
    run.event(event="start", command="finetune", policy=policy, checkpoint=str(src))
    model = copy.deepcopy(base)
    if model.config.precision != train.precision:
        model.set_precision(train.precision)
    trainer = Trainer(model, list(cfg.domains), train, suite)
    try:
        trainer.run()
    except nx.NumericError:
        for ev in trainer.events:
            run.event(**ev)
        run.write_text("metrics.csv", metrics_csv(trainer.records))
        run.close()
        raise
    for ev in trainer.events:
        run.event(**ev)
    run.write_text("metrics.csv", metrics_csv(trainer.records))
    if trainer.snapshots:
        header = snapshot_csv([], 0)
        run.write_text("affinity.csv", header + "".join(trainer.snapshots))
    save_checkpoint(model, run.path / "model.ckpt", extra={"config_hash": cfg.hash(), "policy": policy})
    after = exact_match_eval(model, suite)
    report = forgetting_report({"general": before["general"]}, {"general": after["general"]})
    run.summary(command="finetune", policy=policy, before=before, after=after, retention=report["retention"],
                overlap=trainer.final_overlap() if policy == "des-moe" else None,
                experts_per_layer=[m.num_experts for m in model.layers])
    run.close()
    print(f"{policy}: general retention {report['retention']:.4f}; artifacts in {run.path}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    src = _pretrained_path(cfg, args.checkpoint)
    model, _ = _load(src)
    run = RunDir(cfg, "eval")
    suite = build_suite(cfg.domains + [general_spec(cfg.domains[0].seed)], cfg.train.eval_size)
    acc = exact_match_eval(model, suite)
    with open(run.path / "predictions.jsonl", "w") as f:
        for name, (inp, tgt) in suite.items.items():
            pred = predictions(model, inp)
            for a, b, c in zip(inp, tgt, pred):
                f.write(json.dumps({"domain": name, "inputs": a.tolist(), "targets": b.tolist(),
                                    "predictions": c.tolist()}) + "\n")
    run.event(event="eval", checkpoint=str(src))
    run.summary(command="eval", checkpoint=str(src), accuracy=acc)
    run.close()
    for k, v in acc.items():
        print(f"{k:>16s}  {v:.4f}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    if len(cfg.domains) < args.n_max:
        raise ConfigError(f"sweep to N={args.n_max} needs {args.n_max} domain specs, config has {len(cfg.domains)}")
    if not 1 <= args.n_min <= args.n_max:
        raise ConfigError("need 1 <= --n-min <= --n-max")
    run = RunDir(cfg, "sweep")
    rows = []
    for seed in cfg.sweep.seeds:
        if args.checkpoint:
            base, _ = _load(Path(args.checkpoint))
        else:
            ck = run.path / f"pretrain-seed{seed}.ckpt"
            if ck.is_file():
                base, _ = _load(ck)
            else:
                run.event(event="pretrain", seed=seed)
                base, _ = pretrain(cfg.model, cfg.domains, dataclasses.replace(cfg.pretrain, seed=seed))
                save_checkpoint(base, ck)
        train = dataclasses.replace(cfg.train, seed=seed)
        got = sweep_domains(base, cfg.domains, train, cfg.sweep.steps_per_domain, policies=cfg.sweep.policies,
                            n_min=args.n_min, n_max=args.n_max, general_size=cfg.sweep.general_size)
        for r in got:
            run.event(event="sweep_point", **r)
        rows.extend(got)
    write_sweep_csv(run.path / "sweep.csv", rows)
    run.summary(command="sweep", n_min=args.n_min, n_max=args.n_max, seeds=cfg.sweep.seeds,
                mean_retention=aggregate_retention(rows))
    run.close()
    print(f"sweep rows: {len(rows)}; artifacts in {run.path}")
    return EXIT_OK


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r["n"], r["policy"], r["seed"], f"{r['before']:.6f}", f"{r['after']:.6f}",
                        f"{r['retention']:.6f}", f"{r['overlap']:.6f}"])


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        out = []
        for r in csv.DictReader(f):
            out.append({"n": int(r["n"]), "policy": r["policy"], "seed": int(r["seed"]),
                        "before": float(r["before"]), "after": float(r["after"]),
                        "retention": float(r["retention"]), "overlap": float(r["overlap"])})
        return out


def aggregate_retention(rows) -> dict[str, dict[str, float]]:
    """Seed-mean retention per policy and N (keys are strings for JSON)."""
    out: dict[str, dict[str, float]] = {}
    for pol in sorted({r["policy"] for r in rows}):
        per_n = {}
        for n in sorted({r["n"] for r in rows if r["policy"] == pol}):
            vals = [r["retention"] for r in rows if r["policy"] == pol and r["n"] == n]
            per_n[str(n)] = float(np.mean(vals))
        out[pol] = per_n
    return out


def cmd_report(args) -> int:
    root = Path(args.metrics_dir)
    if not root.is_dir():
        raise MissingInput(f"metrics directory not found: {root}")
    sweeps = sorted(root.rglob("sweep.csv"))
    finetunes = sorted(p for p in root.rglob("summary.json") if p.parent.name.startswith("finetune-"))
    if not sweeps and not finetunes:
        raise MissingInput(f"no sweep.csv or finetune summaries under {root}")
    rows = []
    for p in sweeps:
        for r in read_sweep_csv(p):
            # recompute from the raw before/after columns instead of trusting the stored ratio
            r["retention"] = r["after"] / r["before"] if r["before"] > 0 else float("nan")
            rows.append(r)
    runs = {}
    hashes = set()
    for p in finetunes:
        s = json.loads(p.read_text())
        hashes.add(s.get("config_hash"))
        runs[p.parent.name] = {k: s.get(k) for k in ("policy", "retention", "overlap")}
    for p in sweeps:
        sp = p.parent / "summary.json"
        if sp.is_file():
            hashes.add(json.loads(sp.read_text()).get("config_hash"))
    overlaps = [r["overlap"] for r in rows if r["policy"] == "des-moe" and np.isfinite(r["overlap"])]
    summary = {
        "config_hashes": sorted(h for h in hashes if h),
        "sweep_files": [str(p.relative_to(root)) for p in sweeps],
        "mean_retention": aggregate_retention(rows) if rows else {},
        "mean_des_overlap": float(np.mean(overlaps)) if overlaps else None,
        "finetune_runs": runs,
    }
    out = Path(args.out) if args.out else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(dump_json(summary))
    if rows and not args.no_plots:
        plot_retention(summary["mean_retention"], out / "retention_vs_n.png")
    print(f"report written to {out}")
    return EXIT_OK


def plot_retention(mean_retention: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for pol, per_n in mean_retention.items():
        ns = sorted(int(n) for n in per_n)
        ax.plot(ns, [per_n[str(n)] for n in ns], marker="o", label=pol)
    ax.set_xlabel("number of fine-tuning domains N")
    ax.set_ylabel("general-suite retention")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


# -- entry point -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes are configuration errors (exit 1), not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="desmoe", description="Multi-domain MoE fine-tuning experiments on synthetic tasks.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the base model on the all-domain mixture")
    p.add_argument("config")

    p = sub.add_parser("finetune", help="fine-tune a pretrained checkpoint under one policy")
    p.add_argument("config")
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--checkpoint", help="pretrained checkpoint (default: the pretrain run of this experiment)")

    p = sub.add_parser("eval", help="exact-match accuracy of a checkpoint on every suite")
    p.add_argument("config")
    p.add_argument("--checkpoint")

    p = sub.add_parser("sweep", help="general-suite retention as the domain count grows")
    p.add_argument("config")
    p.add_argument("--n-min", type=int, default=2)
    p.add_argument("--n-max", type=int, default=6)
    p.add_argument("--checkpoint", help="use one pretrained checkpoint for every seed instead of pretraining")

    p = sub.add_parser("report", help="aggregate run directories into summary.json and plots")
    p.add_argument("metrics_dir")
    p.add_argument("--out")
    p.add_argument("--no-plots", action="store_true")
    return ap


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except nx.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
