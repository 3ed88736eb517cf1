"""Command-line entry point: simulate -> featurize -> train -> evaluate -> troubleshoot, plus ablate.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .config import ConfigError, RunConfig, load_config
from .featurize import featurize_dir, read_run, window_sample
from .hawkes import HawkesParams
from .logparse import TemplateIndex
from .simulator import SimulationError, default_schedule, generate_topology, simulate, write_telemetry
from .telemetry import FaultType, TelemetryError, load_dataset
from .tensorcore import CheckpointError, NonFiniteError, ShapeError
from .train import TrainingDiverged, describe, load_run, save_run, split_dataset, split_index, train_model

log = logging.getLogger("eadro")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

VARIANTS = {
    "full": {},
    "drop-logs": {"use_logs": False},
    "drop-kpis": {"use_kpis": False},
    "drop-traces": {"use_traces": False},
    "no-graph": {"use_graph": False},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class staged_dir:
    """Write into a scratch directory and move the files into place only on success."""

    def __init__(self, target):
        self.target = Path(target)

    def __enter__(self) -> Path:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.target.mkdir(parents=True, exist_ok=True)
            for f in sorted(self.tmp.iterdir()):
                f.replace(self.target / f.name)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _path(value, default: str) -> Path:
    return Path(value if value is not None else default)


def _model_for(cfg: RunConfig, ds, variant: str):
    overrides = dict(VARIANTS[variant])
    return dataclasses.replace(cfg.model, n_services=len(ds.services), n_events=ds.n_events, slots=ds.slots,
                               **overrides)


# subcommands ------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _config(args)
    sc = cfg.simulate
    topo = generate_topology(cfg.seed, sc.services, sc.max_fanout, sc.extra_edge_prob)
    schedule, duration = default_schedule(topo.names, cfg.featurize.window_sec, sc.fault_windows,
                                          sc.gap_windows, sc.cpu_delta, sc.delay_ms, sc.drop_prob)
    tel = simulate(topo, schedule, duration, sc.request_rate, cfg.seed, sc.noise)
    manifest = {
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "services": topo.names,
        "duration_s": duration,
        "window_sec": cfg.featurize.window_sec,
        "topology": topo.to_json(),
        "counts": {"traces": len(tel.traces), "logs": len(tel.logs), "kpis": len(tel.kpis),
                   "faults": len(tel.labels)},
    }
    out = _path(args.out, cfg.paths.data)
    with staged_dir(out) as tmp:
        write_telemetry(tel, tmp, manifest)
    print(f"wrote {len(tel.traces)} traces, {len(tel.logs)} log lines, {len(tel.kpis)} KPI rows, "
          f"{len(tel.labels)} faults over {duration:.0f} s to {out}")
    return EXIT_OK


def cmd_featurize(args) -> int:
    cfg = _config(args)
    out = _path(args.out, cfg.paths.features)
    with staged_dir(out) as tmp:
        feat = featurize_dir(_path(args.data, cfg.paths.data), tmp, cfg.featurize,
                             {"config_hash": cfg.digest(), "seed": cfg.seed})
    ds = feat.dataset
    print(f"{len(ds.samples)} windows ({feat.train_windows} train), {len(ds.services)} services, "
          f"L={ds.n_events} templates -> {out}")
    return EXIT_OK


def _train(cfg: RunConfig, features: Path, out: Path, variant: str) -> int:
    ds = load_dataset(features / "dataset.bin")
    train, test = split_dataset(ds.samples, cfg.train.split_ratio)
    mcfg = _model_for(cfg, ds, variant)
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    t0 = time.perf_counter()
    model, history = train_model(train, ds.graph(), mcfg, tcfg)
    elapsed = time.perf_counter() - t0
    extra = {
        "variant": variant,
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "split": {"ratio": tcfg.split_ratio, "boundary": split_index(len(ds.samples), tcfg.split_ratio),
                  "train": dataclasses.asdict(describe(train)), "test": dataclasses.asdict(describe(test))},
        "batch_size": tcfg.effective_batch_size(len(train)),
        # normalisation statistics come from the training windows only
        "normalization_fitted_on": "train",
        "final_loss": history.loss[-1] if history.loss else None,
    }
    with staged_dir(out) as tmp:
        save_run(tmp, model, history, extra)
    log.info("trained %s in %.1f s", variant, elapsed)
    print(f"trained {variant} model for {tcfg.epochs} epochs, final loss {extra['final_loss']:.4f} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    return _train(cfg, _path(args.features, cfg.paths.features), _path(args.out, cfg.paths.run), "full")


def _evaluate(cfg: RunConfig, features: Path, run: Path) -> ev.Report:
    ds = load_dataset(features / "dataset.bin")
    model, manifest = load_run(run)
    if manifest["services"] != ds.services:
        raise TelemetryError("checkpoint and dataset disagree on the service roster")
    if {tuple(e) for e in manifest["graph_edges"]} != ds.graph().edges:
        raise TelemetryError("checkpoint and dataset disagree on the dependency graph")
    train, test = split_dataset(ds.samples, cfg.train.split_ratio)
    verdicts = model.predict(test, cfg.evaluate.batch_size)
    nsigma = ev.nsigma_predictions(train, test, cfg.evaluate.nsigma_n)
    subsets = {}
    for ft in FaultType:
        idx = ev.subset(test, ft)
        sub = ev.evaluate_verdicts([test[i] for i in idx], [verdicts[i] for i in idx])
        base = ev.confusion_metrics(ev.ConfusionCounts.from_predictions([test[i].label_y for i in idx], nsigma[idx]))
        subsets[ft.value] = {"FOR": sub.metrics["FOR"], "HR@1": sub.metrics["HR@1"], "HR@3": sub.metrics["HR@3"],
                             "nsigma_FOR": base.FOR}
    base = ev.confusion_metrics(ev.ConfusionCounts.from_predictions([s.label_y for s in test], nsigma))
    extra = {"variant": manifest.get("variant", "full"), "config_hash": manifest.get("config_hash"),
             "nsigma": dataclasses.asdict(base), "by_fault_type": subsets}
    return ev.evaluate_verdicts(test, verdicts, extra)


def _emit_report(report: ev.Report, path: Path) -> None:
    print(report.table())
    for name, sub in report.extra["by_fault_type"].items():
        print(f"  {name:15s} FOR {sub['FOR']:.4f}  HR@1 {sub['HR@1']:.4f}  N-sigma FOR {sub['nsigma_FOR']:.4f}")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(report.to_record(), sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    run = _path(args.run, cfg.paths.run)
    report = _evaluate(cfg, _path(args.features, cfg.paths.features), run)
    _emit_report(report, Path(args.report) if args.report else run / "report.ndjson")
    return EXIT_OK


def cmd_troubleshoot(args) -> int:
    cfg = _config(args)
    features = _path(args.features, cfg.paths.features)
    model, _ = load_run(_path(args.run, cfg.paths.run))
    meta = json.loads((features / "featurize.json").read_text(encoding="utf-8"))
    if not 0 <= args.window < meta["n_windows"]:
        raise TelemetryError(f"window {args.window} outside [0, {meta['n_windows']})")
    index = TemplateIndex.load(features / "templates.txt", depth=cfg.featurize.parser_depth,
                               sim_threshold=cfg.featurize.sim_threshold)
    params = HawkesParams.load(features / "hawkes.txt")
    _, traces, logs, kpis, _ = read_run(_path(args.data, cfg.paths.data))
    sample = window_sample(args.window, traces, logs, kpis, meta["services"], index, params, cfg.featurize)
    verdict = model.predict([sample])[0]
    if not verdict.abnormal:
        print(f"window {args.window}: no anomaly (y_hat={verdict.y_hat:.4f})")
        return EXIT_OK
    print(f"window {args.window}: anomaly (y_hat={verdict.y_hat:.4f}); services to check:")
    print(f"{'rank':>4s}  {'service':16s} {'P':>8s}")
    for r, m in enumerate(verdict.ranking[: args.top], 1):
        print(f"{r:4d}  {meta['services'][m]:16s} {verdict.P[m]:8.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    features = _path(args.features, cfg.paths.features)
    out = _path(args.out, f"{cfg.paths.run}-{args.variant}")
    _train(cfg, features, out, args.variant)
    _emit_report(_evaluate(cfg, features, out), out / "report.ndjson")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eadro", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("simulate", help="emit NDJSON telemetry and fault labels")
    common(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("featurize", help="NDJSON telemetry -> dataset file")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_featurize)

    sp = sub.add_parser("train", help="dataset -> checkpoint + manifest")
    common(sp)
    sp.add_argument("--features")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="checkpoint + dataset -> metrics report")
    common(sp)
    sp.add_argument("--features")
    sp.add_argument("--run")
    sp.add_argument("--report", help="NDJSON report path (default: <run>/report.ndjson)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("troubleshoot", help="verdict for one window of raw telemetry")
    common(sp)
    sp.add_argument("--features")
    sp.add_argument("--run")
    sp.add_argument("--data")
    sp.add_argument("--window", type=int, required=True)
    sp.add_argument("--top", type=int, default=5)
    sp.set_defaults(func=cmd_troubleshoot)

    sp = sub.add_parser("ablate", help="retrain and evaluate a structural variant")
    common(sp)
    sp.add_argument("--variant", required=True, choices=[v for v in VARIANTS if v != "full"])
    sp.add_argument("--features")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("eadro: a subcommand is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TelemetryError, SimulationError, CheckpointError, ShapeError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
