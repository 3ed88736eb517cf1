"""Raw NDJSON telemetry -> fitted artifacts and the window dataset.

The template index, Hawkes parameters and dependency graph are fitted on the
training windows only (the leading `split_ratio` share of windows); test
windows are parsed with the frozen index.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import hawkes
from .hawkes import HawkesParams
from .logparse import UNSEEN_ID, TemplateIndex
from .telemetry import (Dataset, FaultLabel, KpiRow, LogLine, TelemetryError, TraceRecord,
                        assemble_sample, build_dependency_graph, kpi_seconds, persist_dataset,
                        read_ndjson, trace_seconds, window_partition)
from .train import split_index

log = logging.getLogger(__name__)


@dataclass
class FeaturizeConfig:
    window_sec: float = 30.0
    slots: int = 30
    split_ratio: float = 0.6
    hawkes_beta: float = 1.0
    parser_depth: int = 4
    sim_threshold: float = 0.4

    def __post_init__(self):
        if self.window_sec <= 0 or self.slots < 1:
            raise ValueError("window length and slot count must be positive")


@dataclass
class Featurized:
    dataset: Dataset
    index: TemplateIndex
    params: HawkesParams
    n_windows: int
    train_windows: int


class EventTable:
    """Parsed log events as parallel arrays: window, service index, event id, seconds into the window."""

    def __init__(self, logs: Sequence[LogLine], ids: Sequence[int], services: Sequence[str], window_sec: float):
        index = {s: i for i, s in enumerate(services)}
        unknown = {l.service for l in logs} - index.keys()
        if unknown:
            raise TelemetryError(f"log line from unknown service(s): {', '.join(sorted(unknown))}")
        ts = np.array([l.ts for l in logs], dtype=np.int64)
        w_us = int(round(window_sec * 1e6))
        self.window = ts // w_us
        self.offset = (ts - self.window * w_us) / 1e6
        self.service = np.array([index[l.service] for l in logs], dtype=np.int64)
        self.event = np.asarray(ids, dtype=np.int64)
        order = np.lexsort((self.offset, self.event, self.service, self.window))
        for name in ("window", "offset", "service", "event"):
            setattr(self, name, getattr(self, name)[order])
        keys = np.stack([self.window, self.service, self.event], axis=1)
        change = np.flatnonzero(np.any(np.diff(keys, axis=0) != 0, axis=1)) + 1
        self.bounds = np.concatenate([[0], change, [len(ts)]]) if len(ts) else np.zeros(1, dtype=np.int64)

    def groups(self):
        """Yield (window, service, event, sorted offsets) per non-empty group."""
        b = self.bounds
        for lo, hi in zip(b[:-1], b[1:]):
            yield int(self.window[lo]), int(self.service[lo]), int(self.event[lo]), self.offset[lo:hi]


def parse_logs(logs: Sequence[LogLine], cut_us: int, cfg: FeaturizeConfig) -> tuple[TemplateIndex, list[int]]:
    """Fit templates on lines before `cut_us`, then map every line with the frozen index."""
    index = TemplateIndex(depth=cfg.parser_depth, sim_threshold=cfg.sim_threshold)
    for line in logs:
        if line.ts < cut_us:
            index.add(line.message)
    return index, match_all(index, logs)


def match_all(index: TemplateIndex, logs: Sequence[LogLine]) -> list[int]:
    cache: dict[tuple[str, ...], int] = {}
    ids = []
    for line in logs:
        key = tuple(index.tokenize(line.message))
        tid = cache.get(key)
        if tid is None:
            tid = cache[key] = index.match(line.message)
        ids.append(tid)
    return ids


def fit_hawkes(table: EventTable, train_windows: int, n_types: int, cfg: FeaturizeConfig) -> HawkesParams:
    """One realisation per (training window, service) for every service that emitted the type."""
    by_type: dict[int, dict[tuple[int, int], np.ndarray]] = {}
    emitters: dict[int, set[int]] = {}
    for w, s, l, times in table.groups():
        if w >= train_windows or l == UNSEEN_ID:
            continue
        by_type.setdefault(l, {})[(w, s)] = times
        emitters.setdefault(l, set()).add(s)
    empty = np.zeros(0)
    seqs = {}
    for l, found in by_type.items():
        seqs[l] = [(found.get((w, s), empty), cfg.window_sec)
                   for w in range(train_windows) for s in sorted(emitters[l])]
    return hawkes.fit(seqs, n_types, cfg.hawkes_beta)


def log_intensities(table: EventTable, params: HawkesParams, n_windows: int, M: int,
                    cfg: FeaturizeConfig) -> np.ndarray:
    """(windows, M, L) intensity at each window end from the window's own events."""
    out = np.broadcast_to(params.mu, (n_windows, M, params.L)).copy()
    out[..., UNSEEN_ID] = 0.0
    for w, s, l, times in table.groups():
        if w < n_windows and l != UNSEEN_ID:
            out[w, s, l] = hawkes.intensity_at(params.mu[l], params.alpha[l], params.beta, times, cfg.window_sec)
    return out


def featurize(traces: Sequence[TraceRecord], logs: Sequence[LogLine], kpis: Sequence[KpiRow],
              labels: Sequence[FaultLabel], services: Sequence[str], duration: float,
              cfg: FeaturizeConfig | None = None) -> Featurized:
    cfg = cfg or FeaturizeConfig()
    n_windows = int(duration // cfg.window_sec)
    train_windows = split_index(n_windows, cfg.split_ratio)
    cut_us = int(round(train_windows * cfg.window_sec * 1e6))
    logs = sorted(logs, key=lambda r: (r.ts, r.service, r.message))

    index, ids = parse_logs(logs, cut_us, cfg)
    table = EventTable(logs, ids, services, cfg.window_sec)
    params = fit_hawkes(table, train_windows, index.L, cfg)
    lam = log_intensities(table, params, n_windows, len(services), cfg)
    log.info("parsed %d log lines into %d templates", len(logs), index.L)

    graph = build_dependency_graph([r for r in traces if r.start < cut_us], services)
    by_trace = window_partition(traces, cfg.window_sec, key=trace_seconds)
    by_kpi = window_partition(kpis, cfg.window_sec, key=kpi_seconds)
    samples = [assemble_sample(w, by_trace.get(w, ()), by_kpi.get(w, ()), lam[w], labels, services,
                               cfg.window_sec, cfg.slots)
               for w in range(n_windows)]
    ds = Dataset(list(services), index.L, cfg.slots, samples, set(graph.edges))
    return Featurized(ds, index, params, n_windows, train_windows)


def window_sample(window: int, traces: Sequence[TraceRecord], logs: Sequence[LogLine], kpis: Sequence[KpiRow],
                  services: Sequence[str], index: TemplateIndex, params: HawkesParams,
                  cfg: FeaturizeConfig, labels: Sequence[FaultLabel] = ()):
    """Featurize one window of raw telemetry against frozen artifacts."""
    lo, hi = window * cfg.window_sec, (window + 1) * cfg.window_sec
    logs = sorted((l for l in logs if lo <= l.ts / 1e6 < hi), key=lambda r: (r.ts, r.service, r.message))
    table = EventTable(logs, match_all(index, logs), services, cfg.window_sec)
    table.window = table.window - window
    lam = log_intensities(table, params, 1, len(services), cfg)[0]
    traces = [r for r in traces if lo <= r.start / 1e6 < hi]
    kpis = [r for r in kpis if lo <= r.ts < hi]
    return assemble_sample(window, traces, kpis, lam, labels, services, cfg.window_sec, cfg.slots)


def read_run(data_dir) -> tuple[dict, list[TraceRecord], list[LogLine], list[KpiRow], list[FaultLabel]]:
    data = Path(data_dir)
    manifest_path = data / "manifest.json"
    if not manifest_path.exists():
        raise TelemetryError(f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return (manifest, read_ndjson(data / "traces.ndjson", TraceRecord), read_ndjson(data / "logs.ndjson", LogLine),
            read_ndjson(data / "kpis.ndjson", KpiRow), read_ndjson(data / "labels.ndjson", FaultLabel))


def featurize_dir(data_dir, out_dir, cfg: FeaturizeConfig | None = None, extra: dict | None = None) -> Featurized:
    """Featurize a simulated run and write templates.txt, hawkes.txt, dataset.bin and featurize.json."""
    cfg = cfg or FeaturizeConfig()
    manifest, traces, logs, kpis, labels = read_run(data_dir)
    services = manifest["services"]
    feat = featurize(traces, logs, kpis, labels, services, float(manifest["duration_s"]), cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feat.index.save(out / "templates.txt")
    feat.params.save(out / "hawkes.txt")
    persist_dataset(feat.dataset, out / "dataset.bin")
    meta = {
        "services": services,
        "n_windows": feat.n_windows,
        "train_windows": feat.train_windows,
        # every fitted artifact saw training windows only
        "fitted_on_windows": [0, feat.train_windows],
        "template_digest": feat.index.digest(),
        "n_events": feat.index.L,
        "edges": sorted(list(e) for e in feat.dataset.edges),
        "config": asdict(cfg),
    }
    meta.update(extra or {})
    tmp = out / "featurize.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(out / "featurize.json")
    return feat
