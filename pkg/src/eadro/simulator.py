"""Deterministic microservice telemetry generator with scheduled fault injection.

Each user request enters at an entry service and walks the call DAG; every
traversed edge yields one trace record, the callee writes a completion log
line, and per-second KPI rows are derived from the load each service served.

Fault effects:
  network_delay   every call into the service gains ``delay_ms``; callers up
                  the chain slow down with it and log slow responses
  packet_loss     every service-to-service call touching the service, inbound
                  or outbound, is dropped with ``drop_prob``; a dropped callee
                  never runs, so its subtree's completion logs vanish while the
                  caller logs the failure. The lossy service retransmits, so
                  its tx_bytes grow with every drop it takes part in. The root
                  request comes from outside the modelled system and is exempt
  cpu_exhaustion  cpu_* KPIs of the service rise by ``cpu_delta`` with jitter;
                  latency and logs are untouched
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .telemetry import (KPI_NAMES, FaultLabel, FaultType, KpiRow, LogLine, Status, TelemetryError,
                        TraceRecord, write_ndjson)

SERVICE_WORDS = (
    "frontend", "gateway", "auth", "user", "order", "cart", "payment", "inventory", "shipping",
    "catalog", "search", "review", "notify", "pricing", "media", "session", "ledger", "profile",
    "coupon", "report",
)

COMPLETION = "request {rid} served in {ms} ms"
SLOW = "slow response from {callee} after {ms} ms"
DROPPED = "call to {callee} failed: connection dropped after {ms} ms"


class SimulationError(TelemetryError):
    pass


@dataclass
class ServiceSpec:
    name: str
    base_latency_ms: float
    base_cpu: float
    base_mem: float
    # background templates with a "{n}" slot and their rate in events/second
    log_templates: list[tuple[str, float]] = field(default_factory=list)


@dataclass
class Topology:
    services: list[ServiceSpec]
    call_edges: list[tuple[str, str, float]]  # (caller, callee, invocation probability)
    entry_services: list[str]

    def __post_init__(self):
        names = self.names
        if len(set(names)) != len(names):
            raise SimulationError("duplicate service names")
        known = set(names)
        for caller, callee, p in self.call_edges:
            if caller not in known or callee not in known:
                raise SimulationError(f"edge {caller}->{callee} names an unknown service")
            if not 0.0 <= p <= 1.0:
                raise SimulationError(f"edge {caller}->{callee}: probability {p} outside [0, 1]")
        if not self.entry_services or not set(self.entry_services) <= known:
            raise SimulationError("entry services must be a non-empty subset of the roster")
        for s in self.services:
            if s.base_latency_ms < 0 or any(rate < 0 for _, rate in s.log_templates):
                raise SimulationError(f"{s.name}: negative base latency or log rate")
        if self.has_cycle():
            raise SimulationError("call graph has a directed cycle")

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.services]

    def children(self) -> dict[str, list[tuple[str, float]]]:
        out: dict[str, list[tuple[str, float]]] = {n: [] for n in self.names}
        for caller, callee, p in self.call_edges:
            out[caller].append((callee, p))
        return out

    def has_cycle(self) -> bool:
        children = self.children()
        state: dict[str, int] = {}

        def visit(n: str) -> bool:
            state[n] = 1
            for c, _ in children[n]:
                if state.get(c) == 1 or (c not in state and visit(c)):
                    return True
            state[n] = 2
            return False

        return any(n not in state and visit(n) for n in self.names)

    def upstream_of(self, name: str) -> set[str]:
        """Services with a call path into `name`."""
        parents: dict[str, list[str]] = {n: [] for n in self.names}
        for caller, callee, _ in self.call_edges:
            parents[callee].append(caller)
        seen, stack = set(), [name]
        while stack:
            for p in parents[stack.pop()]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    def to_json(self) -> dict:
        return asdict(self)


def service_names(M: int) -> list[str]:
    if M <= len(SERVICE_WORDS):
        return list(SERVICE_WORDS[:M])
    return [f"svc{i:02d}" for i in range(M)]


def generate_topology(seed: int, M: int, max_fanout: int = 3, extra_edge_prob: float = 0.15) -> Topology:
    """Random connected call DAG rooted at service 0.

    Each later service hangs off an earlier one (biased towards recent
    services, which makes chains deeper), then a few forward shortcut edges
    are added. Edges only point from lower to higher index, so no cycles.
    """
    if M < 2:
        raise SimulationError("a topology needs at least two services")
    if max_fanout < 1:
        raise SimulationError(f"max_fanout={max_fanout} cannot connect {M} services")
    rng = random.Random(seed)
    names = service_names(M)
    fanout = [0] * M
    edges: list[tuple[str, str, float]] = []
    for i in range(1, M):
        candidates = [j for j in range(i) if fanout[j] < max_fanout]
        # the newest service always has room, so candidates is never empty
        weights = [1.0 + j for j in candidates]
        j = rng.choices(candidates, weights)[0]
        fanout[j] += 1
        edges.append((names[j], names[i], round(rng.uniform(0.6, 1.0), 3)))
    present = {(a, b) for a, b, _ in edges}
    for i in range(M):
        for k in range(i + 2, M):
            if fanout[i] < max_fanout and (names[i], names[k]) not in present and rng.random() < extra_edge_prob:
                fanout[i] += 1
                edges.append((names[i], names[k], round(rng.uniform(0.3, 0.7), 3)))
    services = []
    for i, name in enumerate(names):
        services.append(ServiceSpec(
            name=name,
            base_latency_ms=round(rng.uniform(5.0, 25.0), 2),
            base_cpu=round(10.0 + 30.0 * i / max(M - 1, 1) + rng.uniform(-2.0, 2.0), 2),
            base_mem=round(rng.uniform(200.0, 900.0), 1),
            log_templates=[(f"{name} heartbeat seq {{n}}", round(rng.uniform(0.2, 0.5), 3)),
                           (f"{name} cache sync flushed {{n}} entries", round(rng.uniform(0.05, 0.2), 3))],
        ))
    return Topology(services, edges, [names[0]])


@dataclass
class FaultSpec:
    label: FaultLabel
    cpu_delta: float = 40.0
    delay_ms: float = 500.0
    drop_prob: float = 0.8

    def __post_init__(self):
        if self.cpu_delta < 0 or self.delay_ms < 0:
            raise SimulationError("fault magnitudes must be non-negative")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise SimulationError("drop_prob must lie in [0, 1]")

    def active(self, t_us: float) -> bool:
        return self.label.start <= t_us < self.label.end


@dataclass
class FaultSchedule:
    faults: list[FaultSpec] = field(default_factory=list)

    def __post_init__(self):
        by_service: dict[str, list[FaultLabel]] = {}
        for f in self.faults:
            by_service.setdefault(f.label.service, []).append(f.label)
        for service, labels in by_service.items():
            labels.sort(key=lambda l: l.start)
            for a, b in zip(labels, labels[1:]):
                if b.start < a.end:
                    raise SimulationError(f"overlapping faults on {service}")

    @property
    def labels(self) -> list[FaultLabel]:
        return [f.label for f in self.faults]

    def check_roster(self, names: Sequence[str]) -> None:
        unknown = sorted({f.label.service for f in self.faults} - set(names))
        if unknown:
            raise SimulationError(f"schedule references unknown service(s): {', '.join(unknown)}")


def default_schedule(services: Sequence[str], window_sec: float = 30.0, fault_windows: int = 30,
                     gap_windows: int = 20, cpu_delta: float = 40.0, delay_ms: float = 500.0,
                     drop_prob: float = 0.8) -> tuple[FaultSchedule, float]:
    """Every fault type once per service, window-aligned; returns (schedule, duration seconds).

    Faults run in rounds over the roster; service i gets type (i + r) mod 3 in
    round r, and each fault follows a fault-free gap of `gap_windows`.
    """
    types = list(FaultType)
    faults = []
    slot = gap_windows + fault_windows
    k = 0
    for r in range(len(types)):
        for i, name in enumerate(services):
            start = (k * slot + gap_windows) * window_sec
            end = start + fault_windows * window_sec
            label = FaultLabel(int(start * 1e6), int(end * 1e6), types[(i + r) % len(types)], name)
            faults.append(FaultSpec(label, cpu_delta, delay_ms, drop_prob))
            k += 1
    return FaultSchedule(faults), k * slot * window_sec


@dataclass
class SimConfig:
    latency_sigma: float = 0.2  # lognormal noise on per-service processing time
    delay_jitter: float = 0.2
    slow_ms: float = 400.0  # callers log a slow response above this duration
    drop_detect_ms: float = 100.0  # time until a caller notices a dropped call
    cpu_per_request: float = 2.0
    cpu_noise: float = 1.5
    cpu_jitter: float = 0.3
    mem_per_request: float = 4.0
    mem_noise: float = 5.0
    bytes_per_request: float = 2048.0
    retransmit_bytes: float = 6144.0  # extra tx on the lossy service per dropped call


@dataclass
class Telemetry:
    traces: list[TraceRecord]
    logs: list[LogLine]
    kpis: list[KpiRow]
    labels: list[FaultLabel]


def _us(ms: float) -> int:
    return int(round(ms * 1000.0))


def simulate(topology: Topology, schedule: FaultSchedule, duration: float, request_rate: float,
             seed: int, cfg: SimConfig | None = None) -> Telemetry:
    if duration <= 0:
        raise SimulationError("duration must be positive")
    if request_rate <= 0:
        raise SimulationError("request rate must be positive")
    cfg = cfg or SimConfig()
    schedule.check_roster(topology.names)
    rng = random.Random(seed)
    nrng = np.random.default_rng(seed)
    children = topology.children()
    spec = {s.name: s for s in topology.services}
    faults: dict[str, list[FaultSpec]] = {}
    for f in schedule.faults:
        faults.setdefault(f.label.service, []).append(f)

    def fault_on(service: str, t_ms: float, kind: FaultType) -> FaultSpec | None:
        t_us = t_ms * 1000.0
        for f in faults.get(service, ()):
            if f.label.fault_type is kind and f.active(t_us):
                return f
        return None

    traces: list[TraceRecord] = []
    logs: list[LogLine] = []
    index = {n: i for i, n in enumerate(topology.names)}
    n_sec = int(math.ceil(duration))
    load = np.zeros((len(index), n_sec))
    retrans = np.zeros((len(index), n_sec))

    def call(trace_id: str, rid: int, caller: str, callee: str, t0: float, parent: str | None,
             counter: list[int]) -> tuple[float, Status]:
        span = f"{trace_id}.{counter[0]}"
        counter[0] += 1
        lost = None
        if caller != callee:
            lost = fault_on(callee, t0, FaultType.PACKET_LOSS) or fault_on(caller, t0, FaultType.PACKET_LOSS)
        if lost is not None and rng.random() < lost.drop_prob:
            dur = cfg.drop_detect_ms * rng.lognormvariate(0.0, cfg.latency_sigma)
            sec = int(t0 // 1000.0)
            if sec < n_sec:
                retrans[index[lost.label.service], sec] += 1
            traces.append(TraceRecord(trace_id, span, parent, caller, callee, _us(t0), _us(dur), Status.DROPPED))
            logs.append(LogLine(_us(t0 + dur), caller, DROPPED.format(callee=callee, ms=f"{dur:.0f}")))
            return dur, Status.DROPPED
        sec = int(t0 // 1000.0)
        if sec < n_sec:
            load[index[callee], sec] += 1
        t = t0
        delayed = fault_on(callee, t0, FaultType.NETWORK_DELAY)
        if delayed is not None:
            t += delayed.delay_ms * (1.0 + rng.uniform(-cfg.delay_jitter, cfg.delay_jitter))
        own = spec[callee].base_latency_ms * rng.lognormvariate(0.0, cfg.latency_sigma)
        t += own / 2
        status = Status.OK
        for child, p in children[callee]:
            if rng.random() < p:
                d, st = call(trace_id, rid, callee, child, t, span, counter)
                t += d
                if st is not Status.OK:
                    status = Status.ERROR
        t += own / 2
        dur = t - t0
        traces.append(TraceRecord(trace_id, span, parent, caller, callee, _us(t0), _us(dur), status))
        logs.append(LogLine(_us(t), callee, COMPLETION.format(rid=rid, ms=f"{dur:.1f}")))
        if caller != callee and dur > cfg.slow_ms:
            logs.append(LogLine(_us(t), caller, SLOW.format(callee=callee, ms=f"{dur:.0f}")))
        return dur, status

    t_ms = 0.0
    rid = 0
    end_ms = duration * 1000.0
    entries = list(topology.entry_services)
    while True:
        t_ms += rng.expovariate(request_rate) * 1000.0
        if t_ms >= end_ms:
            break
        entry = entries[0] if len(entries) == 1 else rng.choice(entries)
        # the root span has no upstream service, so it is recorded as a self call
        call(f"{rid:08d}", rid, entry, entry, t_ms, None, [0])
        rid += 1

    for s in topology.services:
        for template, rate in s.log_templates:
            n = nrng.poisson(rate * duration)
            times = np.sort(nrng.uniform(0.0, duration, size=n))
            values = nrng.integers(0, 100000, size=n)
            for ts, v in zip(times, values):
                logs.append(LogLine(int(ts * 1e6), s.name, template.format(n=int(v))))

    kpis = _kpi_rows(topology, faults, load, retrans, n_sec, cfg, nrng)
    traces.sort(key=lambda r: (r.start, r.span_id))
    logs.sort(key=lambda r: (r.ts, r.service, r.message))
    # drop anything that spilled past the horizon so every stream covers the same span
    horizon = int(duration * 1e6)
    traces = [r for r in traces if r.start < horizon]
    logs = [r for r in logs if r.ts < horizon]
    return Telemetry(traces, logs, kpis, schedule.labels)


def _kpi_rows(topology: Topology, faults: dict[str, list[FaultSpec]], load: np.ndarray, retrans: np.ndarray,
              n_sec: int, cfg: SimConfig, nrng: np.random.Generator) -> list[KpiRow]:
    M = len(topology.services)
    secs = np.arange(n_sec)
    values = np.zeros((M, n_sec, len(KPI_NAMES)))
    for m, s in enumerate(topology.services):
        lm = load[m]
        cpu = s.base_cpu + cfg.cpu_per_request * lm + nrng.normal(0.0, cfg.cpu_noise, n_sec)
        for f in faults.get(s.name, ()):
            if f.label.fault_type is FaultType.CPU_EXHAUSTION:
                on = (secs * 1e6 >= f.label.start) & (secs * 1e6 < f.label.end)
                jitter = 1.0 + nrng.uniform(-cfg.cpu_jitter, cfg.cpu_jitter, n_sec)
                cpu = cpu + on * f.cpu_delta * jitter
        cpu = np.maximum(cpu, 0.0)
        user = cpu * np.clip(0.7 + nrng.normal(0.0, 0.03, n_sec), 0.0, 1.0)
        mem = np.maximum(s.base_mem + cfg.mem_per_request * lm + nrng.normal(0.0, cfg.mem_noise, n_sec), 0.0)
        rx = np.maximum(cfg.bytes_per_request * lm * nrng.uniform(0.8, 1.2, n_sec), 0.0)
        tx = np.maximum(2.0 * cfg.bytes_per_request * lm * nrng.uniform(0.8, 1.2, n_sec), 0.0)
        tx = tx + cfg.retransmit_bytes * retrans[m]
        values[m] = np.stack([cpu - user, cpu, user, mem, 0.85 * mem, rx, tx], axis=1)
    values = np.round(values, 4)
    rows = []
    for t in range(n_sec):
        for m, s in enumerate(topology.services):
            rows.append(KpiRow(t, s.name, tuple(float(v) for v in values[m, t])))
    return rows


TELEMETRY_FILES = ("traces.ndjson", "logs.ndjson", "kpis.ndjson", "labels.ndjson")


def write_telemetry(tel: Telemetry, out_dir, manifest: dict) -> None:
    """Write the four NDJSON streams plus manifest.json (written last, atomically)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, records in zip(TELEMETRY_FILES, (tel.traces, tel.logs, tel.kpis, tel.labels)):
        write_ndjson(out / name, records)
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(out / "manifest.json")
