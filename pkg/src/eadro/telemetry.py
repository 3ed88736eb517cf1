"""Telemetry records, windowing, dependency graphs and the binary dataset container.

Units: traces and logs carry microsecond timestamps, KPI rows carry whole
seconds. Latency is converted from microseconds to milliseconds in exactly one
place, `latency_series`.

Dataset file layout (little-endian; u32 = uint32, i32 = int32, f32 = float32)::

    b"EADRODS1"  u32 version
    u32 M  u32 L  u32 T  u32 K
    M x (u32 byte length, utf-8 service name)
    u32 n_edges, n_edges x (u32 a, u32 b)          # train-side dependency graph
    u32 n_samples
    per sample:
        i32 window_index  i32 label_y  i32 culprit (-1 = none)  i32 fault_type (-1 = none)
        f32[M*L] log_intensity  f32[M*T*K] kpi  f32[M*T] latency
"""
from __future__ import annotations

import enum
import io
import json
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

KPI_NAMES = ("cpu_system", "cpu_total", "cpu_user", "mem_usage", "mem_working_set", "rx_bytes", "tx_bytes")
N_KPI = len(KPI_NAMES)

DATASET_MAGIC = b"EADRODS1"
DATASET_VERSION = 1


class TelemetryError(ValueError):
    pass


class DatasetError(TelemetryError):
    pass


class Status(str, enum.Enum):
    OK = "ok"
    ERROR = "error"
    DROPPED = "dropped"


class FaultType(str, enum.Enum):
    CPU_EXHAUSTION = "cpu_exhaustion"
    NETWORK_DELAY = "network_delay"
    PACKET_LOSS = "packet_loss"

    @property
    def code(self) -> int:
        return list(FaultType).index(self)

    @classmethod
    def from_code(cls, code: int) -> "FaultType | None":
        return None if code < 0 else list(cls)[code]


@dataclass(slots=True)
class TraceRecord:
    trace_id: str
    span_id: str
    parent_span_id: str | None
    caller: str
    callee: str
    start: int  # microseconds
    duration: int  # microseconds
    status: Status = Status.OK

    def __post_init__(self):
        if self.duration < 0 or self.start < 0:
            raise TelemetryError(f"trace {self.span_id}: negative start or duration")
        if not self.caller or not self.callee:
            raise TelemetryError(f"trace {self.span_id}: empty caller/callee")

    def to_json(self) -> dict:
        return {"trace_id": self.trace_id, "span_id": self.span_id, "parent_span_id": self.parent_span_id,
                "caller": self.caller, "callee": self.callee, "start_us": self.start,
                "duration_us": self.duration, "status": self.status.value}

    @classmethod
    def from_json(cls, d: dict) -> "TraceRecord":
        return cls(d["trace_id"], d["span_id"], d["parent_span_id"], d["caller"], d["callee"],
                   int(d["start_us"]), int(d["duration_us"]), Status(d["status"]))


@dataclass(slots=True)
class LogLine:
    ts: int  # microseconds
    service: str
    message: str

    def __post_init__(self):
        if self.ts < 0:
            raise TelemetryError("log line with negative timestamp")

    def to_json(self) -> dict:
        return {"ts_us": self.ts, "service": self.service, "message": self.message}

    @classmethod
    def from_json(cls, d: dict) -> "LogLine":
        return cls(int(d["ts_us"]), d["service"], d["message"])


@dataclass(slots=True)
class KpiRow:
    ts: int  # seconds
    service: str
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != N_KPI:
            raise TelemetryError(f"KPI row needs {N_KPI} values, got {len(self.values)}")
        if not all(math.isfinite(v) for v in self.values):
            raise TelemetryError(f"non-finite KPI value for {self.service} at {self.ts}")
        if self.values[5] < 0 or self.values[6] < 0:
            raise TelemetryError("negative byte rate")

    def to_json(self) -> dict:
        d = {"ts_s": self.ts, "service": self.service}
        d.update(zip(KPI_NAMES, self.values))
        return d

    @classmethod
    def from_json(cls, d: dict) -> "KpiRow":
        return cls(int(d["ts_s"]), d["service"], tuple(float(d[k]) for k in KPI_NAMES))


@dataclass(slots=True)
class FaultLabel:
    start: int  # microseconds
    end: int
    fault_type: FaultType
    service: str

    def __post_init__(self):
        self.fault_type = FaultType(self.fault_type)
        if not self.start < self.end:
            raise TelemetryError(f"fault on {self.service}: start must precede end")

    def to_json(self) -> dict:
        return {"start_us": self.start, "end_us": self.end, "fault_type": self.fault_type.value,
                "service": self.service}

    @classmethod
    def from_json(cls, d: dict) -> "FaultLabel":
        return cls(int(d["start_us"]), int(d["end_us"]), FaultType(d["fault_type"]), d["service"])


@dataclass
class Sample:
    window_index: int
    log_intensity: np.ndarray  # M x L, events/second
    kpi: np.ndarray  # M x T x 7
    latency: np.ndarray  # M x T, milliseconds, zero-padded
    label_y: int = 0
    label_culprit: int | None = None
    fault_type: FaultType | None = None

    def __post_init__(self):
        self.log_intensity = np.ascontiguousarray(self.log_intensity, dtype=np.float32)
        self.kpi = np.ascontiguousarray(self.kpi, dtype=np.float32)
        self.latency = np.ascontiguousarray(self.latency, dtype=np.float32)
        if (self.label_culprit is not None) != (self.label_y == 1):
            raise TelemetryError("label_culprit must be present iff label_y == 1")
        if self.kpi.shape[:2] != self.latency.shape or self.kpi.shape[2] != N_KPI:
            raise TelemetryError(f"kpi {self.kpi.shape} and latency {self.latency.shape} disagree")
        if np.any(self.log_intensity < 0):
            raise TelemetryError("negative log intensity")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.window_index == other.window_index and self.label_y == other.label_y
                and self.label_culprit == other.label_culprit and self.fault_type == other.fault_type
                and all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in
                        ((self.log_intensity, other.log_intensity), (self.kpi, other.kpi),
                         (self.latency, other.latency))))


@dataclass
class DependencyGraph:
    services: list[str]
    edges: set[tuple[int, int]] = field(default_factory=set)
    self_loops: bool = True

    @property
    def M(self) -> int:
        return len(self.services)

    def index(self, name: str) -> int:
        return self.services.index(name)

    def adjacency(self) -> np.ndarray:
        """mask[a, b] is True iff (a, b) is an edge, i.e. b invoked a (or a == b)."""
        mask = np.zeros((self.M, self.M), dtype=bool)
        for a, b in self.edges:
            mask[a, b] = True
        if self.self_loops:
            np.fill_diagonal(mask, True)
        return mask


@dataclass
class Dataset:
    services: list[str]
    n_events: int
    slots: int
    samples: list[Sample] = field(default_factory=list)
    edges: set[tuple[int, int]] = field(default_factory=set)

    def graph(self) -> DependencyGraph:
        g = DependencyGraph(list(self.services), set(self.edges))
        for m in range(len(self.services)):
            g.edges.add((m, m))
        return g

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and self.services == other.services
                and self.n_events == other.n_events and self.slots == other.slots
                and self.edges == other.edges and self.samples == other.samples)


# -- windowing ---------------------------------------------------------------------

def window_partition(records: Iterable, window_sec: float, t0: float = 0.0,
                     key: Callable[[object], float] = lambda r: r.ts) -> dict[int, list]:
    """Group records into half-open windows [t0 + iT, t0 + (i+1)T); `key` gives seconds."""
    if window_sec <= 0:
        raise ValueError("window length must be positive")
    out: dict[int, list] = defaultdict(list)
    for r in records:
        ts = key(r)
        if ts < t0:
            raise ValueError(f"record at {ts} precedes window origin {t0}")
        out[int((ts - t0) // window_sec)].append(r)
    return dict(out)


def trace_seconds(r: TraceRecord) -> float:
    return r.start / 1e6


def log_seconds(r: LogLine) -> float:
    return r.ts / 1e6


def kpi_seconds(r: KpiRow) -> float:
    return float(r.ts)


# -- dependency graph --------------------------------------------------------------

def build_dependency_graph(traces: Iterable[TraceRecord], services: Sequence[str],
                           self_loops: bool = True) -> DependencyGraph:
    """Edge (a, b) means service b invoked service a at least once."""
    if not services:
        raise TelemetryError("empty service roster")
    index = {s: i for i, s in enumerate(services)}
    edges: set[tuple[int, int]] = set()
    for r in traces:
        for name in (r.caller, r.callee):
            if name not in index:
                raise TelemetryError(f"trace references unknown service {name!r}")
        edges.add((index[r.callee], index[r.caller]))
    if self_loops:
        edges.update((m, m) for m in range(len(services)))
    return DependencyGraph(list(services), edges, self_loops)


# -- sample assembly ---------------------------------------------------------------

def latency_series(traces: Iterable[TraceRecord], services: Sequence[str], window_start_s: float,
                   slots: int, slot_sec: float = 1.0) -> np.ndarray:
    """Mean invocation latency (ms) per callee and slot; empty slots stay 0."""
    index = {s: i for i, s in enumerate(services)}
    total = np.zeros((len(services), slots))
    count = np.zeros((len(services), slots))
    for r in traces:
        slot = int((r.start / 1e6 - window_start_s) // slot_sec)
        if 0 <= slot < slots:
            m = index[r.callee]
            total[m, slot] += r.duration / 1000.0
            count[m, slot] += 1
    out = np.zeros_like(total)
    np.divide(total, count, out=out, where=count > 0)
    return out


def kpi_matrix(rows: Iterable[KpiRow], services: Sequence[str], window_start_s: float,
               slots: int, slot_sec: float = 1.0) -> np.ndarray:
    """M x T x 7 KPI tensor; a missing slot repeats the previous slot (zeros for slot 0)."""
    index = {s: i for i, s in enumerate(services)}
    out = np.zeros((len(services), slots, N_KPI))
    seen = np.zeros((len(services), slots), dtype=bool)
    for r in sorted(rows, key=lambda r: r.ts):
        slot = int((r.ts - window_start_s) // slot_sec)
        if 0 <= slot < slots:
            m = index[r.service]
            out[m, slot] = r.values
            seen[m, slot] = True
    for t in range(1, slots):
        missing = ~seen[:, t]
        out[missing, t] = out[missing, t - 1]
    return out


def window_label(labels: Iterable[FaultLabel], services: Sequence[str], start_us: int,
                 end_us: int) -> tuple[int, int | None, FaultType | None]:
    """(y, culprit index, fault type) for the window [start_us, end_us).

    Any overlap counts; with several overlapping faults the largest overlap wins.
    """
    best = None
    for f in labels:
        overlap = min(f.end, end_us) - max(f.start, start_us)
        if overlap > 0 and (best is None or overlap > best[0]):
            best = (overlap, f)
    if best is None:
        return 0, None, None
    f = best[1]
    return 1, list(services).index(f.service), f.fault_type


def assemble_sample(window_index: int, traces: Sequence[TraceRecord], kpis: Sequence[KpiRow],
                    log_intensity: np.ndarray | None, labels: Sequence[FaultLabel],
                    services: Sequence[str], window_sec: float = 30.0, slots: int = 30,
                    t0: float = 0.0, n_events: int = 0) -> Sample:
    start_s = t0 + window_index * window_sec
    slot_sec = window_sec / slots
    if log_intensity is None:
        log_intensity = np.zeros((len(services), n_events))
    y, culprit, ftype = window_label(labels, services, int(round(start_s * 1e6)),
                                     int(round((start_s + window_sec) * 1e6)))
    return Sample(
        window_index=window_index,
        log_intensity=log_intensity,
        kpi=kpi_matrix(kpis, services, start_s, slots, slot_sec),
        latency=latency_series(traces, services, start_s, slots, slot_sec),
        label_y=y,
        label_culprit=culprit,
        fault_type=ftype,
    )


# -- NDJSON ------------------------------------------------------------------------

def write_ndjson(path, records: Iterable) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")))
            fh.write("\n")
    tmp.replace(path)


def read_ndjson(path, cls) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(cls.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise TelemetryError(f"{path}:{lineno}: {exc}") from exc
    return out


# -- dataset container -------------------------------------------------------------

def dataset_to_bytes(ds: Dataset) -> bytes:
    M, L, T = len(ds.services), ds.n_events, ds.slots
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<IIIII", DATASET_VERSION, M, L, T, N_KPI))
    for name in ds.services:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    edges = sorted(ds.edges)
    buf.write(struct.pack("<I", len(edges)))
    for a, b in edges:
        buf.write(struct.pack("<II", a, b))
    buf.write(struct.pack("<I", len(ds.samples)))
    for s in ds.samples:
        if s.log_intensity.shape != (M, L) or s.kpi.shape != (M, T, N_KPI):
            raise DatasetError(f"sample {s.window_index} does not match dataset dimensions")
        culprit = -1 if s.label_culprit is None else s.label_culprit
        ftype = -1 if s.fault_type is None else s.fault_type.code
        buf.write(struct.pack("<iiii", s.window_index, s.label_y, culprit, ftype))
        for arr in (s.log_intensity, s.kpi, s.latency):
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def dataset_from_bytes(blob: bytes) -> Dataset:
    view = memoryview(blob)
    pos = 0

    def read(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise DatasetError("dataset file is truncated")
        out = view[pos: pos + n]
        pos += n
        return out

    if bytes(read(8)) != DATASET_MAGIC:
        raise DatasetError("bad dataset magic")
    version, M, L, T, K = struct.unpack("<IIIII", read(20))
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    if K != N_KPI:
        raise DatasetError(f"dataset has {K} KPIs, expected {N_KPI}")
    services = []
    for _ in range(M):
        (n,) = struct.unpack("<I", read(4))
        services.append(bytes(read(n)).decode("utf-8"))
    (n_edges,) = struct.unpack("<I", read(4))
    edges = {struct.unpack("<II", read(8)) for _ in range(n_edges)}
    (n_samples,) = struct.unpack("<I", read(4))
    samples = []
    sizes = (M * L, M * T * K, M * T)
    for _ in range(n_samples):
        w, y, culprit, ftype = struct.unpack("<iiii", read(16))
        arrays = [np.frombuffer(read(4 * n), dtype="<f4").astype(np.float32) for n in sizes]
        samples.append(Sample(w, arrays[0].reshape(M, L), arrays[1].reshape(M, T, K), arrays[2].reshape(M, T),
                              y, None if culprit < 0 else culprit, FaultType.from_code(ftype)))
    if pos != len(view):
        raise DatasetError("trailing bytes after last sample")
    return Dataset(services, L, T, samples, edges)


def persist_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dataset_to_bytes(ds))
    tmp.replace(path)


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
