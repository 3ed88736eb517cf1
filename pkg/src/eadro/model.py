"""Multi-modal encoders, gated fusion, dependency-aware graph attention and the two heads.

Batch layout: logs (B, M, L), kpi (B, M, T, 7), latency (B, M, T). Service
embeddings are computed with weights shared across services. The default
localizer scores every service with one shared network, so nothing in the model
is tied to a roster position; the "pooled" localizer instead maps the pooled
state to M logits and owns one output row per service.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .telemetry import N_KPI, DependencyGraph, Sample
from .tensorcore import ParameterStore, ShapeError, Tensor, ops, tensor

PROB_CLAMP = 1e-7


@dataclass
class ModelConfig:
    n_services: int = 0  # filled from the dataset when left at 0
    n_events: int = 0
    slots: int = 30
    n_kpis: int = N_KPI
    log_dim: int = 64
    kpi_dim: int = 64
    trace_dim: int = 64
    fusion_dim: int = 128
    gat_hidden: int = 128
    heads: int = 4
    pooled_dim: int = 128
    head_hidden: int = 64
    kernel_size: int = 3
    dilation: int = 1
    leaky_slope: float = 0.2
    attn_scale: float | None = None  # defaults to the attended width
    use_logs: bool = True
    use_kpis: bool = True
    use_traces: bool = True
    use_graph: bool = True
    localizer: str = "node"  # "node": shared per-service scorer; "pooled": FC from the pooled state to M logits
    service_norm: bool = True  # z-score KPI/latency per (service, channel) rather than per channel
    locate_local: bool = True  # node localizer also sees the pre-GAT fused state of the service
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.fusion_dim % 2:
            raise ValueError("fusion_dim must be even for the GLU split")
        if self.gat_hidden % self.heads:
            raise ValueError("gat_hidden must be divisible by heads")
        if self.localizer not in ("node", "pooled"):
            raise ValueError(f"unknown localizer {self.localizer!r}")
        if not (self.use_logs or self.use_kpis or self.use_traces):
            raise ValueError("at least one modality is required")

    @property
    def node_dim(self) -> int:
        return self.fusion_dim // 2

    @property
    def concat_dim(self) -> int:
        return (self.log_dim * self.use_logs + self.kpi_dim * self.use_kpis
                + self.trace_dim * self.use_traces)


@dataclass
class RankedVerdict:
    y_hat: float
    P: np.ndarray
    ranking: list[int]

    @property
    def abnormal(self) -> bool:
        return self.y_hat >= 0.5


def rank_services(p: np.ndarray) -> list[int]:
    """Indices by descending probability, ties broken by ascending index."""
    return [int(i) for i in np.lexsort((np.arange(len(p)), -np.asarray(p, dtype=np.float64)))]


@dataclass
class Batch:
    logs: np.ndarray
    kpi: np.ndarray
    latency: np.ndarray
    y: np.ndarray
    culprit: np.ndarray  # -1 where normal

    def __len__(self) -> int:
        return len(self.y)


def make_batch(samples: list[Sample]) -> Batch:
    return Batch(
        logs=np.stack([s.log_intensity for s in samples]),
        kpi=np.stack([s.kpi for s in samples]),
        latency=np.stack([s.latency for s in samples]),
        y=np.array([s.label_y for s in samples], dtype=np.float32),
        culprit=np.array([-1 if s.label_culprit is None else s.label_culprit for s in samples]),
    )


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_parameters(cfg: ModelConfig, seed: int = 0) -> ParameterStore:
    rng = np.random.default_rng(seed)
    store = ParameterStore()

    def linear(name, n_in, n_out):
        store.add(f"{name}.weight", _glorot(rng, (n_in, n_out), n_in, n_out))
        store.add(f"{name}.bias", np.zeros(n_out))

    def temporal(name, c_in, width):
        k = cfg.kernel_size
        store.add(f"{name}.conv.weight", _glorot(rng, (width, c_in, k), c_in * k, width * k))
        store.add(f"{name}.conv.bias", np.zeros(width))
        store.add(f"{name}.bn.gamma", np.ones(width))
        store.add(f"{name}.bn.beta", np.zeros(width))
        store.add(f"{name}.bn.running_mean", np.zeros(width))
        store.add(f"{name}.bn.running_var", np.ones(width))
        for proj in ("wq", "wk", "wv"):
            store.add(f"{name}.attn.{proj}", _glorot(rng, (width, width), width, width))

    rows = cfg.n_services if cfg.service_norm else 1
    if cfg.use_logs:
        linear("log.fc", cfg.n_events, cfg.log_dim)
    if cfg.use_kpis:
        temporal("kpi", cfg.n_kpis, cfg.kpi_dim)
        store.add("stats.kpi.mean", np.zeros((rows, cfg.n_kpis)))
        store.add("stats.kpi.std", np.ones((rows, cfg.n_kpis)))
    if cfg.use_traces:
        temporal("trace", 1, cfg.trace_dim)
        store.add("stats.latency.mean", np.zeros((rows, 1)))
        store.add("stats.latency.std", np.ones((rows, 1)))
    linear("fuse.fc", cfg.concat_dim, cfg.fusion_dim)
    if cfg.use_graph:
        d = cfg.gat_hidden // cfg.heads
        store.add("gat.weight", _glorot(rng, (cfg.node_dim, cfg.gat_hidden), cfg.node_dim, cfg.gat_hidden))
        store.add("gat.attn_src", _glorot(rng, (cfg.heads, d, 1), 2 * d, 1))
        store.add("gat.attn_dst", _glorot(rng, (cfg.heads, d, 1), 2 * d, 1))
    else:
        linear("nograph.fc", cfg.node_dim, cfg.gat_hidden)
    linear("pool.gate", cfg.gat_hidden, 1)
    linear("pool.feat", cfg.gat_hidden, cfg.pooled_dim)
    linear("detect.fc1", cfg.pooled_dim, cfg.head_hidden)
    linear("detect.fc2", cfg.head_hidden, 1)
    if cfg.localizer == "node":
        linear("locate.fc1", cfg.gat_hidden + cfg.pooled_dim + cfg.node_dim * cfg.locate_local, cfg.head_hidden)
        linear("locate.fc2", cfg.head_hidden, 1)
    else:
        linear("locate.fc1", cfg.pooled_dim, cfg.head_hidden)
        linear("locate.fc2", cfg.head_hidden, cfg.n_services)
    return store


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, scale: float) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(scale)) V over (N, T, C) rows; returns (output, weights)."""
    q, k, v = ops.matmul(x, wq), ops.matmul(x, wk), ops.matmul(x, wv)
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(scale))
    weights = ops.softmax(scores, axis=-1)
    return ops.matmul(weights, v), weights


@dataclass
class Output:
    y_hat: Tensor  # (B,)
    P: Tensor  # (B, M)
    reps: dict = field(default_factory=dict)


class EadroModel:
    def __init__(self, cfg: ModelConfig, graph: DependencyGraph, store: ParameterStore | None = None,
                 seed: int = 0):
        if cfg.n_services < 1 or cfg.n_events < 1:
            raise ValueError("ModelConfig needs n_services and n_events from the dataset")
        if graph.M != cfg.n_services:
            raise ShapeError(f"graph has {graph.M} services, config expects {cfg.n_services}")
        self.cfg = cfg
        self.graph = graph
        # row a marks N_a, the in-neighbours b with edge (b, a): the services a invoked, plus a itself
        self.mask = graph.adjacency().T
        if not self.mask.any(axis=1).all():
            raise ValueError("every node needs at least one neighbour (add self-loops)")
        self.store = store if store is not None else init_parameters(cfg, seed)

    def p(self, name: str) -> Tensor:
        return self.store[name]

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return ops.add(ops.matmul(x, self.p(f"{name}.weight")), self.p(f"{name}.bias"))

    # modal encoders -------------------------------------------------------------
    def encode_logs(self, logs) -> Tensor:
        logs = tensor(logs) if not isinstance(logs, Tensor) else logs
        if logs.shape[-1] != self.cfg.n_events:
            raise ShapeError(f"log intensity width {logs.shape[-1]} != fitted L={self.cfg.n_events}")
        return ops.relu(self._linear(logs, "log.fc"))

    def _temporal(self, x: Tensor, name: str, training: bool, reps: dict | None) -> Tensor:
        # x: (B, M, T, C) -> (B, M, width)
        b, m, t, c = x.shape
        seq = ops.reshape(x, (b * m, t, c))
        h = ops.conv1d_causal(seq, self.p(f"{name}.conv.weight"), self.cfg.dilation,
                              bias=self.p(f"{name}.conv.bias"), channels_last=True)
        h = ops.batchnorm_1d(h, self.p(f"{name}.bn.gamma"), self.p(f"{name}.bn.beta"),
                             self.p(f"{name}.bn.running_mean"), self.p(f"{name}.bn.running_var"),
                             training, self.cfg.bn_momentum, self.cfg.bn_eps, channels_last=True)
        width = h.shape[-1]
        attended, weights = self_attention(h, self.p(f"{name}.attn.wq"), self.p(f"{name}.attn.wk"),
                                           self.p(f"{name}.attn.wv"), self.cfg.attn_scale or width)
        if reps is not None:
            reps[f"{name}_attention"] = weights.data
        return ops.reshape(ops.mean(attended, axis=1), (b, m, width))

    def encode_kpis(self, kpi, training: bool = False, reps: dict | None = None) -> Tensor:
        kpi = np.asarray(kpi)
        if kpi.ndim != 4 or kpi.shape[2:] != (self.cfg.slots, self.cfg.n_kpis):
            raise ShapeError(f"kpi batch {kpi.shape} does not match T={self.cfg.slots}, k={self.cfg.n_kpis}")
        # stats are (M or 1, k); broadcast over batch and slots
        x = (kpi - self.p("stats.kpi.mean").data[:, None, :]) / self.p("stats.kpi.std").data[:, None, :]
        return self._temporal(tensor(x), "kpi", training, reps)

    def encode_traces(self, latency, training: bool = False, reps: dict | None = None) -> Tensor:
        latency = np.asarray(latency)
        if latency.ndim != 3 or latency.shape[2] != self.cfg.slots:
            raise ShapeError(f"latency batch {latency.shape} does not match T={self.cfg.slots}")
        mean, std = self.p("stats.latency.mean").data, self.p("stats.latency.std").data
        x = (latency[..., None] - mean[:, None, :]) / std[:, None, :]
        return self._temporal(tensor(x), "trace", training, reps)

    # dependency-aware status ----------------------------------------------------
    def fuse(self, parts: list[Tensor]) -> Tensor:
        projected = self._linear(ops.concat(parts, axis=-1), "fuse.fc")
        return ops.glu(projected, axis=-1)

    def gat_layer(self, h: Tensor, reps: dict | None = None) -> Tensor:
        cfg = self.cfg
        b, m, _ = h.shape
        d = cfg.gat_hidden // cfg.heads
        wh = ops.transpose(ops.reshape(ops.matmul(h, self.p("gat.weight")), (b, m, cfg.heads, d)), (0, 2, 1, 3))
        src = ops.matmul(wh, self.p("gat.attn_src"))  # (B, H, M, 1): v_1 . W h_a
        dst = ops.matmul(wh, self.p("gat.attn_dst"))  # (B, H, M, 1): v_2 . W h_b
        scores = ops.leaky_relu(ops.add(src, ops.transpose(dst, (0, 1, 3, 2))), cfg.leaky_slope)
        omega = ops.softmax(scores, axis=-1, mask=self.mask, ordered=True)  # (B, H, M_a, M_b)
        if reps is not None:
            reps["gat_attention"] = omega.data
        weighted = ops.mul(ops.reshape(omega, (b, cfg.heads, m, m, 1)), ops.reshape(wh, (b, cfg.heads, 1, m, d)))
        agg = ops.relu(ops.sum(weighted, axis=3, ordered=True))  # (B, H, M, D)
        return ops.reshape(ops.transpose(agg, (0, 2, 1, 3)), (b, m, cfg.gat_hidden))

    def graphless_layer(self, h: Tensor) -> Tensor:
        return ops.relu(self._linear(h, "nograph.fc"))

    def global_attention_pool(self, nodes: Tensor, reps: dict | None = None) -> Tensor:
        gate = ops.softmax(self._linear(nodes, "pool.gate"), axis=1, ordered=True)  # (B, M, 1)
        if reps is not None:
            reps["pool_attention"] = gate.data[..., 0]
        feat = self._linear(nodes, "pool.feat")
        return ops.sum(ops.mul(gate, feat), axis=1, ordered=True)

    # heads ------------------------------------------------------------------------
    def detect_head(self, pooled: Tensor) -> Tensor:
        hidden = ops.relu(self._linear(pooled, "detect.fc1"))
        logit = self._linear(hidden, "detect.fc2")
        return ops.reshape(ops.sigmoid(logit), (pooled.shape[0],))

    def localize_logits(self, nodes: Tensor, pooled: Tensor, local: Tensor | None = None) -> Tensor:
        if self.cfg.localizer == "pooled":
            return self._linear(ops.relu(self._linear(pooled, "locate.fc1")), "locate.fc2")
        # every service is scored by the same network from its own state and the system state
        b, m, _ = nodes.shape
        context = ops.mul(ops.reshape(pooled, (b, 1, pooled.shape[-1])), np.ones((1, m, 1), dtype=pooled.data.dtype))
        parts = [nodes, context] if local is None else [local, nodes, context]
        hidden = ops.relu(self._linear(ops.concat(parts, axis=-1), "locate.fc1"))
        return ops.reshape(self._linear(hidden, "locate.fc2"), (b, m))

    def localize_head(self, nodes: Tensor, pooled: Tensor, local: Tensor | None = None) -> Tensor:
        return ops.softmax(self.localize_logits(nodes, pooled, local), axis=-1, ordered=True)

    # composition ------------------------------------------------------------------
    def forward(self, batch: Batch, training: bool = False, keep_reps: bool = False) -> Output:
        cfg = self.cfg
        if batch.logs.shape[1] != cfg.n_services:
            raise ShapeError(f"batch has {batch.logs.shape[1]} services, model expects {cfg.n_services}")
        reps: dict | None = {} if keep_reps else None
        parts = []
        if cfg.use_logs:
            parts.append(self.encode_logs(batch.logs))
        if cfg.use_kpis:
            parts.append(self.encode_kpis(batch.kpi, training, reps))
        if cfg.use_traces:
            parts.append(self.encode_traces(batch.latency, training, reps))
        fused = self.fuse(parts)
        nodes = self.gat_layer(fused, reps) if cfg.use_graph else self.graphless_layer(fused)
        pooled = self.global_attention_pool(nodes, reps)
        y_hat = self.detect_head(pooled)
        P = self.localize_head(nodes, pooled, fused if cfg.locate_local and cfg.localizer == "node" else None)
        if reps is not None:
            names = [n for n, on in (("H_L", cfg.use_logs), ("H_K", cfg.use_kpis), ("H_T", cfg.use_traces)) if on]
            reps.update({n: t.data for n, t in zip(names, parts)})
            reps.update(H_S=fused.data, H_G=nodes.data, H_F=pooled.data)
        return Output(y_hat, P, reps or {})

    def predict(self, samples: list[Sample], batch_size: int = 256) -> list[RankedVerdict]:
        verdicts = []
        for i in range(0, len(samples), batch_size):
            out = self.forward(make_batch(samples[i: i + batch_size]), training=False)
            for y, p in zip(out.y_hat.data, out.P.data):
                verdicts.append(RankedVerdict(float(y), p.copy(), rank_services(p)))
        return verdicts


def joint_loss(y_hat: Tensor, y: np.ndarray, P: Tensor, culprit: np.ndarray, beta_loss: float = 0.5
               ) -> tuple[Tensor, Tensor, Tensor]:
    """beta * BCE(detector) + (1 - beta) * cross-entropy(localizer over abnormal samples).

    Localization terms are masked with the ground-truth labels; a batch with no
    abnormal sample contributes 0. Returns (total, detection, localization).
    """
    if not 0.0 <= beta_loss <= 1.0:
        raise ValueError("beta_loss must lie in [0, 1]")
    y = np.asarray(y, dtype=y_hat.data.dtype)
    yc = ops.clamp(y_hat, PROB_CLAMP, 1 - PROB_CLAMP)
    bce = ops.add(ops.mul(ops.log(yc), y), ops.mul(ops.log(ops.sub(1.0, yc)), 1.0 - y))
    l1 = ops.mul(ops.mean(bce), -1.0)
    abnormal = np.asarray(culprit) >= 0
    n_abn = int(abnormal.sum())
    if n_abn:
        onehot = np.zeros(P.shape, dtype=P.data.dtype)
        onehot[np.flatnonzero(abnormal), np.asarray(culprit)[abnormal]] = 1.0
        p_true = ops.sum(ops.mul(P, onehot), axis=1)
        # normal rows pick p = 0; clamp then mask them out
        log_p = ops.mul(ops.log(ops.clamp(p_true, PROB_CLAMP, 1 - PROB_CLAMP)), abnormal.astype(P.data.dtype))
        l2 = ops.mul(ops.sum(log_p), -1.0 / n_abn)
    else:
        l2 = tensor(0.0)
    total = ops.add(ops.mul(l1, beta_loss), ops.mul(l2, 1.0 - beta_loss))
    return total, l1, l2
