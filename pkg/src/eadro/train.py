"""Time-ordered splitting, Adam, and the training loop."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import EadroModel, ModelConfig, joint_loss, make_batch
from .telemetry import Dataset, DependencyGraph, Sample
from .tensorcore import NonFiniteError, ParameterStore, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    desk_batch_size: int = 64
    epochs: int = 50
    beta_loss: float = 0.5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    split_ratio: float = 0.6

    def __post_init__(self):
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.desk_batch_size < 1:
            raise ValueError("epochs and batch sizes must be at least 1")
        if not 0 <= self.beta_loss <= 1:
            raise ValueError("beta_loss must lie in [0, 1]")

    def effective_batch_size(self, n_samples: int) -> int:
        # fall back to the desk-scale size when fewer than 10 full batches exist
        return self.batch_size if n_samples >= 10 * self.batch_size else self.desk_batch_size


@dataclass
class SplitReport:
    n: int
    abnormal: int
    abnormal_ratio: float
    culprits: dict[int, int]


def describe(samples: list[Sample]) -> SplitReport:
    abn = sum(s.label_y for s in samples)
    return SplitReport(len(samples), abn, abn / len(samples) if samples else 0.0,
                       dict(sorted(Counter(s.label_culprit for s in samples if s.label_y).items())))


def split_index(n: int, ratio: float = 0.6) -> int:
    cut = int(round(n * ratio))
    if cut <= 0 or cut >= n:
        raise ValueError(f"a {ratio:.2f} split of {n} samples leaves one side empty")
    return cut


def split_dataset(samples: list[Sample], ratio: float = 0.6) -> tuple[list[Sample], list[Sample]]:
    """Contiguous split in time order: the first `ratio` of windows train, the rest test."""
    ordered = sorted(samples, key=lambda s: s.window_index)
    cut = split_index(len(ordered), ratio)
    return ordered[:cut], ordered[cut:]


class Adam:
    def __init__(self, store: ParameterStore, cfg: TrainConfig):
        self.store = store
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.trainable()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.trainable()}

    def step(self) -> None:
        grads = {}
        for name, p in self.store.trainable():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}")
            grads[name] = g
        self.t += 1
        adam_step(self.store, grads, self.m, self.v, self.t, self.cfg)


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray], m: dict, v: dict, t: int,
              cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on `store`, `m` and `v`."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        p = store[name]
        m[name] = (b1 * m[name] + (1 - b1) * g).astype(np.float32)
        v[name] = (b2 * v[name] + (1 - b2) * g * g).astype(np.float32)
        update = cfg.lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.adam_eps)
        p.data = (p.data - update).astype(np.float32)


def fit_normalization(store: ParameterStore, samples: list[Sample]) -> None:
    """z-score statistics of KPI channels and latency from training samples only.

    The stored shape decides the grouping: one row per service, or a single
    row pooled over services.
    """
    def fit(name, data):  # data: (N, M, T, C)
        per_service = store[f"{name}.mean"].shape[0] > 1
        axes = (0, 2) if per_service else (0, 1, 2)
        mean = data.mean(axis=axes)
        std = np.maximum(data.std(axis=axes), 1e-6)
        if not per_service:
            mean, std = mean[None], std[None]
        store[f"{name}.mean"].data = mean.astype(np.float32)
        store[f"{name}.std"].data = std.astype(np.float32)

    if "stats.kpi.mean" in store:
        fit("stats.kpi", np.stack([s.kpi for s in samples]).astype(np.float64))
    if "stats.latency.mean" in store:
        fit("stats.latency", np.stack([s.latency for s in samples]).astype(np.float64)[..., None])


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    detection: list[float] = field(default_factory=list)
    localization: list[float] = field(default_factory=list)


def train_model(train: list[Sample], graph: DependencyGraph, model_cfg: ModelConfig,
                cfg: TrainConfig) -> tuple[EadroModel, History]:
    if not train:
        raise ValueError("empty training split")
    if not any(s.label_y for s in train):
        raise ValueError("training split has no abnormal sample")
    model = EadroModel(model_cfg, graph, seed=cfg.seed)
    fit_normalization(model.store, train)
    opt = Adam(model.store, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    bs = cfg.effective_batch_size(len(train))
    history = History()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        totals = np.zeros(3)
        for bi, start in enumerate(range(0, len(train), bs)):
            batch = make_batch([train[i] for i in order[start: start + bs]])
            model.store.zero_grad()
            try:
                out = model.forward(batch, training=True)
                loss, l1, l2 = joint_loss(out.y_hat, batch.y, out.P, batch.culprit, cfg.beta_loss)
                loss.backward()
                opt.step()
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingDiverged(f"epoch {epoch + 1}, batch {bi}: {exc}") from exc
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"epoch {epoch + 1}, batch {bi}: loss is not finite")
            totals += np.array([loss.item(), l1.item(), l2.item()]) * len(batch)
        totals /= len(train)
        history.loss.append(float(totals[0]))
        history.detection.append(float(totals[1]))
        history.localization.append(float(totals[2]))
        log.info("epoch %d/%d loss %.4f (det %.4f, loc %.4f)", epoch + 1, cfg.epochs, *totals)
    return model, history


def train_dataset(ds: Dataset, model_cfg: ModelConfig, cfg: TrainConfig):
    train, _ = split_dataset(ds.samples, cfg.split_ratio)
    return train_model(train, ds.graph(), model_cfg, cfg)


CHECKPOINT_NAME = "checkpoint.ckpt"
MANIFEST_NAME = "manifest.json"


def save_run(out_dir, model: EadroModel, history: History, extra: dict | None = None) -> Path:
    """Write the checkpoint and a manifest carrying everything needed to rebuild the model."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.store, out / CHECKPOINT_NAME)
    manifest = {
        "model": asdict(model.cfg),
        "graph_edges": sorted(list(e) for e in model.graph.edges),
        "services": list(model.graph.services),
        "history": asdict(history),
    }
    manifest.update(extra or {})
    tmp = out / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(out / MANIFEST_NAME)
    return out


def load_run(run_dir) -> tuple[EadroModel, dict]:
    run = Path(run_dir)
    manifest = json.loads((run / MANIFEST_NAME).read_text(encoding="utf-8"))
    cfg = ModelConfig(**manifest["model"])
    graph = DependencyGraph(manifest["services"], {tuple(e) for e in manifest["graph_edges"]})
    store = load_checkpoint(run / CHECKPOINT_NAME)
    expected = EadroModel(cfg, graph).store
    if set(store) != set(expected) or any(store[n].shape != expected[n].shape for n in expected):
        raise ValueError(f"checkpoint entries do not match the model in {run / MANIFEST_NAME}")
    return EadroModel(cfg, graph, store=store), manifest
