"""Detection and localization metrics, the N-sigma baseline, and run reports."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import RankedVerdict
from .telemetry import FaultType, Sample

REPORT_FIELDS = ("F1", "Rec", "Pre", "FOR", "FDR", "HR@1", "HR@3", "HR@5", "NDCG@3", "NDCG@5")


@dataclass
class ConfusionCounts:
    TP: int = 0
    FP: int = 0
    FN: int = 0
    TN: int = 0

    def __post_init__(self):
        if min(self.TP, self.FP, self.FN, self.TN) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.FN + self.TN

    @classmethod
    def from_predictions(cls, y_true: Sequence[int], y_pred: Sequence[int]) -> "ConfusionCounts":
        t = np.asarray(y_true, dtype=bool)
        p = np.asarray(y_pred, dtype=bool)
        return cls(int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(t & ~p)), int(np.sum(~t & ~p)))


@dataclass
class Metrics:
    Pre: float
    Rec: float
    F1: float
    FOR: float
    FDR: float  # FP / (FP + TN)
    FDR_conventional: float  # FP / (FP + TP)
    degenerate: list[str] = field(default_factory=list)


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def confusion_metrics(c: ConfusionCounts) -> Metrics:
    """Any metric with a zero denominator is 0 and listed in `degenerate`."""
    flags: list[str] = []
    pre = _ratio(c.TP, c.TP + c.FP, "Pre", flags)
    rec = _ratio(c.TP, c.TP + c.FN, "Rec", flags)
    if pre + rec == 0:
        flags.append("F1")
        f1 = 0.0
    else:
        f1 = 2 * pre * rec / (pre + rec)
    fomr = _ratio(c.FN, c.FN + c.TN, "FOR", flags)
    fdr = _ratio(c.FP, c.FP + c.TN, "FDR", flags)
    fdr_conv = _ratio(c.FP, c.FP + c.TP, "FDR_conventional", flags)
    return Metrics(pre, rec, f1, fomr, fdr, fdr_conv, flags)


def _check_k(k: int, M: int) -> None:
    if not 1 <= k <= M:
        raise ValueError(f"k={k} outside [1, {M}]")


def culprit_ranks(rankings: Sequence[Sequence[int]], culprits: Sequence[int]) -> np.ndarray:
    """1-based position of each true culprit in its ranking."""
    return np.array([list(r).index(c) + 1 for r, c in zip(rankings, culprits)], dtype=np.int64)


def hr_at_k(rankings: Sequence[Sequence[int]], culprits: Sequence[int], k: int) -> float:
    if len(rankings) != len(culprits):
        raise ValueError("rankings and culprits differ in length")
    if not len(rankings):
        return 0.0
    _check_k(k, len(rankings[0]))
    return float(np.mean(culprit_ranks(rankings, culprits) <= k))


def ndcg_at_k(rankings: Sequence[Sequence[int]], culprits: Sequence[int], k: int) -> float:
    """Binary-relevance NDCG: one relevant item, so the ideal DCG is 1."""
    if len(rankings) != len(culprits):
        raise ValueError("rankings and culprits differ in length")
    if not len(rankings):
        return 0.0
    _check_k(k, len(rankings[0]))
    ranks = culprit_ranks(rankings, culprits)
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(np.mean(gains))


def window_max_latency(samples: Sequence[Sample]) -> np.ndarray:
    return np.array([float(np.max(s.latency)) if s.latency.size else 0.0 for s in samples])


@dataclass
class NSigma:
    mu: float
    sigma: float
    n: float = 3.0

    @classmethod
    def fit(cls, history: Sequence[float], n: float = 3.0) -> "NSigma":
        h = np.asarray(history, dtype=np.float64)
        if h.size == 0:
            raise ValueError("N-sigma needs a non-empty fault-free history")
        return cls(float(h.mean()), float(h.std()), n)

    def alarm(self, value: float) -> int:
        return int(value > self.mu + self.n * self.sigma)


def nsigma_detector(history: Sequence[float], current: float, n: float = 3.0) -> int:
    """Alarm iff `current` exceeds mean + n * std of the fault-free history."""
    return NSigma.fit(history, n).alarm(current)


def nsigma_predictions(train: Sequence[Sample], test: Sequence[Sample], n: float = 3.0) -> np.ndarray:
    history = window_max_latency([s for s in train if not s.label_y])
    det = NSigma.fit(history, n)
    return np.array([det.alarm(v) for v in window_max_latency(test)])


@dataclass
class Report:
    metrics: dict[str, float]
    ungated: dict[str, float]
    counts: ConfusionCounts
    n_samples: int
    n_abnormal: int
    extra: dict = field(default_factory=dict)

    def table(self) -> str:
        head = " ".join(f"{k:>7s}" for k in REPORT_FIELDS)
        row = " ".join(f"{self.metrics[k]:7.4f}" for k in REPORT_FIELDS)
        loc = " ".join(f"{self.ungated[k]:7.4f}" for k in REPORT_FIELDS[5:])
        c = self.counts
        return (f"{head}\n{row}\n"
                f"ungated localization (HR@1..NDCG@5): {loc}\n"
                f"samples {self.n_samples}, abnormal {self.n_abnormal}; TP {c.TP} FP {c.FP} FN {c.FN} TN {c.TN}")

    def to_record(self) -> dict:
        rec = dict(self.metrics)
        rec["ungated"] = dict(self.ungated)
        rec["counts"] = asdict(self.counts)
        rec["n_samples"] = self.n_samples
        rec["n_abnormal"] = self.n_abnormal
        rec.update(self.extra)
        return rec


def localization_metrics(verdicts: Sequence[RankedVerdict], culprits: Sequence[int], gated: bool) -> dict[str, float]:
    """HR/NDCG over abnormal samples; when gated, a sample the detector calls normal is a miss."""
    if not verdicts:
        return {k: 0.0 for k in REPORT_FIELDS[5:]}
    M = len(verdicts[0].ranking)
    ranks = culprit_ranks([v.ranking for v in verdicts], culprits).astype(float)
    if gated:
        ranks[[not v.abnormal for v in verdicts]] = math.inf
    out = {}
    for k in (1, 3, 5):
        kk = min(k, M)
        out[f"HR@{k}"] = float(np.mean(ranks <= kk))
    for k in (3, 5):
        kk = min(k, M)
        out[f"NDCG@{k}"] = float(np.mean(np.where(ranks <= kk, 1.0 / np.log2(np.minimum(ranks, M) + 1.0), 0.0)))
    return out


def evaluate_verdicts(samples: Sequence[Sample], verdicts: Sequence[RankedVerdict],
                      extra: dict | None = None) -> Report:
    if len(samples) != len(verdicts):
        raise ValueError("one verdict per sample is required")
    y = np.array([s.label_y for s in samples])
    pred = np.array([int(v.abnormal) for v in verdicts])
    counts = ConfusionCounts.from_predictions(y, pred)
    m = confusion_metrics(counts)
    abn = [i for i, s in enumerate(samples) if s.label_y]
    culprits = [samples[i].label_culprit for i in abn]
    gated = localization_metrics([verdicts[i] for i in abn], culprits, gated=True)
    ungated = localization_metrics([verdicts[i] for i in abn], culprits, gated=False)
    metrics = {"F1": m.F1, "Rec": m.Rec, "Pre": m.Pre, "FOR": m.FOR, "FDR": m.FDR}
    metrics.update(gated)
    rep_extra = {"FDR_conventional": m.FDR_conventional, "degenerate": m.degenerate}
    rep_extra.update(extra or {})
    return Report(metrics, ungated, counts, len(samples), len(abn), rep_extra)


def subset(samples: Sequence[Sample], fault_type: FaultType) -> list[int]:
    """Indices of normal samples plus abnormal samples of one fault type."""
    return [i for i, s in enumerate(samples) if not s.label_y or s.fault_type is fault_type]


def evaluate_end_to_end(model, test: Sequence[Sample], extra: dict | None = None) -> Report:
    if test and test[0].log_intensity.shape[0] != model.cfg.n_services:
        raise ValueError("test samples and model disagree on the service roster")
    verdicts = model.predict(list(test))
    return evaluate_verdicts(test, verdicts, extra)


def append_record(path, record: dict) -> None:
    with open(Path(path), "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
