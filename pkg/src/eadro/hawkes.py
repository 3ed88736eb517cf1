"""Univariate exponential-kernel Hawkes processes, one per log event type.

Intensity of type l at time t given its past events tau_i < t:

    lambda_l(t) = mu_l + sum_i alpha_l * beta * exp(-beta * (t - tau_i))

The kernel integrates to alpha_l, so alpha_l < 1 keeps the process stationary.
beta is shared and fixed; (mu_l, alpha_l) are fitted by maximum likelihood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .logparse import UNSEEN_ID

ALPHA_MAX = 1.0 - 1e-6
MU_MIN = 1e-10


@dataclass
class HawkesParams:
    beta: float
    mu: np.ndarray
    alpha: np.ndarray
    degenerate: np.ndarray

    @property
    def L(self) -> int:
        return len(self.mu)

    def dumps(self) -> str:
        lines = [f"# beta={self.beta!r}"]
        for l in range(self.L):
            lines.append(f"{l} {float(self.mu[l])!r} {float(self.alpha[l])!r}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "HawkesParams":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# beta="):
            raise ValueError("Hawkes parameter file must start with '# beta=' header")
        beta = float(lines[0].split("=", 1)[1])
        rows = [ln.split() for ln in lines[1:]]
        if [int(r[0]) for r in rows] != list(range(len(rows))):
            raise ValueError("Hawkes parameter ids must be 0..L-1 in order")
        mu = np.array([float(r[1]) for r in rows])
        alpha = np.array([float(r[2]) for r in rows])
        return cls(beta, mu, alpha, (mu == 0) & (alpha == 0))

    @classmethod
    def load(cls, path) -> "HawkesParams":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _check_sorted(times: np.ndarray) -> None:
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise ValueError("event times must be sorted ascending")


def excitation_at(times: Sequence[float], beta: float, t: float) -> float:
    """sum_i exp(-beta (t - tau_i)) over tau_i < t, via the O(n) recursion."""
    times = np.asarray(times, dtype=float)
    _check_sorted(times)
    if times.size and times[-1] >= t:
        raise ValueError("all event times must precede the evaluation time")
    acc = 0.0
    prev = None
    for tau in times:
        if prev is not None:
            acc = math.exp(-beta * (tau - prev)) * (1.0 + acc)
        prev = tau
    if prev is None:
        return 0.0
    return math.exp(-beta * (t - prev)) * (1.0 + acc)


def intensity_at(mu: float, alpha: float, beta: float, times: Sequence[float], t: float) -> float:
    return mu + alpha * beta * excitation_at(times, beta, t)


def recursive_state(times: np.ndarray, beta: float) -> np.ndarray:
    """A_i = sum_{j<i} exp(-beta (tau_i - tau_j)) at every event."""
    a = np.zeros(len(times))
    decay = np.exp(-beta * np.diff(times))
    acc = 0.0
    for i in range(1, len(times)):
        acc = decay[i - 1] * (1.0 + acc)
        a[i] = acc
    return a


@dataclass
class _Stats:
    n: int
    horizon: float
    beta_a: np.ndarray  # beta * A_i for every event
    compensator: float  # sum_i (1 - exp(-beta (T - tau_i)))


def _sufficient_stats(sequences: Sequence[np.ndarray], horizons: Sequence[float], beta: float) -> _Stats:
    parts, comp, n, total = [], 0.0, 0, 0.0
    for times, horizon in zip(sequences, horizons):
        times = np.asarray(times, dtype=float)
        _check_sorted(times)
        total += horizon
        if times.size == 0:
            continue
        n += times.size
        parts.append(beta * recursive_state(times, beta))
        comp += float(np.sum(1.0 - np.exp(-beta * (horizon - times))))
    beta_a = np.concatenate(parts) if parts else np.zeros(0)
    return _Stats(n, total, beta_a, comp)


def log_likelihood(mu: float, alpha: float, beta: float, sequences: Sequence[np.ndarray],
                   horizons: Sequence[float]) -> float:
    s = _sufficient_stats(sequences, horizons, beta)
    return _ll(s, mu, alpha)


def _ll(s: _Stats, mu: float, alpha: float) -> float:
    lam = mu + alpha * s.beta_a
    return float(np.sum(np.log(lam))) - mu * s.horizon - alpha * s.compensator


def _grad(s: _Stats, mu: float, alpha: float) -> np.ndarray:
    inv = 1.0 / (mu + alpha * s.beta_a)
    return np.array([inv.sum() - s.horizon, (s.beta_a * inv).sum() - s.compensator])


def _project(x: np.ndarray) -> np.ndarray:
    return np.array([max(x[0], MU_MIN), min(max(x[1], 0.0), ALPHA_MAX)])


def fit_type(sequences: Sequence[np.ndarray], horizons: Sequence[float], beta: float,
             max_iter: int = 500, rtol: float = 1e-6) -> tuple[float, float, bool]:
    """MLE of (mu, alpha) by projected gradient ascent; returns (mu, alpha, degenerate)."""
    s = _sufficient_stats(sequences, horizons, beta)
    if s.n == 0 or s.horizon <= 0:
        return 0.0, 0.0, True
    x = _project(np.array([0.5 * s.n / s.horizon, 0.5]))
    f = _ll(s, *x)
    g = _grad(s, *x)
    step = 1e-2 / max(np.abs(g).max(), 1e-12)
    for _ in range(max_iter):
        for _ in range(60):
            x_new = _project(x + step * g)
            f_new = _ll(s, *x_new)
            # Armijo condition on the projected step
            if f_new >= f + 1e-4 * float(g @ (x_new - x)):
                break
            step *= 0.5
        else:
            break
        g_new = _grad(s, *x_new)
        dx, dg = x_new - x, g_new - g
        done = abs(f_new - f) <= rtol * max(abs(f), 1e-12)
        x, f, g = x_new, f_new, g_new
        if done:
            break
        curv = float(dx @ dg)
        # Barzilai-Borwein step for ascent on a concave objective (curv < 0)
        step = float(dx @ dx) / -curv if curv < 0 else step * 2.0
    return float(x[0]), float(x[1]), False


def fit(sequences_by_type: Mapping[int, Sequence[tuple[np.ndarray, float]]], n_types: int,
        beta: float = 1.0, max_iter: int = 500) -> HawkesParams:
    """Fit every event type from (event times, horizon) realisations.

    Types without any realisation, and the reserved unseen type, come back as
    degenerate (0, 0).
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    mu = np.zeros(n_types)
    alpha = np.zeros(n_types)
    degenerate = np.ones(n_types, dtype=bool)
    for l in range(n_types):
        if l == UNSEEN_ID or l not in sequences_by_type:
            continue
        seqs = sequences_by_type[l]
        mu[l], alpha[l], degenerate[l] = fit_type([s for s, _ in seqs], [h for _, h in seqs], beta, max_iter)
    return HawkesParams(beta, mu, alpha, degenerate)


def featurize_window(params: HawkesParams, events_by_type: Mapping[int, Sequence[float]],
                     t_end: float) -> np.ndarray:
    """Intensity vector at `t_end` from the window's own events (times relative to window start)."""
    lam = params.mu.copy()
    for l, times in events_by_type.items():
        if l == UNSEEN_ID or len(times) == 0:
            continue
        lam[l] = intensity_at(params.mu[l], params.alpha[l], params.beta, times, t_end)
    lam[UNSEEN_ID] = 0.0
    return lam
