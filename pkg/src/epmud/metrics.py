"""Performance measures and their Monte Carlo aggregation.

Conventions for trials where active-user detection erred: a missed device
contributes a zero channel estimate to the net channel NMSE and all of its
J symbols to the symbol error count; false-alarm devices are counted in the
activity error rate only.  Trials with no active devices leave the
net metrics undefined (None) and are excluded from aggregation, with the
exclusion count reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "TrialMetrics",
    "aer",
    "nnmse",
    "nser",
    "nmse_g",
    "MetricAccumulator",
]


def aer(a, a_hat) -> float:
    """Activity error rate: Hamming distance over N (misses plus false alarms)."""
    a = np.asarray(a, dtype=bool)
    a_hat = np.asarray(a_hat, dtype=bool)
    if a.shape != a_hat.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {a_hat.shape}")
    return float(np.mean(a != a_hat))


def nnmse(h, g_hat_net, true_support) -> Optional[float]:
    """Net channel NMSE over the truly active devices.

    g_hat_net must already be zero wherever the algorithm declared the
    device inactive (misses therefore contribute their full channel power).
    Undefined (None) when no device is active.
    """
    true_support = np.asarray(true_support, dtype=int)
    if true_support.size == 0:
        return None
    h = np.asarray(h)
    g_hat_net = np.asarray(g_hat_net)
    num = np.linalg.norm(g_hat_net[true_support] - h[true_support]) ** 2
    den = np.linalg.norm(h[true_support]) ** 2
    return float(num / den)


def nser(x_true, x_hat, true_support, support_hat) -> Optional[float]:
    """Net symbol error rate over the truly active devices.

    x_true is the |true_support| x J matrix of transmitted symbols,
    x_hat the |support_hat| x J matrix of detected symbols.  A missed
    device contributes J errors; false-alarm devices are not counted.
    Undefined (None) when there are no active devices or J = 0.
    """
    true_support = np.asarray(true_support, dtype=int)
    support_hat = np.asarray(support_hat, dtype=int)
    x_true = np.asarray(x_true)
    x_hat = np.asarray(x_hat)
    j = x_true.shape[1] if x_true.ndim == 2 else 0
    if true_support.size == 0 or j == 0:
        return None
    pos_in_hat = {int(n): k for k, n in enumerate(support_hat)}
    errors = 0
    for row, n in enumerate(true_support):
        k = pos_in_hat.get(int(n))
        if k is None:
            errors += j
        else:
            errors += int(np.sum(~np.isclose(x_hat[k], x_true[row], rtol=1e-9, atol=0.0)))
    return errors / (true_support.size * j)


def nmse_g(g, g_hat) -> Optional[float]:
    """NMSE of the composite-vector estimate; None when g is all-zero."""
    g = np.asarray(g)
    g_hat = np.asarray(g_hat)
    if g.shape != g_hat.shape:
        raise ValueError(f"length mismatch: {g.shape} vs {g_hat.shape}")
    den = np.linalg.norm(g) ** 2
    if den == 0.0:
        return None
    return float(np.linalg.norm(g_hat - g) ** 2 / den)


@dataclass(frozen=True)
class TrialMetrics:
    """All measures for one algorithm on one frame."""

    aer: float
    nnmse: Optional[float]
    nser: Optional[float]
    nmse_g: Optional[float]
    n_active: int


class _RunningMean:
    """Mean and standard error with merge support; None values are skipped."""

    __slots__ = ("n", "total", "total_sq")

    def __init__(self):
        self.n = 0
        self.total = 0.0
        self.total_sq = 0.0

    def add(self, value: Optional[float]) -> None:
        if value is None:
            return
        self.n += 1
        self.total += value
        self.total_sq += value * value

    def merge(self, other: "_RunningMean") -> None:
        self.n += other.n
        self.total += other.total
        self.total_sq += other.total_sq

    @property
    def mean(self) -> float:
        return self.total / self.n if self.n else float("nan")

    @property
    def std_error(self) -> float:
        if self.n < 2:
            return 0.0
        var = (self.total_sq - self.total * self.total / self.n) / (self.n - 1)
        return float(np.sqrt(max(var, 0.0) / self.n))


@dataclass
class MetricAccumulator:
    """Mergeable aggregation of TrialMetrics (order-independent totals).

    The merge is associative and commutative, so trial results can be
    combined in any grouping; undefined trials are counted separately.
    """

    trials: int = 0
    undefined_trials: int = 0
    _aer: _RunningMean = field(default_factory=_RunningMean)
    _nnmse: _RunningMean = field(default_factory=_RunningMean)
    _nser: _RunningMean = field(default_factory=_RunningMean)
    _nmse_g: _RunningMean = field(default_factory=_RunningMean)

    def add(self, tm: TrialMetrics) -> None:
        self.trials += 1
        if tm.nnmse is None or tm.nser is None or tm.nmse_g is None:
            self.undefined_trials += 1
        self._aer.add(tm.aer)
        self._nnmse.add(tm.nnmse)
        self._nser.add(tm.nser)
        self._nmse_g.add(tm.nmse_g)

    def merge(self, other: "MetricAccumulator") -> None:
        self.trials += other.trials
        self.undefined_trials += other.undefined_trials
        self._aer.merge(other._aer)
        self._nnmse.merge(other._nnmse)
        self._nser.merge(other._nser)
        self._nmse_g.merge(other._nmse_g)

    def summary(self) -> dict:
        out = {}
        for name, acc in (("aer", self._aer), ("nnmse", self._nnmse),
                          ("nser", self._nser), ("nmse_g", self._nmse_g)):
            out[f"{name}_mean"] = acc.mean
            out[f"{name}_se"] = acc.std_error
        return out
