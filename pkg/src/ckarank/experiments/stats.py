"""Paired t-tests over per-seed deltas and Holm step-down correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class PairedTest:
    mean: float
    std: float
    t: float
    p: float
    ci95: tuple[float, float]
    n: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "t": self.t, "p": self.p,
                "ci95": list(self.ci95), "n": self.n, "degenerate": self.degenerate}


def paired_t_test(deltas) -> PairedTest:
    """Two-sided one-sample t-test of per-seed paired differences against zero.

    Zero spread makes the statistic undefined; the result is then flagged
    degenerate with p = 0 for a nonzero mean and p = 1 otherwise.
    """
    d = np.asarray(deltas, dtype=np.float64).ravel()
    n = d.size
    if n < 2:
        raise ValueError("paired t-test needs at least two differences")
    mean = float(d.mean())
    std = float(d.std(ddof=1))
    if std == 0.0:
        return PairedTest(mean, 0.0, float("inf") if mean else 0.0, 0.0 if mean else 1.0,
                          (mean, mean), n, degenerate=True)
    se = std / np.sqrt(n)
    t = mean / se
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    half = float(stats.t.ppf(0.975, df=n - 1) * se)
    return PairedTest(mean, std, float(t), p, (mean - half, mean + half), n)


def holm_bonferroni(p_values, alpha: float = 0.05) -> tuple[list[bool], list[float]]:
    """Reject flags and Holm-adjusted p-values, both in input order."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    p = np.asarray(p_values, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 0.0
    for k, idx in enumerate(order):
        running = max(running, min(1.0, (m - k) * p[idx]))
        adjusted[idx] = running
    reject = np.zeros(m, dtype=bool)
    for k, idx in enumerate(order):
        # Same product as the adjusted value, so flags and adjusted p agree at ties.
        if (m - k) * p[idx] > alpha:
            break
        reject[idx] = True
    return reject.tolist(), adjusted.tolist()
