"""Attack-cell statistics and the two-sided paired t-test."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc


@dataclass
class CellStats:
    n_attempts: int
    n_success: int
    success_rate: float  # percent
    pass_mean: float
    pass_std: float


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    n: int
    degenerate: bool = False


def attempt_pass(success: bool, reason: str, pass_value) -> float:
    """PASS value an attempt contributes to statistics.

    Original-class targets count as 1, failures as 0, reached targets as
    their measured PASS.
    """
    if reason == "original":
        return 1.0
    if not success:
        return 0.0
    return float(pass_value)


def compute_stats(attempts) -> CellStats | None:
    """Summarise ``(success, reason, pass_value)`` triples of one cell; None when empty."""
    attempts = list(attempts)
    if not attempts:
        return None
    values = np.array([attempt_pass(*a) for a in attempts])
    n_success = sum(1 for success, _, _ in attempts if success)
    n = len(values)
    std = float(np.std(values, ddof=1)) if n > 1 else 0.0
    return CellStats(n, n_success, 100.0 * n_success / n, float(np.mean(values)), std)


def t_sf_two_sided(t, df) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom.

    Uses I_x(df/2, 1/2) with x = df / (df + t^2).
    """
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return float(betainc(df / 2.0, 0.5, x))


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test of ``a - b``.

    All-zero differences give t = 0, p = 1 and ``degenerate=True``; constant
    nonzero differences give an infinite t and p = 0, also flagged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D of equal length, got {a.shape} and {b.shape}")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    df = n - 1
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, 1.0, df, n, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, n, degenerate=True)
    t = float(mean / (sd / math.sqrt(n)))
    return TTestResult(t, t_sf_two_sided(t, df), df, n)
