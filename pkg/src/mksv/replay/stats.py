"""Nearest-rank percentiles."""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Sequence


def percentile(values: Sequence[float], p: float) -> float:
    """Smallest value with at least p% of the samples at or below it."""
    if not values:
        raise ValueError("percentile of an empty sample")
    if not 0 <= p <= 100:
        raise ValueError("p must be within [0, 100]")
    ordered = sorted(values)
    # exact rational rank: a float product such as 0.07 * 100 overshoots the integer
    rank = max(1, math.ceil(Fraction(str(p)) * len(ordered) / 100))
    return ordered[rank - 1]


def summarize(values: Sequence[float]) -> dict:
    if not values:
        return {"n": 0, "p50": None, "p99": None, "min": None, "max": None, "mean": None}
    return {"n": len(values), "p50": percentile(values, 50), "p99": percentile(values, 99),
            "min": min(values), "max": max(values), "mean": sum(values) / len(values)}
