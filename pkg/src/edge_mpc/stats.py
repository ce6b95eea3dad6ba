"""Box-plot summary statistics."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass
from typing import Sequence

import numpy as np

WHISKER = 1.5
MIN_SAMPLES = 5


@dataclass(frozen=True)
class BoxStats:
    min: float
    lower_adjacent: float
    q25: float
    median: float
    q75: float
    upper_adjacent: float
    max: float

    @property
    def iqr(self) -> float:
        return self.q75 - self.q25

    def as_tuple(self) -> tuple:
        return astuple(self)


def _interp(sorted_x: np.ndarray, p: float) -> float:
    h = (len(sorted_x) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(sorted_x) - 1)
    a = float(sorted_x[lo])
    b = float(sorted_x[hi])
    return a + (b - a) * (h - lo)


def box_stats(samples: Sequence[float]) -> BoxStats:
    """Quartiles by linear interpolation at index (n-1)p, Tukey adjacent values.

    The adjacent values are the most extreme samples still inside
    ``[q25 - 1.5 IQR, q75 + 1.5 IQR]``, clamped so they never fall inside
    the box.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if len(x) < MIN_SAMPLES:
        raise ValueError(f"box_stats needs at least {MIN_SAMPLES} samples, got {len(x)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    q25 = _interp(x, 0.25)
    med = _interp(x, 0.5)
    q75 = _interp(x, 0.75)
    iqr = q75 - q25
    lo_fence = q25 - WHISKER * iqr
    hi_fence = q75 + WHISKER * iqr
    lower = float(x[np.searchsorted(x, lo_fence, side="left")])
    upper = float(x[np.searchsorted(x, hi_fence, side="right") - 1])
    # heavily tied data can leave no sample between fence and quartile
    lower = min(lower, q25)
    upper = max(upper, q75)
    return BoxStats(float(x[0]), lower, q25, med, q75, upper, float(x[-1]))
