"""Small shared utilities."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CycleMap:
    """Affine tau <-> cycle map: tau = (cycle - cycle0) / span."""

    cycle0: float
    span: float

    def __post_init__(self):
        if self.span <= 0:
            raise ValueError("cycle span must be positive")

    def tau_at(self, cycle):
        return (np.asarray(cycle, dtype=np.float64) - self.cycle0) / self.span

    def cycle_at(self, tau):
        return self.cycle0 + np.asarray(tau, dtype=np.float64) * self.span


class _NotReachedType:
    """Sentinel for 'no end-of-life crossing within the horizon'."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NotReached"

    def __bool__(self):
        return False


NOT_REACHED = _NotReachedType()


def fmt_float(x):
    """Full round-trip decimal text for CSV output."""
    return repr(float(x))
