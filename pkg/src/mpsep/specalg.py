"""Spectrogram algebra: the element-wise operators the separation recursion is
built from, plus the energy functional used for saliency and termination.

Subtraction clamps at zero (magnitude grids are non-negative) and reports how
many bins were clamped, so silent information loss is observable.  In the
engine's default mode (ratio masks applied to the running mixture) the clamp
count is provably zero and mixtures are conserved exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import Spectrogram
from .errors import ConfigError, ShapeMismatchError


@dataclass
class Mask:
    """Per-bin multiplicative gate over a spectrogram.

    ``ratio`` masks take values in [0, 1]; ``binary`` masks in {0, 1}.
    """

    values: np.ndarray
    kind: str = "ratio"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.values.shape}")
        if self.kind == "ratio":
            if self.values.min() < 0.0 or self.values.max() > 1.0:
                raise ValueError("ratio mask values must lie in [0, 1]")
        elif self.kind == "binary":
            if not np.all((self.values == 0.0) | (self.values == 1.0)):
                raise ValueError("binary mask values must be exactly 0 or 1")
        else:
            raise ValueError(f"unknown mask kind {self.kind!r}")

    @property
    def shape(self):
        return self.values.shape


def _check_pair(a: Spectrogram, b: Spectrogram, op: str) -> None:
    if a.values.shape != b.values.shape:
        raise ShapeMismatchError(
            f"{op}: shapes {a.values.shape} and {b.values.shape} differ"
        )
    if a.scale != b.scale:
        raise ShapeMismatchError(f"{op}: scales {a.scale!r} and {b.scale!r} differ")


def add(a: Spectrogram, b: Spectrogram) -> Spectrogram:
    """Element-wise sum (the mixing operator)."""
    _check_pair(a, b, "add")
    return Spectrogram(a.values + b.values, a.scale)


def subtract(a: Spectrogram, b: Spectrogram) -> tuple[Spectrogram, int]:
    """Element-wise ``a - b`` clamped at zero; returns (result, clamped bins)."""
    _check_pair(a, b, "subtract")
    diff = a.values - b.values
    clamped = int(np.count_nonzero(diff < 0.0))
    return Spectrogram(np.maximum(diff, 0.0), a.scale), clamped


def apply_mask(s: Spectrogram, m: Mask) -> Spectrogram:
    """Element-wise product; never increases any bin."""
    if s.values.shape != m.values.shape:
        raise ShapeMismatchError(
            f"apply_mask: spectrogram {s.values.shape} vs mask {m.values.shape}"
        )
    return Spectrogram(s.values * m.values, s.scale)


def energy(s: Spectrogram) -> float:
    """Average energy: mean of squared bin values (zero iff all-zero)."""
    return float(np.mean(np.square(s.values)))


def energy_values(values: np.ndarray) -> float:
    """``energy`` on a raw grid, for internal hot paths."""
    return float(np.mean(np.square(values)))


def binarize(m: Mask, threshold: float = 0.5) -> Mask:
    """Threshold a mask: 1 where value >= threshold, else 0.  Idempotent."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"binarize threshold must lie in (0, 1), got {threshold}")
    return Mask((m.values >= threshold).astype(np.float64), "binary")
