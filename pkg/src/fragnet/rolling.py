"""Rolling-window scheme: trailing blocks of W rows advancing by a fixed step."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ValidationError
from .panel import ReturnMatrix

log = logging.getLogger(__name__)

WINDOW_LENGTH = 120
WINDOW_STEP = 7


@dataclass(frozen=True)
class RollingConfig:
    window_length: int = WINDOW_LENGTH
    step: int = WINDOW_STEP

    def __post_init__(self):
        if self.window_length < 30:
            raise ValidationError(f"window length must be >= 30, got {self.window_length}")
        if self.step < 1:
            raise ValidationError(f"step must be >= 1, got {self.step}")
        if self.step > self.window_length:
            raise ValidationError("step cannot exceed the window length")


def window_count(n_rows: int, cfg: RollingConfig) -> int:
    if n_rows < cfg.window_length:
        return 0
    return (n_rows - cfg.window_length) // cfg.step + 1


def rolling_windows(
    returns: ReturnMatrix, cfg: RollingConfig
) -> list[tuple[pd.Timestamp, np.ndarray]]:
    """Trailing blocks of ``window_length`` rows, ends advancing by ``step``.

    Each block is a read-only view into the return matrix; the window is
    stamped with the date of its last row.
    """
    values = returns.values
    values.setflags(write=False)
    n = values.shape[0]
    count = window_count(n, cfg)
    if count == 0:
        log.warning(
            "return matrix has %d rows, fewer than the window length %d: no windows",
            n,
            cfg.window_length,
        )
        return []
    out = []
    for k in range(count):
        end = cfg.window_length + k * cfg.step  # exclusive row bound
        out.append((returns.dates[end - 1], values[end - cfg.window_length : end]))
    return out
