"""Input checks shared by the estimators and the CLI."""

import re

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ConfigError

_BUDGET_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*(b|bits?|KB|MB)?\s*$", re.IGNORECASE)
_UNIT_BITS = {"b": 1, "bit": 1, "bits": 1, "kb": 8 * 1024, "mb": 8 * 1024 * 1024}


def check_weights(weights):
    """Flatten a weight tensor to a finite, non-empty float64 vector."""
    w = np.asarray(weights, dtype=np.float64)
    return check_array(w.reshape(1, -1), ensure_all_finite=True).reshape(-1)


def check_allocation(allocation, upper=None):
    n = [int(k) for k in allocation]
    if any(k != float(a) for k, a in zip(n, allocation)):
        raise ValueError("allocation entries must be integers")
    if not n or min(n) < 1:
        raise ValueError("every allocation entry must be >= 1")
    if upper is not None:
        if len(upper) != len(n):
            raise ValueError(f"allocation has {len(n)} entries, expected {len(upper)}")
        for i, (k, hi) in enumerate(zip(n, upper)):
            if k > hi:
                raise ValueError(f"layer {i}: depth {k} exceeds available {hi}")
    return n


def parse_budget(text):
    """Budget string to bits: ``123`` or ``123b`` are bits, ``KB``/``MB`` use 1024."""
    if isinstance(text, (int, np.integer)):
        bits = int(text)
    else:
        m = _BUDGET_RE.match(str(text))
        if not m:
            raise ConfigError(f"cannot parse budget {text!r}; use e.g. 200KB, 1.5MB or 8000b")
        unit = (m.group(2) or "b").lower()
        bits = int(round(float(m.group(1)) * _UNIT_BITS[unit]))
    if bits <= 0:
        raise ConfigError("budget must be positive")
    return bits


def parse_allocation(text):
    try:
        return check_allocation([int(k) for k in re.split(r"[,\s-]+", str(text).strip()) if k])
    except ValueError as exc:
        raise ConfigError(f"bad allocation {text!r}: {exc}") from None
