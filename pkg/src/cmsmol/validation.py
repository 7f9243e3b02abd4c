"""Input validation helpers used by the estimator wrappers and the CLI."""
from __future__ import annotations

import numbers

import numpy as np


def check_text_list(X, *, allow_empty_strings: bool = False, name: str = "X") -> list[str]:
    """Coerce ``X`` (a string, list, tuple, array or pandas Series) to a list of str."""
    if isinstance(X, str):
        raise TypeError(f"{name} must be a sequence of strings, not a single string")
    if hasattr(X, "tolist"):
        X = X.tolist()
    out = list(X)
    for i, x in enumerate(out):
        if not isinstance(x, str):
            raise TypeError(f"{name}[{i}] is {type(x).__name__}, expected str")
        if not x and not allow_empty_strings:
            raise ValueError(f"{name}[{i}] is an empty string")
    if not out:
        raise ValueError(f"{name} is empty")
    return out


def check_fraction(value, name: str, *, low_open=True, high_open=True) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise TypeError(f"{name} must be a finite real number")
    lo_ok = value > 0 if low_open else value >= 0
    hi_ok = value < 1 if high_open else value <= 1
    if not (lo_ok and hi_ok):
        raise ValueError(f"{name}={value} outside its allowed range")
    return float(value)


def check_positive_int(value, name: str, *, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer")
    if value < minimum:
        raise ValueError(f"{name}={value} must be >= {minimum}")
    return int(value)


def check_rng(rng) -> np.random.Generator:
    """Accept a Generator, an int seed or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, numbers.Integral):
        return np.random.default_rng(rng)
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")
