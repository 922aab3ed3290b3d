"""Working-precision plumbing.

Two precision modes are supported throughout the suite:

* ``"f64"`` -- IEEE binary64 (numpy / python floats), the default;
* ``"dd"``  -- extended precision at 34 significant digits, realized with
  mpmath (a strict superset of double-double accuracy).

Code that must run in either mode is written generically and uses the
type-dispatching helpers below instead of ``math.sqrt`` and friends.
"""

from __future__ import annotations

import math

import mpmath

DD_DPS = 34

MODES = ("f64", "dd")


def check_mode(precision):
    if precision not in MODES:
        raise ValueError(f"unknown precision mode {precision!r}; use one of {MODES}")
    return precision


def make_float(x, precision="f64"):
    """Coerce x into the working precision's scalar type."""
    check_mode(precision)
    if precision == "f64":
        return float(x)
    with mpmath.workdps(DD_DPS):
        return mpmath.mpf(x) if not isinstance(x, str) else mpmath.mpf(x)


def sqrt(x):
    """Square root dispatching on the operand type."""
    if isinstance(x, (mpmath.mpf, mpmath.mpc)):
        return mpmath.sqrt(x)
    if isinstance(x, complex):
        return x ** 0.5
    if isinstance(x, (int, float)):
        return math.sqrt(x)
    # numpy scalars and arrays
    import numpy as np
    return np.sqrt(x)


def unit_roundoff(precision="f64"):
    check_mode(precision)
    if precision == "f64":
        return 2.0 ** -53
    return 10.0 ** (1 - DD_DPS)
