"""Closed-form homoclinic objects of the scaled truncated system.

The truncated Hamiltonian H0 = (omega/eps) S + (1/2)(N - Q + Q^2) has a
hyperbolic equilibrium at the origin whose stable and unstable manifolds
coincide in a 2-parameter homoclinic family

    Gamma0(u, theta) = (R cos, R sin, r cos, r sin)(theta),
    r(u) = sech u,   R(u) = sinh u / cosh^2 u = -dr/du,

on which S = 0 and N - Q + Q^2 = 0 identically.  The generating function
of the family in polar coordinates reduces to rho0(u) = -(1/3) tanh^3 u,
the antiderivative of -R^2 vanishing at u = 0.

All functions accept real or complex u (numpy arrays broadcast); complex
evaluation guards against the poles of sech at u = i pi/2 + j pi.
"""

from __future__ import annotations

import numpy as np

POLE_GUARD = 1e-6


def _pole_distance(u):
    """Distance from u to the nearest singularity i*pi/2 + j*pi of r."""
    u = np.asarray(u, dtype=complex)
    # poles sit on the lines Im u = +-pi/2 (mod pi in the real direction)
    re = u.real - np.pi * np.round(u.real / np.pi)
    d_plus = np.hypot(re, u.imag - np.pi / 2)
    d_minus = np.hypot(re, u.imag + np.pi / 2)
    return np.minimum(d_plus, d_minus)


def _check_pole(u, guard=POLE_GUARD):
    if np.iscomplexobj(np.asarray(u)) and np.any(_pole_distance(u) < guard):
        raise ValueError("near singularity of Gamma0")


def separatrix_profile(u):
    """(r, R) = (sech u, sinh u / cosh^2 u); R = -dr/du."""
    c = np.cosh(u)
    r = 1.0 / c
    return r, np.sinh(u) / (c * c)


def gamma0(u, theta, guard=POLE_GUARD):
    """Homoclinic state Gamma0(u, theta) of the truncated scaled system.

    Returns the 4-vector (R cos(theta), R sin(theta), r cos(theta),
    r sin(theta)); for array input the state components broadcast over the
    trailing axes and the result has shape (..., 4).
    """
    _check_pole(u, guard)
    r, R = separatrix_profile(u)
    ct, st = np.cos(theta), np.sin(theta)
    return np.stack(np.broadcast_arrays(R * ct, R * st, r * ct, r * st),
                    axis=-1)


def generating_T0(u):
    """rho0(u) = -(1/3) tanh^3 u, the radial generating function.

    Normalized by rho0(0) = 0; satisfies d rho0/du = -R(u)^2 and tends to
    -+ 1/3 as u -> +-infinity.
    """
    t = np.tanh(u)
    return -(t * t * t) / 3.0


def h0_on_homoclinic(u, theta, scaled):
    """Residual of the scaled H0 on Gamma0(u, theta) (identically zero).

    ``scaled`` is a :class:`hopfsplit.polyham.ScaledParams`; the residual
    is returned rather than asserted so callers can monitor roundoff.
    """
    from .polyham import scaled_hamiltonian

    H0, _ = scaled_hamiltonian(scaled)
    state = gamma0(u, theta)
    return H0([state[..., i] for i in range(4)])
