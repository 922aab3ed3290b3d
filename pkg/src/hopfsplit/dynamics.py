"""Restricted planar circular three-body problem around L4.

Rotating-frame Hamiltonian (primaries of mass 1-mu at (-mu, 0) and mu at
(1-mu, 0), unit angular velocity):

    H(q, p) = |p|^2/2 - (q1 p2 - q2 p1) - (1-mu)/|q + (mu,0)| - mu/|q - (1-mu,0)|

together with the triangular point L4, the linearization there, and the
stability-parameter algebra around the Gascheau-Routh critical mass ratio
mu1 where the 1:-1 resonant eigenvalue collision happens.

States are 4-vectors ordered (q1, q2, p1, p2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import precision as prec

_COLLISION_TOL = 1e-12


def gascheau_routh_mu1(precision="f64"):
    """Critical mass ratio mu1 = (1 - sqrt(69)/9) / 2.

    At mu1 the linearization at L4 has the double eigenvalue pair
    +-i*sqrt(2)/2 (non-semisimple 1:-1 resonance); equivalently
    27*mu1*(1-mu1) = 1 exactly.
    """
    one = prec.make_float(1, precision)
    return (one - prec.sqrt(one * 69) / 9) / 2


def nu0(mu):
    """Bifurcation parameter nu = (1 - sqrt(27 mu (1-mu))) / 4.

    Strictly decreasing in mu on (0, 1/2); vanishes at mu = mu1; negative
    (complex saddle at L4) for mu > mu1.
    """
    one = mu / mu  # 1 in the ring of mu
    return (one - prec.sqrt(27 * mu * (one - mu))) / 4


@dataclass(frozen=True)
class MassParams:
    """Mass ratio with its derived stability parameters."""

    mu: object
    nu: object
    omega_hat: object
    a_unstable: object  # sqrt(-nu) when nu < 0, else None

    @staticmethod
    def from_mu(mu):
        nu = nu0(mu)
        omega_hat = prec.sqrt(mu / mu / 2 - nu)
        a = prec.sqrt(-nu) if nu < 0 else None
        return MassParams(mu=mu, nu=nu, omega_hat=omega_hat, a_unstable=a)


def _primary_offsets(state, mu):
    """Displacements from the two primaries and their norms."""
    q1, q2 = state[0], state[1]
    d1 = (q1 + mu, q2)
    d2 = (q1 - (1 - mu), q2)
    r1 = prec.sqrt(d1[0] * d1[0] + d1[1] * d1[1])
    r2 = prec.sqrt(d2[0] * d2[0] + d2[1] * d2[1])
    return d1, d2, r1, r2


def rpc3bp_energy(state, mu):
    """Hamiltonian of the rotating-frame RPC3BP; raises near collision."""
    q1, q2, p1, p2 = state[0], state[1], state[2], state[3]
    _, _, r1, r2 = _primary_offsets(state, mu)
    if r1 < _COLLISION_TOL or r2 < _COLLISION_TOL:
        raise ValueError("singular potential")
    return ((p1 * p1 + p2 * p2) / 2 - (q1 * p2 - q2 * p1)
            - (1 - mu) / r1 - mu / r2)


def rpc3bp_vector_field(state, mu):
    """Canonical equations (dH/dp, -dH/dq); analytic, no differencing.

    Accepts a flat state of 4 scalars or a numpy array of shape (..., 4);
    returns the same shape.
    """
    arr = np.asarray(state, dtype=float) if not _is_generic(state) else None
    if arr is not None:
        q1, q2, p1, p2 = arr[..., 0], arr[..., 1], arr[..., 2], arr[..., 3]
        d1x, d1y = q1 + mu, q2
        d2x, d2y = q1 - (1 - mu), q2
        r1_3 = (d1x * d1x + d1y * d1y) ** 1.5
        r2_3 = (d2x * d2x + d2y * d2y) ** 1.5
        if np.any(r1_3 < _COLLISION_TOL ** 3) or np.any(r2_3 < _COLLISION_TOL ** 3):
            raise ValueError("singular potential")
        vq1 = (1 - mu) * d1x / r1_3 + mu * d2x / r2_3
        vq2 = (1 - mu) * d1y / r1_3 + mu * d2y / r2_3
        out = np.empty_like(arr)
        out[..., 0] = p1 + q2
        out[..., 1] = p2 - q1
        out[..., 2] = p2 - vq1
        out[..., 3] = -p1 - vq2
        return out
    # ring-generic scalar path (mpmath etc.)
    q1, q2, p1, p2 = state[0], state[1], state[2], state[3]
    d1, d2, r1, r2 = _primary_offsets(state, mu)
    if r1 < _COLLISION_TOL or r2 < _COLLISION_TOL:
        raise ValueError("singular potential")
    vq1 = (1 - mu) * d1[0] / r1 ** 3 + mu * d2[0] / r2 ** 3
    vq2 = (1 - mu) * d1[1] / r1 ** 3 + mu * d2[1] / r2 ** 3
    return type(state)((p1 + q2, p2 - q1, p2 - vq1, -p1 - vq2)) \
        if isinstance(state, tuple) else [p1 + q2, p2 - q1, p2 - vq1, -p1 - vq2]


def _is_generic(state):
    """True when the state carries non-float scalars (mpmath mode)."""
    import mpmath
    try:
        first = state[0]
    except Exception:
        return False
    return isinstance(first, (mpmath.mpf, mpmath.mpc))


def rpc3bp_jacobian(state, mu):
    """Analytic Jacobian of rpc3bp_vector_field.

    For a flat state returns a (4, 4) array; for shape (..., 4) input
    returns (..., 4, 4).
    """
    arr = np.asarray(state, dtype=float)
    q1, q2 = arr[..., 0], arr[..., 1]
    out = np.zeros(arr.shape[:-1] + (4, 4))
    # second partials of the gravitational part V = -(1-mu)/r1 - mu/r2
    v11 = np.zeros_like(q1)
    v12 = np.zeros_like(q1)
    v22 = np.zeros_like(q1)
    for m, cx in ((1 - mu, -mu), (mu, 1 - mu)):
        dx, dy = q1 - cx, q2
        rho2 = dx * dx + dy * dy
        rho3 = rho2 ** 1.5
        rho5 = rho2 ** 2.5
        v11 += m * (1.0 / rho3 - 3.0 * dx * dx / rho5)
        v12 += m * (-3.0 * dx * dy / rho5)
        v22 += m * (1.0 / rho3 - 3.0 * dy * dy / rho5)
    out[..., 0, 1] = 1.0
    out[..., 0, 2] = 1.0
    out[..., 1, 0] = -1.0
    out[..., 1, 3] = 1.0
    out[..., 2, 0] = -v11
    out[..., 2, 1] = -v12
    out[..., 2, 3] = 1.0
    out[..., 3, 0] = -v12
    out[..., 3, 1] = -v22
    out[..., 3, 2] = -1.0
    return out


def lagrange_L4(mu):
    """L4 = (q1, q2, p1, p2) = ((1-2mu)/2, sqrt(3)/2, -sqrt(3)/2, (1-2mu)/2)."""
    if not (0 < mu <= 0.5):
        raise ValueError("mu must lie in (0, 1/2]")
    one = mu / mu
    s3h = prec.sqrt(3 * one) / 2
    half = (one - 2 * mu) / 2
    return [half, s3h, -s3h, half]


def linearization_at_L4(mu):
    """Matrix of the linearized flow at L4 in displacement coordinates.

    Characteristic polynomial: lambda^4 + lambda^2 + (27/4) mu (1 - mu).
    """
    if not (0 < mu <= 0.5):
        raise ValueError("mu must lie in (0, 1/2]")
    c = 0.75 * np.sqrt(3.0) * (1.0 - 2.0 * mu)
    return np.array([
        [0.0, 1.0, 1.0, 0.0],
        [-1.0, 0.0, 0.0, 1.0],
        [-0.25, c, 0.0, 1.0],
        [c, 1.25, -1.0, 0.0],
    ])


def saddle_eigenvalues(mu):
    """(a, b) with eigenvalues +-a +- ib at L4 for mu > mu1.

    a = sqrt(-nu0(mu)), b = omega_hat = sqrt(1/2 - nu0(mu)); closed
    quartic formulas, no general eigensolver (stable branches near mu1).
    """
    nu = nu0(mu)
    if nu >= 0:
        raise ValueError("not a complex saddle")
    one = mu / mu
    return prec.sqrt(-nu), prec.sqrt(one / 2 - nu)


def energy_of_L4(mu):
    """h(L4) = rpc3bp_energy(lagrange_L4(mu), mu)."""
    return rpc3bp_energy(lagrange_L4(mu), mu)
