"""Inner-equation solver and Stokes-coefficient extraction.

The inner equation L K = F(K), with L = d/dz + omega d/dtheta, governs
the invariant-manifold generating functions near the complex singularity
of the unperturbed homoclinic.  Its two distinguished solutions K^u, K^s
share one formal Fourier-in-theta x power-in-1/z series; their actual
difference on a line Im z = -rho below the singularity is a sum of
beyond-all-orders modes

    K^u - K^s = sum_{k<0} chi^[k] exp(ik(omega z - theta + g(z,theta))),

and the coefficients chi^[k] are the quantities of interest.  This module
provides

* :class:`FourierPowerSeries` -- truncated series sum c[k][n] e^{ik theta}
  z^{-n} with the algebra needed by the fixed-point solver;
* :func:`inner_rhs` -- the nonlinearity F(K), including the degree-6
  remainder term via an exact precomposition of its Taylor expansion
  around the pole data;
* :func:`solve_inner_formal` -- the formal fixed point K = G(F(K));
* :func:`solve_inner_numeric` -- characteristic integration of the
  theta-Fourier modes along horizontal complex paths, in double or
  double-double arithmetic, with an integrating-factor (Lawson) version
  of the order-8 Cooper-Verner scheme so the step size is set by the
  smooth part of the solution rather than by the i*omega*k phases;
* :func:`extract_stokes` -- the chi^[k] fit over a list of rho values.
"""

from __future__ import annotations

import cmath
import json
import math
from dataclasses import dataclass, field

import mpmath
import numpy as np

from . import precision as prec
from .odeint import _cooper_verner_tableau
from .poly import Poly4

# paths at |Im z| below this pass too close to the singularity at z = 0
PATH_GUARD = 1.0


# ----------------------------------------------------------------------
# Truncated Fourier x inverse-power series
# ----------------------------------------------------------------------

class FourierPowerSeries:
    """Series sum_{|k|<=K_max} sum_{0<=n<=N_max} c[k][n] e^{ik theta} z^{-n}.

    Coefficients live in a complex array ``c`` of shape
    ``(2*K_max + 1, N_max + 1)`` with row index ``k + K_max``.  Products
    and mode shifts clip at the truncation bounds; the absolute mass of
    every clipped coefficient accumulates in ``drop_mass`` so callers can
    monitor truncation error.
    """

    def __init__(self, K_max, N_max, c=None, branch=None, drop_mass=0.0):
        self.K_max = int(K_max)
        self.N_max = int(N_max)
        if c is None:
            c = np.zeros((2 * self.K_max + 1, self.N_max + 1), dtype=complex)
        self.c = np.asarray(c, dtype=complex)
        if self.c.shape != (2 * self.K_max + 1, self.N_max + 1):
            raise ValueError("coefficient array shape mismatch")
        self.branch = branch
        self.drop_mass = float(drop_mass)

    # -- access -------------------------------------------------------

    def coeff(self, k, n):
        """Coefficient of e^{ik theta} z^{-n} (0 outside truncation)."""
        if abs(k) > self.K_max or not (0 <= n <= self.N_max):
            return 0.0 + 0.0j
        return complex(self.c[k + self.K_max, n])

    def set_coeff(self, k, n, value):
        self.c[k + self.K_max, n] = value

    def copy(self):
        return FourierPowerSeries(self.K_max, self.N_max, self.c.copy(),
                                  self.branch, self.drop_mass)

    def norm(self):
        """Sum of absolute coefficient values."""
        return float(np.sum(np.abs(self.c)))

    def gevrey_weights(self, omega):
        """Row vector omega^n / n! flattening the Gevrey-1 growth.

        The formal solution's coefficients grow like n!/omega^n (the
        Borel-plane singularities sit at distance omega), so norms and
        residuals are only meaningful after this weighting.
        """
        n = np.arange(self.N_max + 1, dtype=float)
        return np.exp(n * math.log(omega) -
                      np.array([math.lgamma(v + 1) for v in n]))

    def gevrey_norm(self, omega):
        """Weighted coefficient norm sum |c[k][n]| omega^n / n!."""
        return float(np.sum(np.abs(self.c) * self.gevrey_weights(omega)))

    def n_min(self, tol=0.0):
        """Smallest n carrying a coefficient above ``tol`` (None if empty)."""
        mags = np.max(np.abs(self.c), axis=0)
        idx = np.nonzero(mags > tol)[0]
        return int(idx[0]) if idx.size else None

    def to_dict(self):
        return {(k, n): self.c[k + self.K_max, n]
                for k in range(-self.K_max, self.K_max + 1)
                for n in range(self.N_max + 1)
                if self.c[k + self.K_max, n] != 0}

    # -- linear structure ---------------------------------------------

    def _like(self, c, drop=0.0):
        return FourierPowerSeries(self.K_max, self.N_max, c, None,
                                  self.drop_mass + drop)

    def __add__(self, other):
        if isinstance(other, FourierPowerSeries):
            a, b = self._aligned(other)
            return a._like(a.c + b.c, b.drop_mass)
        raise TypeError("can only add series to series")

    def __sub__(self, other):
        a, b = self._aligned(other)
        return a._like(a.c - b.c, b.drop_mass)

    def __mul__(self, scalar):
        if isinstance(scalar, FourierPowerSeries):
            return self.mul(scalar)
        return self._like(self.c * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self._like(-self.c)

    def _aligned(self, other):
        """The pair widened to a common truncation."""
        K = max(self.K_max, other.K_max)
        N = max(self.N_max, other.N_max)
        return self._widen(K, N), other._widen(K, N)

    def _widen(self, K, N):
        if K == self.K_max and N == self.N_max:
            return self
        out = FourierPowerSeries(K, N, branch=self.branch,
                                 drop_mass=self.drop_mass)
        out.c[K - self.K_max:K + self.K_max + 1, :self.N_max + 1] = self.c
        return out

    def project(self, K, N):
        """Truncate (or widen) to (K, N), recording clipped mass."""
        if K >= self.K_max and N >= self.N_max:
            return self._widen(K, N)
        out = FourierPowerSeries(K, N, branch=self.branch)
        lo = max(-K, -self.K_max)
        hi = min(K, self.K_max)
        ncut = min(N, self.N_max)
        out.c[lo + K:hi + K + 1, :ncut + 1] = \
            self.c[lo + self.K_max:hi + self.K_max + 1, :ncut + 1]
        out.drop_mass = self.drop_mass + float(
            np.sum(np.abs(self.c)) - np.sum(np.abs(out.c)))
        return out

    # -- calculus -----------------------------------------------------

    def dz(self):
        """d/dz: z^{-n} -> -n z^{-n-1}; the n = N_max row is clipped."""
        out = np.zeros_like(self.c)
        n = np.arange(self.N_max)
        out[:, 1:] = -n[None, :] * self.c[:, :-1]
        drop = float(self.N_max * np.sum(np.abs(self.c[:, -1])))
        return self._like(out, drop)

    def dtheta(self):
        """d/dtheta: multiply mode k by i*k."""
        k = np.arange(-self.K_max, self.K_max + 1)
        return self._like((1j * k)[:, None] * self.c)

    def shift_z(self, p):
        """Multiply by z^p (integer p): n -> n - p.

        Positive powers that would produce n < 0 raise; coefficients
        pushed past N_max are dropped with their mass recorded.
        """
        p = int(p)
        out = np.zeros_like(self.c)
        drop = 0.0
        if p >= 0:
            if np.any(np.abs(self.c[:, :p]) > 0):
                raise ValueError("z^%d shift would create positive powers" % p)
            out[:, :self.N_max + 1 - p] = self.c[:, p:]
        else:
            out[:, -p:] = self.c[:, :self.N_max + 1 + p]
            drop = float(np.sum(np.abs(self.c[:, self.N_max + 1 + p:])))
        return self._like(out, drop)

    def shift_k(self, q):
        """Multiply by e^{iq theta}: k -> k + q, clipping at K_max."""
        q = int(q)
        out = np.zeros_like(self.c)
        drop = 0.0
        if q >= 0:
            out[q:] = self.c[:2 * self.K_max + 1 - q]
            drop = float(np.sum(np.abs(self.c[2 * self.K_max + 1 - q:])))
        else:
            out[:q] = self.c[-q:]
            drop = float(np.sum(np.abs(self.c[:-q])))
        return self._like(out, drop)

    def mul_cos(self):
        return (self.shift_k(1) + self.shift_k(-1)) * 0.5

    def mul_sin(self):
        return (self.shift_k(1) - self.shift_k(-1)) * (-0.5j)

    def mul(self, other):
        """Product, truncated to this series' (K_max, N_max)."""
        b = other
        K, N = self.K_max, self.N_max
        fullk = self.K_max + b.K_max
        fulln = self.N_max + b.N_max
        conv = np.zeros((2 * fullk + 1, fulln + 1), dtype=complex)
        # 2-D polynomial product; the k axis is a full convolution, the
        # n axis adds exponents of z^{-1}
        for row in range(self.c.shape[0]):
            if not np.any(self.c[row]):
                continue
            for brow in range(b.c.shape[0]):
                if not np.any(b.c[brow]):
                    continue
                conv[row + brow] += np.convolve(self.c[row], b.c[brow])
        keep = conv[fullk - K:fullk + K + 1, :N + 1]
        drop = float(np.sum(np.abs(conv)) - np.sum(np.abs(keep)))
        return FourierPowerSeries(
            K, N, keep.copy(), None, self.drop_mass + b.drop_mass + drop)

    # -- evaluation ---------------------------------------------------

    def eval_modes(self, z):
        """Vector of mode values K^[k](z), k = -K_max..K_max (Horner)."""
        w = 1.0 / z
        vals = np.zeros(2 * self.K_max + 1, dtype=complex)
        for row in range(self.c.shape[0]):
            acc = 0.0 + 0.0j
            for n in range(self.N_max, -1, -1):
                acc = acc * w + self.c[row, n]
            vals[row] = acc
        return vals

    def __call__(self, z, theta):
        vals = self.eval_modes(z)
        k = np.arange(-self.K_max, self.K_max + 1)
        return complex(np.sum(vals * np.exp(1j * k * theta)))

    def last_term_magnitude(self, z):
        """Magnitude of the n = N_max row evaluated at |z|."""
        return float(np.max(np.abs(self.c[:, -1])) / abs(z) ** self.N_max)


# ----------------------------------------------------------------------
# The linear operator L and its formal right inverses G
# ----------------------------------------------------------------------

def apply_L_dict(u, iomega):
    """(d/dz + omega d/dtheta) on a {(k, n): coeff} dictionary.

    ``iomega`` is the scalar i*omega in whatever arithmetic the
    coefficients use (complex, sympy, ...), so the operation stays exact
    on exact inputs.
    """
    out = {}
    for (k, n), c in u.items():
        if n > 0:
            key = (k, n + 1)
            out[key] = out.get(key, 0) + (-n) * c
        if k != 0:
            key = (k, n)
            out[key] = out.get(key, 0) + iomega * k * c
    return {key: val for key, val in out.items() if val != 0}


def apply_G_dict(g, iomega):
    """Formal right inverse of L on a {(k, n): coeff} dictionary.

    For k = 0 the antiderivative in z: u[0][n-1] = -g[0][n] / (n-1),
    defined for n >= 2 (decaying forcing only).  For k != 0 the recursion
    i*omega*k u[k][n] = g[k][n] + (n-1) u[k][n-1] solves d/dz + i*omega*k
    order by order.  Exact on exact inputs.
    """
    ks = {k for k, _ in g}
    out = {}
    for k in sorted(ks):
        ns = sorted(n for kk, n in g if kk == k)
        if k == 0:
            for n in ns:
                c = g[(0, n)]
                if c == 0:
                    continue
                if n < 2:
                    raise ValueError(
                        "k = 0 forcing with n < 2 has no decaying "
                        "antiderivative")
                out[(0, n - 1)] = out.get((0, n - 1), 0) - c * 1 / (n - 1)
        else:
            prev = 0
            for n in range(ns[0], ns[-1] + 1):
                val = (g.get((k, n), 0) + (n - 1) * prev) * 1 / (iomega * k)
                if val != 0:
                    out[(k, n)] = val
                prev = val
    return out


def apply_G(g, omega):
    """Array version of :func:`apply_G_dict` on a FourierPowerSeries."""
    out = FourierPowerSeries(g.K_max, g.N_max, branch=g.branch,
                             drop_mass=g.drop_mass)
    iw = 1j * omega
    for k in range(-g.K_max, g.K_max + 1):
        row = g.c[k + g.K_max]
        if k == 0:
            if abs(row[0]) > 0 or abs(row[1]) > 0:
                raise ValueError(
                    "k = 0 forcing with n < 2 has no decaying antiderivative")
            for n in range(2, g.N_max + 1):
                out.c[g.K_max, n - 1] = -row[n] / (n - 1)
        else:
            prev = 0.0 + 0.0j
            for n in range(g.N_max + 1):
                prev = (row[n] + (n - 1) * prev) / (iw * k)
                out.c[k + g.K_max, n] = prev
    return out


# ----------------------------------------------------------------------
# The nonlinearity F
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class InnerParams:
    """The three numbers entering F: alpha, beta and omega at epsilon = 0."""
    alpha: float
    beta: float
    omega: float


def inner_params(coeff_fn=None):
    """InnerParams from the nu -> 0 normal-form coefficients.

    alpha = alpha_hat(0)/4, beta = beta_hat(0)/sqrt(2 gamma_hat(0)),
    omega = sqrt(2/gamma_hat(0)) * omega_hat(0).
    """
    from .polyham import nf_coeff_rational
    if coeff_fn is None:
        coeff_fn = nf_coeff_rational
    c0 = coeff_fn(0.0)
    g = c0.gamma_hat
    return InnerParams(alpha=c0.alpha_hat / 4.0,
                       beta=c0.beta_hat / math.sqrt(2.0 * g),
                       omega=math.sqrt(2.0 / g) * c0.omega_hat)


def _pole_data_series(K_max=7, N_max=14):
    """The four argument series at K = 0.

    x0 = -i z^{-2} R_theta e1 and y = -i z^{-1} R_theta e1 written in the
    e^{ik theta} basis; each has exactly two terms.
    """
    def two_mode(n, plus, minus):
        s = FourierPowerSeries(K_max, N_max)
        s.set_coeff(1, n, plus)
        s.set_coeff(-1, n, minus)
        return s

    x01 = two_mode(2, -0.5j, -0.5j)       # -i z^-2 cos(theta)
    x02 = two_mode(2, -0.5, 0.5)          # -i z^-2 sin(theta)
    y1 = two_mode(1, -0.5j, -0.5j)        # -i z^-1 cos(theta)
    y2 = two_mode(1, -0.5, 0.5)           # -i z^-1 sin(theta)
    return x01, x02, y1, y2


def _eval_poly_on_series(P, vars4):
    """Poly4 evaluated on four FourierPowerSeries (cached powers)."""
    K, N = vars4[0].K_max, vars4[0].N_max
    powers = [{0: None} for _ in range(4)]

    def power(i, e):
        if e not in powers[i]:
            base = vars4[i]
            prev = power(i, e - 1)
            powers[i][e] = base if prev is None else prev.mul(base)
        return powers[i][e]

    out = FourierPowerSeries(K, N)
    for exps, coeff in P.terms.items():
        term = None
        for i, e in enumerate(exps):
            if e == 0:
                continue
            p = power(i, e)
            term = p if term is None else term.mul(p)
        if term is None:
            out.c[K, 0] += complex(coeff)
        else:
            out = out + term * complex(coeff)
    return out


def h1_composition_tables(H1tilde_deg6, K_max=7, N_max=14):
    """Taylor tables of the remainder term around the pole data.

    Returns ``{(m1, m2): C}`` with

        C_{m1,m2}(z, theta) = 1/(m1! m2!) *
            d^{m1+m2} H1tilde / dx1^{m1} dx2^{m2}  at  (x0(z,theta),
            y(z,theta)),

    each a small exact FourierPowerSeries, so that the full remainder
    term of F is sum C_{m1,m2} dx1^{m1} dx2^{m2} where dx = R_theta
    diag(-i z^2, i z) grad K is the only K-dependent part of the x
    argument.  Precomputing the tables turns the degree-6 substitution
    into a handful of series products per evaluation.
    """
    x01, x02, y1, y2 = _pole_data_series(K_max, N_max)
    tables = {}
    d1 = {0: H1tilde_deg6}
    deg = H1tilde_deg6.max_degree()
    for m1 in range(deg + 1):
        if m1 > 0:
            d1[m1] = d1[m1 - 1].diff(0)
        if not d1[m1].terms:
            continue
        d2 = {0: d1[m1]}
        for m2 in range(deg + 1 - m1):
            if m2 > 0:
                d2[m2] = d2[m2 - 1].diff(1)
            P = d2[m2]
            if not P.terms:
                continue
            C = _eval_poly_on_series(P, (x01, x02, y1, y2))
            C = C * (1.0 / (math.factorial(m1) * math.factorial(m2)))
            if C.norm() > 0:
                tables[(m1, m2)] = C
    return tables


def _dx_series(K):
    """dx1, dx2 = R_theta diag(-i z^2, i z) grad K as series."""
    A = K.dz().shift_z(2) * (-1j)
    B = K.dtheta().shift_z(1) * 1j
    dx1 = A.mul_cos() - B.mul_sin()
    dx2 = A.mul_sin() + B.mul_cos()
    return dx1, dx2


def inner_rhs(K, H1tilde_deg6, alpha, beta, omega=None, tables=None):
    """The nonlinearity F(K) of the inner equation as a series.

    F(K) = -(z^2 Kz)^2 - (z Kth)^2 + alpha Kth^2 + (beta/z^2) Kth
           + H1tilde(x0 + dx, y; 0),

    with the last term evaluated through the precomposition tables of
    :func:`h1_composition_tables` (computed on the fly when ``tables`` is
    None).  ``omega`` does not enter F and is accepted only so the
    signature carries the full parameter set.  Output truncation follows
    K; dropped coefficient mass accumulates in ``drop_mass``.
    """
    if tables is None:
        tables = h1_composition_tables(H1tilde_deg6)
    Kz = K.dz()
    Kth = K.dtheta()
    z2Kz = Kz.shift_z(2)
    zKth = Kth.shift_z(1)
    F = -(z2Kz.mul(z2Kz)) - zKth.mul(zKth) + Kth.mul(Kth) * alpha \
        + Kth.shift_z(-2) * beta

    dx1, dx2 = _dx_series(K)
    pow1 = {0: None}
    pow2 = {0: None}

    def power(cache, base, e):
        if e not in cache:
            prev = power(cache, base, e - 1)
            cache[e] = base if prev is None else prev.mul(base)
        return cache[e]

    for (m1, m2), C in tables.items():
        term = C.project(K.K_max, K.N_max)
        p1 = power(pow1, dx1, m1)
        if p1 is not None:
            term = term.mul(p1)
        p2 = power(pow2, dx2, m2)
        if p2 is not None:
            term = term.mul(p2)
        F = F + term
    F.branch = K.branch
    return F


# ----------------------------------------------------------------------
# Formal fixed point
# ----------------------------------------------------------------------

def solve_inner_formal(branch, H1tilde_deg6, params, K_max=8, N_max=40,
                       tol=1e-14, max_iter=80, tables=None):
    """Formal series solution of L K = F(K) by K <- G(F(K)).

    Both branches carry the same formal series (their difference is
    beyond all orders); ``branch`` only labels the result.  Because the
    series is Gevrey-1 (coefficients grow like n!/omega^n), convergence
    and divergence are judged in the Borel-weighted norm of
    :meth:`FourierPowerSeries.gevrey_norm`, in which each iteration
    settles two more orders.  Raises when the iteration fails to
    contract.
    """
    if params.omega == 0:
        raise ValueError("omega must be nonzero")
    if branch not in ("u", "s"):
        raise ValueError("branch must be 'u' or 's'")
    if tables is None:
        tables = h1_composition_tables(H1tilde_deg6)
    K = FourierPowerSeries(K_max, N_max, branch=branch)
    weights = K.gevrey_weights(params.omega)
    best = math.inf
    for it in range(max_iter):
        F = inner_rhs(K, H1tilde_deg6, params.alpha, params.beta,
                      params.omega, tables)
        Knew = apply_G(F, params.omega)
        Knew.branch = branch
        delta = float(np.max(np.abs(Knew.c - K.c) * weights))
        K = Knew
        if delta < tol:
            break
        best = min(best, delta)
        # each pass should settle further orders; sustained growth of the
        # weighted update signals a non-contracting problem
        if it > N_max and delta > 1e3 * best:
            raise RuntimeError(
                "formal iteration diverging: increase N_max or check "
                "H1tilde scaling")
    else:
        raise RuntimeError(
            "formal iteration did not settle: increase N_max or check "
            "H1tilde scaling")
    return K


def formal_residual(K, H1tilde_deg6, params, tables=None):
    """Borel-weighted coefficient norm of L K - F(K) up to n <= N_max - 2.

    The last two powers are excluded (they are polluted by the series
    truncation itself).  Residual and solution are measured in the
    omega^n / n! weighted norm and their ratio returned: the factorial
    coefficient growth of the Gevrey-1 series makes any absolute
    coefficient norm meaningless, while the relative weighted residual
    sits at roundoff for a converged fixed point.
    """
    F = inner_rhs(K, H1tilde_deg6, params.alpha, params.beta, params.omega,
                  tables)
    L = FourierPowerSeries(K.K_max, K.N_max)
    for (k, n), c in apply_L_dict(K.to_dict(), 1j * params.omega).items():
        if abs(k) <= K.K_max and n <= K.N_max:
            L.c[k + K.K_max, n] += c
    R = L - F
    w = K.gevrey_weights(params.omega)
    num = float(np.sum(np.abs(R.c[:, :K.N_max - 1]) * w[None, :K.N_max - 1]))
    den = max(K.gevrey_norm(params.omega), 1.0)
    return num / den


# ----------------------------------------------------------------------
# Numeric characteristic integration
# ----------------------------------------------------------------------

@dataclass
class InnerGridSolution:
    """Mode values of one branch sampled along a horizontal path."""
    branch: str
    rho: float
    K_max: int
    z: np.ndarray           # complex sample points, ascending Re z
    modes: np.ndarray       # shape (len(z), 2*K_max + 1), mode k at col k+K_max
    precision: str = "f64"
    meta: dict = field(default_factory=dict)

    def mode(self, k):
        return self.modes[:, k + self.K_max]


def _to_mpc(v):
    if isinstance(v, (mpmath.mpf, mpmath.mpc)):
        return mpmath.mpc(v)
    return mpmath.mpc(complex(v))


class _ModeAlgebra:
    """Pointwise mode-vector arithmetic in f64 or double-double."""

    def __init__(self, precision):
        self.precision = precision
        if precision == "f64":
            self.dtype = complex
            self.exp = np.exp
            self.to_scalar = complex
        else:
            self.dtype = object
            self.exp = mpmath.exp
            self.to_scalar = _to_mpc

    def vector(self, values):
        if self.precision == "f64":
            return np.asarray(values, dtype=complex)
        return np.array([mpmath.mpc(complex(v)) for v in values],
                        dtype=object)

    def zeros(self, nmodes):
        if self.precision == "f64":
            return np.zeros(nmodes, dtype=complex)
        return np.array([mpmath.mpc(0)] * nmodes, dtype=object)


class _ThetaGrid:
    """Collocation grid in theta with mode transforms for one precision.

    All products of the inner right-hand side are evaluated pointwise on
    n equispaced angles; the derivative mode vector is recovered by the
    exact discrete transform.  Pointwise multiplication keeps the
    linearized advection operator skew (a Galerkin band truncation of
    the same products is violently unstable at the band edge).
    """

    def __init__(self, K_max, K_tab, n_theta, alg):
        self.K_max = K_max
        self.K_tab = K_tab
        self.n = n_theta
        self.alg = alg
        j = np.arange(n_theta)
        if alg.precision == "f64":
            th = 2.0 * np.pi * j / n_theta
            self.cos = np.cos(th)
            self.sin = np.sin(th)
            k = np.arange(-K_max, K_max + 1)
            kt = np.arange(-K_tab, K_tab + 1)
            self.E = np.exp(1j * np.outer(th, k))
            self.E_tab = np.exp(1j * np.outer(th, kt))
            self.Einv = np.exp(-1j * np.outer(k, th)) / n_theta
        else:
            two_pi = 2 * mpmath.pi
            th = [two_pi * int(v) / n_theta for v in j]
            self.cos = np.array([mpmath.cos(t) for t in th], dtype=object)
            self.sin = np.array([mpmath.sin(t) for t in th], dtype=object)

            def emat(rows, cols, sgn, scale=1):
                out = np.empty((len(rows), len(cols)), dtype=object)
                for a, ra in enumerate(rows):
                    for b, cb in enumerate(cols):
                        out[a, b] = mpmath.exp(
                            mpmath.mpc(0, sgn) * ra * cb) / scale
                return out

            ks = [int(v) for v in range(-K_max, K_max + 1)]
            kts = [int(v) for v in range(-K_tab, K_tab + 1)]
            self.E = emat(th, ks, 1)
            self.E_tab = emat(th, kts, 1)
            self.Einv = emat(ks, th, -1, scale=mpmath.mpf(n_theta))

    def values(self, modes):
        """Pointwise values of a mode vector on band K_max."""
        return np.dot(self.E, modes)

    def table_values(self, modes):
        """Pointwise values of a mode vector on band K_tab."""
        return np.dot(self.E_tab, modes)

    def modes(self, vals):
        """Mode vector (band K_max) of pointwise values."""
        return np.dot(self.Einv, vals)


def _pack_tables(tables, K_tab):
    """Stack the composition tables into one coefficient tensor.

    Returns ``(keys, T)`` with ``T`` of shape (n_tables, 2 K_tab + 1,
    N_max + 1); all tables share N_max by construction.
    """
    keys = sorted(tables)
    if not keys:
        return keys, np.zeros((0, 2 * K_tab + 1, 1), dtype=complex)
    N_max = max(C.N_max for C in tables.values())
    T = np.zeros((len(keys), 2 * K_tab + 1, N_max + 1), dtype=complex)
    for i, key in enumerate(keys):
        C = tables[key]
        for k in range(-min(C.K_max, K_tab), min(C.K_max, K_tab) + 1):
            T[i, k + K_tab, :C.N_max + 1] = C.c[k + C.K_max]
    return keys, T


def _table_theta_values(tables, z, grid, alg, pack=None):
    """Evaluate every composition table at ``z`` on the theta grid."""
    K_tab = grid.K_tab
    if alg.precision == "f64":
        if pack is None:
            pack = _pack_tables(tables, K_tab)
        keys, T = pack
        if not keys:
            return {}
        wpow = (1.0 / complex(z)) ** np.arange(T.shape[2])
        vals = T @ wpow                       # (n_tables, 2 K_tab + 1)
        grid_vals = vals @ grid.E_tab.T       # (n_tables, n)
        return dict(zip(keys, grid_vals))
    w = 1 / z
    out = {}
    for key, C in tables.items():
        KC = C.K_max
        vals = alg.zeros(2 * K_tab + 1)
        for k in range(-KC, KC + 1):
            if abs(k) > K_tab:
                continue
            row = C.c[k + KC]
            if not np.any(row):
                continue
            acc = alg.to_scalar(0)
            for n in range(C.N_max, -1, -1):
                acc = acc * w + alg.to_scalar(complex(row[n]))
            vals[k + K_tab] = acc
        out[key] = grid.table_values(vals)
    return out


def _rhs_modes(z, m, tables_at_z, alpha, beta, omega, K_max, grid, alg,
               n_newton=48, deriv0=None):
    """Full right-hand side dK^[k]/dz = -i omega k K^[k] + F^[k].

    ``m`` is the mode vector (band K_max).  F contains dz K, so at each
    collocation angle the derivative value d(theta_j) solves the scalar
    algebraic equation d = lin + F(theta_j; d), where the d-dependence
    enters through A = -i z^2 d (the quadratic channel and the
    composition-table arguments).  A pointwise Newton iteration with the
    exact scalar derivative solves all angles simultaneously; the
    physical root is selected by the warm start ``deriv0`` (pointwise
    collocation values of the previous derivative, phase advanced by the
    caller) and by continuity from 0 at the far field.  The Jacobian
    arithmetic runs in the state's own precision (the scalar division is
    exact enough); a non-converged point is signalled to the step
    controller as a non-finite result.  Returns ``(modes, dvals)`` with
    ``modes`` the band-limited derivative mode vector and ``dvals`` the
    converged pointwise values (``None`` on failure).
    """
    kvec = np.arange(-K_max, K_max + 1)
    if alg.precision == "f64":
        lin_m = (-1j * omega) * kvec * m
        Kth_m = (1j * kvec) * m
        miz2 = -1j * z * z
        iz = 1j * z
    else:
        iw = mpmath.mpc(0, -omega)
        lin_m = np.array([iw * int(k) * v for k, v in zip(kvec, m)],
                         dtype=object)
        Kth_m = np.array([mpmath.mpc(0, int(k)) * v
                          for k, v in zip(kvec, m)], dtype=object)
        miz2 = mpmath.mpc(0, -1) * z * z
        iz = mpmath.mpc(0, 1) * z
    z2 = z * z
    linv = grid.values(lin_m)
    Kthv = grid.values(Kth_m)
    B = iz * Kthv
    const = B * B + alg.to_scalar(alpha) * Kthv * Kthv \
        + alg.to_scalar(beta / z2) * Kthv

    max1 = max((k[0] for k in tables_at_z), default=0)
    max2 = max((k[1] for k in tables_at_z), default=0)

    if deriv0 is None:
        d = alg.zeros(grid.n)
    else:
        d = deriv0

    if alg.precision == "f64":
        linscale = float(np.max(np.abs(linv))) if grid.n else 0.0
        constscale = float(np.max(np.abs(const))) if grid.n else 0.0
    else:
        linscale = max((float(abs(v)) for v in linv), default=0.0)
        constscale = max((float(abs(v)) for v in const), default=0.0)
    eps_stop = 4e-15 if alg.precision == "f64" else 1e-30

    converged = False
    best_gmax = math.inf
    one = alg.to_scalar(1)
    for _ in range(n_newton):
        A = miz2 * d
        dx1 = grid.cos * A - grid.sin * B
        dx2 = grid.sin * A + grid.cos * B
        # cached powers of the table arguments
        p1 = [None] * (max1 + 1)
        p2 = [None] * (max2 + 1)
        if max1 >= 0:
            p1[0] = np.full(grid.n, one, dtype=d.dtype) \
                if alg.precision == "f64" else \
                np.array([mpmath.mpc(1)] * grid.n, dtype=object)
        for e in range(1, max1 + 1):
            p1[e] = dx1 if e == 1 else p1[e - 1] * dx1
        if max2 >= 0:
            p2[0] = p1[0].copy()
        for e in range(1, max2 + 1):
            p2[e] = dx2 if e == 1 else p2[e - 1] * dx2
        F = A * A + const
        FpA = 2 * A           # dF/dA
        tabscale = 0.0
        for (m1, m2), Cv in tables_at_z.items():
            term = Cv * p1[m1] * p2[m2]
            F = F + term
            if alg.precision == "f64":
                tabscale = max(tabscale, float(np.max(np.abs(term))))
            else:
                tabscale = max(tabscale,
                               max(float(abs(v)) for v in term))
            if m1 >= 1:
                FpA = FpA + Cv * m1 * p1[m1 - 1] * p2[m2] * grid.cos
            if m2 >= 1:
                FpA = FpA + Cv * m2 * p1[m1] * p2[m2 - 1] * grid.sin
        G = d - linv - F
        if alg.precision == "f64":
            gmax = float(np.max(np.abs(G)))
            dscale = float(np.max(np.abs(d)))
            a2max = float(np.max(np.abs(A))) ** 2
        else:
            gmax = max(float(abs(v)) for v in G)
            dscale = max(float(abs(v)) for v in d)
            a2max = max(float(abs(v)) for v in A) ** 2
        # the residual G is a cancellation of every channel of F, so the
        # reachable floor scales with the largest cancelling term, not
        # with |d| alone
        dscale = max(dscale, linscale, constscale, a2max, tabscale, 1e-300)
        if not math.isfinite(gmax):
            break
        if gmax <= eps_stop * dscale:
            converged = True
            break
        # accept a stalled iteration at the roundoff floor of the
        # quadratic channel
        if gmax <= 1e-12 * dscale and gmax > 0.25 * best_gmax:
            converged = True
            break
        best_gmax = min(best_gmax, gmax)
        dG = one - FpA * miz2
        d = d - G / dG
    if not converged:
        bad = math.nan + 1j * math.nan
        if alg.precision == "f64":
            return np.full(2 * K_max + 1, bad, dtype=complex), None
        return np.array([mpmath.mpc(bad)] * (2 * K_max + 1),
                        dtype=object), None
    return grid.modes(d), d


def _lawson_cv8(rhs_nl, lam, y0, t0, t1, rtol, atol, alg, checkpoints):
    """Adaptive integrating-factor Cooper-Verner order 8 in mode space.

    Solves y' = lam*y + N(t, y) (lam a diagonal of phases) by applying
    the CV8 tableau to w = exp(-lam (t - t_n)) y on each step, so the
    stiff phases are integrated exactly and the step size tracks the
    smooth part only.  Step control by step doubling; ``checkpoints``
    (sorted, within [t0, t1]) are hit exactly and the states there are
    returned.
    """
    if alg.precision == "f64":
        A, bw, cs = _cooper_verner_tableau(math.sqrt, 1.0)
        expf = np.exp
        to_f = float
    else:
        A, bw, cs = _cooper_verner_tableau(mpmath.sqrt, mpmath.mpf(1))
        expf = np.vectorize(mpmath.exp)
        to_f = mpmath.mpf
    stages = len(cs)

    def step(t, y, h, commit0=False):
        # stage values of w; w(tn) = y(tn); stage 0 sits exactly at the
        # accepted state, so it may commit the root-tracking state of the
        # right-hand side (trial stages of rejected steps must not)
        ks = []
        for i in range(stages):
            wi = y.copy() if i == 0 else y + h * sum(
                (A[i][j] * ks[j] for j in range(i)), alg.zeros(len(y)))
            ti = t + cs[i] * h
            Ei = expf(lam * (cs[i] * h))
            yi = Ei * wi
            ni = rhs_nl(ti, yi, i == 0 and commit0) - lam * yi
            ks.append(expf(-lam * (cs[i] * h)) * ni)
        wnew = y + h * sum((bw[j] * ks[j] for j in range(stages)),
                           alg.zeros(len(y)))
        return expf(lam * h) * wnew

    out = []
    cp = list(checkpoints)
    t = to_f(t0)
    tend = to_f(t1)
    y = y0.copy()
    h = (tend - t) / 20
    direction = 1 if float(tend - t) > 0 else -1
    safety = 0.9
    while (float(tend) - float(t)) * direction > 1e-14:
        target = tend
        if cp and (float(cp[0]) - float(t)) * direction > -1e-14:
            target = to_f(cp[0])
        if abs(float(h)) > abs(float(target) - float(t)):
            h = target - t
        y1 = step(t, y, h, commit0=True)
        ymid = step(t, y, h / 2)
        y2 = step(t + h / 2, ymid, h / 2)
        diff = y1 - y2
        # normwise control: the outer modes are exponentially small and
        # must not be held to their own magnitude
        if alg.precision == "f64":
            ynorm = float(max(np.max(np.abs(y)), np.max(np.abs(y2))))
            scale = atol + rtol * ynorm
            err = float(np.max(np.abs(diff))) / scale
        else:
            ynorm = 0.0
            dmax = 0.0
            for d, v, v2 in zip(diff, y, y2):
                ynorm = max(ynorm, float(abs(v)), float(abs(v2)))
                dmax = max(dmax, float(abs(d)))
            err = dmax / (atol + rtol * ynorm)
        if not math.isfinite(err):
            err = math.inf
        if err <= 1.0:
            t = t + h
            y = y2
            if cp and abs(float(t) - float(cp[0])) < 1e-12:
                out.append((float(cp[0]), y.copy()))
                cp.pop(0)
        fac = safety * (1.0 / max(err, 1e-30)) ** (1.0 / 9.0)
        h = h * to_f(min(max(fac, 0.2), 5.0))
        if abs(float(h)) < 1e-12 * abs(float(tend - to_f(t0))):
            raise RuntimeError(
                "inner integration stalled at t=%.6f of %.6f (err=%.3e)"
                % (float(t), float(tend), err))
    return out, y


def solve_inner_numeric(branch, H1tilde_deg6, params, K_max=8, Z0=40.0,
                        rho=8.0, path=None, N_max=40, precision="f64",
                        rtol=None, atol=None, re_overlap=2.0, n_samples=5,
                        formal=None, tables=None):
    """One branch of the inner solution along a horizontal complex path.

    Integrates the coupled theta-modes dK^[k]/dz = -i omega k K^[k] +
    F^[k](K) from z = -Z0 - i rho rightward (branch u) or from +Z0 - i
    rho leftward (branch s), with initial data from the formal series
    (whose last term at the start must be below 1e-16).  The path is
    extended past Re z = 0 to +-``re_overlap`` so the two branches
    overlap; mode values are recorded at ``n_samples`` evenly spaced
    Re z in the overlap.  ``path`` may override the endpoints as a pair
    of complex numbers (must stay ``PATH_GUARD`` away from z = 0).
    """
    prec.check_mode(precision)
    if branch not in ("u", "s"):
        raise ValueError("branch must be 'u' or 's'")
    if tables is None:
        tables = h1_composition_tables(H1tilde_deg6)
    if formal is None:
        formal = solve_inner_formal(branch, H1tilde_deg6, params,
                                    K_max=K_max, N_max=N_max, tables=tables)
    if formal.K_max != K_max:
        raise ValueError("formal series truncation mismatch")

    sign = 1.0 if branch == "u" else -1.0
    if path is None:
        z_start = -sign * Z0 - 1j * rho
        z_end = sign * re_overlap - 1j * rho
    else:
        z_start, z_end = complex(path[0]), complex(path[1])
    # distance from the segment to the origin
    d = z_end - z_start
    tproj = max(0.0, min(1.0, -(z_start.real * d.real + z_start.imag
                                * d.imag) / abs(d) ** 2))
    if abs(z_start + tproj * d) < PATH_GUARD:
        raise ValueError("path passes within the guard distance of z = 0")

    if formal.last_term_magnitude(z_start) > 1e-16:
        raise ValueError("Z0 too small: formal series last term above 1e-16")

    if rtol is None:
        rtol = 1e-12 if precision == "f64" else 1e-22
    if atol is None:
        atol = 1e-20 if precision == "f64" else 1e-32

    alg = _ModeAlgebra(precision)
    K_tab = max((C.K_max for C in tables.values()), default=0)
    # enough collocation angles to keep aliasing of the pointwise
    # products below the (exponentially small) retained mode floor
    n_theta = 4 * K_max + 2 * K_tab + 2

    y0 = alg.vector(formal.eval_modes(z_start))
    kvec = np.arange(-K_max, K_max + 1)

    # parametrize z = z_start + t * e, t in [0, L]; the linear phase rate
    # in t therefore carries the path direction
    L = abs(z_end - z_start)
    e_dir = (z_end - z_start) / L
    if precision == "f64":
        lam = (-1j * params.omega * e_dir) * kvec.astype(complex)
    else:
        lam = np.array([_to_mpc(-1j * params.omega * e_dir) * int(k)
                        for k in kvec], dtype=object)

    # the physical root of the implicit derivative equation is tracked by
    # continuity: each call seeds Newton with the pointwise collocation
    # values of the last accepted derivative, each Fourier mode advanced
    # by its exact linear phase (the full FFT spectrum, not the retained
    # band: the reconstruction gap of the band alone would cost Newton a
    # dozen extra iterations per call).  Seeded from the formal series at
    # z_start; the advance runs in f64 even in dd mode, which only limits
    # the quality of the starting guess.
    th_f = 2.0 * np.pi * np.arange(n_theta) / n_theta
    d0_modes = np.asarray(formal.dz().eval_modes(z_start), dtype=complex)
    k_fft = np.fft.fftfreq(n_theta, d=1.0 / n_theta)
    track = {"z": complex(z_start),
             "dvals": np.exp(1j * np.outer(th_f, kvec)) @ d0_modes}

    if path is None:
        xs = np.linspace(-re_overlap, re_overlap, n_samples)
        cps = [abs((x + z_start.imag * 1j) - z_start) for x in xs]
    else:
        cps = [L]
    with mpmath.workdps(prec.DD_DPS) if precision == "dd" else _nullcontext():
        grid = _ThetaGrid(K_max, K_tab, n_theta, alg)
        pack = _pack_tables(tables, K_tab) if precision == "f64" else None

        def rhs_nl(t, y, commit=False):
            z = alg.to_scalar(z_start) + alg.to_scalar(e_dir) * t
            zc = complex(z)
            phase = np.exp((-1j * params.omega) * k_fft * (zc - track["z"]))
            guess = np.fft.ifft(np.fft.fft(track["dvals"]) * phase)
            tab = _table_theta_values(tables, z, grid, alg, pack=pack)
            dKdz, dvals = _rhs_modes(z, y, tab, params.alpha, params.beta,
                                     params.omega, K_max, grid, alg,
                                     deriv0=alg.vector(guess))
            if commit and dvals is not None:
                track["z"] = zc
                track["dvals"] = np.array([complex(v) for v in dvals])
            return dKdz * alg.to_scalar(e_dir)

        samples, y_end = _lawson_cv8(rhs_nl, lam, y0, 0.0, L, rtol, atol,
                                     alg, sorted(cps))
    zsamp, msamp = [], []
    for tval, y in samples:
        zq = z_start + e_dir * tval
        zsamp.append(complex(zq))
        msamp.append(np.array([complex(v) for v in y]))
    order = np.argsort([z.real for z in zsamp])
    zarr = np.array(zsamp)[order]
    marr = np.array(msamp)[order]
    start_diff = float(np.max(np.abs(
        np.array([complex(v) for v in y0]) - formal.eval_modes(z_start))))
    return InnerGridSolution(
        branch=branch, rho=float(rho), K_max=K_max, z=zarr, modes=marr,
        precision=precision,
        meta={"Z0": float(Z0), "start_formal_diff": start_diff,
              "rtol": rtol, "atol": atol})


class _nullcontext:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


# ----------------------------------------------------------------------
# Stokes extraction
# ----------------------------------------------------------------------

@dataclass
class StokesData:
    """Extracted Stokes coefficients with their fit metadata."""
    chi: dict                 # {k: complex}, k < 0
    g_magnitude: float        # fitted 1/rho correction, |c| with v=chi(1+c/rho)
    rho_list: list
    values: dict              # {k: list of per-rho complex extractions}
    fit_residual: dict        # {k: relative residual of the 1/rho fit}
    meta: dict = field(default_factory=dict)

    def to_json_obj(self):
        def cplx(v):
            return {"re": float(v.real), "im": float(v.imag)}
        return {
            "chi": {str(k): cplx(v) for k, v in self.chi.items()},
            "g_magnitude": self.g_magnitude,
            "rho_list": [float(r) for r in self.rho_list],
            "values": {str(k): [cplx(v) for v in vs]
                       for k, vs in self.values.items()},
            "fit_residual": {str(k): float(v)
                             for k, v in self.fit_residual.items()},
            "meta": self.meta,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_json_obj(), **kw)


def _mode_at_re0(sol, k):
    """Mode k of a grid solution at the sample nearest Re z = 0."""
    i = int(np.argmin(np.abs(sol.z.real)))
    return complex(sol.modes[i, k + sol.K_max]), complex(sol.z[i])


def extract_stokes(Ku, Ks, rho_list=None, omega=None):
    """Stokes coefficients chi^[k] from per-rho solution pairs.

    ``Ku`` and ``Ks`` are lists of :class:`InnerGridSolution` for the two
    branches, matched by rho.  For each rho the difference mode m = -k of
    K^u - K^s, multiplied by e^{-ik omega z}, equals chi^[k] (1 + O(1/rho));
    a linear fit in 1/rho across the rho list removes the correction.
    chi^[-2] is reported only when its signal exceeds the arithmetic
    noise floor of the weaker-precision input.
    """
    if omega is None:
        raise ValueError("omega is required")
    by_rho_u = {round(s.rho, 12): s for s in Ku}
    by_rho_s = {round(s.rho, 12): s for s in Ks}
    if rho_list is None:
        rho_list = sorted(set(by_rho_u) & set(by_rho_s))
    rho_list = [float(r) for r in rho_list]
    if len(rho_list) < 2:
        raise ValueError("need at least two rho values")
    span = omega * (max(rho_list) - min(rho_list)) / math.log(10.0)
    if span < 3.0:
        raise ValueError(
            "rho list too narrow: e^{-omega rho} must span >= 3 decades")

    values = {-1: [], -2: []}
    noise = {-1: [], -2: []}
    for rho in rho_list:
        su = by_rho_u[round(rho, 12)]
        ss = by_rho_s[round(rho, 12)]
        epsilon_arith = 1e-16 if "f64" in (su.precision, ss.precision) \
            else 1e-32
        scale = float(max(np.max(np.abs(su.modes)), np.max(np.abs(ss.modes))))
        for k in (-1, -2):
            mu_, zu = _mode_at_re0(su, -k) if -k <= su.K_max else (0j, 0j)
            ms_, zs = _mode_at_re0(ss, -k) if -k <= ss.K_max else (0j, 0j)
            if abs(zu - zs) > 1e-9:
                raise ValueError("branch sample grids do not match")
            val = (mu_ - ms_) * cmath.exp(-1j * k * omega * zu)
            values[k].append(val)
            noise[k].append(10.0 * epsilon_arith * scale
                            * abs(cmath.exp(-1j * k * omega * zu)))

    chi, resid = {}, {}
    g_mag = 0.0
    for k in (-1, -2):
        v = np.array(values[k])
        if np.all(np.abs(v) <= np.array(noise[k])):
            if k == -1:
                raise RuntimeError(
                    "difference below arithmetic noise at all rho: "
                    "increase precision")
            continue
        X = np.stack([np.ones(len(rho_list)),
                      1.0 / np.array(rho_list)], axis=1)
        coef, *_ = np.linalg.lstsq(X, v, rcond=None)
        pred = X @ coef
        rel = float(np.linalg.norm(v - pred) / max(np.linalg.norm(v),
                                                   1e-300))
        if k == -2 and (abs(coef[0]) < 3.0 * max(noise[k]) or rel > 0.5):
            continue
        chi[k] = complex(coef[0])
        resid[k] = rel
        if k == -1 and abs(coef[0]) > 0:
            g_mag = float(abs(coef[1] / coef[0]))

    return StokesData(chi=chi, g_magnitude=g_mag, rho_list=rho_list,
                      values={k: list(map(complex, vs))
                              for k, vs in values.items() if k in chi
                              or k == -1},
                      fit_residual=resid,
                      meta={"noise_floor": {str(k): max(n)
                                            for k, n in noise.items()}})
