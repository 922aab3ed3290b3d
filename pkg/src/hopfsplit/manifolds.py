"""Invariant manifolds of L4 beyond the critical mass ratio.

For mu > mu1 the point L4 is a complex saddle with eigenvalues
+-a +- i*omega_hat, so its stable and unstable manifolds are 2-dimensional.
This module globalizes them numerically:

* :func:`seed_ring` places a ring of fiber seeds on the local manifold
  (order 1 = tangent plane, order 2 adds the quadratic invariance
  correction) and projects them onto the energy level h(L4);
* :func:`trace_on_section` flows the fibers (with first-order variational
  equations for tangents) through their first excursion along the
  homoclinic loop and records the section crossings of one fixed
  direction, parametrized by the loop-time estimate ``u_est``;
* :func:`homoclinic_points` intersects an unstable and a stable trace,
  refines each intersection by Newton iteration on the two seed angles,
  and reports the splitting angle phi.

The trace of a 2-D manifold branch on the 2-D surface (section plane
intersected with the energy level) is a curve along the loop.  Because
every fiber crosses the section once per fast revolution, the ring of
fibers samples that curve densely; sorting samples by the loop parameter
(flow time from the fiber's closest passage to the loop bottom, scaled by
the hyperbolic rate) yields an ordered polyline with variationally exact
tangents.  Only the first excursion is kept: later returns along the loop
belong to further sheets of the manifold and would alias into the curve.

A scaled-chart mode (:func:`scaled_seed_ring` and the same tracing code)
drives the truncated-system null test: with H1 forced to zero the stable
and unstable curves coincide to integrator tolerance and every reported
angle is numerical noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import dynamics, polyham
from .odeint import integrate
from .poly import hamiltonian_field
from .separatrix import gamma0, separatrix_profile

ESCAPE_RADIUS = 2.0
MESH_ANGLE = 0.05


@dataclass
class ManifoldSeed:
    """Ring of fiber initial states on a local invariant manifold."""

    mu: float
    branch: str                   # "u" or "s"
    base_point: np.ndarray
    eigen_frame: np.ndarray       # shape (2, 4): v1, v2
    delta: float
    n_fibers: int
    order: int
    fiber_angles: np.ndarray      # seed angles phi in [0, 2pi)
    fiber_states: np.ndarray      # shape (n_fibers, 4)
    fiber_tangents: np.ndarray    # d(state)/d(phi), shape (n_fibers, 4)
    rate: float                   # contraction/expansion rate a
    chart: str = "physical"       # "physical" or "scaled"


@dataclass
class SectionCurve:
    """Ordered trace of one manifold branch on a section.

    Samples are sorted by the loop parameter ``u_est``; ``points`` are the
    full phase-space states on the section, ``tangents`` the section-
    projected d(state)/d(seed angle), ``coords2``/``tan2`` their images in
    the shared intrinsic 2-D chart (filled by :func:`homoclinic_points`).
    """

    section_id: str
    branch: str
    theta_seed: np.ndarray
    u_est: np.ndarray
    points: np.ndarray
    tangents: np.ndarray
    coords2: np.ndarray | None = None
    tan2: np.ndarray | None = None


@dataclass
class SplitSample:
    """A homoclinic point on the section with its splitting angle."""

    mu: float
    epsilon: float
    p: np.ndarray                 # intrinsic 2-D section coordinates
    phi: float                    # angle between the curve tangents, [0, pi)
    dist_scale: float             # local normal-offset scale of the traces
    u_est: float
    transversal: bool = True
    refined: bool = True


def energy_of_L4(mu):
    """Energy h(L4) of the L4 level set (see :mod:`hopfsplit.dynamics`)."""
    return dynamics.energy_of_L4(mu)


# ----------------------------------------------------------------------
# Seeding
# ----------------------------------------------------------------------

def _saddle_frame(mu, branch):
    """Real frame (v1, v2) of the (un)stable plane and the rate a.

    v1, v2 are the real and (negated) imaginary parts of the eigenvector
    for a + i*omega_hat (branch "u") or -a + i*omega_hat (branch "s"),
    normalized so |v1| = 1.
    """
    a, b = dynamics.saddle_eigenvalues(mu)
    lam = (a if branch == "u" else -a) + 1j * b
    B = dynamics.linearization_at_L4(mu)
    w, V = np.linalg.eig(B)
    v = V[:, int(np.argmin(np.abs(w - lam)))]
    v = v / np.linalg.norm(v.real)
    return np.stack([v.real, -v.imag]), a


def _p2_mul(A, B, dmax):
    """Product of two bivariate coefficient arrays, truncated at dmax."""
    out = np.zeros_like(A)
    for i, j in zip(*np.nonzero(A)):
        if i + j > dmax:
            continue
        bi, bj = np.nonzero(B)
        for k, l in zip(bi, bj):
            if i + k <= dmax and j + l <= dmax:
                out[i + k, j + l] += A[i, j] * B[k, l]
    return out


def _p2_eval(P, s1, s2):
    val = 0.0
    for i, j in zip(*np.nonzero(P)):
        val += P[i, j] * s1 ** int(i) * s2 ** int(j)
    return val


def _p2_grad(P, s1, s2):
    d1 = d2 = 0.0
    for i, j in zip(*np.nonzero(P)):
        i, j = int(i), int(j)
        if i:
            d1 += i * P[i, j] * s1 ** (i - 1) * s2 ** j
        if j:
            d2 += j * P[i, j] * s1 ** i * s2 ** (j - 1)
    return d1, d2


def _local_expansion(mu, frame, lam_re, omega, order):
    """Polynomial parametrization of the local (un)stable manifold.

    Solves the invariance equation F(W(sigma)) = DW(sigma) * Lambda sigma
    degree by degree, with the internal dynamics kept linear (Lambda =
    lam_re*I + omega*J; the spectrum is non-resonant, so every
    cohomological system is solvable).  Returns one bivariate coefficient
    array per phase-space component, including the linear part.
    """
    B = dynamics.linearization_at_L4(mu)
    T = polyham.taylor_rpc3bp_at_L4(mu, order + 1)
    F = hamiltonian_field(T)
    v1, v2 = frame
    dmax = order
    W = [np.zeros((dmax + 1, dmax + 1)) for _ in range(4)]
    for comp in range(4):
        W[comp][1, 0] = v1[comp]
        W[comp][0, 1] = v2[comp]

    for k in range(2, order + 1):
        # degree-k slice of F(W) with W known through degree k-1
        R = [np.zeros((dmax + 1, dmax + 1)) for _ in range(4)]
        for comp in range(4):
            for exps, c in F[comp].terms.items():
                term = None
                for var, e in enumerate(exps):
                    for _ in range(e):
                        term = (W[var].copy() if term is None
                                else _p2_mul(term, W[var], k))
                if term is None:
                    continue
                R[comp] += c * term
        # derivation matrix of Lambda on degree-k monomials
        # m_j = s1^(k-j) s2^j, transposed to act on coefficient stacks
        D = np.zeros((k + 1, k + 1))
        for j in range(k + 1):
            D[j, j] = k * lam_re
            if j + 1 <= k:
                D[j + 1, j] = -(k - j) * omega
            if j - 1 >= 0:
                D[j - 1, j] = j * omega
        lhs = np.kron(np.eye(k + 1), B) - np.kron(D, np.eye(4))
        rhs = np.zeros(4 * (k + 1))
        for j in range(k + 1):
            for comp in range(4):
                rhs[4 * j + comp] = -R[comp][k - j, j]
        Wk = np.linalg.solve(lhs, rhs).reshape(k + 1, 4)
        for j in range(k + 1):
            for comp in range(4):
                W[comp][k - j, j] = Wk[j, comp]
    return W


def _seed_state(seed, phi):
    """State and d(state)/d(phi) of one fiber seed at angle ``phi``.

    Applies the ring formula, the order-2 correction when present, and
    the Newton projection onto the energy level h(L4).
    """
    c, s = math.cos(phi), math.sin(phi)
    sig = seed.delta * np.array([c, s])
    dsig = seed.delta * np.array([-s, c])
    W = getattr(seed, "local_poly", None)
    if W is not None:
        state = seed.base_point + np.array(
            [_p2_eval(Wc, sig[0], sig[1]) for Wc in W])
        tangent = np.zeros(4)
        for comp, Wc in enumerate(W):
            d1, d2 = _p2_grad(Wc, sig[0], sig[1])
            tangent[comp] = d1 * dsig[0] + d2 * dsig[1]
    else:
        state = seed.base_point + sig @ seed.eigen_frame
        tangent = dsig @ seed.eigen_frame

    h0 = dynamics.energy_of_L4(seed.mu)
    for _ in range(12):
        r = dynamics.rpc3bp_energy(state, seed.mu) - h0
        if abs(r) < 1e-13:
            break
        g = dynamics.rpc3bp_vector_field(state, seed.mu)
        grad = np.array([-g[2], -g[3], g[0], g[1]])  # J^T field = grad H
        state = state - (r / (grad @ grad)) * grad
        if not np.all(np.isfinite(state)):
            raise RuntimeError("energy projection diverged")
    return state, tangent


def seed_ring(mu, branch="u", delta=1e-6, n_fibers=64, order=2):
    """Ring of fiber seeds on the local (un)stable manifold of L4.

    Seeds are base + delta*(cos(phi) v1 + sin(phi) v2) plus, for
    ``order=2``, the quadratic invariance correction; each state is then
    Newton-projected onto the energy level h(L4).
    """
    if dynamics.nu0(mu) >= 0:
        raise ValueError("no saddle")
    if branch not in ("u", "s"):
        raise ValueError("branch must be 'u' or 's'")
    frame, a = _saddle_frame(mu, branch)
    L4 = np.asarray(dynamics.lagrange_L4(mu), dtype=float)
    omega = math.sqrt(0.5 - dynamics.nu0(mu))
    phis = np.linspace(0.0, 2 * np.pi, n_fibers, endpoint=False)
    seed = ManifoldSeed(mu=mu, branch=branch, base_point=L4,
                        eigen_frame=frame, delta=delta, n_fibers=n_fibers,
                        order=order, fiber_angles=phis,
                        fiber_states=np.zeros((n_fibers, 4)),
                        fiber_tangents=np.zeros((n_fibers, 4)),
                        rate=a, chart="physical")
    if order >= 2:
        seed.local_poly = _local_expansion(
            mu, frame, a if branch == "u" else -a, omega, order)
    for i, phi in enumerate(phis):
        seed.fiber_states[i], seed.fiber_tangents[i] = _seed_state(seed, phi)
    return seed


# ----------------------------------------------------------------------
# Scaled-chart seeding (null test of the truncated system)
# ----------------------------------------------------------------------

def scaled_seed_ring(scaled, branch="u", u0=7.0, n_fibers=64,
                     include_H1=None):
    """Seeds for the scaled system on the exact truncated separatrix.

    The truncated manifolds are the Gamma0 family itself, so seeds are
    taken exactly on Gamma0(-+u0, theta).  ``include_H1`` optionally adds
    a perturbation polynomial to the integrated field (None = truncated
    system, the null-test configuration).
    """
    phis = np.linspace(0.0, 2 * np.pi, n_fibers, endpoint=False)
    u = -abs(u0) if branch == "u" else abs(u0)
    states = np.asarray(gamma0(u, phis), dtype=float)
    r, R = separatrix_profile(u)
    tangents = np.stack([-R * np.sin(phis), R * np.cos(phis),
                         -r * np.sin(phis), r * np.cos(phis)], axis=-1)
    seed = ManifoldSeed(mu=float("nan"), branch=branch,
                        base_point=np.zeros(4),
                        eigen_frame=np.zeros((2, 4)), delta=abs(u0),
                        n_fibers=n_fibers, order=1, fiber_angles=phis,
                        fiber_states=states, fiber_tangents=tangents,
                        rate=1.0, chart="scaled")
    seed.scaled = scaled
    seed.include_H1 = include_H1
    return seed


def _scaled_seed_state(seed, phi):
    u = -seed.delta if seed.branch == "u" else seed.delta
    r, R = separatrix_profile(u)
    c, s = math.cos(phi), math.sin(phi)
    state = np.array([R * c, R * s, r * c, r * s])
    tangent = np.array([-R * s, R * c, -r * s, r * c])
    return state, tangent


# ----------------------------------------------------------------------
# Sections
# ----------------------------------------------------------------------

class Section:
    """Affine hyperplane section g(y) = n . (y - base) = 0."""

    def __init__(self, base, normal, section_id="sec0"):
        self.base = np.asarray(base, dtype=float)
        n = np.asarray(normal, dtype=float)
        self.normal = n / np.linalg.norm(n)
        self.section_id = section_id

    def __call__(self, y):
        return (np.asarray(y) - self.base) @ self.normal


def default_section(mu):
    """Fast-angle section of the normal-form chart, as a physical plane.

    The section is {theta = 0} of the normal-form chart at L4: the zero
    set of the second slow-pair coordinate v4 of v = M^-1 (y - L4), a
    plane through L4.  Along the homoclinic loop v4 oscillates with the
    fast angle around a zero mean, so with one crossing direction kept
    the plane is crossed exactly once per fast revolution, uniformly
    along the loop; that keeps the loop-parameter ordering of the trace
    single-valued.
    """
    Minv = np.linalg.inv(polyham.versal_linear_change(mu))
    L4 = np.asarray(dynamics.lagrange_L4(mu), dtype=float)
    return Section(L4, Minv[3], section_id="L4-nf-theta0")


def scaled_section():
    """theta = pi/2 plane {y1 = 0} of the scaled chart."""
    return Section(np.zeros(4), np.array([0.0, 0.0, 1.0, 0.0]),
                   section_id="scaled-y1")


# ----------------------------------------------------------------------
# Tracing
# ----------------------------------------------------------------------

def _physical_field(mu):
    def fieldfn(t, z):
        y, v = z[:4], z[4:]
        f = dynamics.rpc3bp_vector_field(y, mu)
        jac = dynamics.rpc3bp_jacobian(y, mu)
        return np.concatenate([f, jac @ v])
    return fieldfn


def _scaled_field(scaled, include_H1=None):
    H0, _ = polyham.scaled_hamiltonian(scaled)
    H = H0 if include_H1 is None else H0 + include_H1
    comps = [p.lambdify() for p in hamiltonian_field(H)]
    jpolys = [[H.diff(a).diff(b) for b in range(4)] for a in range(4)]
    jfuns = [[p.lambdify() for p in row] for row in jpolys]

    def fieldfn(t, z):
        y, v = z[:4], z[4:]
        f = np.array([c(y[0], y[1], y[2], y[3]) for c in comps])
        # Jacobian of (dH/dy1, dH/dy2, -dH/dx1, -dH/dx2)
        hess = np.array([[fn(y[0], y[1], y[2], y[3]) for fn in row]
                         for row in jfuns])
        jac = np.vstack([hess[2:4], -hess[0:2]])
        return np.concatenate([f, jac @ v])
    return fieldfn


def trace_on_section(seed, section=None, max_time=None, u_window=None,
                     rtol=1e-12, atol=1e-14, min_survivors=8,
                     escape_radius=ESCAPE_RADIUS, mesh_angle=MESH_ANGLE,
                     settle=True):
    """Trace a seeded manifold branch onto a section.

    Integrates every fiber (with first-order variationals for the curve
    tangent) through its first excursion along the homoclinic loop and
    records the section crossings with positive crossing direction in the
    true forward-time field.  Each crossing is parametrized by the loop-
    time estimate u_est = +-a*(t - t_bottom), where t_bottom is the
    fiber's closest passage to the loop bottom (fitted from the radial
    size at the crossing times); crossings with |u_est| > ``u_window``
    and everything after the first excursion are discarded.  Where the
    assembled polyline turns by more than ``mesh_angle`` between adjacent
    chords, extra fibers at intermediate seed angles are inserted.

    Fibers leaving ``escape_radius`` (distance from the base point) are
    dropped; fewer than ``min_survivors`` surviving fibers is an error.
    The returned :class:`SectionCurve` is sorted by u_est and carries a
    resolver closure used by :func:`homoclinic_points` for Newton
    refinement.
    """
    physical = seed.chart == "physical"
    if physical:
        mu = seed.mu
        fieldfn = _physical_field(mu)
        a = seed.rate
        omega = math.sqrt(0.5 - dynamics.nu0(mu))
        if section is None:
            section = default_section(mu)
        L4 = seed.base_point
        Minv = np.linalg.inv(polyham.versal_linear_change(mu))
        nu = dynamics.nu0(mu)
        eps2 = -nu / polyham.nf_coeff_rational(nu).gamma_hat
        loop_scale = math.sqrt(eps2)
        q_scale = eps2

        def radial_q(y):
            v = Minv @ (y - L4)
            return v[2] * v[2] + v[3] * v[3]

        t_settle = ((10.0 if seed.order == 1 else 5.0) / a) if settle else 0.0
        if u_window is None:
            u_window = max(0.5, 1.3 * 2 * math.pi * a / omega)
        if max_time is None:
            max_time = t_settle + (math.log(loop_scale / seed.delta)
                                   + u_window + 3.0) / a
    else:
        fieldfn = _scaled_field(seed.scaled, seed.include_H1)
        a = 1.0
        if section is None:
            section = scaled_section()

        def radial_q(y):
            return y[2] * y[2] + y[3] * y[3]

        q_scale = 1.0
        t_settle = 0.0
        fast = seed.scaled.omega / seed.scaled.epsilon
        if u_window is None:
            u_window = max(0.5, 1.3 * 2 * math.pi / fast)
        if max_time is None:
            max_time = seed.delta + u_window + 3.0

    # "u" fibers flow forward in physical time, "s" fibers backward;
    # crossing selection and the loop parameter always use the true
    # (forward-time) field so both branches keep the same geometric family
    sign = 1.0 if seed.branch == "u" else -1.0

    def flowfield(t, z):
        return sign * np.asarray(fieldfn(t, z))

    def run_fiber(state0, tan0):
        """All in-window first-excursion crossings of one fiber.

        Returns (samples, escaped) with samples = [(u_est, state, tan)],
        tan = d(state)/d(seed angle) projected into the section plane.
        """
        if t_settle > 0.0:
            back = integrate(lambda t, z: -flowfield(t, z),
                             np.concatenate([state0, tan0]),
                             (0.0, t_settle), rtol, atol)
            z0 = np.asarray(back.states[-1], dtype=float)
        else:
            z0 = np.concatenate([state0, tan0])
        traj = integrate(flowfield, z0, (0.0, max_time), rtol, atol)
        ts = np.asarray([float(t) for t in traj.times])
        ys = np.asarray(traj.states, dtype=float)
        dist = np.linalg.norm(ys[:, :4] - seed.base_point, axis=1)
        stop = len(ts)
        escaped = bool(np.any(dist > escape_radius))
        if escaped:
            stop = int(np.argmax(dist > escape_radius))

        # same-direction section crossings, chronological
        crossings = []
        g = np.array([section(y[:4]) for y in ys[:stop]])
        for i in range(stop - 1):
            if not (g[i] == 0.0 or g[i] * g[i + 1] < 0):
                continue
            lo, hi, glo = ts[i], ts[i + 1], g[i]
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                gm = section(np.asarray(traj(mid))[:4])
                if gm == 0.0 or (hi - lo) < 1e-15 * max(1.0, abs(hi)):
                    lo = hi = mid
                    break
                if glo * gm < 0:
                    hi = mid
                else:
                    lo, glo = mid, gm
            tstar = 0.5 * (lo + hi)
            z = np.asarray(traj(tstar), dtype=float)
            f_true = sign * np.asarray(flowfield(tstar, z))[:4]
            gdot = f_true @ section.normal
            if gdot <= 0.0:
                continue  # keep one crossing direction per revolution
            crossings.append((tstar, z, f_true, gdot))
        if len(crossings) < 2:
            return [], escaped

        # Anchor the loop parameter on the rising side of the excursion,
        # where the radial size q grows by the clean linear rate e^{2at}
        # and is free of the near-bottom ripple: t_ref is the (log-
        # interpolated) time q first reaches q_ref, which on the sech^2
        # profile corresponds to u = -+asech(sqrt(q_ref/eps^2)) ~ -+3.
        # The parameter u = u_ref + a*(t - t_ref) (in true time) is then
        # monotone along each fiber and continuous across fibers.
        qs = np.array([radial_q(c[1][:4]) for c in crossings])
        q_ref = 0.01 * q_scale
        t_ref = None
        for j in range(len(qs) - 1):
            if qs[j] < q_ref <= qs[j + 1]:
                frac = (math.log(q_ref / qs[j])
                        / math.log(qs[j + 1] / qs[j]))
                t_ref = crossings[j][0] + frac * (crossings[j + 1][0]
                                                 - crossings[j][0])
                break
        if t_ref is None:
            return [], escaped
        u_ref = -sign * math.asinh(math.sqrt(q_scale / q_ref - 1.0))

        out = []
        for tstar, z, f_true, gdot in crossings:
            u = u_ref + sign * a * (tstar - t_ref)
            if sign * u > u_window + 0.4:
                break  # past the first excursion
            if abs(u) > u_window:
                continue
            y, v = z[:4], z[4:]
            tan = v - f_true * ((v @ section.normal) / gdot)
            out.append((u, y, tan))
        return out, escaped

    def resolve(phi):
        if physical:
            st, tn = _seed_state(seed, phi)
        else:
            st, tn = _scaled_seed_state(seed, phi)
        return run_fiber(st, tn)

    samples = []
    survivors = 0
    for phi, st, tn in zip(seed.fiber_angles, seed.fiber_states,
                           seed.fiber_tangents):
        res, escaped = run_fiber(st, tn)
        if not res and escaped:
            continue  # escaped before reaching the window: dropped
        survivors += 1
        for u, y, tan in res:
            samples.append((u, phi, y, tan))
    if survivors < min_survivors:
        raise RuntimeError("too few surviving fibers")
    samples.sort(key=lambda s: s[0])

    # drop isolated off-curve samples (an occasional fiber whose anchor
    # interpolation was biased lands a crossing off the ordered polyline)
    for _ in range(2):
        if len(samples) < 5:
            break
        pts = np.array([s[2] for s in samples])
        dev = np.zeros(len(samples))
        for i in range(1, len(samples) - 1):
            d = pts[i + 1] - pts[i - 1]
            nd2 = float(d @ d)
            if nd2 == 0.0:
                continue
            r = pts[i] - pts[i - 1]
            dev[i] = np.linalg.norm(r - ((r @ d) / nd2) * d)
        med = float(np.median(dev[1:-1]))
        keep = dev <= max(20.0 * med, 1e-12)
        if keep.all():
            break
        samples = [s for s, k in zip(samples, keep) if k]

    # mesh refinement: insert fibers where the polyline turns too fast
    inserted = 0
    for _ in range(3):
        if inserted >= 24 or len(samples) < 3:
            break
        pts = np.array([s[2] for s in samples])
        chords = np.diff(pts, axis=0)
        nrm = np.linalg.norm(chords, axis=1)
        new_phis = []
        for i in range(len(chords) - 1):
            if nrm[i] == 0.0 or nrm[i + 1] == 0.0:
                continue
            cosang = (chords[i] @ chords[i + 1]) / (nrm[i] * nrm[i + 1])
            if math.acos(min(max(cosang, -1.0), 1.0)) <= mesh_angle:
                continue
            th0, th1 = samples[i][1], samples[i + 1][1]
            dth = (th1 - th0 + math.pi) % (2 * math.pi) - math.pi
            if abs(dth) < 1e-9:
                continue
            new_phis.append((th0 + 0.5 * dth) % (2 * math.pi))
        new_phis = sorted(set(new_phis))[:8]
        if not new_phis:
            break
        for phi in new_phis:
            res, _ = resolve(phi)
            for u, y, tan in res:
                samples.append((u, phi, y, tan))
            inserted += 1
        samples.sort(key=lambda s: s[0])

    curve = SectionCurve(
        section_id=section.section_id, branch=seed.branch,
        theta_seed=np.array([s[1] for s in samples]),
        u_est=np.array([s[0] for s in samples]),
        points=np.array([s[2] for s in samples]),
        tangents=np.array([s[3] for s in samples]))
    curve._resolve = resolve
    return curve


# ----------------------------------------------------------------------
# Intersections
# ----------------------------------------------------------------------

def _shared_frame(curve_u, curve_s):
    cloud = np.vstack([curve_u.points, curve_s.points])
    centroid = cloud.mean(axis=0)
    _, _, vt = np.linalg.svd(cloud - centroid)
    return centroid, vt[:2]


def _project(curve, centroid, frame):
    curve.coords2 = (curve.points - centroid) @ frame.T
    t2 = curve.tangents @ frame.T
    norms = np.linalg.norm(t2, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    curve.tan2 = t2 / norms


def _seg_intersect(p1, p2, q1, q2):
    """Parameters (s, t) of the intersection of segments p and q, or None."""
    d1, d2 = p2 - p1, q2 - q1
    den = d1[0] * d2[1] - d1[1] * d2[0]
    if den == 0.0:
        return None
    r = q1 - p1
    s = (r[0] * d2[1] - r[1] * d2[0]) / den
    t = (r[0] * d1[1] - r[1] * d1[0]) / den
    if -1e-9 <= s <= 1 + 1e-9 and -1e-9 <= t <= 1 + 1e-9:
        return s, t
    return None


def _pick_crossing(res, p_target, centroid, frame):
    """Crossing of a resolved fiber nearest to a chart-plane target."""
    if not res:
        return None
    return min(res, key=lambda c: float(np.linalg.norm(
        (c[1] - centroid) @ frame.T - p_target)))


def _refine_intersection(curve_u, curve_s, phi_u, phi_s, p_target,
                         centroid, frame, scale):
    """Newton iteration on the two seed angles to a true intersection.

    Drives P_u(phi_u) - P_s(phi_s) to zero in the intrinsic 2-D chart,
    using the variational tangents d P/d phi as the Jacobian columns.
    The best iterate is kept; convergence stalls at the noise floor set
    by hyperbolic amplification of the seed accuracy, a few 1e-9 of the
    chart scale with high-order local seeds.  Returns (point2, angle,
    u_at_point, ok).
    """
    best = None
    stall = 0
    for _ in range(8):
        ru, _ = curve_u._resolve(phi_u)
        rs, _ = curve_s._resolve(phi_s)
        cu = _pick_crossing(ru, p_target, centroid, frame)
        cs = _pick_crossing(rs, p_target, centroid, frame)
        if cu is None or cs is None:
            break
        pu2 = (cu[1] - centroid) @ frame.T
        ps2 = (cs[1] - centroid) @ frame.T
        tu2 = cu[2] @ frame.T
        ts2 = cs[2] @ frame.T
        F = pu2 - ps2
        fn = float(np.linalg.norm(F))
        if best is None or fn < best[0]:
            best = (fn, pu2, ps2, tu2, ts2, cu[0], cs[0])
            stall = 0
        else:
            stall += 1
            if stall >= 2:
                break
        if fn < 1e-12 * scale:
            break
        J = np.stack([tu2, -ts2], axis=-1)
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            break
        step = np.clip(step, -0.3, 0.3)
        phi_u += step[0]
        phi_s += step[1]
        p_target = 0.5 * (pu2 + ps2)

    if best is None:
        return None
    fn, pu2, ps2, tu2, ts2, uu, us = best
    ok = bool(fn < 3e-8 * scale)
    tu2 = tu2 / np.linalg.norm(tu2)
    ts2 = ts2 / np.linalg.norm(ts2)
    ang = math.acos(min(abs(float(tu2 @ ts2)), 1.0))
    return 0.5 * (pu2 + ps2), ang, 0.5 * (uu + us), ok


def homoclinic_points(curve_u, curve_s, mu=None, epsilon=None,
                      refine=True):
    """Transversal intersections of the two traces with splitting angles.

    Projects both curves into a shared intrinsic 2-D chart (leading
    right-singular vectors of the joint cloud), intersects the polylines
    segment by segment, and refines each candidate by Newton iteration on
    the two seed angles (using the curves' resolver closures), so the
    reported point and tangents come from a genuine intersection rather
    than from chord interpolation.  phi is the angle between the two unit
    tangents in the chart.
    """
    centroid, frame = _shared_frame(curve_u, curve_s)
    _project(curve_u, centroid, frame)
    _project(curve_s, centroid, frame)
    scale = float(np.max(np.linalg.norm(
        np.vstack([curve_u.coords2, curve_s.coords2]), axis=1)))
    scale = max(scale, 1e-300)

    can_refine = (refine and hasattr(curve_u, "_resolve")
                  and hasattr(curve_s, "_resolve"))

    pu, ps = curve_u.coords2, curve_s.coords2
    cands = []
    for i in range(len(pu) - 1):
        for j in range(len(ps) - 1):
            hit = _seg_intersect(pu[i], pu[i + 1], ps[j], ps[j + 1])
            if hit is None:
                continue
            s, t = hit
            p = pu[i] + s * (pu[i + 1] - pu[i])
            tu = (1 - s) * curve_u.tan2[i] + s * curve_u.tan2[i + 1]
            tsv = (1 - t) * curve_s.tan2[j] + t * curve_s.tan2[j + 1]
            tu = tu / np.linalg.norm(tu)
            tsv = tsv / np.linalg.norm(tsv)
            phi = math.acos(min(abs(float(np.dot(tu, tsv))), 1.0))
            u_here = (1 - s) * curve_u.u_est[i] + s * curve_u.u_est[i + 1]
            cands.append((float(u_here), np.asarray(p), phi, i, j))
    cands.sort(key=lambda c: c[0])

    # one candidate per position cluster: adjacent segment pairs report
    # the same geometric crossing; keep a representative before refining
    clusters = []
    for c in cands:
        for group in clusters:
            if np.linalg.norm(c[1] - group[-1][1]) < 0.03 * scale:
                group.append(c)
                break
        else:
            clusters.append([c])

    out = []
    for group in clusters:
        u_here, p, phi, i, j = group[len(group) // 2]
        refined = False
        if can_refine:
            got = _refine_intersection(
                curve_u, curve_s,
                float(curve_u.theta_seed[i]),
                float(curve_s.theta_seed[j]),
                p, centroid, frame, scale)
            if got is not None:
                p, phi, u_here, refined = got
        # distinct raw clusters can converge to one true intersection
        dup = next((smp for smp in out
                    if np.linalg.norm(smp.p - p) < 1e-4 * scale), None)
        if dup is not None:
            if refined and not dup.refined:
                dup.p, dup.phi = np.asarray(p), phi
                dup.u_est, dup.refined = float(u_here), True
            continue
        out.append(SplitSample(
            mu=mu if mu is not None else float("nan"),
            epsilon=epsilon if epsilon is not None else float("nan"),
            p=np.asarray(p), phi=phi, dist_scale=0.0,
            u_est=float(u_here), transversal=phi > 1e-12,
            refined=refined))
    if out:
        dscale = _offset_scale(curve_u, curve_s)
        for smp in out:
            smp.dist_scale = dscale
    out.sort(key=lambda s: s.u_est)
    return out


def _offset_scale(curve_u, curve_s):
    """RMS distance from s-trace samples to the u-trace polyline."""
    pu = curve_u.coords2
    a = pu[:-1]
    d = pu[1:] - a
    nd2 = np.einsum("ij,ij->i", d, d)
    nd2[nd2 == 0.0] = 1.0
    offs = []
    for q in curve_s.coords2:
        r = q - a
        s = np.clip(np.einsum("ij,ij->i", r, d) / nd2, 0.0, 1.0)
        offs.append(np.min(np.linalg.norm(r - s[:, None] * d, axis=1)))
    return float(np.sqrt(np.mean(np.square(offs)))) if offs else 0.0
