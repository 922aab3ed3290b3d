"""Sparse polynomial algebra in four phase-space variables.

A :class:`Poly4` is a polynomial in the canonical variables
``(x1, x2, y1, y2)`` stored as a map from exponent 4-tuples
``(i1, i2, j1, j2)`` to coefficients.  The coefficient ring is whatever
the caller puts in (``float``, ``complex``, :class:`fractions.Fraction`,
``mpmath`` numbers); all operations are ring-generic and never introduce
divisions, so exact arithmetic stays exact.

The module also provides the Poisson bracket in the standard symplectic
structure dx1^dy1 + dx2^dy2 and the classical quadratic invariants

    N = x1^2 + x2^2,   Q = y1^2 + y2^2,   S = x1*y2 - x2*y1.
"""

from __future__ import annotations

import json


NVARS = 4

# (variable index paired symplectically): x1<->y1 (0,2), x2<->y2 (1,3)
_PAIRS = ((0, 2), (1, 3))


class Poly4:
    """Sparse polynomial in (x1, x2, y1, y2) over a caller-chosen ring."""

    __slots__ = ("terms",)

    def __init__(self, terms=None):
        self.terms = {}
        if terms:
            for exp, c in terms.items():
                if c != 0:
                    self.terms[tuple(exp)] = c

    # -- constructors -----------------------------------------------------

    @staticmethod
    def zero():
        return Poly4()

    @staticmethod
    def constant(c):
        return Poly4({(0, 0, 0, 0): c})

    @staticmethod
    def monomial(exp, c=1):
        return Poly4({tuple(exp): c})

    @staticmethod
    def variable(i, c=1):
        exp = [0, 0, 0, 0]
        exp[i] = 1
        return Poly4({tuple(exp): c})

    def copy(self):
        p = Poly4()
        p.terms = dict(self.terms)
        return p

    # -- ring operations --------------------------------------------------

    def __add__(self, other):
        if not isinstance(other, Poly4):
            other = Poly4.constant(other)
        out = dict(self.terms)
        for exp, c in other.terms.items():
            s = out.get(exp, 0) + c
            if s == 0:
                out.pop(exp, None)
            else:
                out[exp] = s
        p = Poly4()
        p.terms = out
        return p

    __radd__ = __add__

    def __neg__(self):
        p = Poly4()
        p.terms = {exp: -c for exp, c in self.terms.items()}
        return p

    def __sub__(self, other):
        if not isinstance(other, Poly4):
            other = Poly4.constant(other)
        return self + (-other)

    def __rsub__(self, other):
        return Poly4.constant(other) + (-self)

    def __mul__(self, other):
        if isinstance(other, Poly4):
            out = {}
            for e1, c1 in self.terms.items():
                for e2, c2 in other.terms.items():
                    exp = (e1[0] + e2[0], e1[1] + e2[1],
                           e1[2] + e2[2], e1[3] + e2[3])
                    s = out.get(exp, 0) + c1 * c2
                    if s == 0:
                        out.pop(exp, None)
                    else:
                        out[exp] = s
            p = Poly4()
            p.terms = out
            return p
        # scalar
        if other == 0:
            return Poly4()
        p = Poly4()
        p.terms = {exp: c * other for exp, c in self.terms.items()}
        return p

    __rmul__ = __mul__

    def __eq__(self, other):
        if isinstance(other, Poly4):
            return self.terms == other.terms
        return NotImplemented

    def __hash__(self):
        return hash(frozenset(self.terms.items()))

    def __repr__(self):
        if not self.terms:
            return "Poly4(0)"
        names = ("x1", "x2", "y1", "y2")
        bits = []
        for exp in sorted(self.terms, key=lambda e: (sum(e), e)):
            c = self.terms[exp]
            mono = "*".join(f"{names[i]}^{e}" if e > 1 else names[i]
                            for i, e in enumerate(exp) if e)
            bits.append(f"{c}*{mono}" if mono else f"{c}")
        return "Poly4(" + " + ".join(bits) + ")"

    # -- structure --------------------------------------------------------

    def max_degree(self):
        return max((sum(e) for e in self.terms), default=0)

    def degree_slice(self, d):
        """Homogeneous part of total degree d."""
        p = Poly4()
        p.terms = {e: c for e, c in self.terms.items() if sum(e) == d}
        return p

    def truncate(self, max_degree):
        """Drop all terms of total degree > max_degree."""
        p = Poly4()
        p.terms = {e: c for e, c in self.terms.items() if sum(e) <= max_degree}
        return p

    def coeff(self, exp):
        return self.terms.get(tuple(exp), 0)

    def prune(self, tol):
        """Drop terms with |coefficient| <= tol (float hygiene)."""
        p = Poly4()
        p.terms = {e: c for e, c in self.terms.items() if abs(c) > tol}
        return p

    def coeff_norm(self):
        return sum(abs(c) for c in self.terms.values())

    def map_coeffs(self, fn):
        p = Poly4()
        for e, c in self.terms.items():
            v = fn(c)
            if v != 0:
                p.terms[e] = v
        return p

    # -- calculus ---------------------------------------------------------

    def diff(self, i):
        """Partial derivative with respect to variable i (0..3)."""
        out = {}
        for exp, c in self.terms.items():
            k = exp[i]
            if k == 0:
                continue
            e = list(exp)
            e[i] = k - 1
            out[tuple(e)] = c * k
        p = Poly4()
        p.terms = out
        return p

    def gradient(self):
        return [self.diff(i) for i in range(NVARS)]

    # -- evaluation -------------------------------------------------------

    def __call__(self, state):
        """Evaluate at a point (sequence of 4 ring elements).

        Works with scalars of any ring and with numpy arrays broadcast
        elementwise.
        """
        total = 0
        x1, x2, y1, y2 = state[0], state[1], state[2], state[3]
        for (i1, i2, j1, j2), c in self.terms.items():
            total = total + c * (x1 ** i1) * (x2 ** i2) * (y1 ** j1) * (y2 ** j2)
        return total

    def lambdify(self):
        """Return a fast vectorized evaluator ``f(x1, x2, y1, y2)``.

        Intended for numpy-array arguments; precomputes the exponent and
        coefficient tables once.
        """
        import numpy as np
        exps = np.array(list(self.terms.keys()), dtype=np.int64)
        coeffs = np.array([complex(c) for c in self.terms.values()])
        if np.all(coeffs.imag == 0):
            coeffs = coeffs.real.copy()

        def _eval(x1, x2, y1, y2):
            vars_ = (x1, x2, y1, y2)
            acc = 0.0
            for exp, c in zip(exps, coeffs):
                t = c
                for v, e in zip(vars_, exp):
                    if e:
                        t = t * v ** int(e)
                acc = acc + t
            return acc

        return _eval

    # -- linear substitution ---------------------------------------------

    def compose_linear(self, M):
        """Substitute variables w = M v, i.e. return p(M v) as a Poly4 in v.

        M is a 4x4 matrix (list of rows or numpy array): old variable i is
        replaced by sum_j M[i][j] * v_j.
        """
        dmax = self.max_degree()
        lin = []
        for i in range(NVARS):
            f = Poly4()
            for j in range(NVARS):
                m = M[i][j]
                if m != 0:
                    f = f + Poly4.variable(j, m)
            lin.append(f)
        # cache powers of the four linear forms
        pows = []
        for i in range(NVARS):
            pi = [Poly4.constant(1)]
            for _ in range(dmax):
                pi.append(pi[-1] * lin[i])
            pows.append(pi)
        out = Poly4()
        for (i1, i2, j1, j2), c in self.terms.items():
            t = pows[0][i1] * pows[1][i2] * pows[2][j1] * pows[3][j2]
            out = out + t * c
        return out

    # -- serialization ----------------------------------------------------

    def to_json_obj(self):
        terms = []
        for exp in sorted(self.terms, key=lambda e: (sum(e), e)):
            c = complex(self.terms[exp])
            terms.append({"exp": list(exp), "re": c.real, "im": c.imag})
        return {"terms": terms}

    def to_json(self, **kw):
        return json.dumps(self.to_json_obj(), **kw)

    @staticmethod
    def from_json_obj(obj):
        p = Poly4()
        for t in obj["terms"]:
            c = t.get("re", 0.0) + 1j * t.get("im", 0.0)
            if c.imag == 0.0:
                c = c.real
            if c != 0:
                p.terms[tuple(t["exp"])] = c
        return p

    @staticmethod
    def from_json(s):
        return Poly4.from_json_obj(json.loads(s))


def poisson_bracket(f, g):
    """{f, g} = sum_i df/dxi dg/dyi - df/dyi dg/dxi (pairs x1-y1, x2-y2)."""
    out = Poly4()
    for ix, iy in _PAIRS:
        out = out + f.diff(ix) * g.diff(iy) - f.diff(iy) * g.diff(ix)
    return out


def hamiltonian_field(H):
    """Vector field (dH/dy1, dH/dy2, -dH/dx1, -dH/dx2) as a list of Poly4.

    Component order matches the state order (x1, x2, y1, y2).
    """
    return [H.diff(2), H.diff(3), -H.diff(0), -H.diff(1)]


def poly_N():
    return Poly4({(2, 0, 0, 0): 1, (0, 2, 0, 0): 1})


def poly_Q():
    return Poly4({(0, 0, 2, 0): 1, (0, 0, 0, 2): 1})


def poly_S():
    return Poly4({(1, 0, 0, 1): 1, (0, 1, 1, 0): -1})
