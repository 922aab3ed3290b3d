"""Numerical suite for the Hamiltonian Hopf bifurcation at L4 of the RPC3BP.

Subpackages mirror the pipeline: exact polynomial normal form
(:mod:`hopfsplit.polyham`), unperturbed homoclinic objects
(:mod:`hopfsplit.separatrix`), high-order integration
(:mod:`hopfsplit.odeint`), invariant-manifold globalization and splitting
measurement (:mod:`hopfsplit.manifolds`), the inner equation and Stokes
coefficients (:mod:`hopfsplit.inner`), and the asymptotic fit of the
exponentially small splitting law (:mod:`hopfsplit.asympt`).
"""

from .poly import Poly4, poisson_bracket, poly_N, poly_Q, poly_S
from .dynamics import (
    MassParams,
    gascheau_routh_mu1,
    nu0,
    lagrange_L4,
    linearization_at_L4,
    rpc3bp_energy,
    rpc3bp_vector_field,
    saddle_eigenvalues,
    energy_of_L4,
)

__all__ = [
    "Poly4", "poisson_bracket", "poly_N", "poly_Q", "poly_S",
    "MassParams", "gascheau_routh_mu1", "nu0", "lagrange_L4",
    "linearization_at_L4", "rpc3bp_energy", "rpc3bp_vector_field",
    "saddle_eigenvalues", "energy_of_L4",
]

__version__ = "0.1.0"
