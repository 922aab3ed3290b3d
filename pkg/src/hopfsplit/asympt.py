"""Sampling and fitting of the exponentially small splitting law.

The splitting angle of the L4 center-stable and center-unstable
manifolds obeys, for mu just above the Gascheau-Routh mass ratio mu1,

    phi ~ Theta * (mu - mu1)^-2 * exp(-slope / sqrt(mu - mu1)),
    slope = 2 pi sqrt(2) / (3 sqrt(69)) = 0.356574...,

up to a 1/log(mu - mu1) correction in the exponent's prefactor.  This
module drives the manifold pipeline over a mu-grid, fits the law in the
form log((mu - mu1)^2 phi) against {1, (mu - mu1)^(-1/2), 1/log(mu -
mu1)}, and reports the fitted decay coefficient together with a Theta
estimate (identifiable only up to a section-dependent constant, so it is
reported per section).
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dynamics, manifolds, polyham

SLOPE_EXACT = 2.0 * math.pi * math.sqrt(2.0) / (3.0 * math.sqrt(69.0))

# window of validated mass ratios above mu1 for the epsilon chart and
# the sampling grid
MU_WINDOW = 0.02

DEFAULT_PIPELINE = {
    "delta": 1e-3,        # seed ring offset (relative to the loop via order)
    "n_fibers": 64,
    "order": 5,           # local-expansion order of the seeds
    "rtol": 1e-12,
    "atol": 1e-14,
    "rtol_fine": 1e-13,   # engaged below mu - mu1 = 2e-3
    "fine_below": 2e-3,
    "refine": True,
    "workers": 1,
}


@dataclass
class SplittingFit:
    """Least-squares fit of the exponential splitting law."""

    samples: list
    slope: float                  # coefficient of -(mu-mu1)^(-1/2)
    theta_estimate: float
    log_correction_coeff: float
    residuals: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_json_obj(self):
        return {
            "slope": self.slope,
            "theta_estimate": self.theta_estimate,
            "log_correction_coeff": self.log_correction_coeff,
            "residual_rms": float(np.sqrt(np.mean(self.residuals ** 2)))
            if len(self.residuals) else 0.0,
            "samples": [
                {"mu": s.mu, "epsilon": s.epsilon, "phi": s.phi,
                 "u_est": s.u_est, "refined": bool(s.refined)}
                for s in self.samples],
            "meta": self.meta,
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_json_obj(), indent=indent, sort_keys=True)


def mu_critical():
    """The Gascheau-Routh mass ratio mu1 (f64)."""
    return dynamics.gascheau_routh_mu1()


def default_mu_grid(n=8, span=(8e-4, 1.2e-2)):
    """Log-spaced grid of mu above mu1, as absolute mass ratios."""
    mu1 = mu_critical()
    d = np.geomspace(span[0], span[1], n)
    return (mu1 + d).tolist()


def epsilon_chart(mu):
    """The small parameter of the rescaled chart at mass ratio mu.

    Composes nu0(mu) with the normal-form coefficient gamma_hat and
    returns both symplectic-form conventions as labeled outputs: the
    standard form has eps^2 = -2 nu / gamma_hat, the half form (written
    against (1/2) dx^dy) has eps^2 = -nu / gamma_hat; their ratio is
    exactly 2.
    """
    mu1 = mu_critical()
    if not mu1 < mu <= mu1 + MU_WINDOW:
        raise ValueError("mu outside the validated window above mu1")
    nu = dynamics.nu0(mu)
    gh = polyham.nf_coeff_rational(nu).gamma_hat
    eps2_standard = -2.0 * nu / gh
    eps2_half = -nu / gh
    return {
        "mu": float(mu),
        "nu": float(nu),
        "gamma_hat": float(gh),
        "eps2_standard": float(eps2_standard),
        "eps2_half": float(eps2_half),
        "epsilon_standard": math.sqrt(eps2_standard),
        "epsilon_half": math.sqrt(eps2_half),
    }


def _sample_one(mu, config):
    """Run seed -> trace -> intersect at one mu; return the best sample.

    The maximal-angle refined transversal homoclinic point is recorded;
    returns None when the pipeline finds no intersection.
    """
    d = mu - mu_critical()
    rtol = config["rtol_fine"] if d < config["fine_below"] else config["rtol"]
    su = manifolds.seed_ring(mu, "u", delta=config["delta"],
                             n_fibers=config["n_fibers"],
                             order=config["order"])
    ss = manifolds.seed_ring(mu, "s", delta=config["delta"],
                             n_fibers=config["n_fibers"],
                             order=config["order"])
    section = config.get("section")
    cu = manifolds.trace_on_section(su, section=section, rtol=rtol,
                                    atol=config["atol"])
    cs = manifolds.trace_on_section(ss, section=section, rtol=rtol,
                                    atol=config["atol"])
    eps = epsilon_chart(mu)["epsilon_standard"]
    pts = manifolds.homoclinic_points(cu, cs, mu=mu, epsilon=eps,
                                      refine=config["refine"])
    good = [p for p in pts if p.transversal and math.isfinite(p.phi)
            and p.phi > 0.0]
    refined = [p for p in good if p.refined]
    pool = refined if refined else good
    if not pool:
        return None
    return max(pool, key=lambda p: p.phi)


def sample_splitting(mu_grid, pipeline_config=None):
    """Splitting-angle samples over a sorted grid of mass ratios.

    Each mu > mu1 is run through the manifold pipeline and the
    maximal-angle homoclinic point's phi recorded.  A mu with no
    intersection yields a flagged sample (phi = nan, transversal False);
    fewer than 5 usable samples is an error.  Samples run in parallel
    when the config requests more than one worker.
    """
    mu1 = mu_critical()
    grid = [float(m) for m in mu_grid]
    if any(m <= mu1 for m in grid):
        raise ValueError("all mu must lie above mu1")
    if sorted(grid) != grid:
        raise ValueError("mu grid must be sorted")
    config = dict(DEFAULT_PIPELINE)
    if pipeline_config:
        config.update(pipeline_config)

    workers = int(config.get("workers", 1))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sample_one, grid,
                                    [config] * len(grid)))
    else:
        results = [_sample_one(m, config) for m in grid]

    out = []
    for mu, smp in zip(grid, results):
        if smp is None:
            out.append(manifolds.SplitSample(
                mu=mu, epsilon=epsilon_chart(mu)["epsilon_standard"],
                p=np.full(2, np.nan), phi=float("nan"), dist_scale=0.0,
                u_est=float("nan"), transversal=False, refined=False))
        else:
            out.append(smp)
    usable = [s for s in out if math.isfinite(s.phi) and s.phi > 0.0]
    if len(usable) < 5:
        raise RuntimeError(
            "only %d usable splitting samples (need at least 5)"
            % len(usable))
    return out


def _design(dvals):
    x = np.asarray(dvals, dtype=float)
    return np.column_stack([np.ones_like(x), -1.0 / np.sqrt(x),
                            1.0 / np.log(x)])


def fit_exponential_law(samples):
    """Least-squares fit of log((mu-mu1)^2 phi) to the splitting law.

    The basis is {1, -(mu-mu1)^(-1/2), 1/log(mu-mu1)}: the coefficient
    of the second function is the decay estimate (compare SLOPE_EXACT),
    and exp of the intercept corrected by the third term at the
    geometric grid center is the Theta estimate.  Requires at least 5
    valid samples spanning a factor 5 in mu - mu1.
    """
    mu1 = mu_critical()
    valid = [s for s in samples
             if math.isfinite(s.phi) and s.phi > 0.0 and s.mu > mu1]
    if len(valid) < 5:
        raise ValueError("need at least 5 valid samples")
    d = np.array([s.mu - mu1 for s in valid])
    if d.max() / d.min() < 5.0:
        raise ValueError("samples must span at least a factor 5 in mu - mu1")
    y = np.log(d ** 2 * np.array([s.phi for s in valid]))
    X = _design(d)
    if np.linalg.matrix_rank(X) < 3:
        raise ValueError("rank-deficient design matrix")
    coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(len(valid) - 3, 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(X.T @ X)
    slope_sd = math.sqrt(max(cov[1, 1], 0.0))

    d_center = math.exp(float(np.mean(np.log(d))))
    theta = math.exp(float(coef[0]) + float(coef[2]) / math.log(d_center))

    # jackknife stability of the decay coefficient
    jk = []
    if len(valid) >= 6:
        for i in range(len(valid)):
            keep = np.arange(len(valid)) != i
            cj, _, _, _ = np.linalg.lstsq(X[keep], y[keep], rcond=None)
            jk.append(float(cj[1]))
    slope = float(coef[1])
    jack_rel = (max(abs(v - slope) for v in jk) / abs(slope)
                if jk and slope != 0.0 else float("nan"))

    return SplittingFit(
        samples=valid,
        slope=slope,
        theta_estimate=theta,
        log_correction_coeff=float(coef[2]),
        residuals=resid,
        meta={
            "intercept": float(coef[0]),
            "slope_ci95": [slope - 1.96 * slope_sd, slope + 1.96 * slope_sd],
            "slope_exact": SLOPE_EXACT,
            "jackknife_slopes": jk,
            "jackknife_rel_spread": jack_rel,
            "d_center": d_center,
            "n_samples": len(valid),
        })


def synthetic_law_samples(theta, slope, mu_offsets, log_coeff=0.0):
    """Samples generated exactly from the fitted model (for round-trips).

    phi = theta * d^-2 * exp(-slope/sqrt(d) + log_coeff/log(d)) with
    d = mu - mu1 running over ``mu_offsets``.
    """
    mu1 = mu_critical()
    out = []
    for d in mu_offsets:
        d = float(d)
        phi = theta / d ** 2 * math.exp(-slope / math.sqrt(d)
                                        + log_coeff / math.log(d))
        out.append(manifolds.SplitSample(
            mu=mu1 + d, epsilon=float("nan"), p=np.zeros(2), phi=phi,
            dist_scale=0.0, u_est=0.0))
    return out


def fit_epsilon_form(samples):
    """Secondary diagnostic: the law fitted against 1/epsilon.

    Uses y = log(eps^4 phi) with basis {1, -1/eps, 1/log(eps)}; in the
    rescaled chart the decay coefficient estimates omega*pi/2.  Offered
    as a labeled diagnostic only, because the epsilon chart carries a
    symplectic-convention ambiguity that the mu form avoids.
    """
    valid = [s for s in samples
             if math.isfinite(s.phi) and s.phi > 0.0
             and math.isfinite(s.epsilon) and s.epsilon > 0.0]
    if len(valid) < 5:
        raise ValueError("need at least 5 valid samples")
    e = np.array([s.epsilon for s in valid])
    y = np.log(e ** 4 * np.array([s.phi for s in valid]))
    X = np.column_stack([np.ones_like(e), -1.0 / e, 1.0 / np.log(e)])
    coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    return {
        "slope_eps": float(coef[1]),
        "intercept": float(coef[0]),
        "log_correction_coeff": float(coef[2]),
        "residual_rms": float(np.sqrt(np.mean(resid ** 2))),
    }


def write_report(fit, json_path, csv_path):
    """Fit report as JSON plus a two-column CSV ready for plotting.

    CSV columns: x = (mu - mu1)^(-1/2), y = log((mu - mu1)^2 phi).
    """
    mu1 = mu_critical()
    with open(json_path, "w") as f:
        f.write(fit.to_json())
        f.write("\n")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["inv_sqrt_mu_offset", "log_scaled_phi"])
        for s in fit.samples:
            d = s.mu - mu1
            w.writerow(["%.17g" % (1.0 / math.sqrt(d)),
                        "%.17g" % math.log(d ** 2 * s.phi)])
