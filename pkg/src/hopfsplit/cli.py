"""Batch driver exposing every pipeline stage as a subcommand.

Subcommands
-----------
equilibria
    Table of the five relative equilibria for a given mass ratio, with
    eigenvalues and linear-stability labels.
nf
    Normal-form coefficients at a given nu from both the Lie-series
    engine and the closed rational formulas, with their differences.
splitting
    Full splitting pipeline (seed, trace, intersect, fit) over the
    configured mu grid; writes a CSV of samples and a JSON fit report.
inner
    Inner-equation pipeline (formal series, complex-path integration on
    both branches, Stokes extraction); writes a JSON report.
homoclinic-check
    Residual table for the closed-form homoclinic objects.

All stages read a single JSON config document (``--config``); defaults
match each module's documented choices.  Every output file embeds the
resolved config and a SHA-256 content hash, so identical configs produce
byte-identical outputs.  CSV output is RFC 4180 with ``.`` decimals and
17 (f64) or 33 (dd) significant digits; config and hash ride in leading
``#``-prefixed lines before the header record.

Exit codes: 0 success, 1 numerical failure (diagnostic JSON on stdout),
2 config or validation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np
from scipy.optimize import brentq

from . import asympt, dynamics, inner, odeint, polyham, separatrix
from . import precision as prec
from .poly import Poly4, hamiltonian_field


# ----------------------------------------------------------------------
# Config handling
# ----------------------------------------------------------------------

DEFAULT_CONFIG = {
    "precision": "f64",
    "tolerances": {"rtol": 1e-12, "atol": 1e-14, "event_tol": 1e-12},
    "truncations": {"nf_degree": 6, "K_max": 8, "N_max": 40, "Z0": 40.0,
                    "rho_list": [6.0, 8.0, 10.0, 12.0]},
    "manifolds": {"delta": 1e-3, "n_fibers": 64, "order": 5,
                  "section": "default"},
    "mu_grid": {"n": 8, "span": [8e-4, 1.2e-2]},
    "h1_zero": False,
    "threads": None,
    "seed_section": 0,
    "output_dir": ".",
}


class ConfigError(ValueError):
    """Raised when a config document fails validation."""


def _merge(base, override, path=""):
    out = dict(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError("unknown config key %r" % (path + key))
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def load_config(path=None, overrides=None):
    """Resolved RunConfig dict: file contents over defaults, validated."""
    cfg = dict(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("config is not valid JSON: %s" % exc)
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if cfg["precision"] not in prec.MODES:
        raise ConfigError("precision must be one of %s" % (prec.MODES,))
    tol = cfg["tolerances"]
    for key in ("rtol", "atol", "event_tol"):
        if not (isinstance(tol[key], (int, float)) and 0 < tol[key] < 1):
            raise ConfigError("tolerances.%s must lie in (0, 1)" % key)
    tr = cfg["truncations"]
    if not (isinstance(tr["nf_degree"], int) and tr["nf_degree"] >= 6):
        raise ConfigError("truncations.nf_degree must be an int >= 6")
    if not (isinstance(tr["K_max"], int) and 2 <= tr["K_max"] <= 32):
        raise ConfigError("truncations.K_max must be an int in [2, 32]")
    if not (isinstance(tr["N_max"], int) and tr["N_max"] >= 10):
        raise ConfigError("truncations.N_max must be an int >= 10")
    if not (isinstance(tr["Z0"], (int, float)) and tr["Z0"] > 0):
        raise ConfigError("truncations.Z0 must be positive")
    rhos = tr["rho_list"]
    if (not isinstance(rhos, list) or len(rhos) < 1
            or any(not isinstance(r, (int, float)) or r <= 0 for r in rhos)
            or sorted(rhos) != rhos):
        raise ConfigError("truncations.rho_list must be ascending positives")
    mf = cfg["manifolds"]
    if not (0 < mf["delta"] < 1):
        raise ConfigError("manifolds.delta must lie in (0, 1)")
    if not (isinstance(mf["n_fibers"], int) and mf["n_fibers"] >= 8):
        raise ConfigError("manifolds.n_fibers must be an int >= 8")
    if not (isinstance(mf["order"], int) and 1 <= mf["order"] <= 10):
        raise ConfigError("manifolds.order must be an int in [1, 10]")
    if mf["section"] != "default":
        raise ConfigError("manifolds.section must be 'default'")
    grid = cfg["mu_grid"]
    if isinstance(grid, dict):
        if set(grid) != {"n", "span"} or grid["n"] < 5:
            raise ConfigError("mu_grid needs keys n (>= 5) and span")
        lo, hi = grid["span"]
        if not (0 < lo < hi < asympt.MU_WINDOW):
            raise ConfigError("mu_grid.span must be inside the asymptotic "
                              "window (0, %g)" % asympt.MU_WINDOW)
    elif isinstance(grid, list):
        mu1 = dynamics.gascheau_routh_mu1()
        if len(grid) < 1 or any(not (mu1 < m <= 0.5) for m in grid):
            raise ConfigError("mu_grid values must lie in (mu1, 1/2]")
    else:
        raise ConfigError("mu_grid must be a list or an {n, span} object")
    if not isinstance(cfg["h1_zero"], bool):
        raise ConfigError("h1_zero must be a boolean")
    if cfg["threads"] is not None and not (isinstance(cfg["threads"], int)
                                           and cfg["threads"] >= 1):
        raise ConfigError("threads must be null or a positive int")
    if not isinstance(cfg["seed_section"], int):
        raise ConfigError("seed_section must be an int")
    if not isinstance(cfg["output_dir"], str):
        raise ConfigError("output_dir must be a string")


def resolve_mu_grid(cfg):
    grid = cfg["mu_grid"]
    if isinstance(grid, list):
        return [float(m) for m in grid]
    return list(asympt.default_mu_grid(n=grid["n"],
                                       span=tuple(grid["span"])))


# ----------------------------------------------------------------------
# Deterministic outputs with embedded config + hash
# ----------------------------------------------------------------------

def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(config, payload):
    h = hashlib.sha256()
    h.update(_canonical({"config": config, "data": payload}).encode())
    return h.hexdigest()


def write_json_artifact(path, config, payload):
    doc = {"config": config, "content_hash": content_hash(config, payload),
           "data": payload}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc["content_hash"]


def write_csv_artifact(path, config, header, rows, digits):
    fmt = "%%.%dg" % digits
    lines = [",".join(header) + "\r\n"]
    for row in rows:
        cells = [fmt % v if isinstance(v, float) else str(v) for v in row]
        lines.append(",".join(cells) + "\r\n")
    body = "".join(lines)
    h = hashlib.sha256()
    h.update(_canonical(config).encode())
    h.update(body.encode())
    digest = h.hexdigest()
    with open(path, "w", newline="") as fh:
        fh.write("# config: %s\r\n" % _canonical(config))
        fh.write("# sha256: %s\r\n" % digest)
        fh.write(body)
    return digest


# ----------------------------------------------------------------------
# equilibria
# ----------------------------------------------------------------------

def _collinear_equation(x, mu):
    d1, d2 = x + mu, x - (1.0 - mu)
    return (x - (1.0 - mu) * d1 / abs(d1) ** 3 - mu * d2 / abs(d2) ** 3)


def collinear_points(mu):
    """x-coordinates of L1 (between), L2 (beyond small), L3 (opposite)."""
    e = 1e-9
    brackets = {
        "L1": (-mu + e, 1.0 - mu - e),
        "L2": (1.0 - mu + e, 3.0),
        "L3": (-3.0, -mu - e),
    }
    out = {}
    for name, (a, b) in brackets.items():
        out[name] = brentq(_collinear_equation, a, b, args=(mu,),
                           xtol=1e-15, rtol=1e-15)
    return out


def _stability_label(eigs, is_triangular, mu, mu1):
    if is_triangular:
        if mu < mu1 - 1e-14:
            return "linearly stable"
        if abs(mu - mu1) <= 1e-14:
            return "resonant eigenvalue collision"
        return "complex saddle"
    return "saddle-center"


def equilibria_table(mu):
    """All five relative equilibria with eigenvalues and labels."""
    mu1 = float(dynamics.gascheau_routh_mu1())
    rows = []
    coll = collinear_points(mu)
    l4 = [float(v) for v in dynamics.lagrange_L4(mu)]
    l5 = [l4[0], -l4[1], l4[2], l4[3]]
    states = {**{k: [x, 0.0, 0.0, x] for k, x in coll.items()},
              "L4": l4, "L5": l5}
    for name in ("L1", "L2", "L3", "L4", "L5"):
        st = states[name]
        field = dynamics.rpc3bp_vector_field(st, mu)
        eigs = np.linalg.eigvals(dynamics.rpc3bp_jacobian(st, mu))
        eigs = sorted(eigs, key=lambda e: (round(e.real, 10), e.imag))
        rows.append({
            "name": name,
            "state": st,
            "residual": float(np.max(np.abs(field))),
            "eigenvalues": [[float(e.real), float(e.imag)] for e in eigs],
            "stability": _stability_label(eigs, name in ("L4", "L5"),
                                          mu, mu1),
        })
    return rows


def cmd_equilibria(args):
    mu = args.mu
    if not (0.0 < mu <= 0.5):
        raise ConfigError("mu must lie in (0, 1/2]")
    rows = equilibria_table(mu)
    cfg = {"mu": mu}
    payload = {"mu": mu, "mu1": float(dynamics.gascheau_routh_mu1()),
               "equilibria": rows}
    print("%-4s %-22s %-22s %s" % ("", "q1", "q2", "stability"))
    for r in rows:
        print("%-4s %-22.15g %-22.15g %s"
              % (r["name"], r["state"][0], r["state"][1], r["stability"]))
    if args.out:
        digest = write_json_artifact(args.out, cfg, payload)
        print("wrote %s (sha256 %s)" % (args.out, digest[:16]))
    return 0


# ----------------------------------------------------------------------
# nf
# ----------------------------------------------------------------------

def cmd_nf(args):
    nu = args.nu
    if not (polyham.NU_WINDOW[0] <= nu <= polyham.NU_WINDOW[1]):
        raise ConfigError("nu must lie in [%g, %g]" % polyham.NU_WINDOW)
    mu = polyham.mu_of_nu(nu)
    taylor = polyham.taylor_rpc3bp_at_L4(mu, max_degree=6)
    engine, _ = polyham.normal_form_to_degree4(taylor, mu)
    rational = polyham.nf_coeff_rational(nu)
    fields = ("omega_hat", "alpha_hat", "beta_hat", "gamma_hat")
    payload = {
        "nu": nu, "mu": mu,
        "lie_engine": {f: getattr(engine, f) for f in fields},
        "rational": {f: getattr(rational, f) for f in fields},
        "difference": {f: getattr(engine, f) - getattr(rational, f)
                       for f in fields},
        "homoclinic_class": rational.gamma_hat > 0,
    }
    text = json.dumps({"config": {"nu": nu},
                       "content_hash": content_hash({"nu": nu}, payload),
                       "data": payload}, indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


# ----------------------------------------------------------------------
# splitting
# ----------------------------------------------------------------------

def cmd_splitting(args):
    cfg = load_config(args.config, _flag_overrides(args))
    outdir = cfg["output_dir"]
    os.makedirs(outdir, exist_ok=True)
    mu_grid = resolve_mu_grid(cfg)
    pipeline = dict(asympt.DEFAULT_PIPELINE)
    pipeline.update(
        delta=cfg["manifolds"]["delta"],
        n_fibers=cfg["manifolds"]["n_fibers"],
        order=cfg["manifolds"]["order"],
        rtol=cfg["tolerances"]["rtol"],
        atol=cfg["tolerances"]["atol"],
        workers=cfg["threads"] or os.cpu_count() or 1,
    )
    samples = asympt.sample_splitting(mu_grid, pipeline)
    fit = asympt.fit_exponential_law(samples)

    digits = 17 if cfg["precision"] == "f64" else 33
    mu1 = asympt.mu_critical()
    rows = []
    for s in samples:
        d = s.mu - mu1
        phi = float(s.phi)
        rows.append((s.mu, d, s.epsilon, phi,
                     d ** -0.5,
                     math.log(d * d * phi) if phi > 0
                     and math.isfinite(phi) else float("nan")))
    header = ["mu", "mu_offset", "epsilon", "phi",
              "inv_sqrt_mu_offset", "log_scaled_phi"]
    csv_path = os.path.join(outdir, "splitting_samples.csv")
    json_path = os.path.join(outdir, "splitting_fit.json")
    write_csv_artifact(csv_path, cfg, header, rows, digits)
    payload = fit.to_json_obj()
    payload["slope_exact"] = asympt.SLOPE_EXACT
    write_json_artifact(json_path, cfg, payload)
    print("slope %.6f (exact %.6f)  theta %.6g  wrote %s, %s"
          % (fit.slope, asympt.SLOPE_EXACT, fit.theta_estimate,
             csv_path, json_path))
    return 0


# ----------------------------------------------------------------------
# inner
# ----------------------------------------------------------------------

def run_inner_pipeline(cfg):
    """Formal + numeric inner solutions and Stokes data per RunConfig."""
    mu1 = polyham.mu_of_nu(0.0)
    taylor = polyham.taylor_rpc3bp_at_L4(mu1, max_degree=6)
    nf0, rem6 = polyham.normal_form_to_degree4(taylor, mu1)
    if cfg["h1_zero"]:
        H1t = Poly4()
    else:
        H1t = polyham.h1tilde_inner(rem6, nf0.gamma_hat)
    params = inner.inner_params()
    tr = cfg["truncations"]
    tables = inner.h1_composition_tables(H1t)
    kwargs = dict(K_max=tr["K_max"], Z0=tr["Z0"], N_max=tr["N_max"],
                  precision=cfg["precision"], tables=tables)
    sols = {"u": [], "s": []}
    for rho in tr["rho_list"]:
        for branch in ("u", "s"):
            sols[branch].append(
                inner.solve_inner_numeric(branch, H1t, params,
                                          rho=float(rho), **kwargs))
    below_noise = False
    try:
        stokes = inner.extract_stokes(sols["u"], sols["s"],
                                      omega=params.omega)
    except RuntimeError as exc:
        if "below arithmetic noise" not in str(exc):
            raise
        below_noise = True
        stokes = inner.StokesData(
            chi={-1: 0j}, g_magnitude=0.0,
            rho_list=[float(r) for r in tr["rho_list"]], values={},
            fit_residual={}, meta={"below_noise": True})
    return stokes, below_noise


def cmd_inner(args):
    cfg = load_config(args.config, _flag_overrides(args))
    outdir = cfg["output_dir"]
    os.makedirs(outdir, exist_ok=True)
    stokes, below_noise = run_inner_pipeline(cfg)
    payload = stokes.to_json_obj()
    payload["below_noise"] = below_noise
    json_path = os.path.join(outdir, "stokes.json")
    digest = write_json_artifact(json_path, cfg, payload)
    chi1 = stokes.chi.get(-1, 0j)
    print("chi[-1] = %.6g + %.6gi%s  wrote %s (sha256 %s)"
          % (chi1.real, chi1.imag,
             " (below noise floor)" if below_noise else "",
             json_path, digest[:16]))
    return 0


# ----------------------------------------------------------------------
# homoclinic-check
# ----------------------------------------------------------------------

def cmd_homoclinic_check(args):
    rng = np.random.default_rng(0)
    u = rng.uniform(-3.0, 3.0, 1000)
    theta = rng.uniform(0.0, 2.0 * np.pi, 1000)
    scaled = polyham.rescale(-1e-3)

    h0_res = float(np.max(np.abs(
        separatrix.h0_on_homoclinic(u, theta, scaled))))
    states = separatrix.gamma0(u, theta)
    s_res = float(np.max(np.abs(
        states[..., 0] * states[..., 3] - states[..., 1] * states[..., 2])))

    # fourth-order stencil: keeps truncation and roundoff both near 1e-10
    h = 1e-3
    r0, _ = separatrix.separatrix_profile(u)
    vals = [separatrix.separatrix_profile(u + j * h)[0]
            for j in (-2, -1, 1, 2)]
    rdd = (-vals[0] + 16.0 * vals[1] - 30.0 * r0 + 16.0 * vals[2]
           - vals[3]) / (12.0 * h ** 2)
    profile_res = float(np.max(np.abs(rdd - (r0 - 2.0 * r0 ** 3))))

    u0, th0, t1 = -3.0, 0.2, 6.0
    H0, _ = polyham.scaled_hamiltonian(scaled)
    comps = [p.lambdify() for p in hamiltonian_field(H0)]

    def field(t, y):
        return np.array([c(y[0], y[1], y[2], y[3]) for c in comps])

    traj = odeint.integrate(field, separatrix.gamma0(u0, th0), (0.0, t1),
                            rtol=1e-13, atol=1e-15)
    target = separatrix.gamma0(u0 + t1,
                               th0 + t1 * scaled.omega / scaled.epsilon)
    flow_res = float(np.max(np.abs(np.asarray(traj.states[-1]) - target)))

    rows = [
        ("H0 on Gamma0 (1000 random points)", h0_res, 1e-13),
        ("S on Gamma0 (1000 random points)", s_res, 1e-13),
        ("profile equation r'' - (r - 2 r^3)", profile_res, 1e-8),
        ("flow property over t = 6", flow_res, 1e-9),
    ]
    ok = True
    print("%-38s %-12s %s" % ("residual", "value", "tolerance"))
    for name, val, tol in rows:
        ok = ok and val < tol
        print("%-38s %-12.3e %.0e" % (name, val, tol))
    if args.out:
        cfg = {"nu": -1e-3}
        payload = {name: {"value": val, "tolerance": tol}
                   for name, val, tol in rows}
        write_json_artifact(args.out, cfg, payload)
    if not ok:
        print(json.dumps({"error": "homoclinic residuals out of tolerance"}))
        return 1
    return 0


# ----------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------

def _flag_overrides(args):
    over = {}
    if getattr(args, "out", None):
        over["output_dir"] = args.out
    if getattr(args, "precision", None):
        over["precision"] = args.precision
    if getattr(args, "threads", None):
        over["threads"] = args.threads
    if getattr(args, "seed_section", None) is not None:
        over["seed_section"] = args.seed_section
    return over


def build_parser():
    p = argparse.ArgumentParser(
        prog="hopfsplit",
        description="Splitting-of-separatrices pipeline for the "
                    "Hamiltonian Hopf bifurcation at L4")
    sub = p.add_subparsers(dest="command", required=True)

    eq = sub.add_parser("equilibria", help="table of L1..L5 with stability")
    eq.add_argument("--mu", type=float, required=True)
    eq.add_argument("--out", help="optional JSON output path")
    eq.set_defaults(fn=cmd_equilibria)

    nf = sub.add_parser("nf", help="normal-form coefficients at nu")
    nf.add_argument("--nu", type=float, required=True)
    nf.add_argument("--out", help="optional JSON output path")
    nf.set_defaults(fn=cmd_nf)

    for name, fn in (("splitting", cmd_splitting), ("inner", cmd_inner)):
        sp = sub.add_parser(name, help="%s pipeline from a config" % name)
        sp.add_argument("--config", help="JSON config path")
        sp.add_argument("--out", help="output directory override")
        sp.add_argument("--precision", choices=prec.MODES)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--seed-section", dest="seed_section", type=int)
        sp.set_defaults(fn=fn)

    hc = sub.add_parser("homoclinic-check",
                        help="residual table for the homoclinic objects")
    hc.add_argument("--out", help="optional JSON output path")
    hc.set_defaults(fn=cmd_homoclinic_check)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(json.dumps({"error": "validation", "detail": str(exc)}),
              file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        print(json.dumps({"error": "numerical", "detail": str(exc),
                          "type": type(exc).__name__}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
