"""Assembly of the second heat-coefficient density R2 and its integral.

The density of a nonminimal operator P with positive-definite leading
matrix u is a finite sum of "sandwich" terms: spectral projectors of u
interleaved with the operator's coefficient fields, each weighted by a
spectral function of the eigenvalues involved.  This module provides

* pointwise assemblers for the coordinate form (fields u, v, w and their
  plain derivatives), the covariant form (fields u, p, q and covariant
  derivatives), the dimension-specialized closed forms, the minimal case
  u = 1, and the conformally transformed Laplacian k.Delta.k;
* a grid driver that differentiates sampled fields (spectrally on the
  periodic grid, or with 4th-order stencils) and assembles the density
  point by point into a :class:`HeatDensityResult`;
* the integrator turning a density into the scalar coefficient
  a2(a, P) = integral of tr(a R2) against a choice of volume element.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ValidationError
from .geometry import (
    Grid,
    GridMetric,
    MetricJet,
    OperatorFields,
    alpha_beta,
    alpha_coefficient,
    christoffel,
    flat_chart,
    fourier_gradient,
    grid_gradient,
    scalar_curvature,
    upq_to_uvw,
    uvw_to_upq,
)
from .ifuncs import DEFAULT_GAP_POLICY, i_value, min_rel_gap
from .spectral import sandwich_sum, sandwich_table, spectral_decompose
from .spectral_functions import (
    f_ddu,
    f_du_parts,
    f_dudu,
    f_duv,
    f_dv,
    f_v_parts,
    f_vdu,
    f_vv,
    f_w,
    fconf_dk,
    fconf_dk_simplified,
    fconf_dkdk,
    g_closed,
    g_value,
)

__all__ = [
    "HeatDensityResult",
    "r0_local",
    "r2_local_uvw",
    "r2_local_upq",
    "r2_corollary",
    "r2_minimal",
    "r2_conformal_like",
    "r2_density",
    "a2_integrate",
]


@dataclass(frozen=True, eq=False)
class HeatDensityResult:
    """R2 sampled on a grid plus how it was produced."""

    R2: np.ndarray
    form_used: str
    metadata: dict = field(default_factory=dict)
    grid: Grid | None = None
    metric: GridMetric | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.R2)):
            raise ValidationError("R2 contains non-finite entries")


def _prefactor(d):
    return 1.0 / (2.0**d * math.pi ** (d / 2))


def _mul(*mats):
    out = mats[0]
    for m in mats[1:]:
        out = out @ m
    return out


def r0_local(d, u):
    """Leading density u^{-d/2}/(2^d pi^{d/2}), a by-product of the setup."""
    dec = spectral_decompose(np.asarray(u, dtype=complex))
    return _prefactor(d) * dec.apply_function(lambda r: r ** (-d / 2))


# --------------------------------------------------------------------------
# pointwise assemblers
# --------------------------------------------------------------------------

def _ifun_from(policy, ifun):
    if ifun is not None:
        return ifun
    return lambda a, rs: i_value(a, rs, policy)


def _jet_geo(jet: MetricJet):
    a_lo, a_up, b_lo, b_up = alpha_beta(jet)
    return {
        "g_inv": jet.g_inv,
        "g_lo": np.linalg.inv(jet.g_inv),
        "a_lo": a_lo,
        "a_up": a_up,
        "b_lo": b_lo,
        "b_up": b_up,
    }


def _pair_terms(dec, table, lefts, rights):
    """Sum sandwich_sum over an index contraction of two field stacks."""
    n = dec.fiber_dim
    out = np.zeros((n, n), dtype=complex)
    for left, right in zip(lefts, rights):
        out += sandwich_sum(None, dec, (left, right), table=table)
    return out


def _uvw_point(d, geo, alpha_coeff, u, du, ddu_g, v, div_v, w,
               ifun, cluster_tol):
    """Ten-term coordinate-form assembly at one point."""
    dec = spectral_decompose(u, cluster_tol)

    def tab(fn, k):
        return sandwich_table(lambda *rs: fn(d, rs, ifun), dec, k)

    m = dec.count
    t_du_a = np.empty((m, m))
    t_du_b = np.empty((m, m))
    t_v_a = np.empty((m, m))
    t_v_b = np.empty((m, m))
    for idx in np.ndindex(m, m):
        rs = (dec.values[idx[0]], dec.values[idx[1]])
        t_du_a[idx], t_du_b[idx] = f_du_parts(d, rs, ifun)
        t_v_a[idx], t_v_b[idx] = f_v_parts(d, rs, ifun)

    g_inv, g_lo = geo["g_inv"], geo["g_lo"]
    du_up = np.einsum("mn,nij->mij", g_inv, du)
    v_lo = np.einsum("mn,nij->mij", g_lo, v)
    du_dot_aup = np.einsum("m,mij->ij", geo["a_up"], du)
    du_dot_bup = np.einsum("m,mij->ij", geo["b_up"], du)
    v_dot_alo = np.einsum("m,mij->ij", geo["a_lo"], v)
    v_dot_blo = np.einsum("m,mij->ij", geo["b_lo"], v)

    out = alpha_coeff * dec.apply_function(lambda r: r ** (1 - d / 2))
    out = out.astype(complex)
    out += sandwich_sum(None, dec, (du_dot_aup,), table=t_du_a)
    out += sandwich_sum(None, dec, (du_dot_bup,), table=t_du_b)
    out += sandwich_sum(None, dec, (ddu_g,), table=tab(f_ddu, 1))
    out += _pair_terms(dec, tab(f_dudu, 2), du, du_up)
    out += sandwich_sum(None, dec, (w,), table=tab(f_w, 1))
    out += sandwich_sum(None, dec, (v_dot_alo,), table=t_v_a)
    out += sandwich_sum(None, dec, (v_dot_blo,), table=t_v_b)
    out += _pair_terms(dec, tab(f_vdu, 2), v, du)
    out += _pair_terms(dec, tab(f_duv, 2), du, v)
    out += _pair_terms(dec, tab(f_vv, 2), v, v_lo)
    out += sandwich_sum(None, dec, (div_v,), table=tab(f_dv, 1))
    return _prefactor(d) * out, dec


def _covariant_point(d, geo, curvature, u, hat_du, hat_ddu_g, p, hat_div_p,
                     q, g_eval, cluster_tol):
    """Eight-term covariant assembly at one point.

    g_eval(name, rs) supplies the spectral function values, so the same
    assembly serves both the generic I-function path and the corollary
    closed forms.
    """
    dec = spectral_decompose(u, cluster_tol)

    def tab(name, k):
        return sandwich_table(lambda *rs: g_eval(name, rs), dec, k)

    g_inv, g_lo = geo["g_inv"], geo["g_lo"]
    du_up = np.einsum("mn,nij->mij", g_inv, hat_du)
    p_lo = np.einsum("mn,nij->mij", g_lo, p)

    out = (curvature / 6.0) * dec.apply_function(lambda r: r ** (1 - d / 2))
    out = out.astype(complex)
    out += sandwich_sum(None, dec, (q,), table=tab("G_q", 1))
    out += sandwich_sum(None, dec, (hat_ddu_g,), table=tab("G_ddu", 1))
    out += sandwich_sum(None, dec, (hat_div_p,), table=tab("G_dp", 1))
    out += _pair_terms(dec, tab("G_dudu", 2), hat_du, du_up)
    out += _pair_terms(dec, tab("G_pdu", 2), p, hat_du)
    out += _pair_terms(dec, tab("G_dup", 2), hat_du, p)
    out += _pair_terms(dec, tab("G_pp", 2), p, p_lo)
    return _prefactor(d) * out, dec


def _contract_hessian(g_inv, hess):
    return np.einsum("mn,mnij->ij", g_inv, np.asarray(hess, dtype=complex))


def r2_local_uvw(d, jet: MetricJet, u, du, ddu, v, div_v, w, *,
                 cluster_tol=1e-8, policy=DEFAULT_GAP_POLICY, ifun=None):
    """Coordinate-form density at one point.

    du and v are (d, N, N) stacks, ddu is the full (d, d, N, N) second
    derivative, div_v is the plain divergence d_mu v^mu.
    """
    if jet.dim != d:
        raise DomainError("jet dimension does not match d")
    geo = _jet_geo(jet)
    ifun = _ifun_from(policy, ifun)
    ddu_g = _contract_hessian(jet.g_inv, ddu)
    out, _ = _uvw_point(
        d, geo, alpha_coefficient(jet),
        np.asarray(u, dtype=complex), np.asarray(du, dtype=complex), ddu_g,
        np.asarray(v, dtype=complex), np.asarray(div_v, dtype=complex),
        np.asarray(w, dtype=complex), ifun, cluster_tol,
    )
    return out


def r2_local_upq(d, jet: MetricJet, u, hat_du, hat_ddu, p, hat_div_p, q, *,
                 cluster_tol=1e-8, policy=DEFAULT_GAP_POLICY, ifun=None):
    """Covariant density at one point.

    hat_du is the (d, N, N) covariant gradient of u, hat_ddu the full
    (d, d, N, N) covariant Hessian (Christoffel correction included),
    hat_div_p the covariant divergence of p^mu.
    """
    if jet.dim != d:
        raise DomainError("jet dimension does not match d")
    geo = _jet_geo(jet)
    ifun = _ifun_from(policy, ifun)
    g_eval = lambda name, rs: g_value(name, d, rs, ifun)
    out, _ = _covariant_point(
        d, geo, scalar_curvature(jet),
        np.asarray(u, dtype=complex), np.asarray(hat_du, dtype=complex),
        _contract_hessian(jet.g_inv, hat_ddu),
        np.asarray(p, dtype=complex), np.asarray(hat_div_p, dtype=complex),
        np.asarray(q, dtype=complex), g_eval, cluster_tol,
    )
    return out


def _corollary_geval(d, branch):
    if branch is None:
        if d == 2:
            branch = "d2"
        elif d == 3:
            branch = "d3"
        elif d == 4:
            branch = "d4"
        elif d % 2 == 0:
            branch = "even"
        else:
            raise DomainError(f"no closed-form branch for d={d}")
    expected = {"d2": 2, "d3": 3, "d4": 4}
    if branch in expected and d != expected[branch]:
        raise DomainError(f"branch {branch!r} requires d={expected[branch]}")
    if branch == "even" and (d < 4 or d % 2):
        raise DomainError("branch 'even' requires even d >= 4")
    if branch == "d4":
        # The d=4 forms are single Laurent monomials; spelled out directly
        # they double as an independent transcription of the printed result.
        literal = {
            "G_q": lambda r: 1.0 / (r[0] * r[1]),
            "G_ddu": lambda r: -0.5 / (r[0] * r[1]),
            "G_dp": lambda r: -0.5 / (r[0] * r[1]),
            "G_dudu": lambda r: 0.25 / (r[0] * r[1] * r[2]),
            "G_pdu": lambda r: -0.25 / (r[0] * r[1] * r[2]),
            "G_dup": lambda r: 0.25 / (r[0] * r[1] * r[2]),
            "G_pp": lambda r: -0.25 / (r[0] * r[1] * r[2]),
        }
        return branch, lambda name, rs: literal[name](rs)
    if branch not in ("d2", "d3", "even"):
        raise DomainError(f"unknown corollary branch {branch!r}")
    return branch, lambda name, rs: g_closed(name, d, rs)


def r2_corollary(d, jet: MetricJet, u, hat_du, hat_ddu, p, hat_div_p, q, *,
                 branch=None, cluster_tol=1e-8):
    """Covariant density via the dimension-specialized closed forms."""
    if jet.dim != d:
        raise DomainError("jet dimension does not match d")
    branch, g_eval = _corollary_geval(d, branch)
    geo = _jet_geo(jet)
    out, _ = _covariant_point(
        d, geo, scalar_curvature(jet),
        np.asarray(u, dtype=complex), np.asarray(hat_du, dtype=complex),
        _contract_hessian(jet.g_inv, hat_ddu),
        np.asarray(p, dtype=complex), np.asarray(hat_div_p, dtype=complex),
        np.asarray(q, dtype=complex), g_eval, cluster_tol,
    )
    return out


def r2_minimal(d, jet: MetricJet, q_prime):
    """Density of a minimal operator (u = 1) in the gauge with p = 0."""
    q_prime = np.asarray(q_prime, dtype=complex)
    if q_prime.ndim != 2 or q_prime.shape[0] != q_prime.shape[1]:
        raise DomainError("q_prime must be a square matrix")
    eye = np.eye(q_prime.shape[0])
    return _prefactor(d) * ((scalar_curvature(jet) / 6.0) * eye + q_prime)


def r2_conformal_like(d, jet: MetricJet, k, dk, lap_k, *, simplified=False,
                      cluster_tol=1e-8, policy=DEFAULT_GAP_POLICY, ifun=None):
    """Density of P = k.Delta.k from the k-field data.

    dk is the (d, N, N) covariant gradient of k and lap_k the Laplacian
    Delta k = -g^{mu nu} (covariant Hessian of k); the positive square
    roots of spec(u), u = k^2, drive the two spectral functions.
    """
    if jet.dim != d:
        raise DomainError("jet dimension does not match d")
    k = np.asarray(k, dtype=complex)
    herm = 0.5 * (k + k.conj().T)
    if np.max(np.abs(k - herm)) > 1e-10 * max(1.0, np.max(np.abs(k))):
        raise DomainError("k must be Hermitian positive definite")
    ifun = _ifun_from(policy, ifun)
    u = k @ k
    dec = spectral_decompose(u, cluster_tol)
    dk = np.asarray(dk, dtype=complex)
    lap_k = np.asarray(lap_k, dtype=complex)
    dk_up = np.einsum("mn,nij->mij", jet.g_inv, dk)

    dk_fn = fconf_dk_simplified if simplified else fconf_dk
    t_dk = sandwich_table(lambda *rs: dk_fn(d, rs, ifun), dec, 1)
    t_dkdk = sandwich_table(lambda *rs: fconf_dkdk(d, rs, ifun), dec, 2)

    out = (scalar_curvature(jet) / 6.0) * dec.apply_function(
        lambda r: r ** (1 - d / 2)
    )
    out = out.astype(complex)
    out += sandwich_sum(None, dec, (lap_k,), table=t_dk)
    out += _pair_terms(dec, t_dkdk, dk, dk_up)
    return _prefactor(d) * out


# --------------------------------------------------------------------------
# grid driver
# --------------------------------------------------------------------------

def _comm_stack(A, f):
    """[A_mu, f] for a (..., d, N, N) connection against (..., N, N) f."""
    return np.einsum("...mij,...jk->...mik", A, f) - np.einsum(
        "...ij,...mjk->...mik", f, A
    )


def _covariant_grid_data(fields: OperatorFields, gm: GridMetric, deriv):
    """Covariant derivative arrays needed by the assembly, on the grid."""
    grid = fields.grid
    u = np.asarray(fields.u, dtype=complex)
    p = np.asarray(fields.v_or_p, dtype=complex)
    q = np.asarray(fields.w_or_q, dtype=complex)
    if fields.A is None:
        A = np.zeros(grid.shape + (grid.dim,) + u.shape[-2:], dtype=complex)
    else:
        A = np.asarray(fields.A, dtype=complex)
    du = fields.du if fields.du is not None else deriv(u)
    hat_du = du + _comm_stack(A, u)
    # full covariant Hessian: d(hat_du) + [A, hat_du] - Gamma . hat_du
    dh = deriv(hat_du)
    hess = (
        dh
        + np.einsum("...mij,...njk->...mnik", A, hat_du)
        - np.einsum("...nij,...mjk->...mnik", hat_du, A)
        - np.einsum("...rmn,...rij->...mnij", gm.gamma, hat_du)
    )
    hat_ddu_g = np.einsum("...mn,...mnij->...ij", gm.g_inv, hess)
    dp = deriv(p)
    hat_div_p = (
        np.einsum("...mmij->...ij", dp)
        + np.einsum("...mij,...mjk->...ik", A, p)
        - np.einsum("...mij,...mjk->...ik", p, A)
        - 0.5 * np.einsum("...m,...mij->...ij", gm.alpha_lo, p)
    )
    return u, hat_du, hat_ddu_g, p, hat_div_p, q


def r2_density(fields: OperatorFields, metric=None, *, form="auto",
               diff="fourier", cluster_tol=1e-8, policy=DEFAULT_GAP_POLICY,
               ifun=None):
    """Assemble R2 over the whole grid into a HeatDensityResult.

    form: "auto" picks the corollary path when the dimension has closed
    forms and the covariant path otherwise; "coordinate", "covariant",
    and "corollary" force the respective assembly.
    diff: "fourier" differentiates sampled fields spectrally (exact for
    trigonometric data); "fd4" uses 4th-order stencils.
    """
    grid = fields.grid
    d = grid.dim
    if metric is None:
        metric = flat_chart(dim=d)
    gm = metric.on_grid(grid)
    if diff == "fourier":
        deriv = lambda arr: fourier_gradient(arr, grid)
    elif diff == "fd4":
        deriv = lambda arr: grid_gradient(arr, grid)
    else:
        raise DomainError(f"unknown differentiation scheme {diff!r}")

    # Fill in derivative fields up front so form conversions use the same
    # differentiation scheme as the assembly instead of their own stencils.
    updates = {}
    if fields.du is None:
        updates["du"] = deriv(np.asarray(fields.u, dtype=complex))
    if fields.A is not None and fields.dA is None:
        updates["dA"] = deriv(np.asarray(fields.A, dtype=complex))
    if updates:
        fields = dataclasses.replace(fields, **updates)

    if form == "auto":
        form = "corollary" if (d in (2, 3) or d % 2 == 0) else "covariant"
    if form not in ("coordinate", "covariant", "corollary"):
        raise DomainError(f"unknown density form {form!r}")

    ifun = _ifun_from(policy, ifun)
    u = np.asarray(fields.u, dtype=complex)
    n = u.shape[-1]
    out = np.empty(grid.shape + (n, n), dtype=complex)
    cluster_counts = {}
    near_tie = 0
    table_cache = {}

    if form == "coordinate":
        f = fields if fields.form == "coordinate" else upq_to_uvw(
            fields, metric
        )
        u = np.asarray(f.u, dtype=complex)
        v = np.asarray(f.v_or_p, dtype=complex)
        w = np.asarray(f.w_or_q, dtype=complex)
        du = f.du if f.du is not None else deriv(u)
        ddu = deriv(du)
        ddu_g = np.einsum("...mn,...mnij->...ij", gm.g_inv, ddu)
        dv = deriv(v)
        div_v = np.einsum("...mmij->...ij", dv)
        for pt in np.ndindex(*grid.shape):
            geo = {
                "g_inv": gm.g_inv[pt], "g_lo": gm.g_lo[pt],
                "a_lo": gm.alpha_lo[pt], "a_up": gm.alpha_up[pt],
                "b_lo": gm.beta_lo[pt], "b_up": gm.beta_up[pt],
            }
            val, dec = _uvw_point(
                d, geo, gm.alpha_coeff[pt], u[pt], du[pt], ddu_g[pt],
                v[pt], div_v[pt], w[pt], ifun, cluster_tol,
            )
            out[pt] = val
            cluster_counts[dec.count] = cluster_counts.get(dec.count, 0) + 1
            if dec.count > 1 and min_rel_gap(dec.values) < policy.tau:
                near_tie += 1
    else:
        fc = fields if fields.form == "covariant" else uvw_to_upq(
            fields, A=None, metric=metric
        )
        uu, hat_du, hat_ddu_g, p, hat_div_p, q = _covariant_grid_data(
            fc, gm, deriv
        )
        if form == "corollary":
            branch, g_eval = _corollary_geval(d, None)
            form = f"corollary-{branch}"
        else:
            g_eval = lambda name, rs: g_value(name, d, rs, ifun)

        def cached_tables(dec):
            key = tuple(dec.values)
            tabs = table_cache.get(key)
            if tabs is None:
                tabs = {
                    name: sandwich_table(
                        lambda *rs: g_eval(name, rs), dec, k
                    )
                    for name, k in (
                        ("G_q", 1), ("G_ddu", 1), ("G_dp", 1),
                        ("G_dudu", 2), ("G_pdu", 2), ("G_dup", 2),
                        ("G_pp", 2),
                    )
                }
                table_cache[key] = tabs
            return tabs

        pref = _prefactor(d)
        for pt in np.ndindex(*grid.shape):
            dec = spectral_decompose(uu[pt], cluster_tol)
            tabs = cached_tables(dec)
            g_inv, g_lo = gm.g_inv[pt], gm.g_lo[pt]
            du_up = np.einsum("mn,nij->mij", g_inv, hat_du[pt])
            p_lo = np.einsum("mn,nij->mij", g_lo, p[pt])
            val = (gm.curvature[pt] / 6.0) * dec.apply_function(
                lambda r: r ** (1 - d / 2)
            )
            val = val.astype(complex)
            val += sandwich_sum(None, dec, (q[pt],), table=tabs["G_q"])
            val += sandwich_sum(
                None, dec, (hat_ddu_g[pt],), table=tabs["G_ddu"]
            )
            val += sandwich_sum(
                None, dec, (hat_div_p[pt],), table=tabs["G_dp"]
            )
            val += _pair_terms(dec, tabs["G_dudu"], hat_du[pt], du_up)
            val += _pair_terms(dec, tabs["G_pdu"], p[pt], hat_du[pt])
            val += _pair_terms(dec, tabs["G_dup"], hat_du[pt], p[pt])
            val += _pair_terms(dec, tabs["G_pp"], p[pt], p_lo)
            out[pt] = pref * val
            cluster_counts[dec.count] = cluster_counts.get(dec.count, 0) + 1
            if dec.count > 1 and min_rel_gap(dec.values) < policy.tau:
                near_tie += 1

    meta = {
        "cluster_counts": cluster_counts,
        "near_tie_points": near_tie,
        "diff": diff,
    }
    return HeatDensityResult(
        R2=out, form_used=form, metadata=meta, grid=grid, metric=gm
    )


# --------------------------------------------------------------------------
# integration
# --------------------------------------------------------------------------

def a2_integrate(a, result: HeatDensityResult, measure="g", h=None):
    """Integrate tr(a R2) against the chosen volume element.

    measure "g" uses the metric attached to the result; "h" weights the
    density by |g|^(1/2) |h|^(-1/2) and integrates against dvol_h (the two
    factors cancel, which is the point of the bookkeeping); "phi0" divides
    the g-integral by total volume times fiber dimension.
    """
    if result.grid is None or result.metric is None:
        raise DomainError("result carries no grid/metric to integrate with")
    grid, gm = result.grid, result.metric
    a = np.asarray(a, dtype=complex)
    if a.shape != result.R2.shape:
        raise DomainError("a and R2 must share the same grid and fiber shape")
    integrand = np.einsum("...ij,...ji->...", a, result.R2).real
    cell = grid.cell_volume
    if measure == "g":
        return float(np.sum(integrand * gm.sqrt_det) * cell)
    if measure == "h":
        if h is None:
            raise DomainError("measure 'h' needs the h metric")
        sqrt_det_h = h.sqrt_det if isinstance(h, GridMetric) else np.asarray(h)
        if sqrt_det_h.shape != grid.shape:
            raise DomainError("h volume factor does not match the grid")
        if np.any(sqrt_det_h <= 0):
            raise DomainError("measure metric must be positive")
        density_factor = gm.sqrt_det / sqrt_det_h
        return float(np.sum(integrand * density_factor * sqrt_det_h) * cell)
    if measure == "phi0":
        vol = float(np.sum(gm.sqrt_det) * cell)
        n = result.R2.shape[-1]
        return float(np.sum(integrand * gm.sqrt_det) * cell / (vol * n))
    raise DomainError(f"unknown measure {measure!r}")
