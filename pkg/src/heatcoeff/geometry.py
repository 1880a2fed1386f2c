"""Chart-level metric calculus and operator-field plumbing.

Conventions used throughout the package:

* metric data lives in the *inverse* metric g^{mu nu} and its partial
  derivatives (the operator symbol is g^{mu nu} u, so the inverse is primary);
* array layout is grid axes first, then coordinate indices, then fiber matrix
  indices last, e.g. a first-order field is (*grid, d, N, N) -- this lets
  numpy.linalg batch over grid points and einsum contract with a leading '...';
* dg_inv[..., rho, mu, nu] = d_rho g^{mu nu},
  ddg_inv[..., rho, sigma, mu, nu] = d_rho d_sigma g^{mu nu};
* alpha_mu = g_{rho sigma} d_mu g^{rho sigma}, beta^mu = d_nu g^{nu mu},
  indices raised/lowered with g.

The coordinate form of the operator is P = -(g^{mu nu} u d_mu d_nu
+ v^nu d_nu + w); the covariant form is P = -(g^{mu nu} nabla_mu u nabla_nu
+ p^nu nabla_nu + q) with nabla = d + A (and the Levi-Civita part acting on
coordinate indices).  Matching the two expansions gives the conversion
implemented in :func:`uvw_to_upq` / :func:`upq_to_uvw`, and shifting the
connection by phi gives :func:`gauge_shift`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import sympy as sp

from .errors import DomainError

__all__ = [
    "AnalyticChart",
    "ConstantMetric",
    "GaugeShift",
    "Grid",
    "GridMetric",
    "MetricJet",
    "OperatorFields",
    "alpha_beta",
    "alpha_coefficient",
    "christoffel",
    "exp_diag_chart",
    "flat_chart",
    "fourier_gradient",
    "fourier_partial",
    "gauge_shift",
    "grid_gradient",
    "grid_partial",
    "pullback_flat_chart",
    "random_trig_chart",
    "scalar_curvature",
    "solve_phi_p_zero",
    "solve_phi_p_zero_cosh",
    "sphere_chart",
    "uvw_to_upq",
    "upq_to_uvw",
]

_SYM_TOL = 1e-10


# --------------------------------------------------------------------------
# metric jets (single chart point)
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MetricJet:
    """Inverse metric with first and second partials at one chart point."""

    g_inv: np.ndarray
    dg_inv: np.ndarray
    ddg_inv: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g_inv, dtype=float)
        d = g.shape[-1]
        dg = np.asarray(self.dg_inv, dtype=float)
        ddg = np.asarray(self.ddg_inv, dtype=float)
        if g.shape != (d, d) or dg.shape != (d, d, d) or ddg.shape != (d,) * 4:
            raise DomainError("metric jet arrays must be (d,d), (d,d,d), (d,d,d,d)")
        if not np.allclose(g, g.T, atol=_SYM_TOL * max(1.0, np.abs(g).max())):
            raise DomainError("g_inv must be symmetric")
        if np.linalg.eigvalsh(0.5 * (g + g.T)).min() <= 0:
            raise DomainError("g_inv must be positive definite")
        scale = max(1.0, np.abs(dg).max())
        if not np.allclose(dg, np.swapaxes(dg, 1, 2), atol=_SYM_TOL * scale):
            raise DomainError("dg_inv must be symmetric in the metric indices")
        scale = max(1.0, np.abs(ddg).max())
        if not np.allclose(ddg, np.swapaxes(ddg, 2, 3), atol=_SYM_TOL * scale):
            raise DomainError("ddg_inv must be symmetric in the metric indices")
        if not np.allclose(ddg, np.swapaxes(ddg, 0, 1), atol=_SYM_TOL * scale):
            raise DomainError("ddg_inv must be symmetric in the derivative indices")
        object.__setattr__(self, "g_inv", g)
        object.__setattr__(self, "dg_inv", dg)
        object.__setattr__(self, "ddg_inv", ddg)

    @property
    def dim(self):
        return self.g_inv.shape[-1]

    @classmethod
    def flat(cls, g_inv):
        g_inv = np.asarray(g_inv, dtype=float)
        d = g_inv.shape[-1]
        return cls(g_inv, np.zeros((d, d, d)), np.zeros((d, d, d, d)))


# core tensor routines: all accept arrays with arbitrary leading (grid) axes

def _lowered(g_inv, dg_inv, ddg_inv=None):
    g_lo = np.linalg.inv(g_inv)
    dg_lo = -np.einsum("...ma,...rab,...bn->...rmn", g_lo, dg_inv, g_lo)
    if ddg_inv is None:
        return g_lo, dg_lo
    ddg_lo = -(
        np.einsum("...sma,...rab,...bn->...rsmn", dg_lo, dg_inv, g_lo)
        + np.einsum("...ma,...rsab,...bn->...rsmn", g_lo, ddg_inv, g_lo)
        + np.einsum("...ma,...rab,...sbn->...rsmn", g_lo, dg_inv, dg_lo)
    )
    return g_lo, dg_lo, ddg_lo


def _christoffel_core(g_inv, dg_lo):
    # Gamma^nu_{mu rho} = 1/2 g^{nu sigma}(d_mu g_{sigma rho}
    #                     + d_rho g_{sigma mu} - d_sigma g_{mu rho})
    return 0.5 * (
        np.einsum("...ns,...msr->...nmr", g_inv, dg_lo)
        + np.einsum("...ns,...rsm->...nmr", g_inv, dg_lo)
        - np.einsum("...ns,...smr->...nmr", g_inv, dg_lo)
    )


def _dchristoffel_core(g_inv, dg_inv, dg_lo, ddg_lo):
    # d_tau Gamma^nu_{mu rho}, layout [..., tau, nu, mu, rho]
    dS = (
        np.einsum("...ns,...mtsr->...tnmr", g_inv, ddg_lo)
        + np.einsum("...ns,...rtsm->...tnmr", g_inv, ddg_lo)
        - np.einsum("...ns,...stmr->...tnmr", g_inv, ddg_lo)
    )
    dG = (
        np.einsum("...tns,...msr->...tnmr", dg_inv, dg_lo)
        + np.einsum("...tns,...rsm->...tnmr", dg_inv, dg_lo)
        - np.einsum("...tns,...smr->...tnmr", dg_inv, dg_lo)
    )
    return 0.5 * (dG + dS)


def _alpha_beta_core(g_inv, dg_inv, g_lo):
    alpha_lo = np.einsum("...rs,...mrs->...m", g_lo, dg_inv)
    beta_up = np.einsum("...rrm->...m", dg_inv)
    alpha_up = np.einsum("...mn,...n->...m", g_inv, alpha_lo)
    beta_lo = np.einsum("...mn,...n->...m", g_lo, beta_up)
    return alpha_lo, alpha_up, beta_lo, beta_up


def _scalar_curvature_core(g_inv, dg_inv, ddg_inv):
    g_lo, dg_lo, ddg_lo = _lowered(g_inv, dg_inv, ddg_inv)
    gam = _christoffel_core(g_inv, dg_lo)
    dgam = _dchristoffel_core(g_inv, dg_inv, dg_lo, ddg_lo)
    # Ricci_{sigma nu} = d_mu Gamma^mu_{nu sigma} - d_nu Gamma^mu_{mu sigma}
    #                    + Gamma^mu_{mu lam} Gamma^lam_{nu sigma}
    #                    - Gamma^mu_{nu lam} Gamma^lam_{mu sigma}
    ricci = (
        np.einsum("...mmns->...sn", dgam)
        - np.einsum("...nmms->...sn", dgam)
        + np.einsum("...mml,...lns->...sn", gam, gam)
        - np.einsum("...mnl,...lms->...sn", gam, gam)
    )
    return np.einsum("...sn,...sn->...", g_inv, ricci)


def _alpha_coefficient_core(g_inv, dg_inv, ddg_inv, g_lo):
    t1 = np.einsum("...mnmn->...", ddg_inv) / 3.0
    t2 = -np.einsum("...mn,...rs,...mnrs->...", g_inv, g_lo, ddg_inv) / 12.0
    t3 = np.einsum(
        "...mn,...rs,...ab,...mrs,...nab->...", g_inv, g_lo, g_lo, dg_inv, dg_inv
    ) / 48.0
    t4 = np.einsum(
        "...mn,...rs,...ab,...mra,...nsb->...", g_inv, g_lo, g_lo, dg_inv, dg_inv
    ) / 24.0
    t5 = -np.einsum("...rs,...mmn,...nrs->...", g_lo, dg_inv, dg_inv) / 12.0
    t6 = np.einsum("...rs,...mnr,...nms->...", g_lo, dg_inv, dg_inv) / 12.0
    t7 = -np.einsum("...rs,...mmr,...nns->...", g_lo, dg_inv, dg_inv) / 4.0
    return t1 + t2 + t3 + t4 + t5 + t6 + t7


def christoffel(jet: MetricJet):
    """Christoffel symbols Gamma^nu_{mu rho} (layout [nu, mu, rho])."""
    _, dg_lo = _lowered(jet.g_inv, jet.dg_inv)
    return _christoffel_core(jet.g_inv, dg_lo)


def alpha_beta(jet: MetricJet):
    """Return (alpha_mu, alpha^mu, beta_mu, beta^mu) of the jet."""
    g_lo = np.linalg.inv(jet.g_inv)
    return _alpha_beta_core(jet.g_inv, jet.dg_inv, g_lo)


def scalar_curvature(jet: MetricJet):
    """Scalar curvature R from the standard Riemann contraction."""
    return float(_scalar_curvature_core(jet.g_inv, jet.dg_inv, jet.ddg_inv))


def alpha_coefficient(jet: MetricJet):
    """The seven-term non-covariant coefficient multiplying r0^(1-d/2) E_{r0}.

    Built purely from first and second metric derivatives; combined with the
    alpha/beta correction terms it reproduces R/6 (see the identity test).
    """
    g_lo = np.linalg.inv(jet.g_inv)
    return float(_alpha_coefficient_core(jet.g_inv, jet.dg_inv, jet.ddg_inv, g_lo))


def alpha_beta_divergences(jet: MetricJet):
    """Return (d_mu alpha^mu, d_mu beta^mu); needed by the R/6 identity."""
    g_lo, dg_lo = _lowered(jet.g_inv, jet.dg_inv)
    alpha_lo = np.einsum("...rs,...mrs->...m", g_lo, jet.dg_inv)
    # d_mu alpha_nu = (d_mu g_lo)_{rs} (d_nu g_inv)^{rs} + g_lo_{rs} dd g^{rs}
    dalpha_lo = np.einsum("...mrs,...nrs->...mn", dg_lo, jet.dg_inv) + np.einsum(
        "...rs,...mnrs->...mn", g_lo, jet.ddg_inv
    )
    div_alpha = float(
        np.einsum("...mmn,...n->...", jet.dg_inv, alpha_lo)
        + np.einsum("...mn,...mn->...", jet.g_inv, dalpha_lo)
    )
    div_beta = float(np.einsum("...mnnm->...", jet.ddg_inv))
    return div_alpha, div_beta


# --------------------------------------------------------------------------
# metric suppliers: constant metric and analytic charts
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform periodic lattice on a torus [0, L_1) x ... x [0, L_d)."""

    lengths: tuple
    shape: tuple

    def __post_init__(self):
        if len(self.lengths) != len(self.shape):
            raise DomainError("lengths and shape must have equal rank")
        if any(n < 5 for n in self.shape):
            raise DomainError("need at least 5 points per axis for 4th-order stencils")
        object.__setattr__(self, "lengths", tuple(float(x) for x in self.lengths))
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))

    @property
    def dim(self):
        return len(self.shape)

    @property
    def spacings(self):
        return tuple(L / n for L, n in zip(self.lengths, self.shape))

    def axes(self):
        return [
            np.linspace(0.0, L, n, endpoint=False)
            for L, n in zip(self.lengths, self.shape)
        ]

    def meshes(self):
        return np.meshgrid(*self.axes(), indexing="ij")

    @property
    def cell_volume(self):
        return math.prod(self.spacings)


@dataclass(frozen=True, eq=False)
class GridMetric:
    """Metric tensors evaluated on a grid (grid axes leading everywhere)."""

    g_inv: np.ndarray    # (*shape, d, d)
    g_lo: np.ndarray
    alpha_lo: np.ndarray  # (*shape, d)
    alpha_up: np.ndarray
    beta_lo: np.ndarray
    beta_up: np.ndarray
    gamma: np.ndarray     # (*shape, d, d, d)
    sqrt_det: np.ndarray  # (*shape,)
    curvature: np.ndarray  # (*shape,)
    alpha_coeff: np.ndarray  # (*shape,)


def _grid_metric_from_arrays(g_inv, dg_inv, ddg_inv):
    g_lo, dg_lo = _lowered(g_inv, dg_inv)
    a_lo, a_up, b_lo, b_up = _alpha_beta_core(g_inv, dg_inv, g_lo)
    return GridMetric(
        g_inv=g_inv,
        g_lo=g_lo,
        alpha_lo=a_lo,
        alpha_up=a_up,
        beta_lo=b_lo,
        beta_up=b_up,
        gamma=_christoffel_core(g_inv, dg_lo),
        sqrt_det=np.linalg.det(g_inv) ** -0.5,
        curvature=_scalar_curvature_core(g_inv, dg_inv, ddg_inv),
        alpha_coeff=_alpha_coefficient_core(g_inv, dg_inv, ddg_inv, g_lo),
    )


class ConstantMetric:
    """Position-independent metric (flat torus)."""

    def __init__(self, g_inv):
        g_inv = np.asarray(g_inv, dtype=float)
        self.jet = MetricJet.flat(g_inv)
        self.dim = self.jet.dim

    def jet_at(self, x):
        return self.jet

    def on_grid(self, grid: Grid):
        d = self.dim
        if grid.dim != d:
            raise DomainError("grid dimension does not match the metric")
        tile = grid.shape + (1,) * 2
        g_inv = np.tile(self.jet.g_inv, tile)
        zeros3 = np.zeros(grid.shape + (d, d, d))
        zeros4 = np.zeros(grid.shape + (d, d, d, d))
        return _grid_metric_from_arrays(g_inv, zeros3, zeros4)


class AnalyticChart:
    """Metric chart defined by a sympy expression for the inverse metric.

    Symbolic differentiation supplies exact first and second derivatives, so
    curvature identities hold to rounding error rather than stencil error.
    """

    def __init__(self, g_inv_expr, coords):
        self.coords = tuple(coords)
        d = len(self.coords)
        self.dim = d
        g = sp.Matrix(g_inv_expr)
        if g.shape != (d, d):
            raise DomainError("inverse-metric expression must be d x d")
        dg = [[[sp.diff(g[m, n], self.coords[r]) for n in range(d)] for m in range(d)]
              for r in range(d)]
        ddg = [[[[sp.diff(dg[r][m][n], self.coords[s]) for n in range(d)]
                 for m in range(d)] for s in range(d)] for r in range(d)]
        lam = lambda e: sp.lambdify(self.coords, e, "numpy")
        self._g = [[lam(g[m, n]) for n in range(d)] for m in range(d)]
        self._dg = [[[lam(dg[r][m][n]) for n in range(d)] for m in range(d)]
                    for r in range(d)]
        self._ddg = [[[[lam(ddg[r][s][m][n]) for n in range(d)] for m in range(d)]
                      for s in range(d)] for r in range(d)]

    def _tensor(self, fns, idx_shape, pts, base_shape):
        out = np.empty(base_shape + idx_shape)
        for idx in np.ndindex(*idx_shape):
            fn = fns
            for i in idx:
                fn = fn[i]
            val = np.asarray(fn(*pts), dtype=float)
            out[(Ellipsis,) + idx] = np.broadcast_to(val, base_shape)
        return out

    def jet_at(self, x):
        d = self.dim
        pts = tuple(float(c) for c in x)
        return MetricJet(
            self._tensor(self._g, (d, d), pts, ()),
            self._tensor(self._dg, (d, d, d), pts, ()),
            self._tensor(self._ddg, (d, d, d, d), pts, ()),
        )

    def on_grid(self, grid: Grid):
        d = self.dim
        if grid.dim != d:
            raise DomainError("grid dimension does not match the chart")
        pts = tuple(grid.meshes())
        g_inv = self._tensor(self._g, (d, d), pts, grid.shape)
        dg_inv = self._tensor(self._dg, (d, d, d), pts, grid.shape)
        ddg_inv = self._tensor(self._ddg, (d, d, d, d), pts, grid.shape)
        return _grid_metric_from_arrays(g_inv, dg_inv, ddg_inv)


def flat_chart(g_inv=None, dim=2):
    """Constant metric; defaults to the identity in the given dimension."""
    if g_inv is None:
        g_inv = np.eye(dim)
    return ConstantMetric(g_inv)


def exp_diag_chart():
    """g_{mu nu} = diag(1, e^{2 x1}) in d=2 (hyperbolic-like test chart)."""
    x1, x2 = sp.symbols("x1 x2")
    return AnalyticChart([[1, 0], [0, sp.exp(-2 * x1)]], (x1, x2))


def sphere_chart():
    """Round 2-sphere polar chart g_{mu nu} = diag(1, sin^2 x1); R = 2."""
    x1, x2 = sp.symbols("x1 x2")
    return AnalyticChart([[1, 0], [0, 1 / sp.sin(x1) ** 2]], (x1, x2))


def pullback_flat_chart(eps=0.1):
    """Flat metric in a wavy chart: pullback of the identity by x -> x + eps sin x.

    Each diagonal entry of the lowered metric is (1 + eps cos x_i)^2, so all
    alpha/beta quantities are nonzero while R = 0 identically.
    """
    x1, x2 = sp.symbols("x1 x2")
    return AnalyticChart(
        [[(1 + eps * sp.cos(x1)) ** -2, 0], [0, (1 + eps * sp.cos(x2)) ** -2]],
        (x1, x2),
    )


def random_trig_chart(seed, dim=2, amplitude=0.12):
    """Random analytic torus chart: identity plus small trigonometric waves.

    Amplitudes are kept small enough that g stays positive definite on the
    whole torus; used for randomized curvature-identity checks.
    """
    rng = np.random.default_rng(seed)
    xs = sp.symbols(f"x1:{dim + 1}")
    g = sp.zeros(dim, dim)
    for m in range(dim):
        for n in range(m, dim):
            a = amplitude * rng.uniform(0.3, 1.0)
            k1, k2 = rng.integers(1, 3, size=2)
            ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
            wave = a * sp.cos(k1 * xs[m % dim] + ph1) * sp.cos(k2 * xs[n % dim] + ph2)
            if m == n:
                g[m, n] = 1 + wave
            else:
                g[m, n] = wave / 2
                g[n, m] = wave / 2
    return AnalyticChart(g, xs)


# --------------------------------------------------------------------------
# operator fields on periodic grids
# --------------------------------------------------------------------------

def _is_hermitian(a, tol=1e-10):
    scale = max(1.0, float(np.abs(a).max()))
    return bool(np.abs(a - np.conj(np.swapaxes(a, -1, -2))).max() <= tol * scale)


@dataclass(eq=False)
class OperatorFields:
    """Matrix coefficient fields of P sampled on a periodic grid.

    form "coordinate" stores (u, v^mu, w); form "covariant" stores
    (u, p^mu, q) together with the connection A_mu.  Layouts: u and the
    zeroth-order field are (*grid, N, N); first-order fields are
    (*grid, d, N, N); the optional analytic-derivative overrides du
    (*grid, d, N, N) and dA (*grid, d, d, N, N) bypass grid stencils.
    """

    form: str
    grid: Grid
    u: np.ndarray
    v_or_p: np.ndarray
    w_or_q: np.ndarray
    A: np.ndarray | None = None
    du: np.ndarray | None = field(default=None, repr=False)
    dA: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.form not in ("coordinate", "covariant"):
            raise DomainError(f"unknown operator-field form {self.form!r}")
        u = np.asarray(self.u, dtype=complex)
        shape, d = self.grid.shape, self.grid.dim
        if u.ndim != len(shape) + 2 or u.shape[: len(shape)] != shape:
            raise DomainError("u must have shape (*grid, N, N)")
        n = u.shape[-1]
        if u.shape[-2] != n:
            raise DomainError("fiber matrices must be square")
        vp = np.asarray(self.v_or_p, dtype=complex)
        wq = np.asarray(self.w_or_q, dtype=complex)
        if vp.shape != shape + (d, n, n):
            raise DomainError("first-order field must have shape (*grid, d, N, N)")
        if wq.shape != shape + (n, n):
            raise DomainError("zeroth-order field must have shape (*grid, N, N)")
        if not _is_hermitian(u):
            raise DomainError("u must be Hermitian at every grid point")
        if np.linalg.eigvalsh(u).min() <= 0:
            raise DomainError("u must be positive definite at every grid point")
        if self.A is not None:
            # NB: an anti-Hermitian A is the unitary-connection starting point,
            # but gauge shifts produce general connections, so only the shape
            # is enforced here.
            A = np.asarray(self.A, dtype=complex)
            if A.shape != shape + (d, n, n):
                raise DomainError("connection must have shape (*grid, d, N, N)")
            self.A = A
        self.u, self.v_or_p, self.w_or_q = u, vp, wq

    @property
    def fiber_dim(self):
        return self.u.shape[-1]


@dataclass(frozen=True, eq=False)
class GaugeShift:
    """Connection shift phi_mu, stored as (*grid, d, N, N) (or (d, N, N))."""

    phi: np.ndarray
    dphi: np.ndarray | None = None  # optional analytic d_mu phi_nu


def grid_partial(arr, grid: Grid, axis):
    """4th-order periodic central difference along the given grid axis."""
    h = grid.spacings[axis]
    f1 = np.roll(arr, -1, axis)
    f2 = np.roll(arr, -2, axis)
    b1 = np.roll(arr, 1, axis)
    b2 = np.roll(arr, 2, axis)
    return (-f2 + 8 * f1 - 8 * b1 + b2) / (12 * h)


def grid_gradient(arr, grid: Grid):
    """Stack d_mu arr along a new index axis placed right after the grid axes."""
    parts = [grid_partial(arr, grid, a) for a in range(grid.dim)]
    return np.stack(parts, axis=grid.dim)


def fourier_partial(arr, grid: Grid, axis):
    """Differentiate a periodic sampling along one grid axis in Fourier space.

    Exact (to rounding) for trigonometric polynomials resolved by the grid;
    the unmatched Nyquist mode on even-length axes is dropped, which is the
    usual convention for spectral differentiation of real data.
    """
    n = grid.shape[axis]
    freqs = np.fft.fftfreq(n, d=grid.spacings[axis])
    mult = 2j * np.pi * freqs
    if n % 2 == 0:
        mult[n // 2] = 0.0
    shape = [1] * arr.ndim
    shape[axis] = n
    spec = np.fft.fft(np.asarray(arr, dtype=complex), axis=axis)
    out = np.fft.ifft(spec * mult.reshape(shape), axis=axis)
    if np.isrealobj(arr):
        return out.real
    return out


def fourier_gradient(arr, grid: Grid):
    """Like grid_gradient but with spectral (FFT) differentiation."""
    parts = [fourier_partial(arr, grid, a) for a in range(grid.dim)]
    return np.stack(parts, axis=grid.dim)


def _mul(a, b):
    return np.einsum("...ij,...jk->...ik", a, b)


def _comm(a, b):
    return _mul(a, b) - _mul(b, a)


def _half_alpha_minus_beta(gm: GridMetric):
    return 0.5 * gm.alpha_up - gm.beta_up


def uvw_to_upq(fields: OperatorFields, A=None, metric=None, dA=None):
    """Convert coordinate fields (u, v, w) to covariant (u, p, q) for a
    chosen connection A (zero if omitted).

    p^nu = v^nu - 2 g^{mu nu} u A_mu - g^{mu nu}(d_mu u + [A_mu, u])
           + (alpha^nu/2 - beta^nu) u
    q    = w - g^{mu nu} u (d_mu A_nu + A_mu A_nu) - B^nu A_nu,
    B^nu = v^nu - 2 g^{mu nu} u A_mu.
    """
    if fields.form != "coordinate":
        raise DomainError("uvw_to_upq expects coordinate-form fields")
    grid = fields.grid
    if metric is None:
        metric = flat_chart(dim=grid.dim)
    gm = metric.on_grid(grid)
    u, v, w = fields.u, fields.v_or_p, fields.w_or_q
    shape = grid.shape + (grid.dim,) + u.shape[-2:]
    if A is None:
        A = np.zeros(shape, dtype=complex)
        dA = np.zeros(grid.shape + (grid.dim, grid.dim) + u.shape[-2:], dtype=complex)
    else:
        A = np.asarray(A, dtype=complex)
        if dA is None:
            dA = np.stack(
                [grid_partial(A, grid, a) for a in range(grid.dim)], axis=grid.dim
            )
    du = fields.du if fields.du is not None else grid_gradient(u, grid)

    uA = np.einsum("...mn,...ij,...mjk->...nik", gm.g_inv, u, A)
    nabla_u = du + np.einsum("...mij,...jk->...mik", A, u) - np.einsum(
        "...ij,...mjk->...mik", u, A
    )
    hab = _half_alpha_minus_beta(gm)
    p = (
        v
        - 2.0 * uA
        - np.einsum("...mn,...mij->...nij", gm.g_inv, nabla_u)
        + np.einsum("...n,...ij->...nij", hab, u)
    )
    B = v - 2.0 * uA
    q = (
        w
        - np.einsum("...mn,...ij,...mnjk->...ik", gm.g_inv, u, dA)
        - np.einsum("...mn,...ij,...mjl,...nlk->...ik", gm.g_inv, u, A, A)
        - np.einsum("...nij,...njk->...ik", B, A)
    )
    return OperatorFields(
        form="covariant", grid=grid, u=u, v_or_p=p, w_or_q=q, A=A, du=fields.du,
        dA=dA,
    )


def upq_to_uvw(fields: OperatorFields, metric=None):
    """Inverse of :func:`uvw_to_upq` (same connection, same grid)."""
    if fields.form != "covariant":
        raise DomainError("upq_to_uvw expects covariant-form fields")
    grid = fields.grid
    if metric is None:
        metric = flat_chart(dim=grid.dim)
    gm = metric.on_grid(grid)
    u, p, q = fields.u, fields.v_or_p, fields.w_or_q
    A = fields.A
    if A is None:
        A = np.zeros_like(p)
    dA = fields.dA if fields.dA is not None else np.stack(
        [grid_partial(A, grid, a) for a in range(grid.dim)], axis=grid.dim
    )
    du = fields.du if fields.du is not None else grid_gradient(u, grid)

    uA = np.einsum("...mn,...ij,...mjk->...nik", gm.g_inv, u, A)
    nabla_u = du + np.einsum("...mij,...jk->...mik", A, u) - np.einsum(
        "...ij,...mjk->...mik", u, A
    )
    hab = _half_alpha_minus_beta(gm)
    v = (
        p
        + 2.0 * uA
        + np.einsum("...mn,...mij->...nij", gm.g_inv, nabla_u)
        - np.einsum("...n,...ij->...nij", hab, u)
    )
    B = v - 2.0 * uA
    w = (
        q
        + np.einsum("...mn,...ij,...mnjk->...ik", gm.g_inv, u, dA)
        + np.einsum("...mn,...ij,...mjl,...nlk->...ik", gm.g_inv, u, A, A)
        + np.einsum("...nij,...njk->...ik", B, A)
    )
    return OperatorFields(
        form="coordinate", grid=grid, u=u, v_or_p=v, w_or_q=w, A=None, du=fields.du,
    )


def gauge_shift(fields: OperatorFields, shift: GaugeShift, metric=None):
    """Shift the connection by phi: A' = A + phi,
    p'^nu = p^nu - g^{mu nu}(u phi_mu + phi_mu u),
    q' = q - g^{mu nu} nabla-hat_mu(u phi_nu) + g^{mu nu} u phi_mu phi_nu
         - p^mu phi_mu,
    with nabla-hat_mu(u phi_nu) = d_mu(u phi_nu) + [A_mu, u phi_nu]
    - Gamma^rho_{mu nu} u phi_rho (the Christoffel contraction reduces to
    (alpha^rho/2 - beta^rho) u phi_rho under g^{mu nu})."""
    if fields.form != "covariant":
        raise DomainError("gauge_shift expects covariant-form fields")
    grid = fields.grid
    if metric is None:
        metric = flat_chart(dim=grid.dim)
    gm = metric.on_grid(grid)
    u, p, q = fields.u, fields.v_or_p, fields.w_or_q
    phi = np.asarray(shift.phi, dtype=complex)
    if phi.shape != p.shape:
        raise DomainError("phi must have the shape of the first-order field")
    A = fields.A
    if A is None:
        A = np.zeros_like(p)
    du = fields.du if fields.du is not None else grid_gradient(u, grid)
    uphi = np.einsum("...ij,...njk->...nik", u, phi)
    if shift.dphi is not None:
        d_uphi = np.einsum("...mij,...njk->...mnik", du, phi) + np.einsum(
            "...ij,...mnjk->...mnik", u, shift.dphi
        )
    else:
        d_uphi = np.stack(
            [grid_partial(uphi, grid, a) for a in range(grid.dim)], axis=grid.dim
        )

    p_new = p - np.einsum("...mn,...mij->...nij", gm.g_inv, uphi) - np.einsum(
        "...mn,...mij,...jk->...nik", gm.g_inv, phi, u
    )
    hab = _half_alpha_minus_beta(gm)
    nabla_uphi = np.einsum("...mn,...mnij->...ij", gm.g_inv, d_uphi)
    nabla_uphi += np.einsum(
        "...mn,...mij,...njk->...ik", gm.g_inv, A, uphi
    ) - np.einsum("...mn,...nij,...mjk->...ik", gm.g_inv, uphi, A)
    nabla_uphi -= np.einsum("...n,...nij->...ij", hab, uphi)
    q_new = (
        q
        - nabla_uphi
        + np.einsum("...mn,...ij,...mjl,...nlk->...ik", gm.g_inv, u, phi, phi)
        - np.einsum("...nij,...njk->...ik", p, phi)
    )
    new_dA = None
    if fields.dA is not None and shift.dphi is not None:
        new_dA = fields.dA + shift.dphi
    return OperatorFields(
        form="covariant", grid=grid, u=u, v_or_p=p_new, w_or_q=q_new,
        A=A + phi, du=fields.du, dA=new_dA,
    )


# --------------------------------------------------------------------------
# the p = 0 gauge (Sylvester solve)
# --------------------------------------------------------------------------

def solve_phi_p_zero(u, p, g_inv):
    """Solve u X^nu + X^nu u = p^nu spectrally and lower the index:
    phi_mu = g_{mu nu} X^nu.  Batched over any leading grid axes.

    In the eigenbasis of u the solution is X_ab = p_ab / (r_a + r_b), always
    well posed for positive definite u.
    """
    u = np.asarray(u, dtype=complex)
    p = np.asarray(p, dtype=complex)
    g_inv = np.asarray(g_inv, dtype=float)
    if not _is_hermitian(u):
        raise DomainError("u must be Hermitian")
    lam, vec = np.linalg.eigh(u)
    if lam.min() <= 0:
        raise DomainError("u must be positive definite")
    denom = lam[..., :, None] + lam[..., None, :]
    vh = np.conj(np.swapaxes(vec, -1, -2))
    ptil = np.einsum("...ij,...njk,...kl->...nil", vh, p, vec)
    x = np.einsum("...ij,...njk,...kl->...nil", vec, ptil / denom[..., None, :, :], vh)
    g_lo = np.linalg.inv(g_inv)
    phi = np.einsum("...mn,...nij->...mij", g_lo, x)
    return GaugeShift(phi=phi)


def solve_phi_p_zero_cosh(u, p, g_inv, t_max=20.0, panels=16, order=20):
    """Independent integral-representation solver for the p = 0 gauge:

        X^nu = 1/2 integral dt  u^{it - 1/2} p^nu u^{-it - 1/2} / cosh(pi t)

    truncated at |t| <= t_max (the integrand decays like e^{-pi |t|}, so the
    tail is below 1e-27 relative) and integrated by composite Gauss-Legendre.
    """
    u = np.asarray(u, dtype=complex)
    p = np.asarray(p, dtype=complex)
    lam, vec = np.linalg.eigh(u)
    if lam.min() <= 0:
        raise DomainError("u must be positive definite")
    vh = np.conj(np.swapaxes(vec, -1, -2))
    ptil = np.einsum("...ij,...njk,...kl->...nil", vh, p, vec)
    xn, wn = np.polynomial.legendre.leggauss(order)
    acc = np.zeros_like(ptil)
    ln = np.log(lam)
    for k in range(panels):
        a = -t_max + 2 * t_max * k / panels
        b = a + 2 * t_max / panels
        ts = 0.5 * (b - a) * xn + 0.5 * (a + b)
        ws = 0.5 * (b - a) * wn
        for t, wgt in zip(ts, ws):
            left = lam ** -0.5 * np.exp(1j * t * ln)
            right = lam ** -0.5 * np.exp(-1j * t * ln)
            kernel = wgt / (2.0 * math.cosh(math.pi * t))
            acc = acc + kernel * (
                left[..., None, :, None] * ptil * right[..., None, None, :]
            )
    x = np.einsum("...ij,...njk,...kl->...nil", vec, acc, vh)
    g_lo = np.linalg.inv(np.asarray(g_inv, dtype=float))
    phi = np.einsum("...mn,...nij->...mij", g_lo, x)
    return GaugeShift(phi=phi)
