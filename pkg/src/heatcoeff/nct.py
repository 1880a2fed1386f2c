"""Rational noncommutative torus and its modular scalar curvature.

The 2m-dimensional torus algebra at rational deformation parameters
theta_i = p_i/q_i is handled concretely: elements are finitely supported
Fourier series in the generating unitaries, the fiber is the matrix
algebra spanned by clock and shift matrices, and the canonical
derivations act diagonally on coefficients.  On top of that sit the two
conformally deformed Laplacians of the two-torus and their curvature
density (computed through the general machinery and revalidated against
dedicated closed forms), the four-torus analogue, and the
modular-operator toolbox that translates the k-derivative picture into
the log-k-derivative picture: rearrangement of spectral sums, the g1/g2
change of arguments, and the r0-independent curvature functions.
"""

from __future__ import annotations

import cmath
import inspect
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache, reduce

import numpy as np

from .density import r2_conformal_like, r2_local_upq
from .errors import DomainError, EvaluationError
from .geometry import Grid, MetricJet, OperatorFields
from .spectral import SpectralDecomposition, sandwich_sum, spectral_decompose
from .spectral_functions import fconf_dk, fconf_dkdk, g_value

__all__ = [
    "DEFAULT_RADIUS",
    "NctElement",
    "ModularSpectralData",
    "clock_shift",
    "composition_lemma_check",
    "divided_exp",
    "modular_curvature_functions",
    "modular_g",
    "modular_spectral_data",
    "nct2_curvature",
    "nct2_fdk",
    "nct2_fdk_from_g",
    "nct2_fdkdk",
    "nct2_fdkdk_from_g",
    "nct2_operator",
    "nct4_curvature",
    "nct_adjoint",
    "nct_derive",
    "nct_exp",
    "nct_identity",
    "nct_inverse",
    "nct_mul",
    "nct_trace",
    "phi_correspondence",
    "q_f",
    "q_g",
    "realize",
    "realize_grid",
    "rearrange",
    "tau_tensors",
    "unrealize",
]

#: Default per-axis coefficient truncation radius for curvature pipelines.
DEFAULT_RADIUS = 8

_TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# clock and shift matrices


def clock_shift(q_den, p_num):
    """Clock/shift pair (U0, V0) of q x q unitaries for theta = p/q.

    U0 is the cyclic shift (ones on the superdiagonal and in the lower
    left corner), V0 = diag(1, xi, xi^2, ...) with xi = exp(2 pi i p/q).
    They satisfy U0 V0 = exp(2 pi i p/q) V0 U0 and U0^q = V0^q = 1.
    """
    q, p = int(q_den), int(p_num)
    if q <= 0 or math.gcd(p, q) != 1:
        raise DomainError(
            "deformation parameter must be p/q in lowest terms with q > 0"
        )
    u0 = np.zeros((q, q), dtype=complex)
    for i in range(q):
        u0[i, (i + 1) % q] = 1.0
    v0 = np.diag([cmath.exp(2j * math.pi * p * n / q) for n in range(q)])
    return u0, v0


class _Fiber:
    """Per-theta basis matrices U0^r V0^s (and their tensor products)."""

    def __init__(self, theta):
        self.theta = theta
        self.factors = [clock_shift(q, p) for (p, q) in theta]
        self.qs = [q for (_, q) in theta]
        self.dim = int(np.prod(self.qs))
        self._cache = {}

    def basis(self, k):
        """Matrix of the monomial with exponent tuple k (length 2m)."""
        key = tuple(
            (k[2 * i] % q, k[2 * i + 1] % q) for i, q in enumerate(self.qs)
        )
        mat = self._cache.get(key)
        if mat is None:
            parts = []
            for (r, s), (u0, v0) in zip(key, self.factors):
                parts.append(
                    np.linalg.matrix_power(u0, r) @ np.linalg.matrix_power(v0, s)
                )
            mat = reduce(np.kron, parts)
            self._cache[key] = mat
        return mat


@lru_cache(maxsize=None)
def _fiber(theta):
    return _Fiber(theta)


# ---------------------------------------------------------------------------
# algebra elements


@dataclass(frozen=True, eq=False)
class NctElement:
    """Finitely supported series sum_k c_k U1^{k1} V1^{k2} U2^{k3} ...

    m is the number of two-torus factors (the algebra is 2m-dimensional),
    theta the tuple of reduced rationals (p_i, q_i), and coeffs a map from
    exponent tuples in Z^{2m} to complex coefficients.  dropped_mass
    accumulates the l1 mass discarded by truncations along the way; it is
    a diagnostic and is not serialized.
    """

    m: int
    theta: tuple
    coeffs: dict
    dropped_mass: float = 0.0

    def __post_init__(self):
        m = int(self.m)
        if m < 1:
            raise DomainError("m must be a positive integer")
        theta = tuple((int(p), int(q)) for (p, q) in self.theta)
        if len(theta) != m:
            raise DomainError("need one rational deformation parameter per factor")
        for p, q in theta:
            if q <= 0 or math.gcd(p, q) != 1:
                raise DomainError(
                    "deformation parameters must be p/q in lowest terms with q > 0"
                )
        coeffs = {}
        for k, c in dict(self.coeffs).items():
            k = tuple(int(x) for x in k)
            if len(k) != 2 * m:
                raise DomainError("coefficient exponents must have 2m entries")
            c = complex(c)
            if c != 0:
                coeffs[k] = c
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "dropped_mass", float(self.dropped_mass))

    @property
    def dim(self):
        return 2 * self.m

    @property
    def fiber_dim(self):
        return int(np.prod([q for (_, q) in self.theta]))

    @property
    def support_radius(self):
        if not self.coeffs:
            return 0
        return max(max(abs(x) for x in k) for k in self.coeffs)

    # -- arithmetic ------------------------------------------------------

    def _like(self, other):
        if self.m != other.m or self.theta != other.theta:
            raise DomainError("elements live on different tori")

    def __add__(self, other):
        if not isinstance(other, NctElement):
            return NotImplemented
        self._like(other)
        out = dict(self.coeffs)
        for k, c in other.coeffs.items():
            out[k] = out.get(k, 0j) + c
        return NctElement(self.m, self.theta, out,
                          self.dropped_mass + other.dropped_mass)

    def __sub__(self, other):
        if not isinstance(other, NctElement):
            return NotImplemented
        return self.__add__((-1.0) * other)

    def __neg__(self):
        return (-1.0) * self

    def __mul__(self, other):
        if isinstance(other, NctElement):
            return nct_mul(self, other)
        scale = complex(other)
        out = {k: scale * c for k, c in self.coeffs.items()}
        return NctElement(self.m, self.theta, out, self.dropped_mass)

    def __rmul__(self, other):
        return self.__mul__(other)

    def adjoint(self):
        return nct_adjoint(self)

    # -- serialization ---------------------------------------------------

    def to_json(self):
        """Plain-dict form: {"m", "theta", "coeffs"} with [re, im] splits."""
        coeffs = [
            {"k": list(k), "re": c.real, "im": c.imag}
            for k, c in sorted(self.coeffs.items())
        ]
        return {
            "m": self.m,
            "theta": [list(pq) for pq in self.theta],
            "coeffs": coeffs,
        }

    @classmethod
    def from_json(cls, data):
        coeffs = {
            tuple(entry["k"]): complex(entry["re"], entry["im"])
            for entry in data["coeffs"]
        }
        return cls(int(data["m"]), tuple(tuple(pq) for pq in data["theta"]),
                   coeffs)


def nct_identity(m, theta):
    """The unit element."""
    return NctElement(m, theta, {(0,) * (2 * int(m)): 1.0})


def nct_mul(a: NctElement, b: NctElement, *, radius=None):
    """Product in the twisted algebra, optionally truncated to a radius.

    Moving V_i^l past U_i^{k'} costs the phase exp(-2 pi i theta_i l k'),
    which is evaluated as an exact root of unity.  With radius given,
    coefficients landing outside the per-axis window are discarded and
    their l1 mass is added to dropped_mass.
    """
    a._like(b)
    out = {}
    theta = a.theta
    for ka, ca in a.coeffs.items():
        for kb, cb in b.coeffs.items():
            phase = 1.0 + 0j
            for i, (p, q) in enumerate(theta):
                expo = (-p * ka[2 * i + 1] * kb[2 * i]) % q
                if expo:
                    phase *= cmath.exp(2j * math.pi * expo / q)
            key = tuple(x + y for x, y in zip(ka, kb))
            out[key] = out.get(key, 0j) + phase * ca * cb
    dropped = a.dropped_mass + b.dropped_mass
    if radius is not None:
        kept = {}
        for k, c in out.items():
            if max(abs(x) for x in k) > radius:
                dropped += abs(c)
            else:
                kept[k] = c
        out = kept
    return NctElement(a.m, a.theta, out, dropped)


def nct_adjoint(a: NctElement):
    """Hermitian adjoint; reordering the reversed monomial costs a phase."""
    out = {}
    for k, c in a.coeffs.items():
        phase = 1.0 + 0j
        for i, (p, q) in enumerate(a.theta):
            expo = (-p * k[2 * i] * k[2 * i + 1]) % q
            if expo:
                phase *= cmath.exp(2j * math.pi * expo / q)
        out[tuple(-x for x in k)] = c.conjugate() * phase
    return NctElement(a.m, a.theta, out, a.dropped_mass)


def nct_trace(a: NctElement):
    """Normalized faithful trace: the coefficient of the unit monomial."""
    return complex(a.coeffs.get((0,) * a.dim, 0j))


def nct_derive(a: NctElement, mu):
    """Canonical derivation along axis mu: c_k -> i k_mu c_k (exact)."""
    mu = int(mu)
    if not 0 <= mu < a.dim:
        raise DomainError(f"derivation axis must lie in [0, {a.dim})")
    out = {k: 1j * k[mu] * c for k, c in a.coeffs.items() if k[mu] != 0}
    return NctElement(a.m, a.theta, out, a.dropped_mass)


def _selfadjoint_defect(a: NctElement):
    diff = a - nct_adjoint(a)
    scale = max([abs(c) for c in a.coeffs.values()], default=0.0)
    err = max([abs(c) for c in diff.coeffs.values()], default=0.0)
    return err / max(scale, 1e-300)


# ---------------------------------------------------------------------------
# realization on the covering torus


def _realize_on(elem: NctElement, axes):
    """Evaluate the realization on a product grid given by 1-d axis arrays."""
    fib = _fiber(elem.theta)
    shape = tuple(len(ax) for ax in axes)
    meshes = np.meshgrid(*[np.asarray(ax, dtype=float) for ax in axes],
                         indexing="ij", sparse=True)
    out = np.zeros(shape + (fib.dim, fib.dim), dtype=complex)
    for k, c in elem.coeffs.items():
        expo = np.zeros(shape)
        for i, ki in enumerate(k):
            if ki:
                expo = expo + ki * meshes[i]
        out += (c * np.exp(1j * expo))[..., None, None] * fib.basis(k)
    return out


def realize(elem: NctElement, x):
    """Local-trivialization value of the element at a chart point."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != elem.dim:
        raise DomainError(f"chart point must have {elem.dim} coordinates")
    fib = _fiber(elem.theta)
    out = np.zeros((fib.dim, fib.dim), dtype=complex)
    for k, c in elem.coeffs.items():
        out += c * cmath.exp(1j * float(np.dot(k, x))) * fib.basis(k)
    return out


def realize_grid(elem: NctElement, n):
    """Realization sampled on the uniform n^(2m) grid over [0, 2 pi)^(2m)."""
    n = int(n)
    if n < 1:
        raise DomainError("grid needs at least one point per axis")
    ax = _TWO_PI * np.arange(n) / n
    return _realize_on(elem, [ax] * elem.dim)


def unrealize(samples, m, theta, *, radius=DEFAULT_RADIUS, floor=1e-15):
    """Recover coefficients from uniform grid samples of a realization.

    The FFT separates the scalar frequencies; projecting each frequency
    block onto its unique equivariance-allowed basis monomial recovers
    the coefficient and discards numerical leakage.  Frequencies beyond
    the per-axis radius contribute to dropped_mass, as do coefficients
    below floor (relative to the largest recovered one).  An odd grid
    size avoids the ambiguous Nyquist bin.
    """
    m = int(m)
    theta = tuple((int(p), int(q)) for (p, q) in theta)
    fib = _fiber(theta)
    samples = np.asarray(samples, dtype=complex)
    d = 2 * m
    if samples.ndim != d + 2 or samples.shape[-2:] != (fib.dim, fib.dim):
        raise DomainError("samples must have shape (n,)*2m + (Q, Q)")
    shape = samples.shape[:d]
    if len(set(shape)) != 1:
        raise DomainError("unrealize expects the same grid size per axis")
    n = shape[0]
    half = (n - 1) // 2
    hat = np.fft.fftn(samples, axes=tuple(range(d))) / (n ** d)
    freqs = np.rint(np.fft.fftfreq(n) * n).astype(int)
    q_dim = fib.dim
    raw = {}
    for idx in np.ndindex(*shape):
        k = tuple(int(freqs[i]) for i in idx)
        if max(abs(x) for x in k) > half:
            continue
        block = hat[idx]
        coeff = complex(np.einsum("ij,ij->", block, fib.basis(k).conj())) / q_dim
        if coeff != 0:
            raw[k] = coeff
    scale = max([abs(c) for c in raw.values()], default=0.0)
    cut = floor * scale
    kept, dropped = {}, 0.0
    for k, c in raw.items():
        if abs(c) <= cut:
            dropped += abs(c)
        elif max(abs(x) for x in k) > radius:
            dropped += abs(c)
        else:
            kept[k] = c
    return NctElement(m, theta, kept, dropped)


def _default_grid_points(m):
    return 33 if m == 1 else 17


def _apply_fn(elem: NctElement, fn, *, grid_points=None, radius=None,
              floor=1e-15):
    """Functional calculus through the realization (needs self-adjointness)."""
    if _selfadjoint_defect(elem) > 1e-12:
        raise DomainError("functional calculus needs a self-adjoint element")
    n = int(grid_points or _default_grid_points(elem.m))
    if n % 2 == 0:
        n += 1
    fib = _fiber(elem.theta)
    if (n ** elem.dim) * fib.dim ** 2 > 64_000_000:
        raise DomainError("functional-calculus grid would exhaust memory; "
                          "lower grid_points")
    grid = realize_grid(elem, n)
    w, v = np.linalg.eigh(grid)
    fw = np.asarray(fn(w), dtype=complex)
    out = np.einsum("...ik,...k,...jk->...ij", v, fw, v.conj())
    if radius is None:
        radius = (n - 1) // 2
    return unrealize(out, elem.m, elem.theta, radius=radius, floor=floor)


def nct_exp(elem: NctElement, scale=1.0, *, grid_points=None,
            radius=DEFAULT_RADIUS, floor=1e-15):
    """exp(scale * elem) for self-adjoint elem, via realized eigenbases."""
    scale = float(scale)
    return _apply_fn(elem, lambda w: np.exp(scale * w),
                     grid_points=grid_points, radius=radius, floor=floor)


def nct_inverse(elem: NctElement, *, grid_points=None, radius=DEFAULT_RADIUS,
                floor=1e-15):
    """Inverse of a self-adjoint invertible element, via realized eigenbases."""
    return _apply_fn(elem, lambda w: 1.0 / w,
                     grid_points=grid_points, radius=radius, floor=floor)


def _require_positive(k_elem: NctElement, n=9):
    if _selfadjoint_defect(k_elem) > 1e-12:
        raise DomainError("k must be self-adjoint")
    grid = realize_grid(k_elem, n)
    w = np.linalg.eigvalsh(grid)
    if w.min() <= 0.0:
        raise DomainError("k must realize to positive definite matrices")


# ---------------------------------------------------------------------------
# trace correspondence


def _metric_sqrtdet(metric, m):
    if metric is None:
        return 1.0
    if np.isscalar(metric):
        val = float(metric)
        if val <= 0:
            raise DomainError("metric volume factor must be positive")
        return val
    arr = np.asarray(metric, dtype=float)
    if arr.shape == (2, 2):
        arr = arr[None, ...]
    if arr.shape != (m, 2, 2):
        raise DomainError("metric must be scalar, one 2x2 block, or m blocks")
    total = 1.0
    for block in arr:
        det = np.linalg.det(block)
        if det <= 0:
            raise DomainError("constant metric blocks must be positive definite")
        total *= det ** (-0.5)
    return total


def phi_correspondence(elem: NctElement, metric=None, *, grid_points=None):
    """Integrated realization: |g|^(1/2) * Q * integral of tr over the cell.

    Equals (2 pi)^(2m) * |g|^(1/2) * trace(elem).  metric may be None
    (factor 1), a positive scalar taken as the volume factor |g|^(1/2)
    itself, a constant 2 x 2 inverse-metric block, or one block per
    factor.  The quadrature is exact once the per-axis point count
    exceeds the support radius.
    """
    qs = [q for (_, q) in elem.theta]
    q_dim = elem.fiber_dim
    sqrtdet = _metric_sqrtdet(metric, elem.m)
    n = int(grid_points or max(2, elem.support_radius + 2))
    axes = []
    for q in qs:
        cell = _TWO_PI / q
        ax = cell * np.arange(n) / n
        axes += [ax, ax]
    vals = _realize_on(elem, axes)
    tr_mean = complex(np.einsum("...ii->...", vals).mean())
    cell_vol = float(np.prod([(_TWO_PI / q) ** 2 for q in qs]))
    return sqrtdet * q_dim * tr_mean * cell_vol


# ---------------------------------------------------------------------------
# two-torus spectral functions


def q_g(a, b, c):
    """First log-coefficient helper; valid at separated arguments."""
    sa, sb, sc = math.sqrt(a), math.sqrt(b), math.sqrt(c)
    return (sa * (a * sb + 3 * a * sc - sa * c - math.sqrt(a * b * c)
                  - 2 * b * sc)
            / ((a - b) * (sa - sb) * (sa - sc) ** 3))


def q_f(a, b, c):
    """Second log-coefficient helper; valid at separated arguments."""
    sa, sb = math.sqrt(a), math.sqrt(b)
    return a * (sb + math.sqrt(c)) / ((a - b) * (sa - sb) * (a - c))


def nct2_fdk(r0, r1):
    """Two-point curvature function of the E (Delta k) E term (d = 2).

    Closed form (r0 - r1 - sqrt(r0 r1) log(r0/r1)) / (sqrt r0 - sqrt r1)^3
    for separated arguments; a power series in sqrt(r1/r0) - 1 otherwise,
    with the confluent value r^(-1/2)/3 on the diagonal.
    """
    if r0 <= 0 or r1 <= 0:
        raise DomainError("spectral arguments must be positive")
    s = math.sqrt(r1 / r0)
    eps = s - 1.0
    if abs(eps) <= 0.5:
        total, power = 0.0, 1.0
        for mm in range(80):
            term = 2.0 * power / ((mm + 2) * (mm + 3))
            total += term
            if abs(term) < 1e-18 * abs(total):
                break
            power *= -eps
        return total / math.sqrt(r0)
    return ((r0 - r1 - math.sqrt(r0 * r1) * (math.log(r0) - math.log(r1)))
            / (math.sqrt(r0) - math.sqrt(r1)) ** 3)


def nct2_fdk_from_g(r0, r1, ifun=None):
    """Same function assembled from the covariant G family (cross-check)."""
    s0, s1 = math.sqrt(r0), math.sqrt(r1)
    return (fconf_dk(2, (r0, r1), ifun)
            - (s0 + s1) * g_value("G_ddu", 2, (r0, r1), ifun))


def nct2_fdkdk_from_g(r0, r1, r2, ifun=None):
    """(g-part, f-part) of the three-point curvature function via the G family.

    The g-part multiplies the symmetric tensor g^{mu nu}, the f-part the
    antisymmetric part of h^{mu nu}; both are assembled from the covariant
    spectral functions of the two deformed Laplacians.
    """
    s0, s1, s2 = math.sqrt(r0), math.sqrt(r1), math.sqrt(r2)
    ss = (s0 + s1) * (s1 + s2)
    a_part = (fconf_dkdk(2, (r0, r1, r2), ifun)
              + 2 * g_value("G_ddu", 2, (r0, r2), ifun)
              + ss * (g_value("G_dudu", 2, (r0, r1, r2), ifun)
                      - g_value("G_pp", 2, (r0, r1, r2), ifun)))
    b_part = ss * (g_value("G_dup", 2, (r0, r1, r2), ifun)
                   - g_value("G_pdu", 2, (r0, r1, r2), ifun))
    return a_part, b_part


_FDKDK_GAP = 0.05


def nct2_fdkdk(r0, r1, r2):
    """(g-part, f-part) of the three-point curvature function (d = 2).

    Separated arguments use the explicit log closed form with the q_g/q_f
    helpers; near-confluent arguments fall back to the G-family assembly,
    whose divided-difference core handles ties.  On the full diagonal the
    values are (1/(3r), 2/(3r)).
    """
    if min(r0, r1, r2) <= 0:
        raise DomainError("spectral arguments must be positive")
    s0, s1, s2 = math.sqrt(r0), math.sqrt(r1), math.sqrt(r2)
    top = max(s0, s1, s2)
    gap = min(abs(s0 - s1), abs(s0 - s2), abs(s1 - s2)) / top
    if gap < _FDKDK_GAP:
        return nct2_fdkdk_from_g(r0, r1, r2)
    den0 = (s0 - s1) * (s0 - s2) ** 2 * (s1 - s2)
    den1 = (s0 - s1) * (r0 - r1) * (s1 - s2) * (r1 - r2)
    root = math.sqrt(r0 * r2)
    l0, l1, l2 = math.log(r0), math.log(r1), math.log(r2)
    g_part = ((s0 + s2) * (s0 - 2 * s1 + s2) / den0
              + q_g(r0, r1, r2) * l0
              - (r1 + root) ** 2 / den1 * l1
              + q_g(r2, r1, r0) * l2)
    f_part = ((s0 - s2) ** 2 / den0
              - q_f(r0, r1, r2) * l0
              + (r1 + root) * (r1 - root) / den1 * l1
              - q_f(r2, r1, r0) * l2)
    return g_part, f_part


# ---------------------------------------------------------------------------
# two-torus operators and curvature


def tau_tensors(tau):
    """Constant tensors of the modulus tau: (g_inv, h, f, sqrt_det).

    g^{11} = 1, g^{12} = Re tau, g^{22} = |tau|^2; h^{mu nu} is the rank-one
    complexification whose symmetric part is g and antisymmetric part f;
    sqrt_det is det(g_{mu nu})^(1/2) = 1/|Im tau|.
    """
    tau = complex(tau)
    t2 = tau.imag
    if t2 == 0:
        raise DomainError("tau must have a nonzero imaginary part")
    g_inv = np.array([[1.0, tau.real], [tau.real, abs(tau) ** 2]])
    h = np.array([[1.0, tau], [tau.conjugate(), abs(tau) ** 2]], dtype=complex)
    f = 0.5 * (h - h.T)
    return g_inv, h, f, 1.0 / abs(t2)


def _nct2_elements(k_elem: NctElement, tau):
    """All derived algebra elements entering the two-torus operators."""
    g_inv, h, f, sqrt_det = tau_tensors(tau)
    k = k_elem
    dk = [nct_derive(k, mu) for mu in range(2)]
    ddk = [[nct_derive(dk[mu], nu) for nu in range(2)] for mu in range(2)]
    zero = NctElement(1, k.theta, {})
    lap_k = zero
    for mu in range(2):
        for nu in range(2):
            lap_k = lap_k + (-g_inv[mu, nu]) * ddk[mu][nu]
    u = nct_mul(k, k)
    du = [nct_derive(u, mu) for mu in range(2)]
    ddu = [[nct_derive(du[mu], nu) for nu in range(2)] for mu in range(2)]
    sym = [nct_mul(k, dk[nu]) + nct_mul(dk[nu], k) for nu in range(2)]
    anti = [nct_mul(k, dk[nu]) - nct_mul(dk[nu], k) for nu in range(2)]
    p1 = [zero, zero]
    p2 = [zero, zero]
    for mu in range(2):
        for nu in range(2):
            p1[mu] = p1[mu] + g_inv[mu, nu] * anti[nu]
            p2[mu] = p2[mu] + f[mu, nu] * sym[nu]
    div_p2 = nct_derive(p2[0], 0) + nct_derive(p2[1], 1)
    q1 = (-1.0) * nct_mul(k, lap_k)
    return {
        "tensors": (g_inv, h, f, sqrt_det),
        "k": k, "dk": dk, "lap_k": lap_k,
        "u": u, "du": du, "ddu": ddu,
        "p1": p1, "p2": p2, "div_p2": div_p2, "q1": q1, "zero": zero,
    }


def _stack_grid(elems, n):
    return np.stack([realize_grid(e, n) for e in elems], axis=-3)


def nct2_operator(k_elem: NctElement, tau, *, grid_points=17):
    """Covariant grid fields of the pair (k Delta k, delta^dagger k^2 delta).

    Both blocks share u = k^2; the first carries the commutator-valued
    p and q = -k (Delta k), the second the antisymmetric-tensor p and
    q = 0.  The analytic derivative of u is attached so downstream
    differentiation is exact.
    """
    if k_elem.m != 1:
        raise DomainError("the two-torus operators need m = 1")
    _require_positive(k_elem)
    parts = _nct2_elements(k_elem, tau)
    n = int(grid_points)
    grid = Grid((_TWO_PI, _TWO_PI), (n, n))
    u_g = realize_grid(parts["u"], n)
    du_g = _stack_grid(parts["du"], n)
    zero_g = np.zeros_like(u_g)
    fields1 = OperatorFields(
        "covariant", grid, u_g, _stack_grid(parts["p1"], n),
        realize_grid(parts["q1"], n), A=None, du=du_g,
    )
    fields2 = OperatorFields(
        "covariant", grid, u_g, _stack_grid(parts["p2"], n), zero_g,
        A=None, du=du_g,
    )
    return fields1, fields2


def _nct2_direct(u_mat, dk_mats, lapk_mat, g_inv, f, cluster_tol):
    """Curvature density from the dedicated two-torus closed forms."""
    dec = spectral_decompose(u_mat, cluster_tol)
    mcount = dec.count
    t_fdk = np.empty((mcount, mcount))
    for i in range(mcount):
        for j in range(mcount):
            t_fdk[i, j] = nct2_fdk(dec.values[i], dec.values[j])
    out = sandwich_sum(None, dec, (lapk_mat,), table=t_fdk)
    t_a = np.empty((mcount,) * 3)
    t_b = np.empty((mcount,) * 3)
    for idx in np.ndindex(*t_a.shape):
        rs = tuple(dec.values[i] for i in idx)
        t_a[idx], t_b[idx] = nct2_fdkdk(*rs)
    for mu in range(2):
        for nu in range(2):
            sa = sandwich_sum(None, dec, (dk_mats[mu], dk_mats[nu]), table=t_a)
            sb = sandwich_sum(None, dec, (dk_mats[mu], dk_mats[nu]), table=t_b)
            out = out + g_inv[mu, nu] * sa + f[mu, nu] * sb
    return out / (4.0 * math.pi)


def nct2_curvature(k_elem: NctElement, tau, *, grid_points=17,
                   radius=DEFAULT_RADIUS, cluster_tol=1e-8, check_tol=1e-6):
    """Curvature element of the block two-torus operator.

    Pointwise over the covering torus the density is assembled through
    the general machinery (conformal-like block plus the covariant-form
    block) and cross-checked against the dedicated closed forms; the
    samples are then Fourier-inverted back to an algebra element.
    check_tol=None skips the cross-check (it roughly doubles the cost).
    """
    if k_elem.m != 1:
        raise DomainError("the two-torus curvature needs m = 1")
    _require_positive(k_elem)
    parts = _nct2_elements(k_elem, tau)
    g_inv, _, f, _ = parts["tensors"]
    jet = MetricJet.flat(g_inv)
    n = int(grid_points)
    if n % 2 == 0:
        n += 1
    k_g = realize_grid(parts["k"], n)
    dk_g = _stack_grid(parts["dk"], n)
    lapk_g = realize_grid(parts["lap_k"], n)
    u_g = realize_grid(parts["u"], n)
    du_g = _stack_grid(parts["du"], n)
    ddu_g = np.stack(
        [_stack_grid(row, n) for row in parts["ddu"]], axis=-4)
    p2_g = _stack_grid(parts["p2"], n)
    divp2_g = realize_grid(parts["div_p2"], n)
    q_dim = k_elem.fiber_dim
    zero = np.zeros((q_dim, q_dim), dtype=complex)
    out = np.empty_like(u_g)
    max_dev = 0.0
    for idx in np.ndindex(n, n):
        block1 = r2_conformal_like(
            2, jet, k_g[idx], dk_g[idx], lapk_g[idx], cluster_tol=cluster_tol)
        block2 = r2_local_upq(
            2, jet, u_g[idx], du_g[idx], ddu_g[idx], p2_g[idx], divp2_g[idx],
            zero, cluster_tol=cluster_tol)
        val = block1 + block2
        if check_tol is not None:
            chk = _nct2_direct(u_g[idx], dk_g[idx], lapk_g[idx], g_inv, f,
                               cluster_tol)
            scale = max(float(np.abs(val).max()), 1e-300)
            max_dev = max(max_dev, float(np.abs(val - chk).max()) / scale)
        out[idx] = val
    if check_tol is not None and max_dev > check_tol:
        raise EvaluationError(
            f"curvature assembly and closed forms disagree by {max_dev:.3e}")
    return unrealize(out, 1, k_elem.theta, radius=radius)


# ---------------------------------------------------------------------------
# four-torus curvature


def _truncate(elem: NctElement, radius):
    kept, dropped = {}, elem.dropped_mass
    for k, c in elem.coeffs.items():
        if max(abs(x) for x in k) > radius:
            dropped += abs(c)
        else:
            kept[k] = c
    return NctElement(elem.m, elem.theta, kept, dropped)


def nct4_curvature(k_elem: NctElement, *, radius=DEFAULT_RADIUS,
                   grid_points=None):
    """Curvature element of the conformally deformed four-torus operator.

    Uses the unit metric on both base factors.  Everything is exact
    coefficient arithmetic except for the functional-calculus inverse of
    k^2, whose truncation is reported through dropped_mass:

        (1/(32 pi^2)) * sum_mu [ k^-2 (d_mu d_mu k^2) k^-2
                                 - (3/2) k^-2 (d_mu k^2) k^-2 (d_mu k^2) k^-2 ]
    """
    if k_elem.m != 2:
        raise DomainError("the four-torus curvature needs m = 2")
    _require_positive(k_elem, n=5)
    k2 = nct_mul(k_elem, k_elem)
    k2inv = _apply_fn(k2, lambda w: 1.0 / w, grid_points=grid_points)
    zero = NctElement(2, k_elem.theta, {})
    acc = zero
    for mu in range(4):
        dmu = nct_derive(k2, mu)
        ddmu = nct_derive(dmu, mu)
        t1 = nct_mul(nct_mul(k2inv, ddmu), k2inv)
        t2 = nct_mul(nct_mul(nct_mul(nct_mul(k2inv, dmu), k2inv), dmu), k2inv)
        acc = acc + t1 + (-1.5) * t2
    return _truncate((1.0 / (32.0 * math.pi ** 2)) * acc, radius)


# ---------------------------------------------------------------------------
# modular-operator machinery


def _phi1(t):
    """ (exp(t) - 1)/t, stable at the origin."""
    if t == 0.0:
        return 1.0
    return math.expm1(t) / t


def divided_exp(*xs):
    """Divided difference of exp on one, two, or three nodes.

    Two nodes use expm1; three nodes switch between the recursive form
    (wide spread) and a complete-homogeneous series around the mean
    (clustered nodes), so ties are exact limits rather than 0/0.
    """
    xs = [float(x) for x in xs]
    if len(xs) == 1:
        return math.exp(xs[0])
    if len(xs) == 2:
        x, y = xs
        return math.exp(y) * _phi1(x - y)
    if len(xs) != 3:
        raise DomainError("divided_exp supports one to three nodes")
    xs.sort()
    span = xs[2] - xs[0]
    if span >= 1.0:
        lower = divided_exp(xs[0], xs[1])
        upper = divided_exp(xs[1], xs[2])
        return (upper - lower) / span
    mu = (xs[0] + xs[1] + xs[2]) / 3.0
    d0, d1, d2 = (x - mu for x in xs)
    e1 = d0 + d1 + d2
    e2 = d0 * d1 + d0 * d2 + d1 * d2
    e3 = d0 * d1 * d2
    h = [1.0, e1, e1 * e1 - e2]
    fact = 2.0  # (m + 2)! running value, starting at 2! for m = 0
    total = h[0] / fact
    small = 0
    for mm in range(1, 60):
        if mm >= 3:
            h.append(e1 * h[-1] - e2 * h[-2] + e3 * h[-3])
        fact *= (mm + 2)
        term = h[mm] / fact
        total += term
        # centering makes e1 (hence every other h_m) essentially zero, so
        # stop only after two consecutive negligible terms
        if abs(term) < 1e-20 * abs(total):
            small += 1
            if small >= 2:
                break
        else:
            small = 0
    return math.exp(mu) * total


def modular_g(*ys):
    """Change-of-argument weights g1(y) and g2(y1, y2).

    g1(y) = (sqrt(y) - 1)/log(y) and g2 is the two-variable kernel from
    differentiating exp(h/2) twice; both are evaluated through divided
    differences of exp, so the confluent limits g1(1) = 1/2 and
    g2(1, 1) = 1/4 come out exactly.  A single tuple argument is
    unpacked, so modular_g((y1, y2)) works too.
    """
    if len(ys) == 1 and isinstance(ys[0], (tuple, list)):
        ys = tuple(ys[0])
    for y in ys:
        if y <= 0:
            raise DomainError("modular eigenvalues must be positive")
    if len(ys) == 1:
        return 0.5 * _phi1(0.5 * math.log(ys[0]))
    if len(ys) == 2:
        a = 0.5 * math.log(ys[0])
        b = 0.5 * math.log(ys[1])
        return 0.5 * divided_exp(0.0, a, a + b)
    raise DomainError("modular_g takes one or two arguments")


@dataclass(frozen=True, eq=False)
class ModularSpectralData:
    """Spectral data of u together with the modular-ratio projector maps.

    ratios lists the distinct eigenvalues y of the conjugation operator
    a -> u^(-1) a u; pairs[l] lists the (i, j) projector index pairs with
    r_j = y_l r_i, so project(l, a) = sum P_i a P_j realizes the spectral
    projection map of the modular operator.
    """

    dec: SpectralDecomposition
    ratios: tuple
    pairs: tuple

    def project(self, idx, a):
        a = np.asarray(a, dtype=complex)
        proj = self.dec.projectors
        out = np.zeros_like(a)
        for i, j in self.pairs[idx]:
            out += proj[i] @ a @ proj[j]
        return out

    def apply(self, fn, a):
        a = np.asarray(a, dtype=complex)
        out = np.zeros_like(a)
        for idx, y in enumerate(self.ratios):
            out += complex(fn(y)) * self.project(idx, a)
        return out


def modular_spectral_data(u, *, cluster_tol=1e-8, ratio_tol=1e-9):
    """Build the modular eigenvalue/projector table from u = k^2."""
    dec = spectral_decompose(u, cluster_tol)
    entries = sorted(
        (dec.values[j] / dec.values[i], i, j)
        for i in range(dec.count) for j in range(dec.count)
    )
    ratios, pairs = [], []
    for y, i, j in entries:
        if ratios and y <= ratios[-1][-1] * (1.0 + ratio_tol):
            ratios[-1].append(y)
            pairs[-1].append((i, j))
        else:
            ratios.append([y])
            pairs.append([(i, j)])
    values = tuple(float(np.mean(group)) for group in ratios)
    return ModularSpectralData(dec, values, tuple(tuple(p) for p in pairs))


def rearrange(F, u, bs, *, cluster_tol=1e-8, ratio_tol=1e-9):
    """Both sides of the spectral-sum rearrangement, evaluated independently.

    The left side sums F over eigenvalue tuples of right multiplication,
    the right side sums f(r0, y1, ..., yp) = F(r0, r0 y1, r0 y1 y2, ...)
    over modular ratios; the two must agree.
    """
    bs = [np.asarray(b, dtype=complex) for b in bs]
    if not bs:
        raise DomainError("rearrange needs at least the leading factor b0")
    msd = modular_spectral_data(u, cluster_tol=cluster_tol,
                                ratio_tol=ratio_tol)
    dec = msd.dec
    proj, rs = dec.projectors, dec.values
    p = len(bs) - 1
    lhs = np.zeros_like(bs[0])
    for idx in itertools.product(range(dec.count), repeat=p + 1):
        weight = complex(F(*(rs[i] for i in idx)))
        mat = bs[0] @ proj[idx[0]]
        for t in range(1, p + 1):
            mat = mat @ bs[t] @ proj[idx[t]]
        lhs = lhs + weight * mat
    nratio = len(msd.ratios)
    maps = [[msd.project(l, bs[t]) for l in range(nratio)]
            for t in range(1, p + 1)]
    rhs = np.zeros_like(bs[0])
    for a in range(dec.count):
        base = bs[0] @ proj[a]
        for combo in itertools.product(range(nratio), repeat=p):
            args = [rs[a]]
            running = rs[a]
            for l in combo:
                running *= msd.ratios[l]
                args.append(running)
            weight = complex(F(*args))
            mat = base
            for t, l in enumerate(combo):
                mat = mat @ maps[t][l]
            rhs = rhs + weight * mat
    return lhs, rhs


def modular_curvature_functions(r0, *args, tau=1j):
    """Curvature functions in the log-k variables, at y = exp(argument).

    One extra argument x gives the scalar coefficient of the log-Laplacian
    term, two (s, t) give the 2 x 2 tensor coefficient of the bilinear
    log-gradient term for the tau metric.  Both are independent of r0.
    """
    r0 = float(r0)
    if r0 <= 0:
        raise DomainError("r0 must be positive")
    if len(args) == 1:
        y1 = math.exp(args[0])
        return 2.0 * math.sqrt(r0) * nct2_fdk(r0, r0 * y1) * modular_g(y1)
    if len(args) == 2:
        g_inv, _, f, _ = tau_tensors(tau)
        y1, y2 = math.exp(args[0]), math.exp(args[1])
        # The extended-precision assembly keeps the advertised
        # r0-independence below 1e-11 even at widely spread arguments,
        # where the fast closed form loses a couple of digits.
        a_part, b_part = nct2_fdkdk_from_g(r0, r0 * y1, r0 * y1 * y2)
        gg = modular_g(y1) * modular_g(y2)
        lead = 4.0 * r0 * math.sqrt(y1) * gg
        corr = (4.0 * math.sqrt(r0) * nct2_fdk(r0, r0 * y1 * y2)
                * modular_g(y1, y2))
        return g_inv * (lead * a_part - corr) + f * (lead * b_part)
    raise DomainError("pass one exponent for the Laplacian coefficient or "
                      "two for the gradient-gradient tensor")


def composition_lemma_check(f, g, u, bs, *, identity=None, cluster_tol=1e-8,
                            ratio_tol=1e-9):
    """Residual of one of the three insertion identities.

    Each identity trades a left multiplication by k inside a spectral
    operator for an explicit factor on the spectral-function side
    (sqrt(r0) f g, sqrt(r0) f(r0, y1 y2) g, or r0 sqrt(y1) f g); both
    operator actions are evaluated and the max absolute difference of the
    results is returned.  identity defaults to 1 for two factors and is
    inferred from f's arity for three.
    """
    bs = [np.asarray(b, dtype=complex) for b in bs]
    msd = modular_spectral_data(u, cluster_tol=cluster_tol,
                                ratio_tol=ratio_tol)
    dec = msd.dec
    proj, rs, ys = dec.projectors, dec.values, msd.ratios
    nr = len(ys)
    k_mat = sum(math.sqrt(rs[a]) * proj[a] for a in range(dec.count))
    if identity is None:
        if len(bs) == 2:
            identity = 1
        else:
            arity = len(inspect.signature(f).parameters)
            identity = 3 if arity == 3 else 2
    if identity == 1:
        b0, b1 = bs
        b1g = msd.apply(g, b1)
        lhs = np.zeros_like(b0)
        rhs = np.zeros_like(b0)
        inner = k_mat @ b1g
        for a in range(dec.count):
            base = b0 @ proj[a]
            for l in range(nr):
                fval = complex(f(rs[a], ys[l]))
                lhs = lhs + fval * (base @ msd.project(l, inner))
                rhs = rhs + (math.sqrt(rs[a]) * fval * complex(g(ys[l]))) \
                    * (base @ msd.project(l, b1))
        return float(np.abs(lhs - rhs).max())
    if identity == 2:
        b0, b1, b2 = bs
        e1 = [msd.project(l, b1) for l in range(nr)]
        e2 = [msd.project(l, b2) for l in range(nr)]
        inner = np.zeros_like(b1)
        for l1 in range(nr):
            for l2 in range(nr):
                inner = inner + complex(g(ys[l1], ys[l2])) * (e1[l1] @ e2[l2])
        inner = k_mat @ inner
        lhs = np.zeros_like(b0)
        rhs = np.zeros_like(b0)
        for a in range(dec.count):
            base = b0 @ proj[a]
            for l in range(nr):
                lhs = lhs + complex(f(rs[a], ys[l])) * (base @ msd.project(l, inner))
            for l1 in range(nr):
                for l2 in range(nr):
                    weight = (math.sqrt(rs[a]) * complex(f(rs[a], ys[l1] * ys[l2]))
                              * complex(g(ys[l1], ys[l2])))
                    rhs = rhs + weight * (base @ e1[l1] @ e2[l2])
        return float(np.abs(lhs - rhs).max())
    if identity == 3:
        b0, b1, b2 = bs
        t1 = [[msd.project(l, k_mat @ msd.project(lp, b1)) for lp in range(nr)]
              for l in range(nr)]
        t2 = [[msd.project(l, k_mat @ msd.project(lp, b2)) for lp in range(nr)]
              for l in range(nr)]
        e1 = [msd.project(l, b1) for l in range(nr)]
        e2 = [msd.project(l, b2) for l in range(nr)]
        lhs = np.zeros_like(b0)
        rhs = np.zeros_like(b0)
        for a in range(dec.count):
            base = b0 @ proj[a]
            for l1 in range(nr):
                for l2 in range(nr):
                    fval = complex(f(rs[a], ys[l1], ys[l2]))
                    if fval != 0.0:
                        for lp1 in range(nr):
                            for lp2 in range(nr):
                                weight = fval * complex(g(ys[lp1], ys[lp2]))
                                lhs = lhs + weight * (base @ t1[l1][lp1]
                                                      @ t2[l2][lp2])
                    weight = (rs[a] * math.sqrt(ys[l1]) * fval
                              * complex(g(ys[l1], ys[l2])))
                    rhs = rhs + weight * (base @ e1[l1] @ e2[l2])
        return float(np.abs(lhs - rhs).max())
    raise DomainError("identity must be 1, 2, or 3")
