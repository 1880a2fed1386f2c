"""Spectral decomposition, sandwich sums, and Gaussian moment tensors.

The heat-coefficient formulas are sums of the shape

    sum over clusters  f(r_0, ..., r_k) . E_{r_0} B_1 E_{r_1} ... B_k E_{r_k}

where r_i runs over the (clustered) spectrum of the positive matrix u and
E_{r_i} are its spectral projectors.  This module provides that machinery
plus the Gaussian moment tensors G(g) and the composed operators T_{k,p}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EvaluationError, ValidationError
from .ifuncs import DEFAULT_GAP_POLICY, i_value

__all__ = [
    "GaussianMoments",
    "SpectralDecomposition",
    "gaussian_moments",
    "sandwich_sum",
    "sandwich_table",
    "spectral_decompose",
    "t_kp_apply",
]

_HERM_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Clustered eigenvalues r_i with Hermitian spectral projectors E_{r_i}."""

    values: tuple
    projectors: np.ndarray  # (m, N, N)
    cluster_tol: float

    @property
    def count(self):
        return len(self.values)

    @property
    def fiber_dim(self):
        return self.projectors.shape[-1]

    def reconstruct(self):
        return np.einsum("a,aij->ij", np.asarray(self.values), self.projectors)

    def max_defect(self):
        """Largest violation among completeness / orthogonality / recovery."""
        m, n = self.count, self.fiber_dim
        worst = float(np.abs(self.projectors.sum(axis=0) - np.eye(n)).max())
        prods = np.einsum("aij,bjk->abik", self.projectors, self.projectors)
        for a in range(m):
            for b in range(m):
                target = self.projectors[a] if a == b else 0.0
                worst = max(worst, float(np.abs(prods[a, b] - target).max()))
        return worst

    def apply_function(self, fn):
        """Functional calculus sum fn(r_i) E_i."""
        vals = np.array([fn(r) for r in self.values])
        return np.einsum("a,aij->ij", vals, self.projectors)


def spectral_decompose(u, cluster_tol=1e-8):
    """Eigendecompose a positive Hermitian matrix into clustered projectors.

    Eigenvalues whose relative gap (against the spectral radius) is below
    cluster_tol are merged into one cluster represented by their arithmetic
    mean; this is what keeps nearly-degenerate spectra from feeding tiny
    denominators into the spectral functions.
    """
    u = np.asarray(u, dtype=complex)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise DomainError("u must be a square matrix")
    if not (0.0 <= cluster_tol < 1.0):
        raise DomainError("cluster_tol must lie in [0, 1)")
    scale = max(float(np.abs(u).max()), np.finfo(float).tiny)
    defect = float(np.abs(u - u.conj().T).max()) / scale
    if defect > _HERM_TOL:
        raise ValidationError(
            f"u deviates from Hermitian by a relative {defect:.3e} (> {_HERM_TOL})"
        )
    herm = 0.5 * (u + u.conj().T)
    lam, vec = np.linalg.eigh(herm)
    if lam[0] <= 0.0:
        raise DomainError(f"u must be positive definite (min eigenvalue {lam[0]:.3e})")
    radius = float(lam[-1])

    values = []
    projectors = []
    start = 0
    for i in range(1, len(lam) + 1):
        if i < len(lam) and (lam[i] - lam[i - 1]) <= cluster_tol * radius:
            continue
        block = vec[:, start:i]
        values.append(float(lam[start:i].mean()))
        projectors.append(block @ block.conj().T)
        start = i
    return SpectralDecomposition(
        values=tuple(values),
        projectors=np.stack(projectors),
        cluster_tol=float(cluster_tol),
    )


def sandwich_table(f, dec: SpectralDecomposition, k):
    """Evaluate f on every (k+1)-tuple of cluster values; fail on non-finite."""
    m = dec.count
    table = np.empty((m,) * (k + 1))
    for idx in np.ndindex(*table.shape):
        rs = tuple(dec.values[i] for i in idx)
        val = f(*rs)
        if not np.isfinite(val):
            raise EvaluationError(
                f"spectral function returned non-finite value {val!r} at "
                f"arguments {rs}"
            )
        table[idx] = val
    return table


def sandwich_sum(f, dec: SpectralDecomposition, bs=(), table=None):
    """Sum f(r_0,...,r_k) E_{r_0} B_1 E_{r_1} ... B_k E_{r_k} over clusters.

    `f` may be a callable of k+1 positive reals; a precomputed table (shape
    (m,)*(k+1)) can be passed instead to amortize evaluations across calls.
    """
    k = len(bs)
    if table is None:
        table = sandwich_table(f, dec, k)
    table = np.asarray(table, dtype=float)
    if table.shape != (dec.count,) * (k + 1):
        raise DomainError("table shape does not match cluster count and arity")
    proj = dec.projectors
    if k == 0:
        return np.einsum("a,aij->ij", table, proj)
    blocks = [
        np.einsum("aij,jk,bkl->abil", proj, np.asarray(b, dtype=complex), proj)
        for b in bs
    ]
    if k == 1:
        return np.einsum("ab,abij->ij", table, blocks[0])
    if k == 2:
        return np.einsum("abc,abij,bcjk->ik", table, blocks[0], blocks[1])
    # rare k >= 3: direct tuple sum over the chained projected blocks
    m, n = dec.count, dec.fiber_dim
    out = np.zeros((n, n), dtype=complex)
    for idx in np.ndindex(*(m,) * (k + 1)):
        coeff = table[idx]
        if coeff == 0.0:
            continue
        acc = blocks[0][idx[0], idx[1]]
        for b in range(1, k):
            acc = acc @ blocks[b][idx[b], idx[b + 1]]
        out += coeff * acc
    return out


# --------------------------------------------------------------------------
# Gaussian moments
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianMoments:
    """Normalization g_d and the symmetric moment tensors G(g) by rank p."""

    g_d: float
    tensors: dict  # p -> ndarray of shape (d,)*2p
    dim: int


def _pairings(indices):
    if not indices:
        yield ()
        return
    first = indices[0]
    for j in range(1, len(indices)):
        rest = indices[1:j] + indices[j + 1:]
        for tail in _pairings(rest):
            yield ((first, indices[j]),) + tail


def gaussian_moments(g_inv, d=None, p_max=2):
    """Gaussian normalization g_d = |g|^{1/2}/(2^d pi^{d/2}) and moments.

    G(g)_{mu_1...mu_2p} = 2^{-p} . sum over perfect pairings of products
    g_{mu_a mu_b}; equivalently the (2p)!/(2^{2p} p!)-weighted full
    symmetrization of g x ... x g.
    """
    g_inv = np.asarray(g_inv, dtype=float)
    if d is None:
        d = g_inv.shape[0]
    if g_inv.shape != (d, d):
        raise DomainError("metric shape does not match dimension")
    if np.linalg.eigvalsh(0.5 * (g_inv + g_inv.T)).min() <= 0:
        raise DomainError("metric must be positive definite")
    g_lo = np.linalg.inv(g_inv)
    det_g = 1.0 / np.linalg.det(g_inv)
    g_d = math.sqrt(det_g) / (2 ** d * math.pi ** (d / 2))
    tensors = {0: np.array(1.0)}
    letters = "abcdefghijkl"
    for p in range(1, p_max + 1):
        total = np.zeros((d,) * (2 * p))
        out = letters[: 2 * p]
        for pairing in _pairings(tuple(range(2 * p))):
            sub = ",".join(letters[a] + letters[b] for a, b in pairing)
            total += np.einsum(f"{sub}->{out}", *([g_lo] * p))
        tensors[p] = total / 2 ** p
    return GaussianMoments(g_d=g_d, tensors=tensors, dim=d)


def t_kp_apply(k, p, dec: SpectralDecomposition, moments: GaussianMoments, d, bs):
    """Evaluate mul o T_{k,p}[B_0 x ... x B_k] contracted with G(g):

        g_d . sum_{mu_1..mu_2p} G(g)_{mu...} B_0 E_{r_0} B_1 E_{r_1} ... E_{r_k}

    with spectral weight I_{d/2+p, k}(r_0, ..., r_k).  Each B_i is an array of
    shape (d,)*m_i + (N, N); the m_i together must account for all 2p indices,
    assigned left to right.
    """
    if len(bs) != k + 1:
        raise DomainError("need exactly k+1 operator factors")
    bs = [np.asarray(b, dtype=complex) for b in bs]
    free = [b.ndim - 2 for b in bs]
    if any(f < 0 for f in free) or sum(free) != 2 * p:
        raise DomainError(
            f"operator factors carry {sum(max(f, 0) for f in free)} metric "
            f"indices, expected {2 * p}"
        )
    alpha = d / 2.0 + p
    table = sandwich_table(lambda *rs: i_value(alpha, rs, DEFAULT_GAP_POLICY), dec, k)
    gten = moments.tensors[p]
    n = dec.fiber_dim
    out = np.zeros((n, n), dtype=complex)
    for idx in np.ndindex(*(d,) * (2 * p)):
        weight = gten[idx] if p else 1.0
        if weight == 0.0:
            continue
        pos = 0
        picked = []
        for b, nf in zip(bs, free):
            picked.append(b[idx[pos: pos + nf]])
            pos += nf
        core = sandwich_sum(None, dec, picked[1:], table=table)
        out += weight * (picked[0] @ core)
    return moments.g_d * out
