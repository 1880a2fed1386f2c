"""Universal spectral functions I_{alpha,k} and their quadrature oracle.

I_{alpha,k}(r_0, ..., r_k) is the simplex integral

    integral over {1 >= s_1 >= ... >= s_k >= 0} of
        [(1 - s_1) r_0 + (s_1 - s_2) r_1 + ... + s_k r_k]^(-alpha) ds,

the functional-calculus kernel behind every spectral function in this package.
Two independent evaluation routes are provided:

* :func:`i_eval` -- exact evaluation through the divided-difference
  representation: I_{alpha,k} equals the k-th divided difference, over the
  nodes r_0..r_k, of

      f(x) = x^(k-alpha) / prod_{j=1..k} (j - alpha)        (alpha not in 1..k)
      f(x) = x^(k-n) ln(x) * (-1)^(n-1) / ((n-1)! (k-n)!)   (alpha = n in 1..k)

  which reproduces the defining recursion
  I_{alpha,k} = (alpha-1)^(-1) (r_{k-1}-r_k)^(-1) [I_{alpha-1,k-1}(..., r_k)
  - I_{alpha-1,k-1}(..., r_{k-1})] and the base value I_{alpha,0} = r_0^-alpha.
  Divided differences lose roughly log10(1/gap) digits when arguments nearly
  coalesce, so evaluation is tiered by a :class:`GapPolicy`: float64 for well
  separated nodes, extended precision (mpmath) below the gap threshold, and an
  analytically confluent (Hermite) divided difference once arguments are merged.

* :func:`i_quadrature` -- adaptive tensor Gauss-Legendre integration of the
  defining integral itself (Duffy substitution s_j = t_1 ... t_j maps the
  simplex onto the unit cube).  Shares no code or algebra with i_eval and
  serves as its oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import mpmath as mp
import numpy as np

from .errors import (
    ConfluenceError,
    ConvergenceError,
    DomainError,
    QuadratureError,
)

__all__ = [
    "GapPolicy",
    "SimplexArgs",
    "i_base",
    "i_bernoulli_series",
    "i_eval",
    "i_one_one",
    "i_quadrature",
    "i_value",
    "min_rel_gap",
]


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GapPolicy:
    """How to treat nearly coincident spectral arguments.

    tau        -- minimum pairwise relative gap for plain float64 evaluation.
    merge_tol  -- below this relative gap arguments are merged and the
                  confluent (continuous-extension) value is returned.
    mode       -- "extend": fall back to extended precision / confluent limits;
                  "strict": raise ConfluenceError instead.
    """

    tau: float = 1e-6
    merge_tol: float = 1e-12
    mode: str = "extend"

    def __post_init__(self):
        if not (0 < self.merge_tol <= self.tau < 1):
            raise DomainError("need 0 < merge_tol <= tau < 1")
        if self.mode not in ("extend", "strict"):
            raise DomainError(f"unknown gap-policy mode {self.mode!r}")


DEFAULT_GAP_POLICY = GapPolicy()


@dataclass(frozen=True)
class SimplexArgs:
    """Arguments of I_{alpha,k}: exponent alpha, order k, nodes (r_0..r_k)."""

    alpha: float
    k: int
    rs: tuple

    def __post_init__(self):
        if self.k < 0:
            raise DomainError("order k must be non-negative")
        rs = tuple(float(r) for r in self.rs)
        if len(rs) != self.k + 1:
            raise DomainError(
                f"expected {self.k + 1} arguments for order {self.k}, got {len(rs)}"
            )
        if not all(math.isfinite(r) and r > 0 for r in rs):
            raise DomainError("all spectral arguments must be finite and positive")
        object.__setattr__(self, "rs", rs)
        object.__setattr__(self, "alpha", float(self.alpha))

    @classmethod
    def of(cls, alpha, *rs):
        return cls(alpha=alpha, k=len(rs) - 1, rs=tuple(rs))


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def min_rel_gap(rs):
    """Smallest pairwise relative gap |r_i - r_j| / max(r_i, r_j)."""
    rs = [float(r) for r in rs]
    n = len(rs)
    if n < 2:
        return math.inf
    g = math.inf
    for i in range(n):
        for j in range(i + 1, n):
            g = min(g, abs(rs[i] - rs[j]) / max(rs[i], rs[j]))
    return g


def _integer_log_order(alpha, k):
    """Return n if alpha is (numerically) an integer in 1..k, else None."""
    n = round(alpha)
    if 1 <= n <= k and abs(alpha - n) <= 1e-12 * max(1.0, abs(alpha)):
        return n
    return None


def _merge_nodes(rs, merge_tol):
    """Cluster sorted nodes whose relative gap is below merge_tol.

    Returns (representatives, multiplicities) with representatives strictly
    increasing; the representative is the cluster mean.
    """
    xs = sorted(float(r) for r in rs)
    reps, mults = [], []
    cluster = [xs[0]]
    for x in xs[1:]:
        if (x - cluster[-1]) <= merge_tol * x:
            cluster.append(x)
        else:
            reps.append(sum(cluster) / len(cluster))
            mults.append(len(cluster))
            cluster = [x]
    reps.append(sum(cluster) / len(cluster))
    mults.append(len(cluster))
    return reps, mults


def _dd_float64(alpha, k, nodes):
    """Plain Newton divided difference in float64 (nodes pairwise distinct).

    Returns (value, error_bound): a running rounding-error bound is carried
    through the table so the caller can detect compounded cancellation (several
    moderately close nodes can lose far more digits than the worst single pair
    suggests) and re-evaluate in extended precision.
    """
    n_log = _integer_log_order(alpha, k)
    xs = np.sort(np.asarray(nodes, dtype=float))
    if n_log is None:
        denom = 1.0
        for j in range(1, k + 1):
            denom *= j - alpha
        f = xs ** (k - alpha) / denom
    else:
        coeff = (-1.0) ** (n_log - 1) / (
            math.factorial(n_log - 1) * math.factorial(k - n_log)
        )
        f = coeff * xs ** (k - n_log) * np.log(xs)
    eps = np.finfo(float).eps
    a = f.copy()
    e = 2.0 * eps * np.abs(f)
    for j in range(1, k + 1):
        for i in range(k, j - 1, -1):
            dx = xs[i] - xs[i - j]
            a[i] = (a[i] - a[i - 1]) / dx
            e[i] = (e[i] + e[i - 1]) / abs(dx) + 3.0 * eps * abs(a[i])
    return float(a[k]), float(e[k])


def _dd_hermite_mp(alpha, k, reps, mults, dps):
    """Confluent (Hermite) divided difference in mpmath working precision.

    Repeated nodes are handled through derivatives of the representation
    function; for f(x) = C x^p the m-th derivative is C p(p-1)..(p-m+1)
    x^(p-m); for f(x) = C x^p ln x the pair (a_m, b_m) with
    f^(m) = C (a_m x^(p-m) ln x + b_m x^(p-m)) obeys a_(m+1) = a_m (p - m),
    b_(m+1) = a_m + b_m (p - m).
    """
    n_log = _integer_log_order(alpha, k)
    with mp.workdps(dps):
        if n_log is None:
            p = mp.mpf(k) - mp.mpf(alpha)
            denom = mp.mpf(1)
            for j in range(1, k + 1):
                denom *= j - mp.mpf(alpha)
            coeff = 1 / denom
        else:
            p = mp.mpf(k - n_log)
            coeff = mp.mpf((-1) ** (n_log - 1)) / (
                math.factorial(n_log - 1) * math.factorial(k - n_log)
            )

        # value of f^(m)(x) / m!
        def fder_over_mfact(x, m):
            if n_log is None:
                c = coeff
                q = p
                for i in range(m):
                    c *= q - i
                return c * x ** (q - m) / math.factorial(m)
            a, b = mp.mpf(1), mp.mpf(0)
            for i in range(m):
                a, b = a * (p - i), a + b * (p - i)
            return coeff * (a * x ** (p - m) * mp.log(x) + b * x ** (p - m)) \
                / math.factorial(m)

        zs = []
        for rep, mult in zip(reps, mults):
            zs.extend([mp.mpf(rep)] * mult)
        n = len(zs)
        col = [fder_over_mfact(z, 0) for z in zs]
        for j in range(1, n):
            nxt = []
            for i in range(n - j):
                if zs[i + j] == zs[i]:
                    nxt.append(fder_over_mfact(zs[i], j))
                else:
                    nxt.append((col[i + 1] - col[i]) / (zs[i + j] - zs[i]))
            col = nxt
        return float(col[0])


def _extended_dps(gap):
    lost = 0 if gap >= 1 else int(math.ceil(-math.log10(gap)))
    return max(40, 20 + 4 * lost)


# float64 result accepted only when the running error bound stays below this
# fraction of the value (three decades of headroom under the 1e-8 contract)
_FLOAT64_REL_BOUND = 1e-11


def i_value(alpha, rs, policy=DEFAULT_GAP_POLICY):
    """Scalar I_{alpha,k} evaluation without SimplexArgs packaging (hot path)."""
    k = len(rs) - 1
    if k == 0:
        return float(rs[0]) ** (-alpha)
    gap = min_rel_gap(rs)
    if gap < policy.tau and policy.mode == "strict":
        raise ConfluenceError(
            f"minimum relative gap {gap:.3e} below threshold {policy.tau:.1e}"
        )
    if k == 1 and _integer_log_order(alpha, k) == 1:
        return i_one_one(rs[0], rs[1])
    if gap >= policy.tau:
        val, bound = _dd_float64(alpha, k, rs)
        if bound <= _FLOAT64_REL_BOUND * abs(val):
            return val
        lost = math.log10(bound / abs(val)) + 16 if val != 0 else 16 - math.log10(
            bound if bound > 0 else 1.0
        )
        dps = max(40, 20 + 4 * int(math.ceil(max(lost, 0))))
        reps, mults = _merge_nodes(rs, policy.merge_tol)
        return _dd_hermite_mp(alpha, k, reps, mults, dps)
    reps, mults = _merge_nodes(rs, policy.merge_tol)
    if len(reps) == 1:
        return reps[0] ** (-alpha) / math.factorial(k)
    residual_gap = min_rel_gap(reps)
    return _dd_hermite_mp(alpha, k, reps, mults, _extended_dps(residual_gap))


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------

def i_base(alpha, r0):
    """I_{alpha,0}(r0) = r0^(-alpha), the recursion base case."""
    r0 = float(r0)
    if not (math.isfinite(r0) and r0 > 0):
        raise DomainError("r0 must be finite and positive")
    return r0 ** (-float(alpha))


def i_one_one(r0, r1):
    """I_{1,1}(r0, r1) = (ln r0 - ln r1) / (r0 - r1), confluent-safe.

    Uses r0 - r1 = r1 (e^x - 1) with x = ln(r0/r1), so the value is
    x / (r1 expm1(x)): stable arbitrarily close to (and at) r0 = r1.
    """
    r0, r1 = float(r0), float(r1)
    if r0 <= 0 or r1 <= 0:
        raise DomainError("arguments must be positive")
    x = math.log(r0 / r1)
    if x == 0.0:
        return 1.0 / r0
    return x / (r1 * math.expm1(x))


def i_bernoulli_series(r0, r1, n_terms):
    """Bernoulli-series evaluation of I_{1,1}(r0, r1).

    With x = ln r0 - ln r1, r1 I_{1,1} = x/(e^x - 1) = sum B_n/n! x^n.  Since
    every odd Bernoulli number beyond B_1 vanishes, n_terms counts the
    non-vanishing terms: the constant, the linear term, then one per even
    power.  Valid for |x| < 2 pi (radius of convergence).
    """
    r0, r1 = float(r0), float(r1)
    if r0 <= 0 or r1 <= 0:
        raise DomainError("arguments must be positive")
    if n_terms < 2:
        raise DomainError("need at least two series terms")
    x = math.log(r0) - math.log(r1)
    if abs(x) >= 2 * math.pi:
        raise ConvergenceError(
            f"|ln r0 - ln r1| = {abs(x):.4f} outside the convergence disc 2*pi"
        )
    total = 1.0 - 0.5 * x
    for j in range(2, n_terms):
        n = 2 * (j - 1)
        total += float(mp.bernoulli(n)) / math.factorial(n) * x ** n
    return total / r1


def i_eval(args, gap_policy=DEFAULT_GAP_POLICY):
    """Evaluate I_{alpha,k} through the divided-difference representation.

    Continuous in the arguments: below the policy's gap threshold the value is
    computed in extended precision, and fully coincident arguments return the
    confluent limit (constant-argument value r^(-alpha)/k!).
    """
    if not isinstance(args, SimplexArgs):
        raise DomainError("i_eval expects a SimplexArgs instance")
    return i_value(args.alpha, args.rs, gap_policy)


# --------------------------------------------------------------------------
# quadrature oracle
# --------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _panel_rule(order, panels):
    """Gauss-Legendre nodes/weights on [0,1] split into equal panels."""
    x, w = np.polynomial.legendre.leggauss(order)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    nodes = np.concatenate([(x + i) / panels for i in range(panels)])
    weights = np.tile(w / panels, panels)
    return nodes, weights


def _rungs_for(k):
    if k <= 1:
        return [(16, 1), (24, 1), (32, 1), (48, 1), (64, 1), (64, 2), (64, 4), (64, 8)]
    if k == 2:
        return [(12, 1), (20, 1), (32, 1), (48, 1), (64, 1), (64, 2), (64, 4)]
    if k == 3:
        return [(10, 1), (16, 1), (24, 1), (36, 1), (52, 1), (72, 1), (104, 1)]
    return [(8, 1), (14, 1), (22, 1), (32, 1), (48, 1), (64, 1), (88, 1)]


def _tensor_rung(alpha, rs, order, panels):
    """One tensor-product Gauss-Legendre evaluation on the Duffy cube.

    The substitution s_j = t_1 t_2 ... t_j maps [0,1]^k onto the simplex with
    Jacobian prod_j t_j^(k-j), absorbed into the per-axis weights.  The first
    axis is chunked to bound memory for k = 3, 4.
    """
    k = len(rs) - 1
    nodes, weights = _panel_rule(order, panels)
    diffs = [rs[j] - rs[j - 1] for j in range(1, k + 1)]
    # axis i (0-based) carries Jacobian power k-1-i
    wts = [weights * nodes ** (k - 1 - i) for i in range(k)]

    total = 0.0
    npts = len(nodes)
    chunk = max(1, min(npts, int(4e6 // max(1, npts ** (k - 1)))))
    for start in range(0, npts, chunk):
        sl = slice(start, start + chunk)
        cum = nodes[sl].reshape((-1,) + (1,) * (k - 1))
        val = rs[0] + diffs[0] * cum
        for j in range(1, k):
            shape = (1,) * j + (-1,) + (1,) * (k - 1 - j)
            cum = cum * nodes.reshape(shape)
            val = val + diffs[j] * cum
        block = val ** (-alpha)
        block = block * wts[0][sl].reshape((-1,) + (1,) * (k - 1))
        for j in range(1, k):
            block = block * wts[j].reshape((1,) * j + (-1,) + (1,) * (k - 1 - j))
        total += float(block.sum())
    return total


def i_quadrature(args, rel_tol=1e-10):
    """Adaptive simplex quadrature of the defining integral (the oracle).

    Escalates Gauss-Legendre order (and panel count for small k) until two
    successive rungs agree to rel_tol.  Raises QuadratureError carrying the
    best value and achieved error estimate if the ladder is exhausted.
    """
    if not isinstance(args, SimplexArgs):
        raise DomainError("i_quadrature expects a SimplexArgs instance")
    if not (0 < rel_tol <= 1e-4):
        raise DomainError("rel_tol must lie in (0, 1e-4]")
    alpha, k, rs = args.alpha, args.k, args.rs
    if k == 0:
        return rs[0] ** (-alpha)

    prev = None
    achieved = math.inf
    for order, panels in _rungs_for(k):
        cur = _tensor_rung(alpha, rs, order, panels)
        if prev is not None:
            achieved = abs(cur - prev) / max(abs(cur), 1e-300)
            if achieved <= rel_tol:
                return cur
        prev = cur
    raise QuadratureError(
        f"simplex quadrature did not reach rel_tol={rel_tol:.1e} "
        f"(achieved {achieved:.3e})",
        value=prev,
        achieved_rel_error=achieved,
    )
