"""Spectral functions multiplying the sandwich terms of the R2 density.

Three layers live here:

* the coordinate-form family ``F_*`` (nine functions of two or three
  positive arguments, two of them carrying metric-gradient vectors), each a
  fixed combination of the universal divided differences ``I_{d/2+p,k}``;
* the covariant family ``G_*`` (seven functions) obtained from the F family
  by regrouping, together with the algebraic relations that express four of
  the G's through the other three and the vanishing combinations that make
  the covariant assembly connection-independent;
* closed forms of the G family in low dimensions: logarithms for d = 2,
  Laurent polynomials for even d >= 4, square roots for d = 3 (with the
  Q1..Q4 helper functions), plus the two spectral functions of the
  conformally transformed Laplacian k.Delta.k.

Everything is scalar-in, scalar-out; the density assembly tabulates these
over cluster eigenvalue tuples.  Confluent (coincident) arguments are legal
throughout: the I-based path inherits the gap policy of ``i_value``, and the
d = 2 closed forms escalate to extended precision the same way (the other
closed branches are cancellation-free and run in float64).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import mpmath

from .errors import DomainError, ValidationError
from .ifuncs import DEFAULT_GAP_POLICY, i_value, min_rel_gap

__all__ = [
    "SpectralFunctionId",
    "F_NAMES",
    "G_NAMES",
    "Q_NAMES",
    "FCONF_NAMES",
    "f_w",
    "f_dv",
    "f_ddu",
    "f_du_parts",
    "f_v_parts",
    "f_vv",
    "f_duv",
    "f_vdu",
    "f_dudu",
    "g_value",
    "g_closed",
    "q_helper",
    "fconf_dk",
    "fconf_dk_simplified",
    "fconf_dkdk",
    "spectral_fn_eval",
    "g_relations_check",
    "uv_vanishing_check",
]


F_NAMES = (
    "F_w", "F_dv", "F_ddu", "F_du", "F_v",
    "F_vv", "F_duv", "F_vdu", "F_dudu",
)
G_NAMES = ("G_q", "G_ddu", "G_dp", "G_dudu", "G_pdu", "G_dup", "G_pp")
Q_NAMES = ("Q1", "Q2", "Q3", "Q4")
FCONF_NAMES = ("Fconf_dk", "Fconf_dkdk")

# Unicode spellings accepted as aliases for the canonical ASCII names.
_ALIASES = {
    "F_∂v": "F_dv",
    "F_∂∂u": "F_ddu",
    "F_∂u^μ": "F_du",
    "F_{v,μ}": "F_v",
    "F_{v,v}": "F_vv",
    "F_{∂u,v}": "F_duv",
    "F_{v,∂u}": "F_vdu",
    "F_{∂u,∂u}": "F_dudu",
    "G_∇∇u": "G_ddu",
    "G_∇p": "G_dp",
    "G_∇u∇u": "G_dudu",
    "G_p∇u": "G_pdu",
    "G_∇up": "G_dup",
    "Q₁": "Q1",
    "Q₂": "Q2",
    "Q₃": "Q3",
    "Q₄": "Q4",
    "F^{kΔk}_{Δk}": "Fconf_dk",
    "F^{kΔk}_{∇k∇k}": "Fconf_dkdk",
}

_ARITY = {name: 2 for name in ("F_w", "F_dv", "F_ddu", "F_du", "F_v")}
_ARITY.update({name: 3 for name in ("F_vv", "F_duv", "F_vdu", "F_dudu")})
_ARITY.update({"G_q": 2, "G_ddu": 2, "G_dp": 2})
_ARITY.update({name: 3 for name in ("G_dudu", "G_pdu", "G_dup", "G_pp")})
_ARITY.update({name: 3 for name in Q_NAMES})
_ARITY.update({"Fconf_dk": 2, "Fconf_dkdk": 3})

_FAMILY_OF = {}
for _n in F_NAMES:
    _FAMILY_OF[_n] = "F"
for _n in G_NAMES:
    _FAMILY_OF[_n] = "G"
for _n in Q_NAMES:
    _FAMILY_OF[_n] = "Q"
for _n in FCONF_NAMES:
    _FAMILY_OF[_n] = "Fconf"


@dataclass(frozen=True)
class SpectralFunctionId:
    """Identifies one spectral function: family, name, and dimension."""

    family: str
    name: str
    d: int

    def __post_init__(self):
        name = _ALIASES.get(self.name, self.name)
        object.__setattr__(self, "name", name)
        if name not in _FAMILY_OF:
            raise ValidationError(f"unknown spectral function {self.name!r}")
        if _FAMILY_OF[name] != self.family:
            raise ValidationError(
                f"{name} belongs to family {_FAMILY_OF[name]!r}, "
                f"not {self.family!r}"
            )
        if not (isinstance(self.d, int) and self.d >= 1):
            raise ValidationError("dimension must be a positive integer")
        # The Q helpers only back a specific closed-form branch.
        if name in ("Q1", "Q2") and self.d != 2:
            raise ValidationError(f"{name} is a d=2 helper, got d={self.d}")
        if name in ("Q3", "Q4") and self.d != 3:
            raise ValidationError(f"{name} is a d=3 helper, got d={self.d}")

    @property
    def arity(self):
        return _ARITY[self.name]


def _default_ifun(policy):
    def ifun(alpha, rs):
        return i_value(alpha, rs, policy)

    return ifun


def _check_rs(rs, arity):
    if len(rs) != arity:
        raise DomainError(
            f"expected {arity} spectral arguments, got {len(rs)}"
        )
    for r in rs:
        if not (r > 0 and math.isfinite(r)):
            raise DomainError(f"spectral arguments must be positive, got {r}")


# --------------------------------------------------------------------------
# coordinate-form family: combinations of I_{d/2+p,k}
# --------------------------------------------------------------------------

def f_w(d, rs, ifun=None):
    _check_rs(rs, 2)
    ifun = ifun or _default_ifun(DEFAULT_GAP_POLICY)
    r0, r1 = rs
    return ifun(d / 2, (r0, r1))


def f_dv(d, rs, ifun=None):
    _check_rs(rs, 2)
    ifun = ifun or _default_ifun(DEFAULT_GAP_POLICY)
    r0, r1 = rs
    return -r0 * ifun(d / 2 + 1, (r0, r0, r1))


def f_ddu(d, rs, ifun=None):
    _check_rs(rs, 2)
    ifun = ifun or _default_ifun(DEFAULT_GAP_POLICY)
    r0, r1 = rs
    return (
        -(d / 2) * r0 * ifun(d / 2 + 1, (r0, r0, r1))
        + (d + 2) * r0**2 * ifun(d / 2 + 2, (r0, r0, r0, r1))
    )


def f_du_parts(d, rs, ifun=None):
    """Coefficients (c_alpha, c_beta) of F_du = alpha^mu c_a + beta^mu c_b."""
    _check_rs(rs, 2)
    ifun = ifun or _default_ifun(DEFAULT_GAP_POLICY)
    r0, r1 = rs
    i2 = ifun(d / 2 + 1, (r0, r0, r1))
    a3 = ifun(d / 2 + 2, (r0, r0, r0, r1))
    b3 = ifun(d / 2 + 2, (r0, r0, r1, r1))
    s4 = (
        3 * r0**3 * ifun(d / 2 + 3, (r0, r0, r0, r0, r1))
        + 2 * r0**2 * r1 * ifun(d / 2 + 3, (r0, r0, r0, r1, r1))
        + r0 * r1**2 * ifun(d / 2 + 3, (r0, r0, r1, r1, r1))
    )
    c_alpha = (
        -r0 * i2
        + ((d + 6) / 2) * r0**2 * a3
        + ((d + 4) / 2) * r0 * r1 * b3
        - ((d + 4) / 2) * s4
    )
    c_beta = (d + 6) * r0**2 * a3 + 2 * r0 * r1 * b3 - (d + 4) * s4
    return c_alpha, c_beta


def f_v_parts(d, rs, ifun=None):
    """Coefficients (c_alpha, c_beta) of F_v = alpha_mu c_a + beta_mu c_b."""
    _check_rs(rs, 2)
    ifun = ifun or _default_ifun(DEFAULT_GAP_POLICY)
    r0, r1 = rs
    tail = (
        r1**2 * ifun(d / 2 + 2, (r0, r1, r1, r1))
        + r0 * r1 * ifun(d / 2 + 2, (r0, r0, r1, r1))
        + r0**2 * ifun(d / 2 + 2, (r0, r0, r0, r1))
    )
    c_alpha = -0.5 * r1 * ifun(d / 2 + 1, (r0, r1, r1)) + 0.5 * tail
    return c_alpha, tail


def f_vv(d, rs, ifun=None):
    _check_rs(rs, 3)
    ifun = ifun or _default_ifun(DEFAULT_GAP_POLICY)
    r0, r1, r2 = rs
    return -0.5 * ifun(d / 2 + 1, (r0, r1, r2))


def f_duv(d, rs, ifun=None):
    _check_rs(rs, 3)
    ifun = ifun or _default_ifun(DEFAULT_GAP_POLICY)
    r0, r1, r2 = rs
    return ((d + 2) / 2) * r0 * ifun(d / 2 + 2, (r0, r0, r1, r2))


def f_vdu(d, rs, ifun=None):
    _check_rs(rs, 3)
    ifun = ifun or _default_ifun(DEFAULT_GAP_POLICY)
    r0, r1, r2 = rs
    return (
        -(d / 2) * ifun(d / 2 + 1, (r0, r1, r2))
        + ((d + 2) / 2) * r1 * ifun(d / 2 + 2, (r0, r1, r1, r2))
        + ((d + 2) / 2) * r0 * ifun(d / 2 + 2, (r0, r0, r1, r2))
    )


def f_dudu(d, rs, ifun=None):
    _check_rs(rs, 3)
    ifun = ifun or _default_ifun(DEFAULT_GAP_POLICY)
    r0, r1, r2 = rs
    return (
        ((d + 2) ** 2 / 2) * r0 * ifun(d / 2 + 2, (r0, r0, r1, r2))
        - ((d + 4) * (d + 2) / 2)
        * (
            2 * r0**2 * ifun(d / 2 + 3, (r0, r0, r0, r1, r2))
            + r0 * r1 * ifun(d / 2 + 3, (r0, r0, r1, r1, r2))
        )
    )


# --------------------------------------------------------------------------
# covariant family: regrouped F's
# --------------------------------------------------------------------------

def g_value(name, d, rs, ifun=None):
    """Covariant spectral function via its defining F combination."""
    name = _ALIASES.get(name, name)
    ifun = ifun or _default_ifun(DEFAULT_GAP_POLICY)
    if name == "G_q":
        return f_w(d, rs, ifun)
    if name == "G_ddu":
        return f_ddu(d, rs, ifun) + f_dv(d, rs, ifun)
    if name == "G_dp":
        return f_dv(d, rs, ifun)
    if name == "G_dudu":
        return (
            f_dudu(d, rs, ifun)
            + f_vdu(d, rs, ifun)
            + f_duv(d, rs, ifun)
            + f_vv(d, rs, ifun)
        )
    if name == "G_pdu":
        return f_vdu(d, rs, ifun) + f_vv(d, rs, ifun)
    if name == "G_dup":
        return f_duv(d, rs, ifun) + f_vv(d, rs, ifun)
    if name == "G_pp":
        return f_vv(d, rs, ifun)
    raise ValidationError(f"unknown covariant spectral function {name!r}")


# --------------------------------------------------------------------------
# Q helpers (d=2 log and d=3 square-root closed forms)
# --------------------------------------------------------------------------

def _q1(a, b, c, lib):
    num = (
        -3 * a**3 + a**2 * b - 6 * a**2 * c + 6 * a * b * c
        + a * c**2 + b * c**2
    )
    return num / (2 * (a - b) ** 2 * (a - c) ** 3)


def _q2(a, b, c, lib):
    return 0.5 * (
        2 / ((a - b) * (a - c))
        + ((a + b) * (a + c) - 4 * a**2)
        / ((a - b) ** 2 * (a - c) ** 2) * lib.log(a)
        + (a + b) / ((b - a) ** 2 * (b - c)) * lib.log(b)
        + (a + c) / ((c - a) ** 2 * (c - b)) * lib.log(c)
    )


def _q3(a, b, c, lib):
    sa, sb, sc = lib.sqrt(a), lib.sqrt(b), lib.sqrt(c)
    return (
        6 * sa * sb * sc
        + a * sa + 2 * b * sb + c * sc
        + sa * sc * (sa + sc)
        + 2 * (a * (sb + sc) + 2 * b * (sa + sc) + c * (sa + sb))
    )


def _q4(a, b, c, lib):
    sa, sb, sc = lib.sqrt(a), lib.sqrt(b), lib.sqrt(c)
    num = a + b + c + 2 * sa * sb + 2 * sa * sc + sb * sc
    den = sb * sc * (sa + sb) ** 2 * (sa + sc) ** 2 * (sb + sc)
    return num / den


def q_helper(name, rs):
    """Evaluate one of the Q1..Q4 closed-form helpers."""
    name = _ALIASES.get(name, name)
    _check_rs(rs, 3)
    a, b, c = rs
    if name in ("Q1", "Q2"):
        if a == b or a == c or (name == "Q2" and b == c):
            raise DomainError(f"{name} needs pairwise distinct arguments")
        return (_q1 if name == "Q1" else _q2)(a, b, c, math)
    if name == "Q3":
        return _q3(a, b, c, math)
    if name == "Q4":
        return _q4(a, b, c, math)
    raise ValidationError(f"unknown helper {name!r}")


# --------------------------------------------------------------------------
# closed-form G branches
# --------------------------------------------------------------------------

def _g_log_d2(name, rs, lib):
    if name in ("G_q", "G_ddu", "G_dp"):
        r0, r1 = rs
        ell = (lib.log(r0) - lib.log(r1)) / (r0 - r1)
        if name == "G_q":
            return ell
        if name == "G_dp":
            return (1 - r0 * ell) / (r0 - r1)
        return -(r0 + r1 - 2 * r0 * r1 * ell) / (r0 - r1) ** 2
    r0, r1, r2 = rs
    if name == "G_dudu":
        return (
            (r0 + r2) * (r0 - 2 * r1 + r2)
            / ((r0 - r1) * (r0 - r2) ** 2 * (r1 - r2))
            - _q1(r0, r1, r2, lib) * lib.log(r0)
            - (r0 + r1) * (r1 + r2)
            / (2 * (r0 - r1) ** 2 * (r1 - r2) ** 2) * lib.log(r1)
            - _q1(r2, r1, r0, lib) * lib.log(r2)
        )
    if name == "G_dup":
        return _q2(r0, r1, r2, lib)
    if name == "G_pdu":
        return -_q2(r2, r1, r0, lib)
    if name == "G_pp":
        return 0.5 * (
            lib.log(r0) / ((r0 - r1) * (r0 - r2))
            + lib.log(r1) / ((r1 - r0) * (r1 - r2))
            + lib.log(r2) / ((r2 - r0) * (r2 - r1))
        )
    raise ValidationError(f"unknown covariant spectral function {name!r}")


def _g_sqrt_d3(name, rs):
    s = [math.sqrt(r) for r in rs]
    if name in ("G_q", "G_ddu", "G_dp"):
        s0, s1 = s
        if name == "G_q":
            return 2 / (s0 * s1 * (s0 + s1))
        if name == "G_dp":
            return -(2 / 3) * (2 * s0 + s1) / (s0 * s1 * (s0 + s1) ** 2)
        return (
            -(2 / 3) * (s0 * s1 + (s0 + s1) ** 2)
            / (s0 * s1 * (s0 + s1) ** 3)
        )
    r0, r1, r2 = rs
    s0, s1, s2 = s
    if name == "G_dudu":
        return (
            (2 / 3) * _q3(r0, r1, r2, math)
            / (s1 * (s0 + s1) ** 2 * (s0 + s2) ** 3 * (s1 + s2) ** 2)
        )
    if name == "G_dup":
        return (2 / 3) * _q4(r0, r1, r2, math)
    if name == "G_pdu":
        return -(2 / 3) * _q4(r2, r1, r0, math)
    if name == "G_pp":
        return (
            -(2 / 3) * (s0 + s1 + s2)
            / (s0 * s1 * s2 * (s0 + s1) * (s0 + s2) * (s1 + s2))
        )
    raise ValidationError(f"unknown covariant spectral function {name!r}")


def _g_laurent_even(name, m, rs):
    if name in ("G_q", "G_ddu", "G_dp"):
        r0, r1 = rs
        total = 0.0
        for ell in range(m - 1):
            mono = r0 ** (ell + 1 - m) * r1 ** (-ell - 1)
            if name == "G_q":
                total += mono / (m - 1)
            elif name == "G_ddu":
                total -= (m - ell - 1) * (ell + 1) / (m * (m - 1)) * mono
            else:
                total -= (m - ell - 1) / (m * (m - 1)) * mono
        return total
    r0, r1, r2 = rs
    total = 0.0
    for k in range(m - 1):
        for ell in range(k + 1):
            mono = r0 ** (k + 1 - m) * r1 ** (ell - k - 1) * r2 ** (-ell - 1)
            if name == "G_dudu":
                coeff = -(2 * ell + 1) * (2 * k - 2 * m + 3)
            elif name == "G_pdu":
                coeff = -(2 * ell + 1)
            elif name == "G_dup":
                coeff = -(2 * k - 2 * m + 3)
            elif name == "G_pp":
                coeff = -1
            else:
                raise ValidationError(
                    f"unknown covariant spectral function {name!r}"
                )
            total += coeff / (2 * m * (m - 1)) * mono
    return total


class _MPLib:
    """Thin adapter so the d=2 closed forms run under mpmath verbatim."""

    @staticmethod
    def log(x):
        return mpmath.log(x)

    @staticmethod
    def sqrt(x):
        return mpmath.sqrt(x)


def _d2_closed_stable(name, rs):
    """d=2 log forms cancel up to fifth order at ties; escalate as needed."""
    gap = min_rel_gap(rs)
    if gap >= 0.1:
        return _g_log_d2(name, rs, math)
    # Continuous extension: exact duplicates are nudged apart by a relative
    # 1e-18 (below double precision, harmless to the limit value), and the
    # working precision grows with the digits the cancellation will eat.
    eps = 1e-18
    lost = 18.0 if gap < eps else -math.log10(gap)
    dps = int(30 + math.ceil(6 * lost))
    with mpmath.workdps(dps):
        seen = {}
        args = []
        for r in rs:
            n = seen.get(r, 0)
            seen[r] = n + 1
            args.append(mpmath.mpf(r) * (1 + n * mpmath.mpf(eps)))
        return float(_g_log_d2(name, tuple(args), _MPLib))


def g_closed(name, d, rs):
    """Closed-form covariant spectral function for d=2, d=3, or even d."""
    name = _ALIASES.get(name, name)
    if name not in G_NAMES:
        raise ValidationError(f"unknown covariant spectral function {name!r}")
    _check_rs(rs, _ARITY[name])
    if d == 2:
        return _d2_closed_stable(name, rs)
    if d == 3:
        return _g_sqrt_d3(name, rs)
    if d >= 4 and d % 2 == 0:
        return _g_laurent_even(name, d // 2, rs)
    raise DomainError(f"no closed-form branch for d={d}")


# --------------------------------------------------------------------------
# conformally transformed Laplacian k.Delta.k
# --------------------------------------------------------------------------

def fconf_dk(d, rs, ifun=None):
    """Spectral function of the E (Delta k) E term, three-term form."""
    _check_rs(rs, 2)
    r0, r1 = rs
    s0, s1 = math.sqrt(r0), math.sqrt(r1)
    return (
        -s0 * g_value("G_q", d, rs, ifun)
        - (s0 + s1) * g_value("G_ddu", d, rs, ifun)
        - (s0 - s1) * g_value("G_dp", d, rs, ifun)
    )


def fconf_dk_simplified(d, rs, ifun=None):
    """Equivalent two-term form of fconf_dk obtained from the G relations."""
    _check_rs(rs, 2)
    r0, r1 = rs
    s0, s1 = math.sqrt(r0), math.sqrt(r1)
    combo = g_value("G_q", d, rs, ifun) + 2 * g_value("G_ddu", d, rs, ifun)
    return -s0 * s1 * (s0 + s1) * combo / (r0 + r1)


def fconf_dkdk(d, rs, ifun=None):
    """Spectral function of the g^{mu nu} E (d_mu k) E (d_nu k) E term."""
    _check_rs(rs, 3)
    r0, r1, r2 = rs
    s0, s1, s2 = math.sqrt(r0), math.sqrt(r1), math.sqrt(r2)
    return (
        2 * g_value("G_ddu", d, (r0, r2), ifun)
        + (s0 + s1) * (s1 + s2) * g_value("G_dudu", d, rs, ifun)
        + (s0 - s1) * (s1 + s2) * g_value("G_pdu", d, rs, ifun)
        + (s0 + s1) * (s1 - s2) * g_value("G_dup", d, rs, ifun)
        + (s0 - s1) * (s1 - s2) * g_value("G_pp", d, rs, ifun)
    )


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def spectral_fn_eval(sfid, rs, geo=None, policy=DEFAULT_GAP_POLICY):
    """Evaluate a spectral function by id at the given argument tuple.

    ``geo`` supplies the (alpha, beta) metric-gradient components for the
    two vector-valued members F_du and F_v; it is rejected elsewhere.
    """
    if not isinstance(sfid, SpectralFunctionId):
        raise ValidationError("sfid must be a SpectralFunctionId")
    rs = tuple(float(r) for r in rs)
    _check_rs(rs, sfid.arity)
    name, d = sfid.name, sfid.d
    needs_geo = name in ("F_du", "F_v")
    if needs_geo and geo is None:
        raise ValidationError(f"{name} requires geo=(alpha, beta) components")
    if geo is not None and not needs_geo:
        raise ValidationError(f"{name} does not take geo data")
    ifun = _default_ifun(policy)
    if name == "F_du":
        a, b = geo
        c_a, c_b = f_du_parts(d, rs, ifun)
        return a * c_a + b * c_b
    if name == "F_v":
        a, b = geo
        c_a, c_b = f_v_parts(d, rs, ifun)
        return a * c_a + b * c_b
    if sfid.family == "F":
        fn = {
            "F_w": f_w, "F_dv": f_dv, "F_ddu": f_ddu,
            "F_vv": f_vv, "F_duv": f_duv, "F_vdu": f_vdu,
            "F_dudu": f_dudu,
        }[name]
        return fn(d, rs, ifun)
    if sfid.family == "G":
        return g_value(name, d, rs, ifun)
    if sfid.family == "Q":
        return q_helper(name, rs)
    if name == "Fconf_dk":
        return fconf_dk(d, rs, ifun)
    return fconf_dkdk(d, rs, ifun)


# --------------------------------------------------------------------------
# identity checks
# --------------------------------------------------------------------------

def g_relations_check(rs, d, policy=DEFAULT_GAP_POLICY):
    """Max residual of the G-family relations at one argument triple.

    Checks the four expressions of G_dp, G_dup, G_pdu, G_pp through
    (G_q, G_ddu, G_dudu) and the six vanishing combinations from which
    those expressions follow.
    """
    _check_rs(rs, 3)
    r0, r1, r2 = rs
    ifun = _default_ifun(policy)

    def g(name, *args):
        return g_value(name, d, args, ifun)

    gq01, gq02 = g("G_q", r0, r1), g("G_q", r0, r2)
    gn01, gn02 = g("G_ddu", r0, r1), g("G_ddu", r0, r2)
    gp01, gp02 = g("G_dp", r0, r1), g("G_dp", r0, r2)
    gxx = g("G_dudu", r0, r1, r2)
    gpd = g("G_pdu", r0, r1, r2)
    gdp_ = g("G_dup", r0, r1, r2)
    gpp = g("G_pp", r0, r1, r2)

    residuals = [
        # the four explicit expressions
        gp01 + (r0 * gq01 + (r0 - r1) * gn01) / (r0 + r1),
        gdp_ + (
            r2 * gq02 + (r0 + 3 * r2) * gn02
            + (r0 + r2) * (r1 - r2) * gxx
        ) / ((r0 + r2) * (r1 + r2)),
        gpd - (
            r0 * gq02 + (3 * r0 + r2) * gn02
            + (r0 + r2) * (r1 - r0) * gxx
        ) / ((r0 + r2) * (r1 + r0)),
        gpp + (
            r1 * gq02 - (r0 - 2 * r1 + r2) * gn02
            - (r0 - r1) * (r1 - r2) * gxx
        ) / ((r0 + r1) * (r1 + r2)),
        # the six combinations whose vanishing proves them
        r0 * gq01 + (r0 - r1) * gn01 + (r0 + r1) * gp01,
        gp02 - (r0 - r1) * gdp_ - (r0 + r1) * gpp,
        gq02 + gp02 + (r1 - r2) * gpd + (r1 + r2) * gpp,
        2 * gn02 - gp02 - (r0 - r1) * gxx - (r0 + r1) * gpd,
        gq02 + 2 * gn02 + gp02 + (r1 - r2) * gxx + (r1 + r2) * gdp_,
        (
            r0 * gq02 + (r0 - 2 * r1 + r2) * gn02 + (r0 - r2) * gp02
            + (r0 - r1) * (r1 - r2) * gxx
            + (r0 + r1) * (r1 - r2) * gpd
            + (r0 - r1) * (r1 + r2) * gdp_
            + (r0 + r1) * (r1 + r2) * gpp
        ),
    ]
    return max(abs(r) for r in residuals)


def uv_vanishing_check(d, rs, geo, policy=DEFAULT_GAP_POLICY):
    """Residuals of the two assembled coefficients that must cancel.

    Rewriting the coordinate-form assembly over a covariant derivative
    leaves stray E (nabla u) E and E p E terms whose coefficients are the
    combinations returned here; both vanish identically, which is what
    makes the covariant form connection-independent.
    """
    _check_rs(rs, 2)
    a, b = geo
    r0, r1 = rs
    ifun = _default_ifun(policy)
    ca_du, cb_du = f_du_parts(d, rs, ifun)
    ca_v, cb_v = f_v_parts(d, rs, ifun)
    f_du_val = a * ca_du + b * cb_du
    f_v_val = a * ca_v + b * cb_v
    dv = f_dv(d, rs, ifun)
    bracket = (
        f_ddu(d, rs, ifun)
        - r0 * f_vdu(d, (r0, r0, r1), ifun)
        - r1 * f_duv(d, (r0, r1, r1), ifun)
        - r0 * f_vv(d, (r0, r0, r1), ifun)
        - r1 * f_vv(d, (r0, r1, r1), ifun)
    )
    g_du = f_du_val + f_v_val + b * dv + (a / 2 - b) * bracket
    g_p = f_v_val + (a / 2) * dv - (a / 2 - b) * (
        r0 * f_vv(d, (r0, r0, r1), ifun)
        + r1 * f_vv(d, (r0, r1, r1), ifun)
    )
    return g_du, g_p
