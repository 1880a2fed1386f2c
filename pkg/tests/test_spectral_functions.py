"""Tests for the sandwich-term spectral functions.

Covers the raw divided-difference family, the covariant regrouping, the
low-dimensional closed forms, and the algebraic identities tying them
together.  The "reduced" expressions transcribed locally in this file give
an independent route to the same functions (valid at separated arguments
only), so agreement is a genuine cross-check rather than a tautology.
"""

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatcoeff.errors import ConfluenceError, DomainError, ValidationError
from heatcoeff.ifuncs import GapPolicy, i_value, min_rel_gap
from heatcoeff.spectral_functions import (
    F_NAMES,
    G_NAMES,
    SpectralFunctionId,
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
    g_relations_check,
    g_value,
    q_helper,
    spectral_fn_eval,
    uv_vanishing_check,
)

DIMS = (2, 3, 4, 6)


def _sep_tuple(rng, n, lo=0.2, hi=8.0, gap=0.05):
    """Random positive n-tuple with all pairwise relative gaps >= gap."""
    while True:
        rs = tuple(rng.uniform(lo, hi) for _ in range(n))
        if min_rel_gap(rs) >= gap:
            return rs


# ----------------------------------------------------------------- identifiers

def test_spectral_function_id_basics():
    sid = SpectralFunctionId("G", "G_q", 4)
    assert sid.arity == 2
    assert SpectralFunctionId("F", "F_dudu", 3).arity == 3
    # unicode spellings normalize to the canonical ASCII names
    assert SpectralFunctionId("G", "G_∇∇u", 3).name == "G_ddu"
    assert SpectralFunctionId("Q", "Q₁", 2).name == "Q1"


def test_spectral_function_id_validation():
    with pytest.raises(ValidationError):
        SpectralFunctionId("G", "G_nope", 4)
    with pytest.raises(ValidationError):
        SpectralFunctionId("F", "G_q", 4)  # family mismatch
    with pytest.raises(ValidationError):
        SpectralFunctionId("G", "G_q", 0)
    with pytest.raises(ValidationError):
        SpectralFunctionId("G", "G_q", 2.5)
    # the Q helpers back one closed-form branch each
    with pytest.raises(ValidationError):
        SpectralFunctionId("Q", "Q1", 3)
    with pytest.raises(ValidationError):
        SpectralFunctionId("Q", "Q3", 2)
    assert SpectralFunctionId("Q", "Q4", 3).arity == 3


def test_spectral_fn_eval_dispatch():
    sid = SpectralFunctionId("F", "F_w", 4)
    assert spectral_fn_eval(sid, (2.0, 3.0)) == pytest.approx(1 / 6, rel=1e-13)
    gq = SpectralFunctionId("G", "G_q", 4)
    assert spectral_fn_eval(gq, (2.0, 3.0)) == pytest.approx(1 / 6, rel=1e-13)
    q1 = SpectralFunctionId("Q", "Q1", 2)
    assert spectral_fn_eval(q1, (1.0, 2.0, 3.0)) == pytest.approx(
        q_helper("Q1", (1.0, 2.0, 3.0)), rel=1e-14
    )
    with pytest.raises(ValidationError):
        spectral_fn_eval("F_w", (2.0, 3.0))


def test_spectral_fn_eval_geo_handling():
    du = SpectralFunctionId("F", "F_du", 4)
    with pytest.raises(ValidationError):
        spectral_fn_eval(du, (2.0, 3.0))  # needs (alpha, beta)
    with pytest.raises(ValidationError):
        spectral_fn_eval(SpectralFunctionId("F", "F_w", 4), (2.0, 3.0),
                         geo=(0.1, 0.2))
    a, b = 0.37, -0.21
    got = spectral_fn_eval(du, (2.0, 3.0), geo=(a, b))
    c_a, c_b = f_du_parts(4, (2.0, 3.0))
    assert got == pytest.approx(a * c_a + b * c_b, rel=1e-13)


def test_spectral_fn_eval_domain_errors():
    sid = SpectralFunctionId("F", "F_w", 4)
    with pytest.raises(DomainError):
        spectral_fn_eval(sid, (2.0,))
    with pytest.raises(DomainError):
        spectral_fn_eval(sid, (2.0, -3.0))
    strict = GapPolicy(mode="strict")
    with pytest.raises(ConfluenceError):
        spectral_fn_eval(sid, (2.0, 2.0 * (1 + 1e-9)), policy=strict)


# ---------------------------------------------------------------- frozen values

def test_minimal_case_values():
    # the three numbers behind the u = 1 reduction, in any dimension
    for d in (2, 3, 4, 5, 7):
        assert g_value("G_q", d, (1.0, 1.0)) == pytest.approx(1.0, rel=1e-12)
        assert g_value("G_dp", d, (1.0, 1.0)) == pytest.approx(-0.5, rel=1e-12)
        assert g_value("G_pp", d, (1.0, 1.0, 1.0)) == pytest.approx(
            -0.25, rel=1e-12
        )


def test_d4_closed_values():
    assert g_closed("G_q", 4, (2.0, 3.0)) == pytest.approx(1 / 6, rel=1e-14)
    assert g_closed("G_ddu", 4, (2.0, 3.0)) == pytest.approx(-1 / 12, rel=1e-14)
    assert g_closed("G_dp", 4, (2.0, 3.0)) == pytest.approx(-1 / 12, rel=1e-14)
    assert g_closed("G_dudu", 4, (2.0, 3.0, 5.0)) == pytest.approx(
        1 / 120, rel=1e-14
    )
    assert g_closed("G_pdu", 4, (2.0, 3.0, 5.0)) == pytest.approx(
        -1 / 120, rel=1e-14
    )
    assert g_closed("G_dup", 4, (2.0, 3.0, 5.0)) == pytest.approx(
        1 / 120, rel=1e-14
    )
    assert g_closed("G_pp", 4, (2.0, 3.0, 5.0)) == pytest.approx(
        -1 / 120, rel=1e-14
    )


def test_q_helper_values():
    assert q_helper("Q1", (1.0, 2.0, 3.0)) == pytest.approx(-2.75, rel=1e-13)
    assert q_helper("Q2", (2.0, 3.0, 5.0)) == pytest.approx(
        0.0046695905069910615, rel=1e-10
    )
    assert q_helper("Q3", (1.0, 1.0, 1.0)) == pytest.approx(28.0, rel=1e-14)
    assert q_helper("Q4", (1.0, 1.0, 1.0)) == pytest.approx(0.25, rel=1e-14)
    # the rational/log helpers need separated arguments
    with pytest.raises(DomainError):
        q_helper("Q1", (2.0, 2.0, 3.0))
    with pytest.raises(DomainError):
        q_helper("Q2", (2.0, 3.0, 3.0))
    with pytest.raises(ValidationError):
        q_helper("Q9", (1.0, 2.0, 3.0))


# ------------------------------------------------- raw family vs reduced forms

def _ii(d, x, y):
    return i_value(d / 2, (x, y))


def _red_dv(d, r0, r1):
    return 2 * r0 * (_ii(d, r0, r0) - _ii(d, r0, r1)) / (d * (r0 - r1))


def _red_ddu(d, r0, r1):
    num = 4 * r0 * _ii(d, r0, r0) + ((d - 4) * r0 - d * r1) * _ii(d, r0, r1)
    return -r0 * num / (d * (r0 - r1) ** 2)


def _red_du(d, r0, r1, a, b):
    return -(a / 2 - b) * _red_ddu(d, r0, r1)


def _red_v(d, r0, r1, a, b):
    term = -a * r0 * (_ii(d, r0, r0) - _ii(d, r0, r1)) / (d * (r0 - r1))
    return term - 0.5 * (a / 2 - b) * _ii(d, r0, r1)


def _red_vv(d, r0, r1, r2):
    return (_ii(d, r0, r1) - _ii(d, r0, r2)) / (d * (r1 - r2))


def _red_duv(d, r0, r1, r2):
    return (2 * r0 / d) * (
        _ii(d, r0, r0) / ((r0 - r1) * (r0 - r2))
        + _ii(d, r0, r1) / ((r1 - r0) * (r1 - r2))
        + _ii(d, r0, r2) / ((r2 - r0) * (r2 - r1))
    )


def _red_vdu(d, r0, r1, r2):
    return (
        -2 * r0 * _ii(d, r0, r0) / (d * (r0 - r2) * (r1 - r2))
        - 2 * r1 * _ii(d, r0, r1) / (d * (r1 - r2) ** 2)
        - (
            (d - 4) * r0 * r1 - (d - 2) * r0 * r2
            - (d - 2) * r1 * r2 + d * r2**2
        ) * _ii(d, r0, r2) / (d * (r0 - r2) * (r1 - r2) ** 2)
    )


def _red_dudu(d, r0, r1, r2):
    pref = 4 * r0 / (d * (r0 - r1) * (r0 - r2) ** 2 * (r1 - r2) ** 2)
    return pref * (
        r0 * (r1 - r2) * (r0 - 2 * r1 + r2) * _ii(d, r0, r0)
        + r1 * (r0 - r2) ** 2 * _ii(d, r0, r1)
        + 0.5 * (r0 - r1) * (
            (d - 4) * r0 * r1 - (d - 2) * r0 * r2
            - d * r1 * r2 + (d + 2) * r2**2
        ) * _ii(d, r0, r2)
    )


@pytest.mark.parametrize("d", DIMS)
def test_raw_family_matches_reduced_forms(d):
    rng = random.Random(100 + d)
    for _ in range(6):
        r0, r1, r2 = _sep_tuple(rng, 3)
        a, b = rng.uniform(-1, 1), rng.uniform(-1, 1)
        pairs = [
            (f_dv(d, (r0, r1)), _red_dv(d, r0, r1)),
            (f_ddu(d, (r0, r1)), _red_ddu(d, r0, r1)),
            (f_vv(d, (r0, r1, r2)), _red_vv(d, r0, r1, r2)),
            (f_duv(d, (r0, r1, r2)), _red_duv(d, r0, r1, r2)),
            (f_vdu(d, (r0, r1, r2)), _red_vdu(d, r0, r1, r2)),
            (f_dudu(d, (r0, r1, r2)), _red_dudu(d, r0, r1, r2)),
        ]
        c_a, c_b = f_du_parts(d, (r0, r1))
        pairs.append((a * c_a + b * c_b, _red_du(d, r0, r1, a, b)))
        c_a, c_b = f_v_parts(d, (r0, r1))
        pairs.append((a * c_a + b * c_b, _red_v(d, r0, r1, a, b)))
        for got, want in pairs:
            assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


# --------------------------------------------- coincident-argument collapse

@pytest.mark.parametrize("m", (1, 2, 3))
def test_collapse_identities_even_d(m):
    # at coincident arguments the raw family collapses to r0^-m multiples
    # and the three-argument members to short Laurent sums (d = 2m even)
    d = 2 * m
    rng = random.Random(40 + m)
    for _ in range(4):
        r0 = rng.uniform(0.3, 4.0)
        r1 = rng.uniform(0.3, 4.0)
        a, b = rng.uniform(-1, 1), rng.uniform(-1, 1)
        tol = 1e-10

        assert abs(f_w(d, (r0, r0)) - r0**-m) <= tol * r0**-m
        want = (m - 2) / 6 * (a / 2 - b) * r0**-m
        c_a, c_b = f_du_parts(d, (r0, r0))
        assert abs(a * c_a + b * c_b - want) <= tol * max(1.0, abs(want))
        want = -(m - 2) / 6 * r0**-m
        assert abs(f_ddu(d, (r0, r0)) - want) <= tol * max(1.0, abs(want))
        want = 0.5 * b * r0**-m
        c_a, c_b = f_v_parts(d, (r0, r0))
        assert abs(a * c_a + b * c_b - want) <= tol * max(1.0, abs(want))
        want = -0.5 * r0**-m
        assert abs(f_dv(d, (r0, r0)) - want) <= tol * abs(want)

        mono = [r0 ** (-l - 1) * r1 ** (l - m) for l in range(m)]
        want = -sum(mono) / (4 * m)
        got = 0.5 * (f_vv(d, (r0, r1, r0)) + f_vv(d, (r1, r0, r1)))
        assert abs(got - want) <= tol * max(1.0, abs(want))
        want = sum(
            ((m - 2) / 6 - l * (m - l - 1) / (2 * m)) * mono[l]
            for l in range(m)
        )
        got = 0.5 * (f_dudu(d, (r0, r1, r0)) + f_dudu(d, (r1, r0, r1)))
        assert abs(got - want) <= tol * max(1.0, abs(want))
        want = sum((m - 2 * l) * mono[l] for l in range(m)) / (2 * m)
        got = f_vdu(d, (r0, r1, r0)) + f_duv(d, (r1, r0, r1))
        assert abs(got - want) <= tol * max(1.0, abs(want))


# ------------------------------------------------- relations among the G family

def test_g_relations_frozen_examples():
    assert g_relations_check((1.0, 1.0, 1.0), d=4) <= 1e-12
    assert g_relations_check((2.0, 3.0, 5.0), d=4) <= 1e-12
    assert g_relations_check((1.1, 0.9, 2.7), d=2) <= 1e-12


@pytest.mark.parametrize("d", DIMS)
def test_g_relations_random(d):
    rng = random.Random(17 * d)
    for _ in range(5):
        rs = tuple(rng.uniform(0.2, 8.0) for _ in range(3))
        assert g_relations_check(rs, d=d) <= 1e-10


@pytest.mark.parametrize("d", DIMS)
def test_connection_independence_combinations_vanish(d):
    # the two coefficient combinations left over when rewriting the
    # coordinate assembly through a covariant derivative must cancel
    rng = random.Random(23 * d)
    for _ in range(5):
        rs = _sep_tuple(rng, 2, gap=0.0)
        geo = (rng.uniform(-2, 2), rng.uniform(-2, 2))
        g_du, g_p = uv_vanishing_check(d, rs, geo)
        assert abs(g_du) <= 1e-12
        assert abs(g_p) <= 1e-12


# ----------------------------------------------------- closed forms vs raw I

@pytest.mark.parametrize("d,names", [
    (2, G_NAMES),
    (3, G_NAMES),
    (4, G_NAMES),
    (6, G_NAMES),
    (8, G_NAMES),
])
def test_closed_forms_match_raw(d, names):
    rng = random.Random(1000 + d)
    for _ in range(5):
        rs3 = _sep_tuple(rng, 3)
        for name in names:
            rs = rs3 if name in ("G_dudu", "G_pdu", "G_dup", "G_pp") else rs3[:2]
            got = g_closed(name, d, rs)
            want = g_value(name, d, rs)
            assert abs(got - want) <= 1e-10 * max(1.0, abs(want)), (d, name)


def test_closed_d2_tie_ladder():
    # the log-based d=2 forms must stay glued to the I-function route all
    # the way into exact confluence
    for gap in (1e-3, 1e-6, 1e-9, 1e-12, 0.0):
        r0 = 2.0
        r1 = r0 * (1 + gap)
        rs2 = (r0, r1)
        rs3 = (r0, r1, 5.0)
        for name in G_NAMES:
            rs = rs3 if name in ("G_dudu", "G_pdu", "G_dup", "G_pp") else rs2
            got = g_closed(name, 2, rs)
            want = g_value(name, 2, rs)
            assert abs(got - want) <= 1e-9 * max(1.0, abs(want)), (name, gap)


def test_closed_d3_matches_raw_at_ties():
    for name, rs in [
        ("G_q", (2.0, 2.0)),
        ("G_ddu", (2.0, 2.0)),
        ("G_pp", (2.0, 2.0, 2.0)),
        ("G_dudu", (1.0, 1.0, 3.0)),
    ]:
        got = g_closed(name, 3, rs)
        want = g_value(name, 3, rs)
        assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


def test_closed_form_domain():
    with pytest.raises(DomainError):
        g_closed("G_q", 5, (1.0, 2.0))  # no closed branch in odd d >= 5
    with pytest.raises(DomainError):
        g_closed("G_q", 2, (1.0, -2.0))
    with pytest.raises(ValidationError):
        g_closed("G_zz", 2, (1.0, 2.0))


# ----------------------------------------------- conformally transformed case

@pytest.mark.parametrize("d", (2, 3, 4))
def test_conformal_functions_consistent(d):
    # three-term assembly vs the two-term simplification via the relations
    rng = random.Random(300 + d)
    for _ in range(6):
        rs = _sep_tuple(rng, 2, gap=0.0)
        got = fconf_dk(d, rs)
        want = fconf_dk_simplified(d, rs)
        assert abs(got - want) <= 1e-11 * max(1.0, abs(want))


def test_conformal_dk_confluent_values():
    # limits at coincident arguments; the d=4 function vanishes identically
    assert fconf_dk(2, (1.0, 1.0)) == pytest.approx(-1 / 3, rel=1e-10)
    assert fconf_dk(2, (4.0, 4.0)) == pytest.approx(-1 / 6, rel=1e-10)
    assert fconf_dk(3, (1.0, 1.0)) == pytest.approx(-1 / 6, rel=1e-10)
    assert abs(fconf_dk(4, (1.0, 1.0))) <= 1e-12
    assert abs(fconf_dk(4, (2.0, 5.0))) <= 1e-12


def test_conformal_dkdk_values():
    assert fconf_dkdk(2, (1.0, 1.0, 1.0)) == pytest.approx(-1 / 3, rel=1e-9)
    # in d = 4 both conformal spectral functions vanish identically
    assert abs(fconf_dkdk(4, (1.0, 1.0, 1.0))) <= 1e-12
    assert abs(fconf_dkdk(4, (1.0, 2.0, 4.0))) <= 1e-12
    # homogeneity: every term scales like lam^(-d/2)
    for d in (2, 3):
        lam = 3.7
        a = fconf_dkdk(d, (1.0, 2.0, 4.0))
        b = fconf_dkdk(d, (lam, 2 * lam, 4 * lam))
        assert b == pytest.approx(a * lam ** (-d / 2), rel=1e-9)


# ------------------------------------------------------------- scaling checks

@given(st.floats(0.2, 5.0), st.floats(0.2, 5.0), st.floats(0.3, 3.0))
@settings(max_examples=40, deadline=None)
def test_g_q_homogeneity(r0, r1, lam):
    # G_q(lam r) = lam^(1-d/2-1) G_q(r): inherited from I_{d/2,1}
    for d in (2, 4):
        a = g_value("G_q", d, (r0, r1))
        b = g_value("G_q", d, (lam * r0, lam * r1))
        assert b == pytest.approx(a * lam ** (-d / 2), rel=1e-9)
