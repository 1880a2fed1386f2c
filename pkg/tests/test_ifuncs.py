"""Unit tests for the universal spectral functions and their quadrature oracle."""

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import heatcoeff.ifuncs as ifuncs
from heatcoeff.errors import (
    ConfluenceError,
    ConvergenceError,
    DomainError,
    QuadratureError,
)
from heatcoeff.ifuncs import (
    GapPolicy,
    SimplexArgs,
    i_base,
    i_bernoulli_series,
    i_eval,
    i_one_one,
    i_quadrature,
    i_value,
    min_rel_gap,
)

E = math.e


# ----------------------------------------------------------------- domain types

def test_simplex_args_validation():
    with pytest.raises(DomainError):
        SimplexArgs(alpha=2.0, k=1, rs=(1.0,))  # wrong length
    with pytest.raises(DomainError):
        SimplexArgs(alpha=2.0, k=1, rs=(1.0, -2.0))  # non-positive
    with pytest.raises(DomainError):
        SimplexArgs(alpha=2.0, k=-1, rs=())
    with pytest.raises(DomainError):
        SimplexArgs(alpha=2.0, k=1, rs=(1.0, float("inf")))
    args = SimplexArgs.of(1.5, 1, 2, 3)
    assert args.k == 2 and args.rs == (1.0, 2.0, 3.0)


def test_gap_policy_validation():
    with pytest.raises(DomainError):
        GapPolicy(tau=1e-14, merge_tol=1e-12)  # merge_tol above tau
    with pytest.raises(DomainError):
        GapPolicy(mode="panic")


# ----------------------------------------------------------------------- i_base

def test_i_base_examples():
    assert i_base(1, 1) == 1.0
    assert i_base(2, 2) == 0.25
    assert i_base(0.5, 4) == 0.5
    with pytest.raises(DomainError):
        i_base(1, 0.0)
    with pytest.raises(DomainError):
        i_base(1, -3.0)


# ----------------------------------------------------------------------- i_eval

def test_i_eval_frozen_examples():
    # 1/(r0 r1) closed form for alpha=2, k=1
    assert i_eval(SimplexArgs.of(2, 2, 3)) == pytest.approx(1 / 6, rel=1e-13)
    # constant-argument value r^-alpha / k!
    assert i_eval(SimplexArgs.of(3, 2, 2, 2)) == pytest.approx(2**-3 / 2, rel=1e-13)
    # fundamental log case routed through i_one_one
    assert i_eval(SimplexArgs.of(1, 1, E)) == pytest.approx(1 / (E - 1), rel=1e-13)


def test_i_eval_rejects_non_simplex_args():
    with pytest.raises(DomainError):
        i_eval((2.0, (1.0, 2.0)))


def test_constant_argument_identity():
    # I_{alpha,k}(r,...,r) = r^-alpha / k! across the (alpha, k) grid in use
    for d in (2, 3, 4, 6):
        for p in range(4):
            for k in range(1, 5):
                alpha = d / 2 + p
                for r in (0.37, 1.0, 5.25):
                    got = i_value(alpha, (r,) * (k + 1))
                    want = r**-alpha / math.factorial(k)
                    assert abs(got - want) <= 1e-13 * abs(want), (alpha, k, r)


def test_recursion_consistency_vs_quadrature():
    # spot check of the acceptance battery: random nodes, gaps >= 1e-3
    rng = random.Random(42)
    for d in (2, 3, 4, 6):
        for k in (1, 2, 3, 4):
            alpha = d / 2 + (d % 3)
            while True:
                rs = tuple(rng.uniform(0.1, 10) for _ in range(k + 1))
                if min_rel_gap(rs) >= 1e-3:
                    break
            q = i_quadrature(SimplexArgs.of(alpha, *rs))
            assert abs(i_value(alpha, rs) - q) <= 1e-8 * abs(q)


def test_continuity_under_coalescence():
    # one slot moved towards another by eps; quadrature is indifferent to the
    # gap, so it provides the limit reference at every eps
    for eps_exp in range(2, 13):
        eps = 10.0**-eps_exp
        for alpha, k in [(1.0, 2), (2.0, 3), (1.5, 2), (3.0, 4)]:
            rs = tuple([2.0, 2.0 * (1 + eps)] + [3.0 + 0.7 * i for i in range(k - 1)])
            v = i_value(alpha, rs)
            q = i_quadrature(SimplexArgs.of(alpha, *rs))
            assert abs(v - q) <= 1e-8 * abs(q), (alpha, k, eps)
    # exact tie equals the merged confluent value and is finite
    tie = i_value(2.0, (2.0, 2.0, 5.0))
    near = i_value(2.0, (2.0, 2.0 * (1 + 1e-13), 5.0))
    assert math.isfinite(tie)
    assert abs(tie - near) <= 1e-10 * abs(tie)


def test_strict_gap_policy_raises():
    pol = GapPolicy(mode="strict")
    with pytest.raises(ConfluenceError):
        i_value(3.0, (2.0, 2.0 * (1 + 1e-8), 5.0), pol)
    # comfortably separated arguments still evaluate
    assert i_value(3.0, (2.0, 3.0, 5.0), pol) > 0


def test_compounded_cancellation_routes_to_extended_precision():
    # several moderately close nodes: the single-pair gap test alone would keep
    # this in float64 and lose ~8 digits; the running error bound must catch it
    rs = (1.0, 1.0015, 1.003, 1.0045, 5.0)
    v = i_value(3.0, rs)
    q = i_quadrature(SimplexArgs.of(3.0, *rs))
    assert abs(v - q) <= 1e-10 * abs(q)


# ------------------------------------------------------------------- i_one_one

def test_i_one_one_values():
    assert i_one_one(1, 1) == 1.0
    assert i_one_one(1, E) == pytest.approx(1 / (E - 1), rel=1e-14)
    assert i_one_one(4, 1) == pytest.approx(math.log(4) / 3, rel=1e-14)
    assert i_one_one(4, 1) == pytest.approx(0.462098, abs=1e-6)
    with pytest.raises(DomainError):
        i_one_one(0, 1)


@given(st.floats(0.01, 100), st.floats(0.01, 100))
@settings(max_examples=60, deadline=None)
def test_i_one_one_matches_i_eval(r0, r1):
    assert i_value(1.0, (r0, r1)) == pytest.approx(i_one_one(r0, r1), rel=1e-12)


def test_i_one_one_confluent_stability():
    # no cancellation blow-up through the confluence: match the exact value
    # (computed in 50-digit arithmetic) at every gap, including zero
    import mpmath as mp

    for eps in (1e-6, 1e-9, 1e-12, 1e-15, 0.0):
        r0, r1 = 3.0, 3.0 * (1 + eps)
        v = i_one_one(r0, r1)
        with mp.workdps(50):
            exact = (
                (mp.log(r0) - mp.log(r1)) / (mp.mpf(r0) - mp.mpf(r1))
                if r0 != r1
                else mp.mpf(1) / r0
            )
        assert abs(v - float(exact)) <= 2e-14


# ---------------------------------------------------------- i_bernoulli_series

def test_bernoulli_series_examples():
    # equal arguments: only the constant term survives
    assert i_bernoulli_series(5, 5, 5) == pytest.approx(0.2, rel=1e-15)
    assert abs(i_bernoulli_series(1, E, 40) - i_one_one(1, E)) <= 1e-12
    assert abs(i_bernoulli_series(E**2, 1, 10) - i_one_one(E**2, 1)) <= 1e-6


def test_bernoulli_series_outside_disc():
    with pytest.raises(ConvergenceError):
        i_bernoulli_series(math.exp(7.0), 1.0, 20)  # |ln ratio| = 7 > 2 pi
    with pytest.raises(DomainError):
        i_bernoulli_series(1.0, 2.0, 1)  # too few terms


@given(st.floats(-3.0, 3.0))
@settings(max_examples=40, deadline=None)
def test_bernoulli_series_converges_inside_disc(x):
    r0, r1 = math.exp(x), 1.0
    assert abs(i_bernoulli_series(r0, r1, 60) - i_one_one(r0, r1)) <= 1e-10


# --------------------------------------------------------------- i_quadrature

def test_quadrature_frozen_examples():
    assert i_quadrature(SimplexArgs.of(2, 2, 3)) == pytest.approx(1 / 6, abs=1e-10)
    assert i_quadrature(SimplexArgs.of(1, 1, 4)) == pytest.approx(
        i_one_one(1, 4), rel=1e-9
    )
    assert i_quadrature(SimplexArgs.of(3, 1, 1, 1, 1)) == pytest.approx(
        1 / 6, rel=1e-9
    )


def test_quadrature_rel_tol_domain():
    args = SimplexArgs.of(2, 2, 3)
    with pytest.raises(DomainError):
        i_quadrature(args, rel_tol=1e-3)  # above the allowed ceiling
    with pytest.raises(DomainError):
        i_quadrature(args, rel_tol=0.0)


def test_quadrature_budget_exhaustion(monkeypatch):
    # starve the ladder: two coarse rungs cannot agree at 1e-10 on a steep
    # integrand, and the error must carry the best value + achieved estimate
    monkeypatch.setattr(ifuncs, "_rungs_for", lambda k: [(2, 1), (3, 1)])
    with pytest.raises(QuadratureError) as exc:
        i_quadrature(SimplexArgs.of(6.0, 0.1, 9.0, 0.2), rel_tol=1e-10)
    assert exc.value.value is not None
    assert exc.value.achieved_rel_error > 1e-10


def test_quadrature_k0_short_circuit():
    assert i_quadrature(SimplexArgs.of(2.5, 3.0)) == pytest.approx(
        3.0**-2.5, rel=1e-14
    )
