"""Tests for the spectral heat-trace oracle.

The assembler is pinned down on operators whose truncated spectra are
known exactly (mode lattices, shifted lattices, fiber splittings) and by
cross-pairing its dense and separable layouts.  The fitter is exercised
on synthetic series, in-model and with out-of-model contamination.  The
end-to-end verifier is compared against closed forms produced by the
independent density pipeline, including the conformal cases whose a2
integral vanishes identically.
"""

import json
import math

import numpy as np
import pytest

from heatcoeff.errors import DomainError, FitError, ValidationError
from heatcoeff.geometry import Grid, OperatorFields
from heatcoeff.oracle import (
    assemble,
    fit_asymptotics,
    heat_trace,
    multiplication_operator,
    verify_a2,
)


def _scalar_fields(profile=None, d=2, n=5, first=None, zero=None):
    """Coordinate-form scalar fields on the default 2pi torus."""
    grid = Grid(lengths=(2.0 * math.pi,) * d, shape=(n,) * d)
    u = np.zeros(grid.shape + (1, 1), complex)
    u[..., 0, 0] = 1.0 if profile is None else profile
    v = np.zeros(grid.shape + (d, 1, 1), complex)
    if first is not None:
        for mu, val in enumerate(first):
            v[..., mu, 0, 0] = val
    w = np.zeros(grid.shape + (1, 1), complex)
    if zero is not None:
        w[..., 0, 0] = zero
    return OperatorFields(form="coordinate", grid=grid, u=u, v_or_p=v, w_or_q=w)


def _lattice(M, d=2):
    line = range(-M, M + 1)
    if d == 2:
        return [(k1, k2) for k1 in line for k2 in line]
    raise AssertionError


@pytest.fixture(scope="module")
def laplacian_m20():
    """Pure 2-torus Laplacian at cutoff 20; decomposition is cached."""
    return assemble(_scalar_fields(), 20, max_basis=2000)


# ---------------------------------------------------------------- spectra


def test_pure_laplacian_spectrum_is_mode_lattice():
    op = assemble(_scalar_fields(), 3)
    expected = np.sort([k1 * k1 + k2 * k2 for k1, k2 in _lattice(3)])
    assert op.layout == "dense"
    assert op.basis_dim == 49
    assert np.abs(op.spectrum() - expected).max() == 0.0


def test_uniform_u_scales_spectrum():
    op = assemble(_scalar_fields(profile=2.0), 3)
    expected = np.sort([2.0 * (k1 * k1 + k2 * k2) for k1, k2 in _lattice(3)])
    assert np.abs(op.spectrum() - expected).max() < 1e-12


def test_constant_metric_enters_symbol():
    op = assemble(_scalar_fields(), 3, metric=np.diag([1.0, 4.0]))
    expected = np.sort([k1 * k1 + 4.0 * k2 * k2 for k1, k2 in _lattice(3)])
    assert np.abs(op.spectrum() - expected).max() < 1e-12


def test_first_order_term_shifts_lattice():
    # P = -(Delta + 2i d_1 - 1) acts on e^{ik.x} as (k1+1)^2 + k2^2.
    fields = _scalar_fields(first=(2j, 0.0), zero=-1.0)
    op = assemble(fields, 3)
    expected = np.sort([(k1 + 1) ** 2 + k2 * k2 for k1, k2 in _lattice(3)])
    assert op.hermitian_defect < 1e-14
    assert np.abs(op.spectrum() - expected).max() < 1e-12


def test_fiber_potential_splits_levels():
    n = 5
    grid = Grid(lengths=(2.0 * math.pi,) * 2, shape=(n, n))
    u = np.zeros((n, n, 2, 2), complex)
    u[..., 0, 0] = u[..., 1, 1] = 1.0
    v = np.zeros((n, n, 2, 2, 2), complex)
    w = np.zeros((n, n, 2, 2), complex)
    w[..., 1, 1] = 0.7
    fields = OperatorFields(form="coordinate", grid=grid, u=u, v_or_p=v, w_or_q=w)
    op = assemble(fields, 2)
    expected = np.sort(
        [k1 * k1 + k2 * k2 - s for k1, k2 in _lattice(2) for s in (0.0, 0.7)]
    )
    assert op.fiber_dim == 2
    assert np.abs(op.spectrum() - expected).max() < 1e-12


# ------------------------------------------------------------ heat traces


def test_heat_trace_matches_lattice_sum(laplacian_m20):
    t = 0.05
    theta = sum(math.exp(-t * k * k) for k in range(-20, 21))
    got = heat_trace(laplacian_m20, None, t)
    assert abs(got - theta * theta) < 1e-12 * theta * theta


def test_heat_trace_long_time_counts_zero_modes(laplacian_m20):
    # Only the k = 0 mode survives: Tr e^{-tP} -> 1.
    assert abs(heat_trace(laplacian_m20, None, 60.0) - 1.0) < 1e-12


def test_heat_trace_rejects_nonpositive_time(laplacian_m20):
    with pytest.raises(DomainError, match="t > 0"):
        heat_trace(laplacian_m20, None, 0.0)


def test_projection_insertion_factorizes():
    # On Delta (x) I_2 a constant fiber projection picks out one copy.
    n = 5
    grid = Grid(lengths=(2.0 * math.pi,) * 2, shape=(n, n))
    u = np.zeros((n, n, 2, 2), complex)
    u[..., 0, 0] = u[..., 1, 1] = 1.0
    fields = OperatorFields(
        form="coordinate",
        grid=grid,
        u=u,
        v_or_p=np.zeros((n, n, 2, 2, 2), complex),
        w_or_q=np.zeros((n, n, 2, 2), complex),
    )
    op = assemble(fields, 4)
    t = 0.3
    scalar = sum(math.exp(-t * (k1 * k1 + k2 * k2)) for k1, k2 in _lattice(4))
    proj = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert abs(heat_trace(op, proj, t) - scalar) < 1e-12 * scalar
    assert abs(heat_trace(op, None, t) - 2.0 * scalar) < 1e-12 * scalar
    # grid-sampled copy of the same projection goes through the
    # multiplication-operator path and must agree
    sampled = np.zeros((n, n, 2, 2), complex)
    sampled[..., 0, 0] = 1.0
    assert abs(heat_trace(op, sampled, t) - heat_trace(op, proj, t)) < 1e-12


def test_shift_insertion_has_zero_trace():
    # a = e^{i x_1} maps mode k to k + e_1, so diag(V^-1 a V) sums to 0.
    n = 5
    op = assemble(_scalar_fields(n=n), 3)
    x = 2.0 * math.pi * np.arange(n) / n
    shift = np.zeros((n, n, 1, 1), complex)
    shift[..., 0, 0] = np.exp(1j * x)[:, None]
    assert abs(heat_trace(op, shift, 0.4)) < 1e-12
    mat = multiplication_operator(op, shift)
    modes = [(k1, k2) for k1 in range(-3, 4) for k2 in range(-3, 4)]
    row = modes.index((1, 2))
    col = modes.index((0, 2))
    assert abs(mat[row, col] - 1.0) < 1e-12
    assert abs(mat[row, row]) < 1e-12


def test_multiplication_operator_validates_input():
    op = assemble(_scalar_fields(), 3)
    with pytest.raises(DomainError, match="match the assembly grid"):
        multiplication_operator(op, np.zeros((3, 3, 1, 1)))


# ------------------------------------------------- dense vs separable


def _single_axis_fields(axis, amp=0.25, n=9):
    x = 2.0 * math.pi * np.arange(n) / n
    prof = np.exp(amp * np.cos(x))
    grid = Grid(lengths=(2.0 * math.pi,) * 2, shape=(n, n))
    u = np.zeros((n, n, 1, 1), complex)
    w = np.zeros((n, n, 1, 1), complex)
    u[..., 0, 0] = prof[:, None] if axis == 0 else prof[None, :]
    w[..., 0, 0] = 0.1 * u[..., 0, 0]
    return OperatorFields(
        form="coordinate",
        grid=grid,
        u=u,
        v_or_p=np.zeros((n, n, 2, 1, 1), complex),
        w_or_q=w,
    )


@pytest.mark.parametrize("axis", [0, 1])
def test_separable_layout_matches_dense(axis):
    fields = _single_axis_fields(axis)
    dense = assemble(fields, 6, layout="dense")
    sep = assemble(fields, 6, layout="separable")
    assert sep.layout == "separable"
    assert sep.basis_dim == dense.basis_dim == 169
    for t in (0.2, 0.5, 1.0):
        a, b = heat_trace(dense, None, t), heat_trace(sep, None, t)
        assert abs(a - b) < 1e-10 * max(1.0, abs(a))
    # constant fiber insertions work in both layouts
    eye = np.eye(1)
    assert abs(heat_trace(sep, eye, 0.5) - heat_trace(dense, eye, 0.5)) < 1e-10


def test_separable_rejects_multi_axis_fields():
    n = 9
    x = 2.0 * math.pi * np.arange(n) / n
    prof = np.exp(0.2 * np.cos(x)[:, None] + 0.2 * np.cos(x)[None, :])
    grid = Grid(lengths=(2.0 * math.pi,) * 2, shape=(n, n))
    u = np.zeros((n, n, 1, 1), complex)
    u[..., 0, 0] = prof
    fields = OperatorFields(
        form="coordinate",
        grid=grid,
        u=u,
        v_or_p=np.zeros((n, n, 2, 1, 1), complex),
        w_or_q=np.zeros((n, n, 1, 1), complex),
    )
    with pytest.raises(DomainError, match="single axis"):
        assemble(fields, 4, layout="separable")


def test_separable_rejects_grid_insertions():
    fields = _single_axis_fields(0)
    op = assemble(fields, 5, layout="separable")
    sampled = np.zeros((9, 9, 1, 1), complex)
    sampled[..., 0, 0] = 1.0
    with pytest.raises(DomainError, match="constant fiber insertions"):
        heat_trace(op, sampled, 0.5)
    with pytest.raises(DomainError, match="dense layout"):
        multiplication_operator(op, sampled)


def test_dense_cap_suggests_alternatives():
    with pytest.raises(DomainError, match="reduce the cutoff to <= 2"):
        assemble(_scalar_fields(), 5, max_basis=30, layout="dense")


def test_unknown_layout_rejected():
    with pytest.raises(DomainError, match="unknown layout"):
        assemble(_scalar_fields(), 3, layout="sparse")


def test_connection_must_be_absorbed_first():
    n = 5
    grid = Grid(lengths=(2.0 * math.pi,) * 2, shape=(n, n))
    u = np.zeros((n, n, 1, 1), complex)
    u[..., 0, 0] = 1.0
    A = np.zeros((n, n, 2, 1, 1), complex)
    A[..., 0, 0, 0] = 0.1j
    fields = OperatorFields(
        form="covariant",
        grid=grid,
        u=u,
        v_or_p=np.zeros((n, n, 2, 1, 1), complex),
        w_or_q=np.zeros((n, n, 1, 1), complex),
        A=A,
    )
    with pytest.raises(DomainError, match="upq_to_uvw"):
        assemble(fields, 3)


# ------------------------------------------------------------- t-window


def test_default_window_follows_cutoff_rule():
    op = assemble(_scalar_fields(), 7)
    ts = op.t_window(10)
    assert len(ts) == 10
    assert ts[0] == pytest.approx(20.0 / 49.0)
    assert ts[-1] == pytest.approx(0.5)


def test_default_window_needs_large_cutoff():
    op = assemble(_scalar_fields(), 6)
    with pytest.raises(DomainError, match="empty t-window"):
        op.t_window()


# ------------------------------------------------------------------ fits


def test_fit_recovers_exact_series():
    ts = np.geomspace(0.05, 0.8, 24)
    ys = 3.0 / ts + 5.0
    rep = fit_asymptotics(list(zip(ts, ys)), 2, 2)
    assert abs(rep.a0 - 3.0) < 1e-12
    assert abs(rep.a2 - 5.0) < 1e-12
    assert rep.residual_norm < 1e-12
    ys = 3.0 / ts + 5.0 + 7.0 * ts
    rep = fit_asymptotics(list(zip(ts, ys)), 2, 3)
    assert abs(rep.a4 - 7.0) < 1e-11


def test_fit_tolerates_small_out_of_model_term():
    # a6 t^2 contamination below the window scale barely moves a2
    ts = np.geomspace(1e-3, 5e-3, 24)
    ys = math.pi / ts + 0.25 + 0.05 * ts + 1e-6 * ts**2
    rep = fit_asymptotics(list(zip(ts, ys)), 2, 3)
    assert abs(rep.a2 - 0.25) < 1e-10


def test_fit_requires_enough_samples():
    with pytest.raises(FitError, match="at least 3 samples"):
        fit_asymptotics([(0.1, 1.0), (0.2, 2.0)], 2, 3)


def test_fit_rejects_nonpositive_times():
    pts = [(-0.1, 1.0), (0.2, 2.0), (0.3, 3.0)]
    with pytest.raises(FitError, match="positive"):
        fit_asymptotics(pts, 2, 2)


def test_fit_flags_ill_conditioned_design():
    ts = 1.0 + 1e-9 * np.arange(24)
    ys = 1.0 / ts + 2.0
    with pytest.raises(FitError, match="ill-conditioned"):
        fit_asymptotics(list(zip(ts, ys)), 2, 3)


def test_pure_laplacian_asymptotics(laplacian_m20):
    # a0 = Vol / 4pi = pi and every higher coefficient vanishes
    ts = laplacian_m20.t_window()
    samples = [(t, heat_trace(laplacian_m20, None, t)) for t in ts]
    rep = fit_asymptotics(samples, 2, 3)
    assert abs(rep.a0 - math.pi) < 1e-6
    assert abs(rep.a2) < 1e-4
    assert rep.condition < 1e3


def test_truncated_traces_converge_in_cutoff():
    fields = _single_axis_fields(0)
    t = 0.3
    vals = [
        heat_trace(assemble(fields, M), None, t) for M in (4, 8, 16)
    ]
    assert abs(vals[2] - vals[1]) < 1e-4 * abs(vals[1] - vals[0])
    assert abs(vals[2] - vals[1]) < 1e-5


# -------------------------------------------------------------- verify_a2


def _blk(x):
    return [[[x, 0.0]]]


def test_verify_minimal_fields_is_sharp():
    # u = 1, q = 0.2: the only a2 contribution is the zeroth-order field
    cfg = {
        "schema": "1",
        "kind": "fourier-fields",
        "form": "covariant",
        "fiber_dim": 1,
        "u": [{"k": [0, 0], "block": _blk(1.0)}],
        "q": [{"k": [0, 0], "block": _blk(0.2)}],
        "cutoff": 16,
        "n_terms": 6,
        "t_min": 0.078,
        "t_max": 0.4,
    }
    rep = verify_a2(cfg)
    assert rep.closed_form_a2 == pytest.approx(0.2 * math.pi, abs=1e-12)
    assert rep.delta < 1e-6
    assert rep.details["kind"] == "fourier-fields"


def test_verify_w_term_uses_relative_yardstick():
    cfg = {
        "schema": "1",
        "kind": "fourier-fields",
        "form": "coordinate",
        "fiber_dim": 1,
        "u": [
            {"k": [0, 0], "block": _blk(1.0)},
            {"k": [1, 0], "block": _blk(0.15)},
            {"k": [-1, 0], "block": _blk(0.15)},
        ],
        "w": [
            {"k": [0, 0], "block": _blk(0.4)},
            {"k": [1, 0], "block": _blk(0.1)},
            {"k": [-1, 0], "block": _blk(0.1)},
        ],
        "cutoff": 16,
        "n_terms": 4,
        "t_max": 0.6,
    }
    rep = verify_a2(cfg)
    assert rep.details["delta_scale"] == "closed-form a2"
    assert rep.closed_form_a2 == pytest.approx(1.2158892376, rel=1e-8)
    assert rep.delta < 5e-3


def test_verify_conformal_scalar_hits_zero_branch():
    # u = (1 + 0.3 cos x1)^2: the a2 integral vanishes identically, so
    # the mismatch is measured against the fitted a0 instead
    cfg = {
        "schema": "1",
        "kind": "fourier-fields",
        "form": "coordinate",
        "fiber_dim": 1,
        "grid_points": 33,
        "u": [
            {"k": [0, 0], "block": _blk(1.045)},
            {"k": [1, 0], "block": _blk(0.3)},
            {"k": [-1, 0], "block": _blk(0.3)},
            {"k": [2, 0], "block": _blk(0.0225)},
            {"k": [-2, 0], "block": _blk(0.0225)},
        ],
        "cutoff": 12,
        "layout": "separable",
    }
    rep = verify_a2(cfg)
    assert rep.closed_form_a2 == 0.0
    assert rep.details["delta_scale"] == "fitted a0"
    assert rep.delta < 1e-2
    assert rep.details["layout"] == "separable"


def test_verify_nct2_deformed_torus():
    # theta = 1/2, tau = i, k = e^{h/2} with h = 0.1(U + U*): the total
    # curvature integral vanishes (Gauss-Bonnet), the realized operator
    # acts on fiber_dim = 2 columns per mode, and both half-operators
    # are self-adjoint.
    cfg = {
        "schema": "1",
        "kind": "nct2",
        "theta": [1, 2],
        "tau": [0.0, 1.0],
        "h": [{"k": [1, 0], "c": 0.1}, {"k": [-1, 0], "c": 0.1}],
        "grid_points": 13,
        "radius": 6,
        "cutoff": 8,
    }
    rep = verify_a2(cfg)
    assert abs(rep.closed_form_a2) < 1e-12
    assert rep.details["delta_scale"] == "fitted a0"
    assert rep.details["trace_divisor"] == 2.0
    assert rep.details["hermitian_defect"] < 1e-12
    assert rep.delta < 1e-3


def test_verify_nct4_deformed_torus():
    # Flat four-torus with u = e^{0.2 cos x2}; cutoff 14 admits the low
    # window [0.2, 0.35] where the truncated-series fit bias is below a
    # percent of the closed form.
    cfg = {
        "schema": "1",
        "kind": "nct4",
        "theta": [[0, 1], [0, 1]],
        "h": [{"k": [0, 1, 0, 0], "c": 0.1}, {"k": [0, -1, 0, 0], "c": 0.1}],
        "grid_points": 9,
        "radius": 6,
        "cutoff": 14,
        "layout": "separable",
        "perp_extent": 12,
        "t_min": 0.2,
        "t_max": 0.35,
        "n_terms": 4,
        "points": 16,
    }
    rep = verify_a2(cfg)
    assert rep.closed_form_a2 == pytest.approx(0.049595174, rel=1e-6)
    assert rep.details["hermitian_defect"] < 1e-12
    assert rep.delta < 1e-2


@pytest.mark.parametrize(
    "cfg, err, match",
    [
        ("not a dict", ValidationError, "mapping"),
        ({}, ValidationError, 'needs "schema"'),
        ({"schema": "1", "kind": "mystery"}, ValidationError, "unknown config kind"),
        ({"schema": "1", "kind": "chart-analytic"}, DomainError, "constant metric"),
        (
            {
                "schema": "1",
                "kind": "nct4",
                "theta": [1, 2],
                "h": [{"k": [1, 0], "c": 0.1}],
            },
            ValidationError,
            "two-factor",
        ),
        (
            {
                "schema": "1",
                "kind": "fourier-fields",
                "fiber_dim": 1,
                "u": [{"k": [0, 0], "block": _blk(1.0)}],
                "v": [{"k": [0, 0], "block": _blk(0.5)}],
            },
            ValidationError,
            "direction index",
        ),
    ],
)
def test_verify_rejects_malformed_configs(cfg, err, match):
    with pytest.raises(err, match=match):
        verify_a2(cfg)


# ---------------------------------------------------------- report output


def test_report_serialization_round_trip():
    ts = np.geomspace(0.1, 0.5, 12)
    ys = 2.0 / ts + 1.5
    rep = fit_asymptotics(list(zip(ts, ys)), 2, 2)
    rep.attach_closed_form(1.5)
    blob = rep.to_json()
    assert blob == rep.to_json()  # deterministic
    data = json.loads(blob)
    assert data["schema"] == "1"
    assert data["dim"] == 2
    assert data["coefficients"]["0"] == pytest.approx(2.0)
    assert data["coefficients"]["2"] == pytest.approx(1.5)
    assert data["delta"] == pytest.approx(rep.delta)
    csv_text = rep.to_csv()
    lines = csv_text.strip().splitlines()
    assert lines[0] == "t,trace,model,residual"
    assert len(lines) == 13
    first = [float(x) for x in lines[1].split(",")]
    assert first[0] == pytest.approx(ts[0])
    assert first[1] == pytest.approx(ys[0])


def test_delta_yardstick_branches():
    ts = np.geomspace(0.1, 0.5, 12)
    ys = 2.0 / ts + 1.5
    rep = fit_asymptotics(list(zip(ts, ys)), 2, 2)
    rep.attach_closed_form(1.5)
    assert rep.details["delta_scale"] == "closed-form a2"
    assert rep.delta < 1e-12
    rep = fit_asymptotics(list(zip(ts, 2.0 / ts)), 2, 2)
    rep.attach_closed_form(0.0)
    assert rep.details["delta_scale"] == "fitted a0"
    assert rep.delta < 1e-12
