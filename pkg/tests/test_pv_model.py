import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import bisect

from pvgf.errors import ConfigError, NonFiniteError
from pvgf.pv_model import (CellParams, EnvConditions, PvStringModel, cec_update, cell_ceq,
                           cell_charge, equivalent_capacitance, hysteresis_area, iv_scan,
                           step_dynamic_state, string_current_residual, thermal_voltage)

K, Q = 1.38e-23, 1.602e-19
STC = EnvConditions()


def oracle_constants(cell, G, T):
    """Independent scalar evaluation of the irradiance/temperature update."""
    iph = G / 1000.0 * (cell.Iph_ref + cell.alpha_isc * (T - 298.15))
    i0 = cell.I0_ref * (T / 298.15) ** 3 * math.exp(cell.Eg_ref * Q / K * (1 / 298.15 - 1 / T))
    return iph, i0, cell.n * K * T / Q


def oracle_cell_current(v_cell, cell, G, T):
    """Cell current at terminal voltage by bisection on the implicit single-diode relation."""
    iph, i0, nvth = oracle_constants(cell, G, T)

    def f(i):
        vc = v_cell + i * cell.Rs
        return iph - i0 * (math.exp(vc / nvth) - 1) - vc / cell.Rsh - i

    return bisect(f, -50.0, 50.0, xtol=1e-14, rtol=1e-15, maxiter=400)


# ------------------------------------------------------------------ update


def test_reference_conditions_return_reference_values():
    cell = CellParams()
    iph, i0 = cec_update(cell, EnvConditions(G=cell.G_ref, T=cell.T_ref))
    assert iph == pytest.approx(cell.Iph_ref, rel=1e-15)
    assert i0 == pytest.approx(cell.I0_ref, rel=1e-15)


def test_darkness_gives_zero_photocurrent():
    cell = CellParams()
    iph, i0 = cec_update(cell, EnvConditions(G=0.0, T=cell.T_ref))
    assert iph == 0.0
    assert i0 == pytest.approx(cell.I0_ref, rel=1e-15)


def test_update_matches_scalar_oracle():
    cell = CellParams()
    iph, i0 = cec_update(cell, EnvConditions(G=500.0, T=320.0))
    o_iph, o_i0, _ = oracle_constants(cell, 500.0, 320.0)
    assert iph == pytest.approx(o_iph, rel=1e-13)
    assert i0 == pytest.approx(o_i0, rel=1e-13)
    # golden values from a one-off scalar evaluation
    assert iph == pytest.approx(5.054625, rel=1e-12)
    assert i0 == pytest.approx(7.304353635e-07, rel=1e-9)


def test_thermal_voltage_uses_stated_constants():
    assert thermal_voltage(300.0) == pytest.approx(1.38e-23 * 300 / 1.602e-19, rel=1e-15)


@pytest.mark.parametrize("kw", [dict(n=0), dict(I0_ref=0), dict(Rs=-1e-3), dict(Rsh=0),
                                dict(tau=-1e-6), dict(G_ref=0)])
def test_invalid_cell_parameters_rejected(kw):
    with pytest.raises(ConfigError):
        CellParams(**kw)


@pytest.mark.parametrize("kw", [dict(G=-1), dict(T=0), dict(G=math.inf)])
def test_invalid_environment_rejected(kw):
    with pytest.raises(ConfigError):
        EnvConditions(**kw)


def test_invalid_string_shape_rejected():
    with pytest.raises(ConfigError):
        PvStringModel(Nc=0)
    with pytest.raises(ConfigError):
        PvStringModel(Npv=0)


# ---------------------------------------------------------------- residual


def test_residual_vanishes_at_open_circuit():
    m = PvStringModel()
    voc = m.open_circuit_voltage(STC)
    assert abs(string_current_residual(m, voc, 0.0, STC)) < 1e-9


def test_short_circuit_current_matches_bisection_oracle():
    m = PvStringModel()
    isc = m.short_circuit_current(STC)
    assert isc == pytest.approx(oracle_cell_current(0.0, m.cell, 1000.0, 298.15), rel=1e-9)
    assert abs(string_current_residual(m, 0.0, isc, STC)) < 1e-9


def test_residual_matches_transcription_mid_curve():
    m = PvStringModel()
    env = EnvConditions(G=1000.0, T=320.0)
    V, I = 500.0, 8.0
    iph, i0, nvth = oracle_constants(m.cell, 1000.0, 320.0)
    vc = V / m.cells + I * m.cell.Rs
    expected = I - (iph - i0 * (math.exp(vc / nvth) - 1) - vc / m.cell.Rsh)
    assert string_current_residual(m, V, I, env) == pytest.approx(expected, rel=1e-12)


def test_residual_overflow_signals_non_finite():
    m = PvStringModel()
    with pytest.raises(NonFiniteError):
        string_current_residual(m, 1e5, 0.0, STC)


@given(st.floats(0.0, 1.0), st.floats(200.0, 1200.0), st.floats(280.0, 350.0))
def test_static_curve_matches_direct_solve(frac, G, T):
    m = PvStringModel()
    env = EnvConditions(G=G, T=T)
    V = frac * m.open_circuit_voltage(env)
    got = m.static_current(V, env)
    want = oracle_cell_current(V / m.cells, m.cell, G, T)
    assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


@given(st.floats(0.0, 9.5))
def test_series_scaling(current):
    m = PvStringModel()
    module = m.with_modules(1)
    assert m.static_voltage(current, STC) == pytest.approx(
        m.Npv * module.static_voltage(current, STC), rel=1e-12)


def test_bypass_diode_clamps_reverse_bias():
    m = PvStringModel()
    isc = m.short_circuit_current(STC)
    v = m.static_voltage(isc + 5.0, STC)
    per_module = v / m.Npv
    assert -m.bypass_drop - 0.05 < per_module < -m.bypass_drop
    # forcing the string far negative routes the excess through the bypass path
    i = m.static_current(-m.Npv * (m.bypass_drop + 0.01), STC)
    assert i > isc


# ------------------------------------------------------------- capacitance


def test_capacitance_vanishes_without_lifetime():
    m = PvStringModel(cell=CellParams(tau=0.0))
    assert np.all(equivalent_capacitance(m, np.linspace(-1, 0.7, 50), STC) == 0.0)


def test_capacitance_at_zero_junction_voltage():
    m = PvStringModel()
    _, i0, nvth, *_ = m.constants(STC)
    assert equivalent_capacitance(m, 0.0, STC) == pytest.approx(
        m.cell.tau / nvth * i0 / m.cells, rel=1e-14)


def test_capacitance_near_open_circuit_matches_transcription():
    m = PvStringModel()
    vc = 0.6
    iph, i0, nvth = oracle_constants(m.cell, 1000.0, 298.15)
    i_d = i0 * (math.exp(vc / nvth) - 1)
    want = m.cell.tau / nvth * (i_d + i0) * (1 + vc / nvth)
    assert equivalent_capacitance(m, vc, STC) * m.cells == pytest.approx(want, rel=1e-12)


@given(st.floats(-2.0, 0.75))
def test_capacitance_nonnegative(vc):
    assert equivalent_capacitance(PvStringModel(), vc, STC) >= 0.0


@given(st.floats(-0.02, 0.7))
def test_charge_derivative_is_capacitance(vc):
    _, i0, nvth, _, _, tau = PvStringModel().constants(STC)
    h = 1e-7
    dq = (cell_charge(vc + h, i0, nvth, tau) - cell_charge(vc - h, i0, nvth, tau)) / (2 * h)
    assert dq == pytest.approx(cell_ceq(vc, i0, nvth, tau), rel=1e-5, abs=1e-18)


# -------------------------------------------------------------- dynamics


def test_held_operating_point_settles_to_static_curve():
    m = PvStringModel()
    vmp, imp = m.max_power_point(STC)
    m.initialize_state(STC, V=0.9 * vmp)
    for _ in range(400):
        i = step_dynamic_state(m, vmp, 1e-5, STC)
    assert i == pytest.approx(imp, rel=1e-9)
    _, i0, nvth, rs, *_ = m.constants(STC)
    assert m.Vc == pytest.approx(vmp / m.cells + imp * rs, rel=1e-9)


def test_static_limit_step_equals_static_solve():
    m = PvStringModel(cell=CellParams(tau=0.0))
    m.initialize_state(STC, V=100.0)
    for v in np.linspace(0, m.open_circuit_voltage(STC), 17):
        assert step_dynamic_state(m, v, 1e-5, STC) == pytest.approx(
            m.static_current(v, STC), rel=1e-12, abs=1e-12)


def test_step_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        step_dynamic_state(PvStringModel(), 100.0, 0.0, STC)


def test_scan_without_lifetime_has_no_hysteresis():
    m = PvStringModel(cell=CellParams(tau=0.0))
    v_f, i_f = iv_scan(m, STC, 0.02, "forward")
    _, i_r = iv_scan(m, STC, 0.02, "reverse")
    np.testing.assert_allclose(i_r[::-1], i_f, rtol=1e-10, atol=1e-10)


def test_hysteresis_direction_and_loop_growth():
    env = STC
    m = PvStringModel(cell=CellParams(tau=50e-6))
    v_f, i_f = iv_scan(m, env, 0.02, "forward")
    v_r, i_r = iv_scan(m, env, 0.02, "reverse")
    static = m.static_current(v_f, env)
    mid = (v_f > 0.2 * v_f[-1]) & (v_f < 0.95 * v_f[-1])
    assert np.all(i_r[::-1][mid] >= static[mid])
    assert np.all(static[mid] >= i_f[mid])
    areas = [hysteresis_area(PvStringModel(cell=CellParams(tau=t)), env, 0.02)
             for t in (0.0, 20e-6, 50e-6)]
    assert abs(areas[0]) < 1e-6
    assert areas[0] < areas[1] < areas[2]


def test_scan_rejects_bad_arguments():
    m = PvStringModel()
    with pytest.raises(ValueError):
        iv_scan(m, STC, 0.0, "forward")
    with pytest.raises(ValueError):
        iv_scan(m, STC, 0.02, "sideways")


def test_initialization_needs_exactly_one_anchor():
    m = PvStringModel()
    with pytest.raises(ValueError):
        m.initialize_state(STC)
    with pytest.raises(ValueError):
        m.initialize_state(STC, V=1.0, I=1.0)
    vc = m.initialize_state(STC, I=5.0)
    assert string_current_residual(m, m.static_voltage(5.0, STC), 5.0, STC) == pytest.approx(
        0.0, abs=1e-9)
    assert vc > 0
