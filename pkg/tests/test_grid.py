import numpy as np
import pytest

from kinhilbert.grid import (FluidState, WeightSystem, build_grid, check_envelope, maxwellian,
                             moments, sqrt_maxwellian, weight_varpi, weight_w)


def test_grid_layout_and_reflection():
    g = build_grid(5.0, 6)
    assert g.size == 216
    assert np.isclose(g.quad_weights.sum(), 1000.0)
    R = g.nodes[g.reflect_map]
    assert np.allclose(R[:, :2], g.nodes[:, :2])
    assert np.allclose(R[:, 2], -g.nodes[:, 2])
    assert np.array_equal(g.reflect_map[g.reflect_map], np.arange(g.size))
    assert not np.any(g.nodes[:, 2] == 0)


@pytest.mark.parametrize("v_max,n", [(0.0, 8), (4.0, 7), (4.0, 1)])
def test_grid_rejects_bad_input(v_max, n):
    with pytest.raises(ValueError):
        build_grid(v_max, n)


def test_maxwellian_moments(moving_state):
    g = build_grid(8.0, 24)
    m, p, e = moments(g, maxwellian(moving_state, g.nodes))
    st = moving_state
    assert abs(m - st.rho) < 1e-10
    assert np.allclose(p, st.rho * st.u_arr, atol=1e-10)
    assert abs(e - st.rho * (3 * st.T + st.u_arr @ st.u_arr)) < 1e-9
    assert np.allclose(sqrt_maxwellian(st, g.nodes) ** 2, maxwellian(st, g.nodes))


def test_state_validation():
    with pytest.raises(ValueError):
        FluidState(rho=0.0)
    with pytest.raises(ValueError):
        FluidState(T=-1.0)
    with pytest.raises(ValueError):
        WeightSystem(frak_a=0.5)


def test_weights():
    g = build_grid(4.0, 6)
    ws = WeightSystem(l=3.0, frak_k=4.0)
    v = g.nodes
    assert np.allclose(weight_w(ws, FluidState(), v), (1 + np.sum(v * v, 1)) ** 1.5)
    assert np.allclose(weight_varpi(ws, v), (1 + np.sum(v * v, 1)) ** 2)
    wa = weight_w(WeightSystem(frak_a=0.25), FluidState(), v)
    assert np.all(wa > weight_w(WeightSystem(), FluidState(), v) * 0.999)


def test_envelope():
    g = build_grid(6.0, 8)
    rep = check_envelope(WeightSystem(T_M=0.75), [FluidState(T=1.0), FluidState(T=1.2)], g)
    assert rep.feasible and 0.5 < rep.alpha < 0.75 and rep.C >= 1
    bad = check_envelope(WeightSystem(T_M=0.4), [FluidState(T=1.0)], g)
    assert not bad.feasible and "T_M" in bad.message


def test_reference_maxwellian_mass():
    g = build_grid(6.0, 24)
    assert abs(g.integrate(maxwellian(FluidState(T=1.0), g.nodes)) - 1.0) < 1e-6
