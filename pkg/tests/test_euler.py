import numpy as np
import pytest

from kinhilbert import euler as E
from kinhilbert.presets import _pulse, _smooth_profiles


def test_constant_state_preserved():
    f = E.init_euler(0.0, n=64)
    g = E.solve_to(f, 0.3)
    assert np.array_equal(g.U, f.U)


@pytest.mark.parametrize("far", ["wall", "outflow"])
def test_wall_conservation_per_step(far):
    f = E.init_euler(0.05, *_smooth_profiles(), n=100, far=far)
    m0 = f.totals()
    g = E.step(f, 0.2 * f.dx)
    d = np.abs(g.totals() - m0)
    if far == "wall":
        assert d[0] < 1e-14 and d[4] < 1e-14
    else:
        assert d[0] > 0  # mass leaves through the open end


def test_acoustic_pulse_second_order():
    phi, Phi, th = _pulse()
    errs = []
    for n in (100, 200):
        g = E.solve_to(E.init_euler(1e-3, phi, Phi, th, n=n), 0.2)
        errs.append(E.l2_error(g, E.acoustic_solution(g.x, 0.2, 1e-3, phi, Phi, th)))
    assert errs[1] < 1e-4
    assert errs[0] / errs[1] > 2.5


def test_mirror_symmetry_of_wall():
    # a state symmetric about the wall stays so: u3 vanishes in the first face flux
    f = E.init_euler(0.01, lambda x: np.cos(np.pi * x), None, None, n=50)
    r = E.rhs(f.U, f.dx)
    assert np.all(np.isfinite(r))
    with pytest.raises(ValueError):
        E.init_euler(0.1, None, lambda x: np.vstack([0 * x, 0 * x, 1 + 0 * x]), None)


def test_positivity_checks():
    with pytest.raises(E.PositivityError):
        E.init_euler(2.0, lambda x: -np.ones_like(x), None, None)


def test_lifespan_monitor():
    # a large amplitude pulse steepens into a shock; smooth small data do not trip the monitor
    f = E.init_euler(0.9, *_pulse(), n=200)
    with pytest.raises(E.LifespanExceeded) as ei:
        E.solve_to(f, 2.0)
    assert 0 < ei.value.t < 2.0
    g = E.solve_to(E.init_euler(1e-3, *_pulse(), n=100), 0.2)
    assert E.kink_indicator(g) < 0.8


def test_time_slices_and_csv(tmp_path):
    f = E.init_euler(0.01, *_smooth_profiles(), n=40)
    a, b, c = E.time_slices(f, 0.05, 0.01)
    assert (a.t, b.t, c.t) == pytest.approx((0.04, 0.05, 0.06))
    E.to_csv([a, b], tmp_path / "e.csv")
    data = np.loadtxt(tmp_path / "e.csv", delimiter=",", skiprows=1)
    assert data.shape == (80, 7)


def test_unknown_far_boundary():
    f = E.init_euler(0.0, n=8)
    with pytest.raises(ValueError):
        E.rhs(f.U, f.dx, far="periodic")
