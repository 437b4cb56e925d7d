import numpy as np
import pytest

from kinhilbert import expansion as X
from kinhilbert import macro as M
from kinhilbert.grid import FluidState, build_grid, maxwellian, sqrt_maxwellian
from kinhilbert.presets import _f1_macro, operator, smooth_background


@pytest.fixture(scope="module")
def bg():
    return smooth_background(200)


@pytest.fixture(scope="module")
def terms(bg):
    ws = bg.wall_state()
    op = operator(8, state=(ws.rho, *ws.u, ws.T))
    basis = M.make_basis(op.state, op.grid)
    return X.build_terms(bg, op, basis, _f1_macro, values=(0.1, 0.0, 0.1), knudsen_d=8.0)


def test_maxwellian_derivatives():
    g = build_grid(6.0, 8)
    v = g.nodes
    S = np.array([[1.1], [0.2], [0.0], [-0.1], [0.9]])
    q = np.array([[0.3], [0.1], [-0.2], [0.05], [0.2]])
    mu = lambda s: maxwellian(FluidState(s[0, 0], tuple(s[1:4, 0]), s[4, 0]), v)
    h = 1e-5
    fd = (mu(S + h * q) - mu(S - h * q)) / (2 * h)
    sm = X.local_sqrt_mu(S, v)[0]
    assert np.allclose(X.maxwellian_first(S, q, v)[0] * sm, fd, atol=1e-9)
    fd2 = (mu(S + h * q) - 2 * mu(S) + mu(S - h * q)) / h ** 2
    assert np.allclose(X.maxwellian_second(S, q, q, v)[0] * sm, fd2, atol=1e-4)


def test_local_projection(rng):
    g = build_grid(6.0, 12)
    S = np.array([[1.0, 1.2], [0.0, 0.1], [0.0, 0.0], [0.0, -0.1], [1.0, 0.9]])
    chi = X.local_invariants(S, g.nodes)
    coef, P = X.local_project(S, g, chi[:, 3])
    assert np.allclose(P, chi[:, 3], atol=1e-10)
    H = rng.standard_normal((2, g.size))
    coef, P = X.local_project(S, g, H)
    resid = np.einsum("xin,xn->xi", chi * g.quad_weights, H - P)
    assert np.max(np.abs(resid)) < 1e-10


def test_background_parity(bg):
    x = np.array([0.0, 0.3])
    s = bg.state(x)
    assert abs(s[3, 0]) < 1e-12
    ws = bg.wall_state()
    assert ws.u[2] == 0.0 and ws.rho > 0


def test_solvability_residual_and_control(bg):
    g = build_grid(6.0, 12)
    xs = np.linspace(0, 1, 21)
    good = X.solvability_residual(bg, g, xs)
    bad = X.solvability_residual(X.perturbed_background(bg, lambda x: 0.05 * np.sin(3 * np.pi * x)), g, xs)
    assert good["relative"] < 1e-3
    assert bad["relative"] > 0.1


def test_constant_background_is_equilibrium():
    from kinhilbert import euler as E
    f = E.init_euler(0.0, n=50)
    bg0 = X.background_from_slices(E.time_slices(f, 0.1, 0.01), 0.01)
    g = build_grid(6.0, 8)
    r = X.solvability_residual(bg0, g, np.linspace(0, 1, 11))
    assert r["sup"] < 1e-14


def test_layer_profiles():
    p = X.LayerProfiles((0.2, 0.0, 0.1), (0.3, 0.0, -0.1))
    st = FluidState()
    y = np.linspace(0, 4, 401)
    q = p.q(y, st)
    dq = p.q(y, st, deriv=1)
    assert np.allclose(np.gradient(q[1], y, edge_order=2), dq[1], atol=1e-3)
    assert np.allclose(q[0], -q[4])
    assert p.decay(8.0) < 1e-25


def test_matching_manufactured_odd_trace(basis8):
    g = basis8.grid
    v = g.nodes
    st = basis8.state
    odd = v[:, 0] * v[:, 1] * v[:, 2] * sqrt_maxwellian(st, v)
    even = (1 + v[:, 0] ** 2 + v[:, 2] ** 2) * sqrt_maxwellian(st, v)
    fb, mom = X.knudsen_matching(g, basis8, even + odd)
    neg = v[:, 2] < 0
    assert np.allclose(fb[neg], -2 * odd[neg])
    assert np.all(fb[~neg] == 0)
    with pytest.raises(X.MatchingError):
        X.knudsen_matching(g, basis8, v[:, 2] * sqrt_maxwellian(st, v))


def test_micro_parts_orthogonal(terms, bg):
    x = np.linspace(0, 1, 11)
    inter = X.interior_micro(terms.pinv0, bg, x, _f1_macro, threshold=np.inf)
    chi = X.local_invariants(bg.state(x), terms.grid.nodes)
    mom = np.einsum("xin,xn->xi", chi * terms.grid.quad_weights, inter.micro)
    assert np.max(np.abs(mom)) < 1e-8
    y = np.linspace(0, 6, 13)
    vis = X.viscous_micro(terms.pinv0, terms.profiles, y, terms.d3_wall, terms.q1_wall)
    mom0 = (terms.pinv0.basis.chi * terms.grid.quad_weights) @ vis.micro.T
    assert np.max(np.abs(mom0)) < 1e-8


def test_assembly_boundary_and_order_zero(terms):
    s0 = X.assemble(0.2, terms, order=0)
    assert np.array_equal(s0.F, s0.mu)
    s1 = X.assemble(0.1, terms)
    assert X.boundary_defect(s1, terms.grid) <= 1e-8 * 0.1
    with pytest.raises(X.ResolutionError):
        X.assemble(0.1, terms, x=np.linspace(0, 1, 11))
    with pytest.raises(ValueError):
        X.composite_mesh(0.7, 1.0)


def test_positivity_in_velocity_bulk(terms):
    sol = X.assemble(0.2, terms)
    bulk = np.linalg.norm(terms.grid.nodes, axis=1) <= 4.0
    assert sol.F[:, bulk].min() > 0


def test_sweep_slope(terms):
    tab = X.residual_sweep(terms, (0.2, 0.1, 0.05), ablation_eps=None)
    assert tab["slope_l2"] >= 0.8
    assert "ablation" not in tab


def test_fit_slope():
    assert X.fit_slope([0.2, 0.1, 0.05], [0.4, 0.2, 0.1]) == pytest.approx(1.0)
