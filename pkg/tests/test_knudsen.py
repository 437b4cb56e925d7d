import numpy as np
import pytest

from kinhilbert import knudsen as Kn
from kinhilbert import macro as M
from kinhilbert.grid import sqrt_maxwellian


@pytest.fixture(scope="module")
def setup8(op8, basis8):
    st, g = op8.state, op8.grid
    bf = M.burnett_functions(st, g)
    s = bf.B[2] + bf.a(0, 2)
    S = lambda eta: (1 + eta)[:, None] ** -6 * s[None, :]
    fb = Kn.admissible_boundary_datum(basis8, sqrt_maxwellian(st, g.nodes) * (1 + g.nodes[:, 0] ** 2))
    p = Kn.KnudsenProblem(S, fb, op8, basis8, ds=(4.0, 8.0))
    ctx = Kn.make_context(p)
    mesh = Kn.make_eta_mesh(4.0)
    G, _ = Kn.enforce_compatibility(basis8, Kn.lift_boundary(p, mesh, ctx.L))
    return p, ctx, mesh, G


def test_mesh_is_nested_and_graded():
    m20, m40 = Kn.make_eta_mesh(20.0), Kn.make_eta_mesh(40.0)
    assert m20.n_cells == 128
    assert np.allclose(m40.nodes[: m20.nodes.size], m20.nodes)
    assert m20.widths[0] == pytest.approx(0.02)
    assert np.isclose(m20.trapz_weights().sum(), 20.0)
    with pytest.raises(ValueError):
        Kn.make_eta_mesh(0.5)


def test_cutoff():
    eta = np.linspace(0, 3, 301)
    u = Kn.upsilon(eta)
    assert np.all(u[eta <= 1] == 1) and np.all(u[eta >= 2] == 0)
    num = np.gradient(u, eta)
    assert np.max(np.abs(num - Kn.upsilon_prime(eta))) < 1e-3


def test_boundary_datum_validation(op8, basis8):
    bad = np.ones(op8.grid.size)
    with pytest.raises(ValueError):
        Kn.KnudsenProblem(None, bad, op8, basis8)
    with pytest.raises(ValueError):
        Kn.KnudsenProblem(None, None, op8, basis8, ws=Kn.WeightSystem(l=2.0))


def test_solvability_rejected(op8, basis8):
    chi0 = basis8.chi[0]
    p = Kn.KnudsenProblem(lambda eta: np.ones((eta.size, 1)) * chi0, None, op8, basis8)
    with pytest.raises(Kn.SolvabilityError):
        Kn.lift_boundary(p, Kn.make_eta_mesh(2.0))


def test_admissible_datum(basis8):
    g = basis8.grid
    fb = Kn.admissible_boundary_datum(basis8, np.cos(g.nodes[:, 0]) + g.nodes[:, 2] ** 2)
    assert np.all(fb[g.nodes[:, 2] > 0] == 0)
    mom = (basis8.chi[list(Kn.INVARIANTS_EVEN)] * g.nodes[:, 2] * g.quad_weights) @ fb
    assert np.max(np.abs(mom)) < 1e-12


def test_backends_agree_and_box_residual(setup8):
    p, ctx, mesh, G = setup8
    Fd = Kn.solve_truncated(ctx, G, 1e-1, mesh, 4)
    info = {}
    Fi = Kn.solve_truncated(ctx, G, 1e-1, mesh, 4, backend="iteration", info=info, tol=1e-13,
                            max_iter=20000)
    assert Kn.weighted_sup(ctx.wl, Fd - Fi) <= 1e-8 * Kn.weighted_sup(ctx.wl, Fd)
    assert info["iterations"] > 0
    A = ctx.L + 1e-1 * np.eye(ctx.grid.size)
    box, b0, bd = Kn.apply_box(Fd, mesh, ctx.v3, A, ctx.refl, 1 - 1 / 4)
    assert np.max(np.abs(box - Kn.box_rhs(G))) < 1e-10
    assert np.max(np.abs(b0)) < 1e-10 and np.max(np.abs(bd)) < 1e-10


def test_energy_identity(setup8):
    p, ctx, mesh, G = setup8
    F = Kn.solve_truncated(ctx, G, 1e-2, mesh, 16)
    e = Kn.energy_balance(ctx, F, G, mesh, 1e-2, 16)
    assert e["penalty"] > 0 and e["coercive"] > -1e-12
    assert abs(e["defect"]) < 1e-8 * max(1.0, abs(e["source"]))


def test_limit_shift_and_fluxes(setup8):
    p, ctx, mesh, G = setup8
    F0, rep = Kn.solve_limit(ctx, G, mesh, 1e-3)
    sd = Kn.shift_data(ctx)
    assert np.linalg.det(sd.matrix) == pytest.approx(sd.mu_T ** 2 * sd.kappa_T, rel=0.05)
    Fb, phi = Kn.constraint_shift(ctx, F0, sd)
    assert np.max(np.abs(Kn.far_fluxes(ctx, Fb, sd))) < 1e-10
    sf = Kn.structure_fluxes(ctx, Fb)
    assert np.max(np.abs(sf["b3"])) < 1e-10
    assert np.max(np.abs(sf["flux"])) < 1e-8


def test_zero_data(op8, basis8):
    p = Kn.KnudsenProblem(None, None, op8, basis8, ds=(4.0,))
    ctx = Kn.make_context(p)
    mesh, F, phi, _ = Kn.solve_slab(ctx, 4.0, record_delta=False)
    assert np.max(np.abs(F)) == 0 and np.max(np.abs(phi)) == 0


def test_halfspace_decays(setup8):
    p = setup8[0]
    sol = Kn.solve_halfspace(p, setup8[1], record_delta=False)
    rep = Kn.decay_report(sol, fit_from=2.0)
    assert rep["fitted_exponent"] > 2
    assert len(sol.history["d_differences"]) == 1
    assert set(sol.history["stages"][0]["decay_sup"]) == {0, 1, 2, 3, 4}
    assert sol.a.shape == (sol.mesh.nodes.size,) and sol.b.shape == (sol.mesh.nodes.size, 3)


def test_backtime_cycle():
    c = Kn.backtime_cycle(1.0, [0.3, 0.0, 0.5], 4.0, -1.0, t_total=20.0)
    assert c.t[1] == pytest.approx(2.0)
    assert np.allclose(np.diff(c.t[1:]), 8.0)
    assert c.eta[1] == 0 and c.eta[2] == 4.0
    assert np.all(np.abs(c.v[:, 2]) == 0.5)
    assert len(c.t) - 1 <= c.cap
    with pytest.raises(ValueError):
        Kn.backtime_cycle(1.0, [1.0, 0.0, 0.0], 4.0, -1.0)
