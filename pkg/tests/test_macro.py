import numpy as np

from kinhilbert import collision as C
from kinhilbert import macro as M
from kinhilbert.grid import FluidState, build_grid, sqrt_maxwellian


def test_projection_is_orthogonal(basis8, rng):
    h = rng.standard_normal(basis8.grid.size)
    Ph, Qh = M.project(basis8, h)
    w = basis8.grid.quad_weights
    assert np.allclose(Ph + Qh, h)
    assert np.max(np.abs((basis8.chi * w) @ Qh)) < 1e-10
    P = basis8.projector()
    assert np.allclose(P @ P, P, atol=1e-10)


def test_pseudo_inverse(op8, basis8, pinv8, rng):
    g = M.project(basis8, rng.standard_normal(op8.grid.size))[1]
    f = pinv8.solve(g)
    w = op8.grid.quad_weights
    assert np.max(np.abs((basis8.chi * w) @ f)) < 1e-10
    Lt = M.conservative_matrix(op8, basis8)
    assert np.allclose(Lt @ f, g, atol=1e-9)
    G = np.vstack([g, 2 * g])
    assert np.allclose(pinv8.solve(G)[1], 2 * f)


def test_burnett_functions_are_micro():
    g = build_grid(6.0, 16)
    basis = M.make_basis(FluidState(), g)
    bf = M.burnett_functions(basis.state, g)
    w = g.quad_weights
    for f in (bf.a(0, 1), bf.a(2, 2), bf.B[0], bf.B[2]):
        # B keeps a 2e-6 defect from truncating the box at |v_i| = 6
        assert np.max(np.abs((basis.chi * w) @ f)) < 1e-5 * np.max(np.abs(f))


def test_transport_coefficients_positive(op8, basis8, pinv8):
    tc = M.transport_coefficients(op8, basis8, pinv8)
    assert tc.mu_T > 0 and tc.kappa_T > 0
    assert tc.isotropy_A < 1e-3
    assert tc.identity_43_residual < 5e-2


def test_decay_diagnostic():
    g = build_grid(6.0, 8)
    st = FluidState()
    assert np.isclose(M.decay_diagnostic(st, g, sqrt_maxwellian(st, g.nodes), q=1.0),
                      1.0, rtol=1e-12)


def test_gram_and_rotation_at_default_resolution():
    from kinhilbert.presets import operator
    op = operator(16)
    basis = M.make_basis(op.state, op.grid)
    assert np.allclose(basis.gram, np.eye(5), atol=1e-6)
    tc = M.transport_coefficients(op, basis)
    # axis permutations: the isotropy defects of the quadratic forms
    assert tc.isotropy_A < 1e-6 and tc.isotropy_B < 1e-6
