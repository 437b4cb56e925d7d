import numpy as np
import pytest

from kinhilbert import collision as C
from kinhilbert.grid import FluidState, build_grid, sqrt_maxwellian


def test_model_validation():
    with pytest.raises(ValueError):
        C.CollisionModel(kappa=-3.0)
    with pytest.raises(ValueError):
        C.CollisionModel(kappa=1.5)
    with pytest.raises(ValueError):
        C.CollisionModel(m=0.0)


def test_symmetry_and_null_space(op8):
    d = C.diagnostics_json(op8)
    assert d["asymmetry_symmetrised"] <= 1e-14
    assert not d["asymmetry_exceeds_threshold"]
    assert max(d["null_residuals"]) < 0.15  # O(h^2) with h = 1.5 on this coarse lattice
    assert d["coercivity_c0"] > 0
    assert "seconds" not in d


def test_collision_frequency_soft_decay(op8):
    v = np.linalg.norm(op8.grid.nodes, axis=1)
    nu = op8.nu
    assert np.all(nu > 0)
    fast, slow = v > 5, v < 1.5
    assert nu[fast].max() < nu[slow].min()


def test_L_nonnegative(op8, rng):
    h = rng.standard_normal((20, op8.grid.size))
    Lh = C.apply_L(op8, h)
    assert np.all(np.einsum("ij,ij->i", Lh, h) > -1e-10)
    assert np.allclose(Lh[0], C.apply_L(op8, h[0]))


def test_split_is_consistent(op8):
    Km, Kc = C.split_cutoff(C.CollisionModel(), op8, 0.4)
    assert np.allclose(Km + Kc, op8.K)
    assert np.allclose(Km, Km.T)
    small = C.sup_operator_norm(op8.grid, C.split_cutoff(C.CollisionModel(), op8, 0.2)[0])
    assert small < C.sup_operator_norm(op8.grid, Km)


def test_save_load_roundtrip(op8, tmp_path):
    C.save_operator(op8, tmp_path / "op.npz")
    back = C.load_operator(tmp_path / "op.npz", op8.model, op8.grid)
    assert np.array_equal(back.K, op8.K) and np.array_equal(back.nu, op8.nu)
    with pytest.raises(ValueError):
        C.load_operator(tmp_path / "op.npz", op8.model, build_grid(6.0, 10))
    C.save_operator_csv(op8, tmp_path / "op.csv")
    assert (tmp_path / "op.csv").stat().st_size > 0


def test_gamma_vanishes_on_equilibrium():
    st = FluidState()
    g = build_grid(6.0, 8)
    model = C.CollisionModel()
    nodes = np.arange(0, g.size, 37)
    sm = lambda v: sqrt_maxwellian(st, v)
    eq = C.apply_Gamma(model, st, g, sm, sm, nodes=nodes)
    h = lambda v: sm(v) * (1 + v[..., 0] ** 2 * v[..., 2])
    gen = C.apply_Gamma(model, st, g, h, h, nodes=nodes)
    assert np.max(np.abs(eq)) < 1e-3 * np.max(np.abs(gen))


def _gamma_identity_error(op):
    g, st = op.grid, op.state
    sm = lambda v: sqrt_maxwellian(st, v)
    hf = lambda v: sm(v) * (1 + v[..., 0] * v[..., 2] + 0.3 * v[..., 1] ** 2)
    Lh = C.apply_L(op, hf(g.nodes))
    idx = np.argsort(np.linalg.norm(g.nodes, axis=1))[:40:4]
    G = C.apply_Gamma(op.model, st, g, sm, hf, nodes=idx) + C.apply_Gamma(op.model, st, g, hf, sm, nodes=idx)
    return np.max(np.abs(Lh[idx] + G)) / np.max(np.abs(Lh[idx]))


def test_gamma_cross_validates_assembly():
    from kinhilbert.presets import operator
    assert _gamma_identity_error(operator(12)) < 5e-3


@pytest.mark.xfail(strict=True, reason="lattice error of the assembled K dominates; about 1e-4 at 16^3")
def test_gamma_cross_validation_target():
    from kinhilbert.presets import operator
    assert _gamma_identity_error(operator(16)) <= 1e-6
