"""Truncated multi-scale Hilbert expansion around a slab Euler flow.

    F^eps = mu + eps [sqrt(mu) f1 + sqrt(mu0) fbar1(x3/eps)]
               + eps^2 [sqrt(mu) {I-P} f2 + sqrt(mu0) {I-P0} fbar2(x3/eps) + sqrt(mu0) fhat2(x3/eps^2)]

f1 and fbar1 are macroscopic (Maxwellian curve derivatives), the eps^2 micro parts close the
order-one equations, and the Knudsen term repairs the specular mismatch that the odd traces
of the eps^2 micro parts create at x3 = 0.

Collision terms of Maxwellian-curve directions are evaluated exactly: if M(s, t) is the
Maxwellian with parameters p + s a + t b then, differentiating Q(M, M) = 0,

    Gamma(M_s/sqrt(mu), M_t/sqrt(mu)) + Gamma(M_t/sqrt(mu), M_s/sqrt(mu)) = L(M_st/sqrt(mu)),

so L^{-1} of such a term is the micro part of M_st/sqrt(mu) and no collision quadrature is
needed along x3.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .collision import CollisionOperator
from .euler import EulerField
from .grid import FluidState, VelocityGrid, WeightSystem, maxwellian, sqrt_maxwellian, weight_varpi
from .knudsen import (INVARIANTS_EVEN, KnudsenProblem, make_context, shift_data, solve_slab,
                      upsilon)
from .macro import ProjectionBasis, PseudoInverse, factor_pseudo_inverse

log = logging.getLogger(__name__)


class SolvabilityResidualError(ValueError):
    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


class MatchingError(ValueError):
    def __init__(self, msg, moments):
        super().__init__(msg)
        self.moments = moments


class ResolutionError(ValueError):
    pass


# ----------------------------------------------------------------------------- Maxwellian calculus

def _split(S):
    S = np.asarray(S, dtype=float)
    return S[0], S[1:4].T, S[4]


def dlog_maxwellian(state, q, v):
    """Directional derivative of log mu along q, shape (nx, N). state, q: (5, nx)."""
    rho, u, T = _split(state)
    r1, u1, t1 = _split(q)
    w = v[None, :, :] - u[:, None, :]
    w2 = np.sum(w * w, axis=2)
    return (r1 / rho)[:, None] + np.einsum("xnk,xk->xn", w, u1) / T[:, None] \
        + (t1 / (2 * T * T))[:, None] * (w2 - 3 * T[:, None])


def d2log_maxwellian(state, qa, qb, v):
    rho, u, T = _split(state)
    ra, ua, ta = _split(qa)
    rb, ub, tb = _split(qb)
    w = v[None, :, :] - u[:, None, :]
    w2 = np.sum(w * w, axis=2)
    wa = np.einsum("xnk,xk->xn", w, ua)
    wb = np.einsum("xnk,xk->xn", w, ub)
    c = -ra * rb / rho ** 2 + 1.5 * ta * tb / T ** 2 - np.sum(ua * ub, axis=1) / T
    return c[:, None] - (wa * tb[:, None] + wb * ta[:, None]) / (T * T)[:, None] \
        - w2 * (ta * tb / T ** 3)[:, None]


def local_sqrt_mu(state, v):
    rho, u, T = _split(state)
    w = v[None, :, :] - u[:, None, :]
    return np.sqrt(rho[:, None] * (2 * np.pi * T[:, None]) ** -1.5
                   * np.exp(-np.sum(w * w, axis=2) / (2 * T[:, None])))


def maxwellian_first(state, q, v):
    """M_q / sqrt(mu): the macroscopic grid function of the perturbation q."""
    return local_sqrt_mu(state, v) * dlog_maxwellian(state, q, v)


def maxwellian_second(state, qa, qb, v):
    """M_{qa qb} / sqrt(mu)."""
    return local_sqrt_mu(state, v) * (dlog_maxwellian(state, qa, v) * dlog_maxwellian(state, qb, v)
                                      + d2log_maxwellian(state, qa, qb, v))


def local_invariants(state, v):
    """Orthonormal invariants of the local Maxwellians, shape (nx, 5, N)."""
    rho, u, T = _split(state)
    sm = local_sqrt_mu(state, v) / np.sqrt(rho)[:, None]
    c = (v[None, :, :] - u[:, None, :]) / np.sqrt(T)[:, None, None]
    return np.stack([sm, c[..., 0] * sm, c[..., 1] * sm, c[..., 2] * sm,
                     (np.sum(c * c, axis=2) - 3.0) / np.sqrt(6.0) * sm], axis=1)


def local_project(state, grid: VelocityGrid, H):
    """(coefficients (nx, 5), P H) with the Gram-corrected local projection at every x."""
    chi = local_invariants(state, grid.nodes)
    cw = chi * grid.quad_weights
    G = np.einsum("xin,xjn->xij", cw, chi)
    rhs = np.einsum("xin,xn->xi", cw, H)
    coef = np.linalg.solve(G, rhs[..., None])[..., 0]
    return coef, np.einsum("xi,xin->xn", coef, chi)


# ----------------------------------------------------------------------------- background

@dataclass
class Background:
    """Euler slices at t - dt, t, t + dt turned into smooth functions of x3 >= 0.

    Cubic splines through the cell centres; u3 is extended oddly to x3 < 0 so that u3(0) = 0
    holds exactly, the other primitives use one-sided (not-a-knot) end conditions so a
    non-zero wall slope of a tangential velocity is kept.
    """

    splines: list            # per slice: (spline of rho, u1, u2, T; odd spline of u3)
    t: float
    dt: float
    X: float

    def _eval(self, k, x, nu=0):
        even, odd = self.splines[k]
        x = np.asarray(x, dtype=float)
        e = even(x, nu).T
        return np.vstack([e[:3], odd(x, nu)[None, :], e[3:]])

    def state(self, x, k: int = 1) -> np.ndarray:
        return self._eval(k, x)

    def d3(self, x) -> np.ndarray:
        return self._eval(1, x, 1)

    def dt_(self, x) -> np.ndarray:
        return (self._eval(2, x) - self._eval(0, x)) / (2 * self.dt)

    def wall_state(self) -> FluidState:
        s = self.state(np.array([0.0]))[:, 0]
        return FluidState(float(s[0]), (float(s[1]), float(s[2]), 0.0), float(s[4]))


def _prims(fld: EulerField) -> np.ndarray:
    return np.vstack([fld.rho, fld.u, fld.T])


def background_from_slices(slices, dt: float) -> Background:
    return Background([_splines(f.x, _prims(f)) for f in slices], float(slices[1].t), float(dt),
                      float(slices[1].X))


def _splines(x, W):
    even = CubicSpline(x, W[[0, 1, 2, 4]].T, axis=0)
    odd = CubicSpline(np.concatenate([-x[::-1], x]), np.concatenate([-W[3, ::-1], W[3]]))
    return even, odd


def perturbed_background(bg: Background, drho) -> Background:
    """Negative control: add a static density bump (not an Euler solution)."""
    out = []
    for even, odd in bg.splines:
        x = even.x
        W = even(x).copy()
        W[:, 0] += drho(x)
        out.append((CubicSpline(x, W, axis=0), odd))
    return Background(out, bg.t, bg.dt, bg.X)


def transport_term(bg: Background, x, v) -> np.ndarray:
    """(d_t + v3 d_3) mu / sqrt(mu) at the mid slice."""
    st = bg.state(x)
    return maxwellian_first(st, bg.dt_(x), v) + v[None, :, 2] * maxwellian_first(st, bg.d3(x), v)


def solvability_residual(bg: Background, grid: VelocityGrid, x) -> dict:
    """P[(d_t + v.grad) mu / sqrt(mu)]: vanishes iff (rho, u, T) solves the Euler system."""
    Tm = transport_term(bg, x, grid.nodes)
    coef, PT = local_project(bg.state(x), grid, Tm)
    w = grid.quad_weights
    nP = np.sqrt(np.sum(PT * PT * w, axis=1))
    nT = np.sqrt(np.sum(Tm * Tm * w, axis=1))
    xw = _trapz_weights(np.asarray(x, dtype=float))
    return {"moments": coef, "sup": float(np.max(np.abs(coef))),
            "l2": float(np.sqrt(np.sum(xw * nP ** 2))),
            "relative": float(np.sqrt(np.sum(xw * nP ** 2) / max(np.sum(xw * nT ** 2), 1e-300)))}


def _trapz_weights(x):
    w = np.zeros(x.size)
    if x.size > 1:
        d = np.diff(x)
        w[:-1] += 0.5 * d
        w[1:] += 0.5 * d
    return w


# ----------------------------------------------------------------------------- interior

@dataclass
class InteriorTerm:
    x: np.ndarray
    f1: np.ndarray                # (nx, N) macroscopic first-order term
    micro: np.ndarray             # (nx, N) {I-P} f2
    residual: dict


def interior_micro(pinv0: PseudoInverse, bg: Background, x, f1_macro=None,
                   threshold: float = 0.05) -> InteriorTerm:
    """{I-P} f2 = L^{-1}[Gamma(f1, f1) - {I-P}(d_t + v.grad) mu / sqrt(mu)] along x3.

    f1_macro(x) returns the perturbation (rho1, u1, T1) as a (5, nx) array; its Gamma term is
    evaluated through the Maxwellian-curve identity. L^{-1} is the boundary-state inverse;
    the result is re-projected onto the local complement of the invariants.
    """
    grid = pinv0.basis.grid
    v = grid.nodes
    x = np.asarray(x, dtype=float)
    res = solvability_residual(bg, grid, x)
    if res["relative"] > threshold:
        raise SolvabilityResidualError(
            f"solvability residual {res['relative']:.3g} exceeds {threshold}: the background does "
            "not satisfy the Euler system", res)
    st = bg.state(x)
    Tm = transport_term(bg, x, v)
    _, PT = local_project(st, grid, Tm)
    micro = -pinv0.solve(Tm - PT)
    if f1_macro is not None:
        q1 = np.asarray(f1_macro(x), dtype=float)
        f1 = maxwellian_first(st, q1, v)
        micro = micro + 0.5 * maxwellian_second(st, q1, q1, v)
    else:
        f1 = np.zeros_like(Tm)
    _, Pm = local_project(st, grid, micro)
    return InteriorTerm(x, f1, micro - Pm, res)


# ----------------------------------------------------------------------------- viscous layer

@dataclass
class LayerProfiles:
    """(A_j + s_j y) exp(-y^2) for j in (u1, u2, T); rho follows from constant pressure."""

    values: tuple = (0.0, 0.0, 0.0)
    slopes: tuple = (0.0, 0.0, 0.0)

    def q(self, y, state0: FluidState, deriv: int = 0) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        A = np.asarray(self.values, dtype=float)[:, None]
        s = np.asarray(self.slopes, dtype=float)[:, None]
        e = np.exp(-y * y)[None, :]
        if deriv == 0:
            p = (A + s * y) * e
        else:
            p = (s - 2 * y * (A + s * y)) * e
        u1, u2, th = p
        rho = -state0.rho / state0.T * th
        return np.vstack([rho, u1, u2, np.zeros_like(y), th])

    def decay(self, y_max: float = 8.0) -> float:
        return float(max(abs(a) + abs(s) * y_max for a, s in zip(self.values, self.slopes))
                     * np.exp(-y_max ** 2))


@dataclass
class ViscousTerm:
    y: np.ndarray
    f1: np.ndarray
    micro: np.ndarray
    solvability: np.ndarray
    profiles: LayerProfiles


def _rep(state0: FluidState, n):
    s = np.array([state0.rho, *state0.u, state0.T])
    return np.repeat(s[:, None], n, axis=1)


def viscous_micro(pinv0: PseudoInverse, profiles: LayerProfiles, y, d3_wall=None, q1_wall=None,
                  taylor_order: int = 2, decay_tol: float = 1e-10) -> ViscousTerm:
    """{I-P0} fbar2 from the order-one layer equation

        v3 d_y fbar1 = -L0 fbar2 + y [Gamma(d3 mu0, fbar1) sym] + [Gamma(f1(0), fbar1) sym]
                       + Gamma(fbar1, fbar1).

    Only the linear Taylor term of mu about the wall reaches this order; taylor_order is kept
    for the record. The P0 part of the right side is returned as the solvability data.
    """
    if profiles.decay() > decay_tol:
        raise ValueError("layer profiles must decay in y (exp(-y^2) envelope expected)")
    basis = pinv0.basis
    grid = basis.grid
    v = grid.nodes
    st0 = basis.state
    y = np.asarray(y, dtype=float)
    S0 = _rep(st0, y.size)
    qb = profiles.q(y, st0)
    dqb = profiles.q(y, st0, deriv=1)
    f1b = maxwellian_first(S0, qb, v)
    transport = v[None, :, 2] * maxwellian_first(S0, dqb, v)
    _, Ptr = local_project(S0, grid, transport)
    micro = -pinv0.solve(transport - Ptr)
    extra = 0.5 * maxwellian_second(S0, qb, qb, v)
    if d3_wall is not None and taylor_order >= 1:
        extra = extra + y[:, None] * maxwellian_second(S0, np.repeat(np.asarray(d3_wall)[:, None], y.size, 1), qb, v)
    if q1_wall is not None:
        extra = extra + maxwellian_second(S0, np.repeat(np.asarray(q1_wall)[:, None], y.size, 1), qb, v)
    micro = micro + extra
    _, Pm = local_project(S0, grid, micro)
    return ViscousTerm(y, f1b, micro - Pm, local_project(S0, grid, -transport)[0], profiles)


def wall_fluxes(grid: VelocityGrid, basis0: ProjectionBasis, g) -> np.ndarray:
    """int v3 chi_i g for the even invariants: the four solvability moments of the trace."""
    chi = basis0.chi[list(INVARIANTS_EVEN)]
    return (chi * grid.nodes[:, 2] * grid.quad_weights) @ np.asarray(g)


def match_layer_slopes(pinv0: PseudoInverse, interior_trace, values=(0.0, 0.0, 0.0),
                       q1_wall=None, d3_wall=None) -> LayerProfiles:
    """Wall slopes of the layer profiles that cancel the shear and heat fluxes of the traces.

    These are the zero-stress, zero-heat-flux conditions that specular reflection imposes on
    the layer; they make the Knudsen boundary datum solvable.
    """
    grid = pinv0.basis.grid
    y0 = np.array([0.0])

    def trace(slopes):
        vt = viscous_micro(pinv0, LayerProfiles(tuple(values), tuple(slopes)), y0, d3_wall, q1_wall)
        return wall_fluxes(grid, pinv0.basis, interior_trace + vt.micro[0])

    base = trace((0.0, 0.0, 0.0))
    J = np.column_stack([trace(e) - base for e in np.eye(3)])
    sel = [1, 2, 3]                 # u1, u2 and energy rows; the mass row vanishes identically
    s = np.linalg.solve(J[sel], -base[sel])
    return LayerProfiles(tuple(values), tuple(float(a) for a in s))


# ----------------------------------------------------------------------------- Knudsen matching

def knudsen_matching(grid: VelocityGrid, basis0: ProjectionBasis, trace, bar_trace=None,
                     tol: float = 1e-8) -> tuple[np.ndarray, dict]:
    """f_b(v) = g(Rv) - g(v) on v3 < 0, g the summed traces, zero for v3 > 0."""
    g = np.asarray(trace, dtype=float)
    if bar_trace is not None:
        g = g + bar_trace
    v3 = grid.nodes[:, 2]
    fb = np.where(v3 < 0, g[grid.reflect_map] - g, 0.0)
    odd = 0.5 * (g - g[grid.reflect_map])
    mom = {"f_b": (basis0.chi[list(INVARIANTS_EVEN)] * v3 * grid.quad_weights) @ fb,
           "trace_odd_flux": -wall_fluxes(grid, basis0, odd)}
    scale = max(1.0, float(np.max(np.abs(g))))
    if np.max(np.abs(mom["f_b"])) > tol * scale:
        raise MatchingError(f"Knudsen datum violates solvability: moments {mom['f_b']}", mom)
    return fb, mom


@dataclass
class KnudsenTerm:
    eta: np.ndarray
    f: np.ndarray
    f_b: np.ndarray
    history: dict = field(default_factory=dict)

    def __call__(self, eta):
        eta = np.asarray(eta, dtype=float)
        out = np.zeros((eta.size, self.f.shape[1]))
        inside = eta <= self.eta[-1]
        if inside.any():
            idx = np.clip(np.searchsorted(self.eta, eta[inside]) - 1, 0, self.eta.size - 2)
            t = ((eta[inside] - self.eta[idx]) / (self.eta[idx + 1] - self.eta[idx]))[:, None]
            out[inside] = (1 - t) * self.f[idx] + t * self.f[idx + 1]
        return out


def knudsen_term(op0: CollisionOperator, basis0: ProjectionBasis, f_b, d: float = 20.0,
                 per_unit: int = 6) -> KnudsenTerm:
    prob = KnudsenProblem(None, f_b, op0, basis0, ds=(d,), per_unit=per_unit)
    ctx = make_context(prob)
    mesh, Fbar, phi, hist = solve_slab(ctx, d, shift_data(ctx), record_delta=False)
    f = Fbar + upsilon(mesh.nodes)[:, None] * f_b[None, :]
    hist["phi"] = phi.tolist()
    return KnudsenTerm(mesh.nodes, f, f_b, hist)


# ----------------------------------------------------------------------------- assembly

@dataclass
class ExpansionTerms:
    bg: Background
    pinv0: PseudoInverse
    op0: CollisionOperator
    f1_macro: object
    profiles: LayerProfiles
    knudsen: KnudsenTerm | None
    q1_wall: np.ndarray
    d3_wall: np.ndarray
    taylor_order: int = 2

    @property
    def grid(self):
        return self.op0.grid


@dataclass
class AssembledSolution:
    eps: float
    x: np.ndarray
    F: np.ndarray
    mu: np.ndarray
    order: int = 1
    taylor_order: int = 2
    parts: dict = field(default_factory=dict, repr=False)

    def deviation(self) -> np.ndarray:
        return (self.F - self.mu) / np.sqrt(self.mu)


def composite_mesh(eps: float, X: float, n_interior: int = 200, eta_max: float = 20.0,
                   n_eta: int = 80, y_max: float = 8.0, n_y: int = 80) -> np.ndarray:
    """Union of meshes resolving x3 ~ eps^2 (Knudsen), x3 ~ eps (viscous) and x3 ~ 1."""
    if not 0 < eps <= 0.5:
        raise ValueError("eps must lie in (0, 0.5]")
    eta = np.concatenate([[0.0], np.geomspace(1e-3, eta_max, n_eta)])
    y = np.concatenate([[0.0], np.geomspace(1e-3, y_max, n_y)])
    xs = np.concatenate([eps ** 2 * eta, eps * y, np.linspace(0, X, n_interior + 1)])
    xs = np.unique(xs[xs <= X])
    return xs


def assemble(eps: float, terms: ExpansionTerms, x=None, knudsen: bool = True,
             order: int = 1, max_cell_eps2: float = 0.5) -> AssembledSolution:
    bg = terms.bg
    grid = terms.grid
    v = grid.nodes
    x = composite_mesh(eps, bg.X) if x is None else np.asarray(x, dtype=float)
    first = np.diff(x[:3]).max() if x.size > 2 else np.inf
    if first > max_cell_eps2 * eps ** 2:
        raise ResolutionError(f"mesh spacing {first:.3g} near the wall does not resolve eps^2 = {eps ** 2:.3g}")
    st = bg.state(x)
    smu = local_sqrt_mu(st, v)
    mu = smu * smu
    F = mu.copy()
    parts = {}
    if order >= 1:
        st0 = terms.op0.state
        sm0 = sqrt_maxwellian(st0, v)[None, :]
        inter = interior_micro(terms.pinv0, bg, x, terms.f1_macro, threshold=np.inf)
        y = x / eps
        vis = viscous_micro(terms.pinv0, terms.profiles, y, terms.d3_wall, terms.q1_wall, terms.taylor_order)
        F = F + eps * (smu * inter.f1 + sm0 * vis.f1)
        F = F + eps ** 2 * (smu * inter.micro + sm0 * vis.micro)
        if knudsen and terms.knudsen is not None:
            F = F + eps ** 2 * sm0 * terms.knudsen(x / eps ** 2)
        parts = {"interior_residual": inter.residual["relative"]}
    return AssembledSolution(eps, x, F, mu, order, terms.taylor_order, parts)


def boundary_defect(sol: AssembledSolution, grid: VelocityGrid) -> float:
    """sup over v3 > 0 of |F(0, v) - F(0, R v)|."""
    if sol.x[0] != 0.0:
        raise ValueError("mesh must contain the wall")
    F0 = sol.F[0]
    pos = grid.nodes[:, 2] > 0
    return float(np.max(np.abs(F0[pos] - F0[grid.reflect_map[pos]])))


def deviation_norms(sol: AssembledSolution, grid: VelocityGrid, ws: WeightSystem | None = None) -> dict:
    ws = WeightSystem() if ws is None else ws
    dev = sol.deviation()
    xw = _trapz_weights(sol.x)
    l2 = float(np.sqrt(np.sum(xw[:, None] * dev * dev * grid.quad_weights[None, :])))
    muM = maxwellian(FluidState(1.0, (0.0, 0.0, 0.0), ws.T_M), grid.nodes)
    sup = float(np.max(np.abs(weight_varpi(ws, grid.nodes) * (sol.F - sol.mu) / np.sqrt(muM))))
    return {"l2": l2, "sup_weighted": sup, "min_F": float(sol.F.min())}


def fit_slope(eps_list, values) -> float:
    return float(np.polyfit(np.log(eps_list), np.log(values), 1)[0])


def residual_sweep(terms: ExpansionTerms, eps_list=(0.2, 0.1, 0.05), ws: WeightSystem | None = None,
                   ablation_eps: float | None = 0.1) -> dict:
    """Deviation norms and boundary specular defect versus eps, with log-log slopes.

    The ablation assembles the same expansion without the Knudsen term.
    """
    grid = terms.grid
    rows = []
    for eps in eps_list:
        sol = assemble(eps, terms)
        nrm = deviation_norms(sol, grid, ws)
        rows.append({"eps": eps, **nrm, "boundary_defect": boundary_defect(sol, grid)})
    table = {"rows": rows,
             "slope_l2": fit_slope(eps_list, [r["l2"] for r in rows]),
             "slope_sup_weighted": fit_slope(eps_list, [r["sup_weighted"] for r in rows])}
    if ablation_eps is not None:
        with_k = boundary_defect(assemble(ablation_eps, terms), grid)
        without = boundary_defect(assemble(ablation_eps, terms, knudsen=False), grid)
        table["ablation"] = {"eps": ablation_eps, "with_knudsen": with_k, "without_knudsen": without,
                             "ratio": without / max(with_k, 1e-300)}
    return table


# ----------------------------------------------------------------------------- preset construction

def build_terms(bg: Background, op0: CollisionOperator, basis0: ProjectionBasis, f1_macro,
                values=(0.5, 0.0, 0.3), knudsen_d: float = 20.0, pinv0: PseudoInverse | None = None,
                taylor_order: int = 2) -> ExpansionTerms:
    """Interior, viscous and Knudsen terms with layer slopes chosen so the Knudsen datum is solvable."""
    ws = bg.wall_state()
    if not np.allclose([ws.rho, *ws.u, ws.T], [op0.state.rho, *op0.state.u, op0.state.T], atol=1e-12):
        raise ValueError(f"boundary operator built around {op0.state}, wall state is {ws}")
    pinv0 = factor_pseudo_inverse(op0, basis0) if pinv0 is None else pinv0
    x0 = np.array([0.0])
    q1w = np.asarray(f1_macro(x0), dtype=float)[:, 0]
    if abs(q1w[3]) > 1e-14:
        raise ValueError("the first-order normal velocity must vanish at the wall")
    d3w = bg.d3(x0)[:, 0]
    inter0 = interior_micro(pinv0, bg, x0, f1_macro, threshold=np.inf)
    prof = match_layer_slopes(pinv0, inter0.micro[0], values, q1w, d3w)
    vis0 = viscous_micro(pinv0, prof, np.array([0.0]), d3w, q1w, taylor_order)
    fb, mom = knudsen_matching(op0.grid, basis0, inter0.micro[0], vis0.micro[0])
    kn = knudsen_term(op0, basis0, fb, knudsen_d)
    kn.history["matching"] = {k: np.asarray(m).tolist() for k, m in mom.items()}
    return ExpansionTerms(bg, pinv0, op0, f1_macro, prof, kn, q1w, d3w, taylor_order)
