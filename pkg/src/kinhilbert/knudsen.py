"""Half-space Knudsen layer with specular reflection.

    v3 d_eta f + L0 f = S,  eta > 0,   f(0, v) = f(0, R v) + f_b(v)  (v3 < 0)

solved through the truncated slab (0, d), the penalisation delta and the boundary damping
(1 - 1/n), then the limits n -> inf, delta -> 0 and the constraint shift at eta = d.

Discretisation. Nodal values f_k = f(eta_k, .) on an eta mesh, the centred box scheme

    D (f_{k+1} - f_k) / Delta_k + A (f_k + f_{k+1}) / 2 = (g_k + g_{k+1}) / 2,

with D = diag(v3), A = delta + L~ and L~ the conservative collision matrix (exact null space).
Taking the invariants against the scheme shows that the fluxes int v3 chi_i f are exactly
constant in eta when delta = 0, which is the discrete form of b3 = 0 and of the flux
orthogonality. Boundary rows: f_0(v) = theta f_0(R v) for v3 > 0 and f_M(v) = theta f_M(R v)
for v3 < 0, theta = 1 - 1/n (theta = 1 is exact specular reflection).

Two interchangeable solvers for the penalised slab problem:
  * "iteration": K applied lagged, the transport part with nu + delta inverted along the
    back-time cycles (forward sweep, reflection, backward sweep, reflection), bounce series
    truncated at the velocity dependent cap k0 |v3| (1+|v|^2)^{|kappa|/2};
  * "direct": modal decomposition of the pencil (A, D), scalar recurrences per mode and one
    dense solve for the boundary coefficients.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba as nb
import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, gmres

from .collision import CollisionOperator
from .grid import VelocityGrid, WeightSystem, weight_w
from .kernels import smoothstep
from .macro import (ProjectionBasis, PseudoInverse, burnett_functions, conservative_matrix,
                    factor_pseudo_inverse, transport_coefficients)

log = logging.getLogger(__name__)

INVARIANTS_EVEN = (0, 1, 2, 4)   # invariants even in v3: the solvability moments


class SolvabilityError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


# ----------------------------------------------------------------------------- mesh

@dataclass(frozen=True)
class EtaMesh:
    d: float
    nodes: np.ndarray

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def n_cells(self) -> int:
        return self.nodes.size - 1

    def trapz_weights(self) -> np.ndarray:
        w = np.zeros(self.nodes.size)
        dw = self.widths
        w[:-1] += 0.5 * dw
        w[1:] += 0.5 * dw
        return w


def make_eta_mesh(d: float, per_unit: int = 6, n_graded: int = 14, first: float = 0.02) -> EtaMesh:
    """Geometric cells on [0, 1] starting at ``first``, then uniform cells of width 1/per_unit.

    Meshes for integer d are nested, which lets solutions on different slabs be compared
    node by node. d = 20 gives 128 cells with the defaults.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    if first > 0.05:
        raise ValueError("first cell must not exceed 0.05")
    from scipy.optimize import brentq
    r = brentq(lambda q: first * (q ** n_graded - 1) / (q - 1) - 1.0, 1.0001, 3.0)
    g = np.concatenate([[0.0], np.cumsum(first * r ** np.arange(n_graded))])
    g[-1] = 1.0
    n_uni = int(round((d - 1.0) * per_unit))
    uni = 1.0 + np.arange(1, n_uni + 1) / per_unit
    nodes = np.concatenate([g, uni])
    nodes[-1] = d
    return EtaMesh(float(d), nodes)


def upsilon(eta):
    """Cutoff equal to 1 on [0, 1] and 0 on [2, inf)."""
    return 1.0 - smoothstep(np.asarray(eta, dtype=float) - 1.0)


def upsilon_prime(eta):
    t = np.clip(np.asarray(eta, dtype=float) - 1.0, 0.0, 1.0)
    return -30.0 * t * t * (1 - t) ** 2


# ----------------------------------------------------------------------------- problem

@dataclass
class KnudsenProblem:
    S: object                      # callable eta -> (len(eta), N) or None
    f_b: np.ndarray                # boundary datum, zero for v3 > 0
    op0: CollisionOperator
    basis0: ProjectionBasis
    ws: WeightSystem = field(default_factory=lambda: WeightSystem(l=3.0))
    deltas: tuple = (1e-2, 1e-3, 1e-4)
    ds: tuple = (10.0, 20.0, 40.0)
    n_list: tuple = (4, 16, 64, 256)
    per_unit: int = 6
    tol: float = 1e-8
    solv_tol: float = 1e-6

    def __post_init__(self):
        g = self.op0.grid
        self.f_b = np.zeros(g.size) if self.f_b is None else np.asarray(self.f_b, dtype=float)
        if np.any(self.f_b[g.nodes[:, 2] > 0] != 0):
            raise ValueError("f_b must vanish for v3 > 0")
        if self.ws.l <= 2:
            raise ValueError("the solver norms need l > 2")

    def source(self, eta) -> np.ndarray:
        eta = np.atleast_1d(eta)
        if self.S is None:
            return np.zeros((eta.size, self.op0.grid.size))
        return np.asarray(self.S(eta), dtype=float).reshape(eta.size, -1)

    def solvability(self, eta) -> dict:
        """The four invariant moments of S at every eta and the four v3 moments of f_b."""
        chi = self.basis0.chi[list(INVARIANTS_EVEN)] * self.op0.grid.quad_weights
        v3 = self.op0.grid.nodes[:, 2]
        return {"S": self.source(eta) @ chi.T, "f_b": chi @ (v3 * self.f_b)}


def check_solvability(problem: KnudsenProblem, eta) -> None:
    m = problem.solvability(eta)
    scale = max(1.0, float(np.max(np.abs(problem.source(eta)), initial=0.0)),
                float(np.max(np.abs(problem.f_b), initial=0.0)))
    bad_s = float(np.max(np.abs(m["S"]), initial=0.0))
    bad_b = float(np.max(np.abs(m["f_b"]), initial=0.0))
    if max(bad_s, bad_b) > problem.solv_tol * scale:
        raise SolvabilityError(f"solvability moments violated: max |S moments| = {bad_s:.3g}, "
                               f"f_b moments = {m['f_b']}")


def lift_boundary(problem: KnudsenProblem, mesh: EtaMesh, L: np.ndarray | None = None) -> np.ndarray:
    """g = S - v3 Upsilon'(eta) f_b - Upsilon(eta) L0 f_b on the mesh nodes."""
    check_solvability(problem, mesh.nodes)
    eta = mesh.nodes
    g = problem.source(eta)
    fb = problem.f_b
    if np.any(fb):
        L = conservative_matrix(problem.op0, problem.basis0) if L is None else L
        v3 = problem.op0.grid.nodes[:, 2]
        g = g - upsilon_prime(eta)[:, None] * (v3 * fb)[None, :] - upsilon(eta)[:, None] * (L @ fb)[None, :]
    return g


def enforce_compatibility(basis: ProjectionBasis, g: np.ndarray) -> tuple[np.ndarray, float]:
    """Remove the discrete components of g along the even invariants (quadrature residue)."""
    chi = basis.chi[list(INVARIANTS_EVEN)]
    w = basis.grid.quad_weights
    G = (chi * w) @ chi.T
    coef = np.linalg.solve(G, (chi * w) @ g.T).T
    return g - coef @ chi, float(np.max(np.abs(coef), initial=0.0))


# ----------------------------------------------------------------------------- box operator

def box_rhs(g: np.ndarray) -> np.ndarray:
    return 0.5 * (g[1:] + g[:-1])


def apply_box(F, mesh: EtaMesh, v3, A, refl, theta):
    """Residual rows of the slab scheme: (box rows (M, N), boundary rows at 0 and d)."""
    dF = (F[1:] - F[:-1]) / mesh.widths[:, None]
    avg = 0.5 * (F[1:] + F[:-1])
    box = v3 * dF + avg @ A.T
    pos = v3 > 0
    b0 = F[0, pos] - theta * F[0, refl[pos]]
    neg = ~pos
    bd = F[-1, neg] - theta * F[-1, refl[neg]]
    return box, b0, bd


# ----------------------------------------------------------------------------- direct (modal)

@dataclass
class ModalPencil:
    """Generalised eigenvectors of A phi = lambda D phi, normalised to phi^T D phi = +-1."""

    delta: float
    lam: np.ndarray
    Phi: np.ndarray
    J: np.ndarray

    @property
    def forward(self):
        return self.lam > 0


def modal_pencil(L: np.ndarray, v3: np.ndarray, delta: float) -> ModalPencil:
    if not delta > 0:
        raise ValueError("the modal decomposition needs delta > 0")
    A = L + delta * np.eye(L.shape[0])
    C = sla.cholesky(A, lower=True, check_finite=False)
    W, info = sla.lapack.dtrtri(C, lower=1)
    if info:
        raise np.linalg.LinAlgError("singular Cholesky factor")
    S = (W * v3) @ W.T
    sig, Psi = sla.eigh(0.5 * (S + S.T), check_finite=False)
    Phi = W.T @ Psi / np.sqrt(np.abs(sig))
    J = np.sign(sig)
    npos = int(np.sum(sig > 0))
    if npos != int(np.sum(v3 > 0)):
        raise np.linalg.LinAlgError("inertia of the pencil does not match the sign pattern of v3")
    return ModalPencil(float(delta), 1.0 / sig, np.ascontiguousarray(Phi), J)


@dataclass
class ModalSolver:
    pencil: ModalPencil
    mesh: EtaMesh
    theta: float
    lu: tuple
    rho_f: np.ndarray       # (M, n_forward) one-cell amplification, forward modes
    rho_b: np.ndarray       # (M, n_backward) one-cell amplification, backward modes
    den_f: np.ndarray
    den_b: np.ndarray
    v3: np.ndarray
    refl: np.ndarray

    def _sweeps(self, s, c_f, c_b):
        fw = self.pencil.forward
        M = self.mesh.n_cells
        af = np.empty((M + 1, fw.sum()))
        ab = np.empty((M + 1, (~fw).sum()))
        af[0] = c_f
        sf = s[:, fw]
        sb = s[:, ~fw]
        for k in range(M):
            af[k + 1] = self.rho_f[k] * af[k] + sf[k] / self.den_f[k]
        ab[M] = c_b
        for k in range(M - 1, -1, -1):
            ab[k] = self.rho_b[k] * ab[k + 1] - sb[k] / self.den_b[k]
        return af, ab

    def solve(self, rhs_box, b0=None, bd=None):
        """F with box rows equal to rhs_box and boundary rows equal to (b0, bd)."""
        p = self.pencil
        fw = p.forward
        s = (rhs_box @ p.Phi) * p.J
        af, ab = self._sweeps(s, np.zeros(fw.sum()), np.zeros((~fw).sum()))
        Pf, Pb = p.Phi[:, fw], p.Phi[:, ~fw]
        f0 = Pb @ ab[0] + Pf @ af[0]
        fM = Pf @ af[-1] + Pb @ ab[-1]
        pos = self.v3 > 0
        neg = ~pos
        r0 = f0[pos] - self.theta * f0[self.refl[pos]]
        rd = fM[neg] - self.theta * fM[self.refl[neg]]
        if b0 is not None:
            r0 = r0 - b0
        if bd is not None:
            rd = rd - bd
        c = sla.lu_solve(self.lu, -np.concatenate([r0, rd]), check_finite=False)
        nf = fw.sum()
        af, ab = self._sweeps(s, c[:nf], c[nf:])
        return af @ Pf.T + ab @ Pb.T


def modal_solver(pencil: ModalPencil, mesh: EtaMesh, theta: float, v3, refl) -> ModalSolver:
    lam = pencil.lam
    fw = pencil.forward
    dl = mesh.widths[:, None]
    lf = lam[fw][None, :]
    lb = lam[~fw][None, :]
    den_f = 1.0 / dl + 0.5 * lf
    rho_f = (1.0 / dl - 0.5 * lf) / den_f
    den_b = 1.0 / dl - 0.5 * lb
    rho_b = (1.0 / dl + 0.5 * lb) / den_b
    Pgrow = np.prod(rho_f, axis=0)      # alpha_f(M) per unit alpha_f(0)
    Qgrow = np.prod(rho_b, axis=0)      # alpha_b(0) per unit alpha_b(M)
    Pf, Pb = pencil.Phi[:, fw], pencil.Phi[:, ~fw]
    pos = v3 > 0
    neg = ~pos

    def B(rows, X):
        return X[rows] - theta * X[refl[rows]]

    G = np.block([[B(pos, Pf), B(pos, Pb) * Qgrow], [B(neg, Pf) * Pgrow, B(neg, Pb)]])
    lu = sla.lu_factor(G, check_finite=False)
    return ModalSolver(pencil, mesh, float(theta), lu, rho_f, rho_b, den_f, den_b, v3, refl)


# ----------------------------------------------------------------------------- iteration

@nb.njit(cache=True)
def _cycle_sweep(R, widths, v3, a, refl, theta, cap, out, tails):
    """Invert v3 d_eta + a on the slab with damped reflection at both walls.

    For each pair (v, Rv) with v3 > 0: forward sweep of v, reflection at d, backward sweep
    of Rv, reflection at 0. The boundary value is the bounce series summed over at most
    cap[v] cycles; tails[v] bounds the neglected remainder relative to the first term.
    """
    M = widths.size
    N = v3.size
    for v in range(N):
        if v3[v] <= 0:
            continue
        w = refl[v]
        c = v3[v]
        av = a[v]
        # forward particular solution and amplification for v
        P = 1.0
        p = 0.0
        for k in range(M):
            den = c / widths[k] + 0.5 * av
            rho = (c / widths[k] - 0.5 * av) / den
            p = rho * p + R[k, v] / den
            P *= rho
        # backward particular solution for Rv (same speed and rate)
        Q = 1.0
        q = 0.0
        for k in range(M - 1, -1, -1):
            den = c / widths[k] + 0.5 * av
            rho = (c / widths[k] - 0.5 * av) / den
            q = rho * q + R[k, w] / den
            Q *= rho
        r = theta * theta * Q * P
        first = theta * theta * Q * p + theta * q
        s = 0.0
        term = 1.0
        nb_ = cap[v]
        for j in range(nb_):
            s += term
            term *= r
        ar = abs(r)
        tails[v] = ar ** nb_ / (1.0 - ar) if ar < 1.0 else np.inf
        x = first * s
        # fill the two characteristics
        out[0, v] = x
        for k in range(M):
            den = c / widths[k] + 0.5 * av
            rho = (c / widths[k] - 0.5 * av) / den
            out[k + 1, v] = rho * out[k, v] + R[k, v] / den
        out[M, w] = theta * out[M, v]
        for k in range(M - 1, -1, -1):
            den = c / widths[k] + 0.5 * av
            rho = (c / widths[k] - 0.5 * av) / den
            out[k, w] = rho * out[k + 1, w] + R[k, w] / den


def bounce_cap(grid: VelocityGrid, kappa: float, k0: float = 20.0) -> np.ndarray:
    v = grid.nodes
    return np.maximum(1, np.ceil(k0 * np.abs(v[:, 2]) * (1 + np.sum(v * v, 1)) ** (0.5 * abs(kappa)))).astype(np.int64)


def solve_iteration(L: np.ndarray, nu: np.ndarray, grid: VelocityGrid, mesh: EtaMesh, g: np.ndarray,
                    delta: float, theta: float, kappa: float, wl: np.ndarray, k0: float = 20.0,
                    tol: float = 1e-11, max_iter: int = 5000):
    """Fixed point f <- T_{nu+delta}^{-1}(g + K f) with the lagged K = nu - L~."""
    v3 = grid.nodes[:, 2]
    refl = np.asarray(grid.reflect_map)
    Kt = np.diag(nu) - L
    a = nu + delta
    cap = bounce_cap(grid, kappa, k0)
    rhs0 = box_rhs(g)
    F = np.zeros((mesh.nodes.size, grid.size))
    tails = np.zeros(grid.size)
    hist = []
    for it in range(max_iter):
        R = rhs0 + box_rhs(F) @ Kt.T
        Fn = np.empty_like(F)
        _cycle_sweep(np.ascontiguousarray(R), mesh.widths, v3, a, refl, theta, cap, Fn, tails)
        upd = float(np.max(np.abs(wl * (Fn - F))))
        F = Fn
        hist.append(upd)
        scale = max(float(np.max(np.abs(wl * F))), 1e-300)
        if upd <= tol * scale:
            break
    else:
        raise ConvergenceError(f"source iteration did not converge in {max_iter} sweeps "
                               f"(last update {hist[-1]:.3g})")
    return F, {"iterations": len(hist), "history": hist,
               "bounce_tail_bound": float(np.max(tails[v3 > 0]))}


# ----------------------------------------------------------------------------- solver context

@dataclass
class KnudsenContext:
    """Everything built once per boundary operator: L~, invariants, pencils, L0^{-1}."""

    problem: KnudsenProblem
    L: np.ndarray
    pinv: PseudoInverse
    v3: np.ndarray
    refl: np.ndarray
    wl: np.ndarray
    pencils: dict = field(default_factory=dict)

    @property
    def grid(self):
        return self.problem.op0.grid

    def pencil(self, delta):
        key = float(delta)
        if key not in self.pencils:
            self.pencils[key] = modal_pencil(self.L, self.v3, key)
        return self.pencils[key]


def make_context(problem: KnudsenProblem) -> KnudsenContext:
    op = problem.op0
    grid = op.grid
    pinv = factor_pseudo_inverse(op, problem.basis0)
    wl = weight_w(problem.ws, op.state, grid.nodes)
    return KnudsenContext(problem, pinv.L, pinv, grid.nodes[:, 2].copy(),
                          np.asarray(grid.reflect_map), wl)


def solve_truncated(ctx: KnudsenContext, g: np.ndarray, delta: float, mesh: EtaMesh, n: float,
                    backend: str = "direct", info: dict | None = None, **kw) -> np.ndarray:
    """Penalised slab problem with boundary damping 1 - 1/n (n = inf: exact reflection)."""
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    if not n > 1:
        raise ValueError("n must exceed 1")
    theta = 1.0 - 1.0 / n
    if backend == "direct":
        ms = modal_solver(ctx.pencil(delta), mesh, theta, ctx.v3, ctx.refl)
        return ms.solve(box_rhs(g))
    if backend == "iteration":
        F, rep = solve_iteration(ctx.L, ctx.problem.op0.nu, ctx.grid, mesh, g, delta, theta,
                                 ctx.problem.op0.model.kappa, ctx.wl, **kw)
        if info is not None:
            info.update(rep)
        return F
    raise ValueError(f"unknown backend {backend!r}")


def weighted_sup(wl, F) -> float:
    return float(np.max(np.abs(wl * F), initial=0.0))


def limit_boundary_damping(ctx: KnudsenContext, g, delta, mesh, n_list=None, tol=None):
    """n -> inf: solve along the n schedule, record the increments, return the exact limit."""
    n_list = ctx.problem.n_list if n_list is None else n_list
    tol = ctx.problem.tol if tol is None else tol
    incs = []
    prev = None
    for n in list(n_list) + [np.inf]:
        F = solve_truncated(ctx, g, delta, mesh, n)
        if prev is not None:
            incs.append(weighted_sup(ctx.wl, F - prev))
        prev = F
    return F, {"n": list(n_list) + ["inf"], "increments": incs}


def solve_limit(ctx: KnudsenContext, g, mesh: EtaMesh, delta_p: float, tol: float = 1e-13,
                maxiter: int = 400):
    """delta = 0, exact reflection. The problem is singular with the even invariants as
    kernel; GMRES (right preconditioned by the modal solver at delta_p) finds a solution and
    the kernel part is fixed by int_0^d (a, b1, b2, c) d eta = 0."""
    ms = modal_solver(ctx.pencil(delta_p), mesh, 1.0, ctx.v3, ctx.refl)
    shape = (mesh.nodes.size, ctx.grid.size)
    npos = int(np.sum(ctx.v3 > 0))
    M = mesh.n_cells
    N = ctx.grid.size

    def unpack(y):
        box = y[:M * N].reshape(M, N)
        return box, y[M * N:M * N + npos], y[M * N + npos:]

    def T(F):
        box, b0, bd = apply_box(F.reshape(shape), mesh, ctx.v3, ctx.L, ctx.refl, 1.0)
        return np.concatenate([box.ravel(), b0, bd])

    def Pinv(y):
        box, b0, bd = unpack(y)
        return ms.solve(box, b0, bd).ravel()

    rhs = np.concatenate([box_rhs(g).ravel(), np.zeros(N)])
    size = rhs.size
    op = LinearOperator((size, size), matvec=lambda y: T(Pinv(y)), dtype=float)
    hist = []
    y, info = gmres(op, rhs, rtol=tol, atol=0.0, restart=80, maxiter=maxiter,
                    callback=lambda r: hist.append(float(r)), callback_type="pr_norm")
    F = Pinv(y).reshape(shape)
    res = T(F.ravel()) - rhs
    rel = float(np.linalg.norm(res) / max(np.linalg.norm(rhs), 1e-300))
    if info != 0 and rel > 1e3 * tol:
        raise ConvergenceError(f"delta -> 0 solve stalled: relative residual {rel:.3g}")
    F = remove_kernel(ctx.problem.basis0, mesh, F)
    return F, {"gmres_iterations": len(hist), "relative_residual": rel}


def remove_kernel(basis: ProjectionBasis, mesh: EtaMesh, F: np.ndarray) -> np.ndarray:
    chi = basis.chi[list(INVARIANTS_EVEN)]
    w = basis.grid.quad_weights
    tw = mesh.trapz_weights()
    means = tw @ (F @ (chi * w).T)                  # int_0^d <chi_i, F> d eta
    G = mesh.d * (chi * w) @ chi.T
    c = np.linalg.solve(G, means)
    return F - (c @ chi)[None, :]


# ----------------------------------------------------------------------------- constraint shift

def shift_functions(state, grid):
    """(1, v1-u1, v2-u2, |v-u|^2 - 3T) sqrt(mu0) as rows."""
    from .grid import sqrt_maxwellian
    V = grid.nodes - state.u_arr
    sm = sqrt_maxwellian(state, grid.nodes)
    return np.vstack([sm, V[:, 0] * sm, V[:, 1] * sm, (np.sum(V * V, 1) - 3 * state.T) * sm])


@dataclass
class ShiftData:
    tests: np.ndarray     # (4, N): v3 sqrt(mu0), L^{-1}A31, L^{-1}A32, L^{-1}B3
    matrix: np.ndarray    # normalised 4x4 system matrix
    scale: np.ndarray     # row normalisation
    mu_T: float
    kappa_T: float


def shift_data(ctx: KnudsenContext) -> ShiftData:
    op = ctx.problem.op0
    grid = op.grid
    st = op.state
    bf = burnett_functions(st, grid)
    from .grid import sqrt_maxwellian
    sm = sqrt_maxwellian(st, grid.nodes)
    inv = ctx.pinv.solve(np.vstack([bf.a(2, 0), bf.a(2, 1), bf.B[2]]))
    tests = np.vstack([(grid.nodes[:, 2] - st.u[2]) * sm, inv])
    tc = transport_coefficients(op, ctx.problem.basis0, ctx.pinv)
    E = shift_functions(st, grid)
    raw = flux_matrix(grid, ctx.v3, tests, E)          # raw[i, j] = flux_i of shift function j
    # rows scaled to the displayed form: (1, 0, 0, 2T; 0, mu, 0, 0; 0, 0, mu, 0; 0, 0, 0, kappa)
    scale = np.array([1.0 / (st.rho * st.T), 1.0, 1.0, 1.0 / (3.0 * np.sqrt(st.T))])
    return ShiftData(tests, raw * scale[:, None], scale, tc.mu_T, tc.kappa_T)


def flux_matrix(grid, v3, tests, fields):
    return (tests * v3 * grid.quad_weights) @ np.atleast_2d(fields).T


def constraint_shift(ctx: KnudsenContext, F: np.ndarray, sd: ShiftData | None = None):
    """Add phi . (shift functions) so that the four boundary fluxes vanish at eta = d."""
    sd = shift_data(ctx) if sd is None else sd
    grid = ctx.grid
    fl = flux_matrix(grid, ctx.v3, sd.tests, F[-1])[:, 0] * sd.scale
    cond = np.linalg.cond(sd.matrix)
    if not np.isfinite(cond) or cond > 1e12:
        raise np.linalg.LinAlgError(f"constraint-shift matrix is ill conditioned ({cond:.3g})")
    phi = np.linalg.solve(sd.matrix, -fl)
    E = shift_functions(ctx.problem.op0.state, grid)
    return F + (phi @ E)[None, :], phi


def far_fluxes(ctx: KnudsenContext, F: np.ndarray, sd: ShiftData) -> np.ndarray:
    return flux_matrix(ctx.grid, ctx.v3, sd.tests, F[-1])[:, 0]


def structure_fluxes(ctx: KnudsenContext, F: np.ndarray) -> dict:
    """b3(eta) and the three orthogonality fluxes at every node."""
    grid = ctx.grid
    st = ctx.problem.op0.state
    from .grid import sqrt_maxwellian
    sm = sqrt_maxwellian(st, grid.nodes)
    V = grid.nodes - st.u_arr
    w = grid.quad_weights * ctx.v3 * sm
    tests = np.vstack([np.ones(grid.size), V[:, 0], V[:, 1], np.sum(V * V, 1) - 5 * st.T])
    fl = F @ (tests * w).T
    return {"b3": fl[:, 0], "flux": fl[:, 1:]}


# ----------------------------------------------------------------------------- half space

@dataclass
class KnudsenSolution:
    mesh: EtaMesh
    f: np.ndarray                # full solution f_bar + Upsilon f_b on the mesh
    phi: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    trace0: np.ndarray
    history: dict
    wl: np.ndarray = field(repr=False)
    ws: WeightSystem = field(default_factory=WeightSystem, repr=False)
    state0: object = None
    nodes: np.ndarray = field(default=None, repr=False)


def macro_profiles(basis: ProjectionBasis, F: np.ndarray, state):
    """Coefficients (a, b, c) of P0 F = [a + b.(v-u) + c(|v-u|^2-3T)] sqrt(mu0)."""
    from .grid import sqrt_maxwellian
    grid = basis.grid
    sm = sqrt_maxwellian(state, grid.nodes)
    V = grid.nodes - state.u_arr
    E = np.vstack([sm, V[:, 0] * sm, V[:, 1] * sm, V[:, 2] * sm, (np.sum(V * V, 1) - 3 * state.T) * sm])
    w = grid.quad_weights
    G = (E * w) @ E.T
    co = np.linalg.solve(G, (E * w) @ F.T).T
    return co[:, 0], co[:, 1:4], co[:, 4]


def solve_slab(ctx: KnudsenContext, d: float, sd: ShiftData | None = None, record_delta=True):
    """One d stage: delta schedule (n -> inf each), exact delta = 0 limit, constraint shift."""
    p = ctx.problem
    mesh = make_eta_mesh(d, per_unit=p.per_unit)
    g = lift_boundary(p, mesh, ctx.L)
    g, removed = enforce_compatibility(p.basis0, g)
    sd = shift_data(ctx) if sd is None else sd
    hist = {"d": d, "compatibility_removed": removed, "delta": [], "delta_increments": [],
            "n_increments": []}
    prev = None
    if record_delta:
        for delta in p.deltas:
            Fd, rep = limit_boundary_damping(ctx, g, delta, mesh)
            Fd = constraint_shift(ctx, remove_kernel(p.basis0, mesh, Fd), sd)[0]
            hist["delta"].append(delta)
            hist["n_increments"].append(rep["increments"])
            if prev is not None:
                hist["delta_increments"].append(weighted_sup(ctx.wl, Fd - prev))
            prev = Fd
    F0, rep = solve_limit(ctx, g, mesh, min(p.deltas))
    hist.update(rep)
    Fbar, phi = constraint_shift(ctx, F0, sd)
    if prev is not None:
        hist["last_delta_to_limit"] = weighted_sup(ctx.wl, Fbar - prev)
    return mesh, Fbar, phi, hist


def solve_halfspace(problem: KnudsenProblem, ctx: KnudsenContext | None = None,
                    record_delta: bool = True) -> KnudsenSolution:
    ctx = make_context(problem) if ctx is None else ctx
    sd = shift_data(ctx)
    stages = []
    prev = None
    d_diffs = []
    for d in problem.ds:
        mesh, Fbar, phi, hist = solve_slab(ctx, d, sd, record_delta)
        if prev is not None:
            pm, pF = prev
            idx = np.searchsorted(mesh.nodes, pm.nodes)
            if not np.allclose(mesh.nodes[np.minimum(idx, mesh.nodes.size - 1)], pm.nodes):
                raise ValueError("slab meshes are not nested")
            d_diffs.append(weighted_sup(ctx.wl, Fbar[idx] - pF))
        prev = (mesh, Fbar)
        fs = Fbar + upsilon(mesh.nodes)[:, None] * problem.f_b[None, :]
        prof = np.max(np.abs(ctx.wl * fs), axis=1)
        hist["decay_sup"] = {k: float(np.max((1 + mesh.nodes) ** k * prof)) for k in range(5)}
        stages.append(hist)
        log.info("d=%g done: gmres %s, phi=%s", d, hist.get("gmres_iterations"), phi)
    mesh, Fbar = prev
    f_full = Fbar + upsilon(mesh.nodes)[:, None] * problem.f_b[None, :]
    a, b, c = macro_profiles(problem.basis0, Fbar, problem.op0.state)
    hist = {"stages": stages, "d_differences": d_diffs, "ds": list(problem.ds)}
    return KnudsenSolution(mesh, f_full, phi, a, b, c, f_full[0].copy(), hist, ctx.wl,
                          problem.ws, problem.op0.state, problem.op0.grid.nodes)


def decay_report(sol: KnudsenSolution, ks=(0, 1, 2, 3, 4), l: float | None = None,
                 fit_from: float = 5.0) -> dict:
    """Weighted sup and L2 tail norms of (1+eta)^k w_l f, and the fitted algebraic decay rate."""
    mesh = sol.mesh
    eta = mesh.nodes
    wl = sol.wl if l is None else weight_w(sol.ws, sol.state0, sol.nodes, l)
    prof = np.max(np.abs(wl * sol.f), axis=1)
    l2 = np.sqrt(np.sum((wl * sol.f) ** 2, axis=1))
    tw = mesh.trapz_weights()
    out = {"k": list(ks),
           "sup": [float(np.max((1 + eta) ** k * prof)) for k in ks],
           "l2": [float(np.sqrt(np.sum(tw * ((1 + eta) ** k * l2) ** 2))) for k in ks]}
    sel = (eta >= fit_from) & (prof > 0)
    if sel.sum() >= 3:
        slope = np.polyfit(np.log1p(eta[sel]), np.log(prof[sel]), 1)[0]
        out["fitted_exponent"] = float(-slope)
    else:
        out["fitted_exponent"] = float("inf") if not np.any(prof) else float("nan")
    return out




def admissible_boundary_datum(basis: ProjectionBasis, g: np.ndarray) -> np.ndarray:
    """Restrict g to v3 < 0 and remove the four v3 moments against the even invariants."""
    grid = basis.grid
    v3 = grid.nodes[:, 2]
    inc = (v3 < 0).astype(float)
    chi = basis.chi[list(INVARIANTS_EVEN)]
    E = chi * inc
    W = chi * v3 * grid.quad_weights
    c = np.linalg.solve(W @ E.T, W @ (inc * g))
    return inc * g - c @ E


@dataclass
class BacktimeCycle:
    """Broken characteristic traced backwards from (eta, v) in the slab (0, d)."""

    t: np.ndarray
    eta: np.ndarray
    v: np.ndarray
    cap: int


def backtime_cycle(eta0: float, v0, d: float, kappa: float, k0: float = 20.0,
                   t_total: float | None = None) -> BacktimeCycle:
    """Bounce times t_k, wall positions and velocities, at most the velocity dependent cap."""
    v0 = np.asarray(v0, dtype=float)
    if v0[2] == 0:
        raise ValueError("grazing velocity has no back-time cycle")
    cap = int(max(1, np.ceil(k0 * abs(v0[2]) * (1 + v0 @ v0) ** (0.5 * abs(kappa)))))
    c = abs(v0[2])
    ts, es, vs = [0.0], [float(eta0)], [v0.copy()]
    # first wall hit backwards in time: v3 > 0 came from 0, v3 < 0 came from d
    t = (eta0 if v0[2] > 0 else d - eta0) / c
    v = v0.copy()
    wall = 0.0 if v0[2] > 0 else d
    for _ in range(cap):
        if t_total is not None and t > t_total:
            break
        ts.append(t)
        es.append(wall)
        v = v * np.array([1.0, 1.0, -1.0])
        vs.append(v.copy())
        t += d / c
        wall = d - wall
    return BacktimeCycle(np.array(ts), np.array(es), np.array(vs), cap)


def energy_balance(ctx: KnudsenContext, F, g, mesh: EtaMesh, delta: float, n: float) -> dict:
    """Terms of the discrete energy identity for the penalised damped problem.

    delta ||f||^2 + boundary flux + <L f, f> = <g, f>, all integrals with the trapezoid
    average matching the box scheme; the boundary flux is non-negative for theta <= 1.
    """
    w = ctx.grid.quad_weights
    avg = box_rhs(F)
    dw = mesh.widths
    pen = delta * float(np.sum(dw * np.sum(avg * avg * w, 1)))
    coer = float(np.sum(dw * np.sum((avg @ ctx.L) * avg * w, 1)))
    src = float(np.sum(dw * np.sum(box_rhs(g) * avg * w, 1)))
    v3 = ctx.v3
    flux = 0.5 * float(np.sum(w * v3 * (F[-1] ** 2 - F[0] ** 2)))
    return {"penalty": pen, "boundary_flux": flux, "coercive": coer, "source": src,
            "defect": pen + flux + coer - src}
