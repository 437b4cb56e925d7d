"""Collision invariants, macro/micro projection, Burnett functions and L^{-1}.

The assembled L annihilates the sampled invariants only up to the lattice error (about
1e-4). Solvers that rely on exact conservation use the corrected operator
(I - Pi) L (I - Pi), Pi being the grid-orthogonal projector onto the sampled invariants;
its null space is exactly span{chi_i} and it is still symmetric.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .collision import CollisionOperator
from .grid import FluidState, VelocityGrid, sqrt_maxwellian


class IllConditioned(RuntimeError):
    pass


@dataclass
class ProjectionBasis:
    chi: np.ndarray          # (5, N) analytic orthonormal invariants sampled on the grid
    gram: np.ndarray         # (5, 5) grid Gram matrix
    grid: VelocityGrid = field(repr=False)
    state: FluidState = field(default_factory=FluidState)

    @property
    def X(self) -> np.ndarray:
        return self.chi.T

    def coefficients(self, h: np.ndarray) -> np.ndarray:
        """Gram-corrected coordinates of P h, acting on the last axis of h."""
        rhs = np.asarray(h) @ (self.chi * self.grid.quad_weights).T
        return np.linalg.solve(self.gram, rhs.T).T

    def projector(self) -> np.ndarray:
        """Dense matrix of P on nodal values."""
        return self.chi.T @ np.linalg.solve(self.gram, self.chi * self.grid.quad_weights)


def make_basis(state: FluidState, grid: VelocityGrid) -> ProjectionBasis:
    V = grid.nodes
    sm = sqrt_maxwellian(state, V)
    c = (V - state.u_arr) / np.sqrt(state.T)
    r = np.sqrt(state.rho)
    chi = np.vstack([sm / r, c[:, 0] * sm / r, c[:, 1] * sm / r, c[:, 2] * sm / r,
                     (np.sum(c * c, axis=1) - 3.0) / np.sqrt(6.0) * sm / r])
    gram = (chi * grid.quad_weights) @ chi.T
    return ProjectionBasis(chi, gram, grid, state)


def project(basis: ProjectionBasis, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = np.asarray(h, dtype=float)
    Ph = basis.coefficients(h) @ basis.chi
    return Ph, h - Ph


def conservative_matrix(op: CollisionOperator, basis: ProjectionBasis) -> np.ndarray:
    """(I - Pi) L (I - Pi) with Pi the grid-orthogonal projector on the invariants."""
    w = basis.grid.quad_weights
    if not np.all(w == w[0]):
        raise ValueError("uniform quadrature weights expected")
    # uniform weights make Pi the Euclidean orthogonal projector Q Q^T: apply as rank-5 updates
    Q, _ = np.linalg.qr(basis.chi.T)
    L = op.matrix()
    LQ = L @ Q
    QLQ = Q.T @ LQ
    A = L - Q @ LQ.T - LQ @ Q.T + Q @ QLQ @ Q.T
    return 0.5 * (A + A.T)


@dataclass
class PseudoInverse:
    """Factorised augmented system [[L, X], [X^T, 0]] reused across right-hand sides."""

    lu: tuple
    basis: ProjectionBasis
    L: np.ndarray
    rcond: float

    def solve(self, g: np.ndarray, report: dict | None = None) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        Pg, gp = project(self.basis, g)
        if report is not None:
            report["removed_macro_part"] = float(np.max(np.abs(Pg), initial=0.0))
        N = self.L.shape[0]
        rhs = np.concatenate([gp, np.zeros(5)]) if g.ndim == 1 else \
            np.vstack([gp.T, np.zeros((5, gp.shape[0]))])
        sol = sla.lu_solve(self.lu, rhs)
        f = sol[:N] if g.ndim == 1 else sol[:N].T
        if report is not None:
            res = (f @ self.L.T if f.ndim > 1 else self.L @ f) - gp
            report["residual"] = float(np.max(np.linalg.norm(np.atleast_2d(res), axis=-1)))
        return f


def factor_pseudo_inverse(op: CollisionOperator, basis: ProjectionBasis,
                          corrected: bool = True, max_cond: float = 1e12) -> PseudoInverse:
    L = conservative_matrix(op, basis) if corrected else op.matrix()
    N = L.shape[0]
    X = basis.X
    A = np.zeros((N + 5, N + 5))
    A[:N, :N] = L
    A[:N, N:] = X
    A[N:, :N] = X.T
    anorm = np.linalg.norm(A, 1)
    lu = sla.lu_factor(A, check_finite=False)
    rcond, info = sla.lapack.dgecon(lu[0], anorm, norm="1")
    if rcond < 1.0 / max_cond:
        raise IllConditioned(f"augmented system condition estimate {1 / rcond:.3g} exceeds {max_cond:.3g}")
    return PseudoInverse(lu, basis, L, float(rcond))


def pseudo_inverse(op: CollisionOperator, basis: ProjectionBasis, g: np.ndarray,
                   pinv: PseudoInverse | None = None) -> np.ndarray:
    """f with L f = (I - P) g and P f = 0."""
    pinv = factor_pseudo_inverse(op, basis) if pinv is None else pinv
    return pinv.solve(g)


@dataclass
class BurnettFunctions:
    A: dict           # (i, j) with i <= j, zero based -> grid function
    B: list           # three grid functions

    def a(self, i, j):
        return self.A[(min(i, j), max(i, j))]


def burnett_functions(state: FluidState, grid: VelocityGrid) -> BurnettFunctions:
    V = grid.nodes
    T = state.T
    sm = sqrt_maxwellian(state, V)
    d = V - state.u_arr
    s2 = np.sum(d * d, axis=1)
    A = {}
    for i in range(3):
        for j in range(i, 3):
            A[(i, j)] = (d[:, i] * d[:, j] / T - (i == j) * s2 / (3 * T)) * sm
    B = [d[:, i] / (2 * np.sqrt(T)) * (s2 / T - 5.0) * sm for i in range(3)]
    return BurnettFunctions(A, B)


@dataclass
class TransportCoefficients:
    mu_T: float
    kappa_T: float
    identity_43_residual: float = float("nan")
    isotropy_A: float = float("nan")
    isotropy_B: float = float("nan")
    forms: dict = field(default_factory=dict)


def transport_coefficients(op0: CollisionOperator, basis0: ProjectionBasis,
                           pinv: PseudoInverse | None = None) -> TransportCoefficients:
    """Viscosity and heat conductivity from the L^{-1} quadratic forms of the Burnett functions."""
    pinv = factor_pseudo_inverse(op0, basis0) if pinv is None else pinv
    grid = op0.grid
    T0 = op0.state.T
    bf = burnett_functions(op0.state, grid)
    keys = sorted(bf.A)
    rhs = np.vstack([bf.A[k] for k in keys] + bf.B)
    sol = pinv.solve(rhs)
    q = np.einsum("kn,kn->k", rhs * grid.quad_weights, sol)
    forms = {f"A{i + 1}{j + 1}": float(q[n]) for n, (i, j) in enumerate(keys)}
    forms.update({f"B{i + 1}": float(q[len(keys) + i]) for i in range(3)})
    mu = T0 * forms["A13"]
    kap = 2.0 / 3.0 * T0 * forms["B3"]
    if not (mu > 0 and kap > 0):
        raise ArithmeticError(f"non-positive transport coefficient (mu={mu}, kappa={kap}): "
                              "coercivity of the assembled operator is broken")
    off = np.array([forms["A12"], forms["A13"], forms["A23"]])
    bs = np.array([forms["B1"], forms["B2"], forms["B3"]])
    return TransportCoefficients(
        mu, kap,
        identity_43_residual=abs(T0 * forms["A33"] - 4.0 / 3.0 * mu) / mu,
        isotropy_A=float((off.max() - off.min()) / off.mean()),
        isotropy_B=float((bs.max() - bs.min()) / bs.mean()),
        forms=forms)


def decay_diagnostic(state: FluidState, grid: VelocityGrid, f: np.ndarray, q: float = 0.5) -> float:
    """sup over the grid of mu^{-q/2} |f|."""
    from .grid import maxwellian
    return float(np.max(maxwellian(state, grid.nodes) ** (-q / 2) * np.abs(f)))
