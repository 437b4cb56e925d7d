"""1-D compressible Euler flow in the wall-normal direction with a slip wall at x3 = 0.

Conservative variables per cell: (rho, rho u1, rho u2, rho u3, E), E = rho (3T/2 + |u|^2/2),
p = rho T (monatomic gas, gamma = 5/3). MUSCL reconstruction of primitive variables with the
van Albada limiter, Rusanov fluxes, SSP-RK3 in time. Ghost cells mirror the state with u3
reversed at the wall; the far end is a second slip wall by default so that mass and energy
telescope exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

GAMMA = 5.0 / 3.0
NG = 2


class PositivityError(ValueError):
    pass


class LifespanExceeded(RuntimeError):
    def __init__(self, t, estimate, msg):
        super().__init__(msg)
        self.t = t
        self.estimate = estimate


@dataclass
class EulerField:
    x: np.ndarray            # cell centres on [0, X]
    U: np.ndarray            # (5, n) conservative cell averages
    t: float = 0.0
    X: float = 1.0
    delta_E: float = 0.0
    far: str = "wall"        # "wall" or "outflow"
    meta: dict = field(default_factory=dict)

    @property
    def dx(self) -> float:
        return self.X / self.x.size

    @property
    def rho(self):
        return self.U[0]

    @property
    def u(self):
        return self.U[1:4] / self.U[0]

    @property
    def T(self):
        rho = self.U[0]
        u = self.u
        return (self.U[4] / rho - 0.5 * np.sum(u * u, axis=0)) / 1.5

    def primitives(self):
        return self.rho.copy(), self.u.copy(), self.T.copy()

    def totals(self) -> np.ndarray:
        """Cell sums times dx of the five conserved densities."""
        return self.U.sum(axis=1) * self.dx


def conservative(rho, u, T):
    rho = np.asarray(rho, dtype=float)
    u = np.asarray(u, dtype=float).reshape(3, -1) * np.ones_like(rho)
    return np.vstack([rho, rho * u, rho * (1.5 * T + 0.5 * np.sum(u * u, axis=0))])


def init_euler(delta_E: float, phi0=None, Phi0=None, theta0=None, n: int = 200, X: float = 1.0,
               far: str = "wall") -> EulerField:
    """(rho, u, T)(0) = (1 + dE phi0, dE Phi0, 1 + dE theta0) sampled at cell centres.

    Profiles are callables of x3; Phi0 returns three rows. Phi0_3(0) must vanish.
    """
    x = (np.arange(n) + 0.5) * X / n
    z = np.zeros_like(x)
    phi = phi0(x) if phi0 is not None else z
    th = theta0(x) if theta0 is not None else z
    Phi = np.asarray(Phi0(x), dtype=float).reshape(3, -1) if Phi0 is not None else np.zeros((3, n))
    if Phi0 is not None and abs(float(np.asarray(Phi0(np.array([0.0])), dtype=float).reshape(3, -1)[2, 0])) > 1e-14:
        raise ValueError("initial normal velocity must vanish at the wall")
    rho = 1.0 + delta_E * phi
    T = 1.0 + delta_E * th
    if np.any(rho <= 0) or np.any(T <= 0):
        raise PositivityError(f"initial density or temperature not positive (min rho {rho.min():.3g}, "
                              f"min T {T.min():.3g})")
    U = conservative(rho, delta_E * Phi, T)
    return EulerField(x, U, 0.0, float(X), float(delta_E), far)


def _extrapolate(W, side):
    """Two ghost columns by quadratic extrapolation, ordered outward -> inward."""
    if side == "left":
        a, b, c = W[:, 0], W[:, 1], W[:, 2]
        g1 = 3 * a - 3 * b + c
        g2 = 3 * g1 - 3 * a + b
        return np.column_stack([g2, g1])
    a, b, c = W[:, -1], W[:, -2], W[:, -3]
    g1 = 3 * a - 3 * b + c
    g2 = 3 * g1 - 3 * a + b
    return np.column_stack([g1, g2])


def _ghosts(W, far, ghost="extrapolate"):
    """Primitive array (5, n) -> padded (5, n + 2 NG); rows rho, u1, u2, u3, T.

    u3 is mirrored with a sign flip at a wall. Only u3 and p have a parity at a slip wall, so
    the other rows are extrapolated by default; ghost="mirror" reflects them evenly instead.
    """
    def wall(side):
        if side == "left":
            g = W[:, NG - 1::-1].copy()
        else:
            g = W[:, :-NG - 1:-1].copy()
        u3 = -g[3]
        if ghost == "extrapolate":
            g = _extrapolate(W, side)
        elif ghost != "mirror":
            raise ValueError(f"unknown ghost treatment {ghost!r}")
        g[3] = u3
        return g

    left = wall("left")
    if far == "wall":
        right = wall("right")
    elif far == "outflow":
        right = np.repeat(W[:, -1:], NG, axis=1)
    else:
        raise ValueError(f"unknown far boundary {far!r}")
    return np.hstack([left, W, right])


def _van_albada(a, b, eps=1e-30):
    """Smooth van Albada slope; eps ~ dx^3 keeps second order at smooth extrema."""
    return ((b * b + eps) * a + (a * a + eps) * b) / (a * a + b * b + 2 * eps)


def _flux(W):
    rho, u1, u2, u3, T = W
    p = rho * T
    E = rho * (1.5 * T + 0.5 * (u1 * u1 + u2 * u2 + u3 * u3))
    return np.vstack([rho * u3, rho * u1 * u3, rho * u2 * u3, rho * u3 * u3 + p, (E + p) * u3])


def _prim_to_cons(W):
    rho, u1, u2, u3, T = W
    return conservative(rho, np.vstack([u1, u2, u3]), T)


def _cons_to_prim(U):
    rho = U[0]
    u = U[1:4] / rho
    T = (U[4] / rho - 0.5 * np.sum(u * u, axis=0)) / 1.5
    return np.vstack([rho, u, T])


def rhs(U, dx, far="wall"):
    W = _ghosts(_cons_to_prim(U), far)
    dW = np.diff(W, axis=1)
    s = _van_albada(dW[:, :-1], dW[:, 1:], dx ** 3)  # slopes at cells 1 .. n + 2NG - 2
    WL = W[:, 1:-1] + 0.5 * s                      # left state at faces
    WR = W[:, 1:-1] - 0.5 * s
    L = WL[:, NG - 2:NG - 2 + U.shape[1] + 1]
    R = WR[:, NG - 1:NG - 1 + U.shape[1] + 1]
    cL = np.abs(L[3]) + np.sqrt(GAMMA * L[4])
    cR = np.abs(R[3]) + np.sqrt(GAMMA * R[4])
    a = np.maximum(cL, cR)
    F = 0.5 * (_flux(L) + _flux(R)) - 0.5 * a * (_prim_to_cons(R) - _prim_to_cons(L))
    # mirrored states give exactly zero mass, tangential momentum and energy flux at a wall
    F[[0, 1, 2, 4], 0] = 0.0
    if far == "wall":
        F[[0, 1, 2, 4], -1] = 0.0
    return -(F[:, 1:] - F[:, :-1]) / dx


def max_speed(U) -> float:
    W = _cons_to_prim(U)
    return float(np.max(np.abs(W[3]) + np.sqrt(GAMMA * W[4])))


def step(fld: EulerField, dt: float) -> EulerField:
    """One SSP-RK3 step."""
    dx = fld.dx
    U0 = fld.U
    U1 = U0 + dt * rhs(U0, dx, fld.far)
    U2 = 0.75 * U0 + 0.25 * (U1 + dt * rhs(U1, dx, fld.far))
    U3 = U0 / 3.0 + 2.0 / 3.0 * (U2 + dt * rhs(U2, dx, fld.far))
    if np.any(U3[0] <= 0) or np.any(_cons_to_prim(U3)[4] <= 0):
        raise PositivityError(f"density or temperature lost positivity at t = {fld.t + dt:.6g}")
    return replace(fld, U=U3, t=fld.t + dt)


def gradient_monitor(fld: EulerField) -> float:
    return float(np.max(np.abs(np.diff(fld.U, axis=1))) / fld.dx)


def kink_indicator(fld: EulerField) -> float:
    """max |second difference| / max |first difference| over the rows of U.

    Of order dx / (feature width) while the solution is resolved and of order one once a
    discontinuity has formed. Rows that are flat to round-off are skipped.
    """
    d1 = np.abs(np.diff(fld.U, axis=1))
    d2 = np.abs(np.diff(fld.U, 2, axis=1))
    floor = 1e-9 * np.max(np.abs(fld.U))
    out = 0.0
    for a, b in zip(d1, d2):
        if a.max() > floor:
            out = max(out, float(b.max() / a.max()))
    return out


def solve_to(fld: EulerField, t_end: float, cfl: float = 0.4, blowup_factor: float = 50.0,
             callback=None, kink_threshold: float = 0.8) -> EulerField:
    """Advance to t_end with CFL-limited steps; halts at the end of the smooth life span.

    Two heuristics: gradients growing by blowup_factor, or the kink indicator exceeding
    kink_threshold (a captured shock). The estimate reported is the current time.
    """
    if t_end < fld.t:
        raise ValueError("t_end precedes the current time")
    g0 = max(gradient_monitor(fld), 1e-12)
    scale = max(fld.delta_E, 1e-12)
    while fld.t < t_end - 1e-14:
        dt = min(cfl * fld.dx / max_speed(fld.U), t_end - fld.t)
        fld = step(fld, dt)
        if callback is not None:
            callback(fld)
        g = gradient_monitor(fld)
        if g > blowup_factor * max(g0, scale):
            raise LifespanExceeded(fld.t, fld.t, f"gradient grew by {g / g0:.3g}: smooth life span "
                                   f"ends near t = {fld.t:.4g}")
        k = kink_indicator(fld)
        if k > kink_threshold:
            raise LifespanExceeded(fld.t, fld.t, f"kink indicator {k:.3g}: a discontinuity formed "
                                   f"near t = {fld.t:.4g}")
    return fld


def time_slices(fld: EulerField, t_mid: float, dt: float, cfl: float = 0.4):
    """Fields at t_mid - dt, t_mid, t_mid + dt for centred time differences."""
    a = solve_to(fld, t_mid - dt, cfl)
    b = solve_to(a, t_mid, cfl)
    c = solve_to(b, t_mid + dt, cfl)
    return a, b, c


def acoustic_solution(x, t, delta_E, phi0, Phi0, theta0, X=None):
    """Linearised Euler about (1, 0, 1) on the half line with a slip wall (method of images).

    p' and u3 travel along x -/+ c t with c = sqrt(gamma); rho' - p'/gamma, u1, u2 are frozen.
    """
    c = np.sqrt(GAMMA)
    x = np.asarray(x, dtype=float)
    z = lambda s: np.zeros_like(s)
    phi0 = phi0 or z
    theta0 = theta0 or z
    Phi = (lambda s: np.asarray(Phi0(s), dtype=float).reshape(3, -1)) if Phi0 else (lambda s: np.zeros((3, s.size)))

    def p_even(s):
        s = np.abs(s)
        return phi0(s) + theta0(s)

    def u_odd(s):
        return np.sign(s) * Phi(np.abs(s))[2]

    def w(s, sgn):
        return p_even(s) + sgn * c * u_odd(s)

    wp = w(x - c * t, 1.0)
    wm = w(x + c * t, -1.0)
    p = 0.5 * (wp + wm)
    u3 = (wp - wm) / (2 * c)
    rho = phi0(x) - p_even(x) / GAMMA + p / GAMMA
    T = p - rho
    P0 = Phi(x)
    return (1 + delta_E * rho, delta_E * np.vstack([P0[0], P0[1], u3]), 1 + delta_E * T)


def l2_error(fld: EulerField, exact) -> float:
    rho, u, T = exact
    W = _cons_to_prim(fld.U)
    err = (W[0] - rho) ** 2 + np.sum((W[1:4] - u) ** 2, axis=0) + (W[4] - T) ** 2
    return float(np.sqrt(np.sum(err) * fld.dx))


def to_csv(fields, path):
    """Time series of profiles: t, x3, rho, u1, u2, u3, T."""
    rows = []
    for f in fields:
        W = _cons_to_prim(f.U)
        rows.append(np.column_stack([np.full(f.x.size, f.t), f.x, W.T]))
    np.savetxt(path, np.vstack(rows), delimiter=",", header="t,x3,rho,u1,u2,u3,T", comments="",
               fmt="%.17g")
