"""Velocity lattice, fluid states, Maxwellians and velocity weights."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class VelocityGrid:
    """Midpoint lattice on the box [-v_max, v_max]^3.

    Nodes are ordered with the last axis (v3) fastest, so node (ix, iy, iz)
    has flat index (ix * n + iy) * n + iz.
    """

    v_max: float
    n_axis: int
    axis: np.ndarray = field(repr=False)
    nodes: np.ndarray = field(repr=False)
    quad_weights: np.ndarray = field(repr=False)
    reflect_map: np.ndarray = field(repr=False)

    @property
    def h(self) -> float:
        return 2.0 * self.v_max / self.n_axis

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def shape3(self) -> tuple[int, int, int]:
        return (self.n_axis,) * 3

    def integrate(self, f: np.ndarray) -> np.ndarray:
        """Quadrature over velocity along the last axis of ``f``."""
        return np.asarray(f) @ self.quad_weights

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        return float(np.sum(self.quad_weights * f * g))

    def norm(self, f: np.ndarray) -> float:
        return float(np.sqrt(self.inner(f, f)))

    def reflect(self, f: np.ndarray) -> np.ndarray:
        """Return f(R v) with R v = (v1, v2, -v3), acting on the last axis."""
        return np.asarray(f)[..., self.reflect_map]

    def to_csv(self, path: str | Path) -> None:
        idx = np.arange(self.size)
        data = np.column_stack([idx, self.nodes, self.quad_weights])
        np.savetxt(path, data, delimiter=",", header="index,v1,v2,v3,weight",
                   comments="", fmt=["%d", "%.17g", "%.17g", "%.17g", "%.17g"])


def build_grid(v_max: float, n_axis: int) -> VelocityGrid:
    if v_max <= 0:
        raise ValueError(f"v_max must be positive, got {v_max}")
    if int(n_axis) != n_axis or n_axis < 2:
        raise ValueError(f"n_axis must be an integer >= 2, got {n_axis}")
    n_axis = int(n_axis)
    if n_axis % 2:
        # an odd midpoint lattice would put a node on the grazing plane v3 = 0
        raise ValueError(f"n_axis must be even, got {n_axis}")
    h = 2.0 * v_max / n_axis
    axis = -v_max + h * (np.arange(n_axis) + 0.5)
    V = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    w = np.full(V.shape[0], h**3)
    ix, iy, iz = np.unravel_index(np.arange(V.shape[0]), (n_axis,) * 3)
    refl = np.ravel_multi_index((ix, iy, n_axis - 1 - iz), (n_axis,) * 3)
    for a in (axis, V, w, refl):
        a.setflags(write=False)
    return VelocityGrid(float(v_max), n_axis, axis, V, w, refl)


@dataclass(frozen=True)
class FluidState:
    rho: float = 1.0
    u: tuple[float, float, float] = (0.0, 0.0, 0.0)
    T: float = 1.0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"density must be positive, got {self.rho}")
        if not self.T > 0:
            raise ValueError(f"temperature must be positive, got {self.T}")
        object.__setattr__(self, "u", tuple(float(x) for x in np.broadcast_to(self.u, 3)))

    @property
    def u_arr(self) -> np.ndarray:
        return np.asarray(self.u, dtype=float)


def maxwellian(state: FluidState, v: np.ndarray) -> np.ndarray:
    """rho (2 pi T)^{-3/2} exp(-|v-u|^2 / 2T), vectorised over leading axes of v."""
    c = np.asarray(v, dtype=float) - state.u_arr
    return state.rho * (2 * np.pi * state.T) ** -1.5 * np.exp(-np.sum(c * c, axis=-1) / (2 * state.T))


def sqrt_maxwellian(state: FluidState, v: np.ndarray) -> np.ndarray:
    return np.sqrt(maxwellian(state, v))


def moments(grid: VelocityGrid, F: np.ndarray) -> tuple[float, np.ndarray, float]:
    """(mass, momentum, energy density sum |v|^2 F) of a grid function."""
    V = grid.nodes
    m = grid.integrate(F)
    p = grid.integrate(F * V.T)
    e = grid.integrate(F * np.sum(V * V, axis=1))
    return float(m), np.asarray(p), float(e)


@dataclass(frozen=True)
class WeightSystem:
    T_M: float = 0.75
    alpha: float = 0.75
    frak_a: float = 0.0
    l: float = 3.0
    frak_k: float = 16.0

    def __post_init__(self):
        if not 0.0 <= self.frak_a < 0.5:
            raise ValueError(f"frak_a must lie in [0, 1/2), got {self.frak_a}")
        if self.T_M <= 0:
            raise ValueError("T_M must be positive")


def weight_w(ws: WeightSystem, state0: FluidState, v: np.ndarray, l: float | None = None) -> np.ndarray:
    """w_l(v) = (1+|v|^2)^{l/2} mu_0^{-a}."""
    if not 0.0 <= ws.frak_a < 0.5:
        raise ValueError("frak_a must lie in [0, 1/2)")
    l = ws.l if l is None else l
    v = np.asarray(v, dtype=float)
    out = (1.0 + np.sum(v * v, axis=-1)) ** (0.5 * l)
    if ws.frak_a:
        out = out * maxwellian(state0, v) ** (-ws.frak_a)
    return out


def weight_varpi(ws: WeightSystem, v: np.ndarray, k: float | None = None) -> np.ndarray:
    k = ws.frak_k if k is None else k
    v = np.asarray(v, dtype=float)
    return (1.0 + np.sum(v * v, axis=-1)) ** (0.5 * k)


@dataclass
class EnvelopeReport:
    feasible: bool
    alpha: float | None = None
    C: float | None = None
    message: str = ""


def check_envelope(ws: WeightSystem, states: list[FluidState], grid: VelocityGrid,
                   n_alpha: int = 200) -> EnvelopeReport:
    """Find alpha in (1/2, 1) and the smallest C with mu_M/C <= mu <= C mu_M^alpha on the grid.

    The admissible window for alpha is (1/2, min(1, T_M / max T)); outside it the upper
    bound cannot hold uniformly in v. The alpha minimising C over the window is returned.
    """
    if not states:
        raise ValueError("states must be non-empty")
    Ts = np.array([s.T for s in states])
    if not (ws.T_M < Ts.min() and Ts.max() < 2 * ws.T_M):
        return EnvelopeReport(False, message=(
            f"temperature window violated: need T_M={ws.T_M} < min T={Ts.min()} "
            f"and max T={Ts.max()} < 2 T_M={2 * ws.T_M}"))
    muM = maxwellian(FluidState(1.0, (0, 0, 0), ws.T_M), grid.nodes)
    log_muM = np.log(muM)
    log_mu = np.array([np.log(maxwellian(s, grid.nodes)) for s in states])
    lower = np.max(log_muM - log_mu)           # log of min C for the lower bound
    a_hi = min(1.0, ws.T_M / Ts.max())
    alphas = np.linspace(0.5, a_hi, n_alpha + 2)[1:-1]
    upper = np.array([np.max(log_mu - a * log_muM) for a in alphas])
    logC = np.maximum(lower, upper)
    k = int(np.argmin(logC))
    return EnvelopeReport(True, float(alphas[k]), float(np.exp(logC[k])), "ok")
