"""Pointwise collision kernels for the cutoff model B = |v-u|^kappa beta0 |cos theta|.

All formulas are in standardised velocities c = (v - u0)/sqrt(T) around a unit Maxwellian
mu(c) = (2 pi)^{-3/2} exp(-|c|^2/2). The operator kernel of K = K2 - K1 is

    k1(v, u) = 2 pi beta0 r^kappa mu^{1/2}(v) mu^{1/2}(u),
    k2(v, u) = (4 beta0 / r) (2 pi)^{-3/2} exp(-[(v.e)^2 + (u.e)^2]/4) P(r, b),

with r = |u - v|, e = (u - v)/r, b = |v x e| and

    P(r, b) = 2 pi int_0^inf rho (r^2+rho^2)^{(kappa-1)/2} exp(-(rho-b)^2/2) i0e(rho b) drho.

The k2 form comes from the Carleman change of variables of the gain term; the extra factor
(r^2+rho^2)^{(kappa-1)/2} is |v-u_*|^kappa |cos theta| / |z| written in plane coordinates.
P is tabulated on a uniform (log r, b) mesh and read back with tensor cubic Lagrange
interpolation inside numba kernels.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np
from scipy.special import i0e

TWO_PI_M32 = (2 * np.pi) ** -1.5


def smoothstep(t):
    """C^2 quintic step: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (10 - 15 * t + 6 * t * t)


def chi(s, z):
    """Monotone cutoff: 0 on [0, z], 1 on [2z, inf)."""
    return smoothstep((np.asarray(s, dtype=float) - z) / z)


def chi_tilde(s, z):
    return 1.0 - chi(s, z)


@dataclass(frozen=True)
class PTable:
    """Samples of P (or log P when ``log`` is set) on x = log r, y = b."""

    kappa: float
    m: float | None
    x0: float
    dx: float
    y0: float
    dy: float
    values: np.ndarray
    log: bool


def _gl(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1), 0.5 * w


def _rho_panels(r, rho_max, m=None):
    """Breakpoints for the rho integral: geometric near 0 on the scale r, then unit panels."""
    pts = [0.0]
    s = r
    while s < 1.0:
        pts.append(s)
        s *= 2.0
    if m is not None:
        top = np.sqrt(max(4 * m * m - r * r, 0.0))
        lo = np.sqrt(max(m * m - r * r, 0.0))
        pts = [p for p in pts if p < top] + [lo, top]
        return np.unique(np.array([p for p in pts if p <= top]))
    pts += list(np.arange(1.0, rho_max + 1e-12, 0.75))
    return np.unique(np.array(pts))


def p_integral(r, b, kappa, m=None, rho_max=None, order=10):
    """P(r, b) for scalar r and vector b by composite Gauss-Legendre."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if rho_max is None:
        rho_max = float(b.max()) + 11.0
    br = _rho_panels(r, rho_max, m)
    if br.size < 2:
        return np.zeros_like(b)
    t, w = _gl(order)
    a0, a1 = br[:-1], br[1:]
    rho = (a0[:, None] + (a1 - a0)[:, None] * t[None, :]).ravel()
    wr = ((a1 - a0)[:, None] * w[None, :]).ravel()
    s2 = r * r + rho * rho
    f = rho * s2 ** (0.5 * (kappa - 1))
    if m is not None:
        f = f * chi_tilde(np.sqrt(s2), m)
    g = np.exp(-0.5 * (rho[None, :] - b[:, None]) ** 2) * i0e(rho[None, :] * b[:, None])
    return 2 * np.pi * (g * (f * wr)[None, :]).sum(axis=1)


def _cache_dir() -> Path | None:
    d = os.environ.get("KINHILBERT_CACHE", str(Path.home() / ".cache" / "kinhilbert"))
    if d in ("", "0", "off"):
        return None
    p = Path(d)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError:
        return None
    return p


def build_ptable(kappa: float, b_max: float, m: float | None = None,
                 r_min: float = 1e-9, r_max: float = 24.0, dx: float = 0.04,
                 dy: float = 0.04) -> PTable:
    """Tabulate P on [r_min, r_max] x [0, b_max]; with m set, the cutoff version on r <= 2m."""
    if m is not None:
        r_max = 2.0 * m
    b_max = float(np.ceil(b_max + 1.0))
    key = f"{kappa:.12g}|{m}|{b_max}|{r_min}|{r_max}|{dx}|{dy}|v2"
    cache = _cache_dir()
    fname = None
    if cache is not None:
        fname = cache / ("ptab_" + hashlib.sha1(key.encode()).hexdigest()[:16] + ".npy")
        if fname.exists():
            vals = np.load(fname)
            x0 = np.log(r_min) - 2 * dx
            return PTable(kappa, m, x0, dx, -2 * dy, dy, vals, m is None)
    x0 = np.log(r_min) - 2 * dx
    nx = int(np.ceil((np.log(r_max) - x0) / dx)) + 4
    ny = int(np.ceil(b_max / dy)) + 5
    xs = x0 + dx * np.arange(nx)
    ys = -2 * dy + dy * np.arange(ny)
    vals = np.empty((nx, ny))
    yb = np.abs(ys)  # P is even in b, mirror samples keep the stencil smooth at b = 0
    for i, x in enumerate(xs):
        vals[i] = p_integral(float(np.exp(x)), yb, kappa, m=m, rho_max=b_max + 11.0)
    if m is None:
        vals = np.log(vals)
    if fname is not None:
        np.save(fname, vals)
    return PTable(kappa, m, x0, dx, -2 * dy, dy, vals, m is None)


@nb.njit(cache=True, fastmath=False)
def _lag4(t):
    # cubic Lagrange weights on nodes -1, 0, 1, 2 at offset t in [0, 1)
    w0 = -t * (t - 1.0) * (t - 2.0) / 6.0
    w1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0
    w2 = -(t + 1.0) * t * (t - 2.0) / 2.0
    w3 = (t + 1.0) * t * (t - 1.0) / 6.0
    return w0, w1, w2, w3


@nb.njit(cache=True)
def table_eval(vals, x0, dx, y0, dy, x, y):
    nx, ny = vals.shape
    fx = (x - x0) / dx
    fy = (y - y0) / dy
    if fx < 1.0:
        fx = 1.0
    if fx > nx - 2.000001:
        fx = nx - 2.000001
    if fy > ny - 2.000001:
        fy = ny - 2.000001
    ix = int(fx)
    iy = int(fy)
    a0, a1, a2, a3 = _lag4(fx - ix)
    b0, b1, b2, b3 = _lag4(fy - iy)
    s = 0.0
    for p in range(4):
        ap = a0 if p == 0 else (a1 if p == 1 else (a2 if p == 2 else a3))
        row = ix - 1 + p
        s += ap * (b0 * vals[row, iy - 1] + b1 * vals[row, iy] + b2 * vals[row, iy + 1]
                   + b3 * vals[row, iy + 2])
    return s


@nb.njit(cache=True)
def kernel_std(v0, v1, v2, u0, u1, u2, kappa, beta0, tvals, x0, dx, y0, dy, logtab,
               m, r_top):
    """k2 - k1 at standardised velocities (v, u); cutoff version when m > 0."""
    d0 = u0 - v0
    d1 = u1 - v1
    d2 = u2 - v2
    r = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    if r == 0.0 or r > r_top:
        return 0.0
    e0 = d0 / r
    e1 = d1 / r
    e2 = d2 / r
    a = v0 * e0 + v1 * e1 + v2 * e2
    b = a + r
    p0 = v0 - a * e0
    p1 = v1 - a * e1
    p2 = v2 - a * e2
    beta = np.sqrt(p0 * p0 + p1 * p1 + p2 * p2)
    pv = table_eval(tvals, x0, dx, y0, dy, np.log(r), beta)
    if logtab:
        pv = np.exp(pv)
    k2 = 4.0 * beta0 / r * TWO_PI_M32 * np.exp(-0.25 * (a * a + b * b)) * pv
    k1 = (2.0 * np.pi * beta0 * r ** kappa * TWO_PI_M32
          * np.exp(-0.25 * (v0 * v0 + v1 * v1 + v2 * v2 + u0 * u0 + u1 * u1 + u2 * u2)))
    if m > 0.0:
        t = (r - m) / m
        if t <= 0.0:
            ct = 1.0
        elif t >= 1.0:
            ct = 0.0
        else:
            ct = 1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
        k1 *= ct
    return k2 - k1


def nu_std(s, kappa: float, beta0: float = 1.0, n: int = 200) -> np.ndarray:
    """Collision frequency at standardised speed s for the unit Maxwellian.

    nu(s) = 2 pi beta0 int |c - u|^kappa mu(u) du, reduced to a radial integral about c.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    # panels in r = |u - c|: graded near 0 for the r^{kappa+2} factor, then up to s + 12
    t, w = _gl(16)
    out = np.empty_like(s)
    for k, sk in enumerate(s):
        top = sk + 12.0
        br = np.concatenate([[0.0], np.geomspace(1e-6, 0.5, 12), np.arange(1.0, top + 1.0, 0.5)])
        a0, a1 = br[:-1], br[1:]
        r = (a0[:, None] + (a1 - a0)[:, None] * t).ravel()
        wr = ((a1 - a0)[:, None] * w).ravel()
        if sk < 1e-8:
            ang = 2.0 * np.ones_like(r)
        else:
            x = r * sk
            # 2 sinh(x)/x times exp(-x) folded into the Gaussian to avoid overflow
            ang = (1.0 - np.exp(-2 * x)) / x
        integrand = r ** (kappa + 2) * np.exp(-0.5 * (r - sk) ** 2) * ang
        out[k] = 2 * np.pi * beta0 * TWO_PI_M32 * 2 * np.pi * np.sum(wr * integrand)
    return out
