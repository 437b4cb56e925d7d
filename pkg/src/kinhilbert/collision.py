"""Linearized collision operator L = nu - K on a velocity lattice.

Discretisation. A grid function h is identified with its tensor sinc interpolant
sum_j h_j l_j(u), l_j(u) = prod_a sinc((u_a - x_{j,a})/h). Then

    K_ij = int k(v_i, u) l_j(u) du,

split with a smooth radial partition psi(|u - v_i|):
  * near part (psi): spherical quadrature centred at v_i, radially graded towards the
    singularity r = 0, contracted against the sinc cardinals on the whole lattice;
  * far part (1 - psi): the integrand is smooth and essentially band limited, so the
    lattice rule gives h^3 k(v_i, x_j) (1 - psi).
The quadrature offsets are shared by all rows, so the sinc factors depend only on the
index offset and the contraction for a line of rows is one dense matrix product.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .grid import FluidState, VelocityGrid, sqrt_maxwellian
from .kernels import build_ptable, chi_tilde, kernel_std, nu_std, p_integral

TWO_PI_M32 = (2 * np.pi) ** -1.5


@dataclass(frozen=True)
class CollisionModel:
    kappa: float = -1.0
    beta0: float = 1.0
    angular_nodes: int = 0      # extra angular degree added to every shell of the stencil
    m: float = 0.4
    # quadrature controls (velocities in units of sqrt(T))
    psi_sigma: float = 4.0       # partition radius in units of the lattice spacing
    psi_power: float = 8.0
    ang_factor: float = 0.5
    radial_order: int = 6
    asym_threshold: float = 0.15  # collocation asymmetry is O(h^2) and about 0.07 at 16^3

    def __post_init__(self):
        if not self.kappa > -3:
            raise ValueError(f"kappa must exceed -3 (non-integrable singularity), got {self.kappa}")
        if self.kappa > 1:
            raise ValueError(f"kappa must be at most 1, got {self.kappa}")
        if not self.beta0 > 0:
            raise ValueError("beta0 must be positive")
        if not 0 < self.m <= 1:
            raise ValueError(f"cutoff radius m must lie in (0, 1], got {self.m}")


@dataclass
class CollisionOperator:
    nu: np.ndarray
    K: np.ndarray
    state: FluidState
    grid: VelocityGrid
    model: CollisionModel
    Km: np.ndarray | None = None
    Kc: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def matrix(self) -> np.ndarray:
        """Dense matrix of L (nu on the diagonal minus K)."""
        A = -self.K.copy()
        A[np.diag_indices_from(A)] += self.nu
        return A

    def apply(self, h: np.ndarray) -> np.ndarray:
        return apply_L(self, h)


class AssemblyError(RuntimeError):
    pass


# ----------------------------------------------------------------------------- stencil

def _gl(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1), 0.5 * w


def radial_rule(r_top, h, order=6, breaks=(), r_min=1e-5, ratio=0.125, width=None):
    """Composite Gauss-Legendre on [0, r_top], geometrically graded towards r = 0."""
    width = 1.0 * h if width is None else width
    g = [0.0]
    s = r_min
    while s < 0.5 * width:
        g.append(s)
        s /= ratio
    g.append(0.5 * width)
    pts = list(g) + list(np.arange(0.5 * width + width, r_top, width)) + [r_top]
    pts += [b for b in breaks if 0 < b < r_top]
    pts = np.unique(np.array([p for p in pts if p <= r_top]))
    t, w = _gl(order)
    a0, a1 = pts[:-1], pts[1:]
    r = (a0[:, None] + (a1 - a0)[:, None] * t).ravel()
    wr = ((a1 - a0)[:, None] * w).ravel()
    return r, wr


@dataclass
class Stencil:
    """Spherical product rule around the origin, stored ring by ring.

    A ring is a pair (radius, polar angle); its points differ only in azimuth. Points are
    grouped in blocks of rings sharing the same azimuth count, so contractions over the
    azimuth can be batched.
    """

    S: np.ndarray          # (P, 3) offsets
    W: np.ndarray          # (P,) weights including r^2 dr
    shell: np.ndarray      # (P,) radial shell index
    radii: np.ndarray      # (n_shell,)
    ring_z: np.ndarray     # (n_ring,) z offset r cos(theta) of every ring
    blocks: list           # [(first point, n_rings, n_azimuth, first ring)]

    @property
    def size(self):
        return self.S.shape[0]


def build_stencil(r_top, h, deg_per_unit, deg0, order, breaks=(), r_min=1e-5) -> Stencil:
    r, wr = radial_rule(r_top, h, order, breaks, r_min=r_min)
    Ls = np.ceil(deg_per_unit * r + deg0).astype(int)
    # product rule per shell: nt polar Gauss nodes, nphi azimuth nodes
    by_nphi: dict[int, list] = {}
    for k, (rk, wk, L) in enumerate(zip(r, wr, Ls)):
        nt = max(2, (L + 2) // 2)
        nphi = max(4, L + 1)
        x, w = np.polynomial.legendre.leggauss(nt)
        for xt, wt in zip(x, w):
            by_nphi.setdefault(nphi, []).append((k, rk, wk * rk * rk * wt * 2 * np.pi / nphi, xt))
    S, W, SH, RZ, blocks = [], [], [], [], []
    p0 = 0
    for nphi in sorted(by_nphi):
        rings = by_nphi[nphi]
        phi = 2 * np.pi * (np.arange(nphi) + 0.5) / nphi
        blocks.append((p0, len(rings), nphi, len(RZ)))
        for k, rk, wgt, xt in rings:
            st = np.sqrt(1 - xt * xt)
            S.append(np.stack([rk * st * np.cos(phi), rk * st * np.sin(phi),
                               np.full(nphi, rk * xt)], axis=1))
            W.append(np.full(nphi, wgt))
            SH.append(np.full(nphi, k))
            RZ.append(rk * xt)
        p0 += len(rings) * nphi
    return Stencil(np.concatenate(S), np.concatenate(W), np.concatenate(SH), r,
                   np.array(RZ), blocks)


# ----------------------------------------------------------------------------- numba kernels

@nb.njit(cache=True)
def _psi(r, sigma, p):
    # super-Gaussian partition: 1 - psi = O(r^p) at the singular point, fast Fourier decay
    if r >= sigma * 30.0 ** (1.0 / p):
        return 0.0
    return np.exp(-(r / sigma) ** p)


@nb.njit(cache=True, fastmath=True)
def _near_weights(C, E, shell, rs, rk, cut1, prof, y0, dy, W, scale, beta0):
    """kw[i, q] = scale * (k2 - k1)(c_i, c_i + r_q e_q) * W_q in standardised units.

    prof[s, :] samples P(rs[s], b) on b = y0 + dy * j; W already holds psi and the
    quadrature weight; rk = r^kappa and cut1 the k1 cutoff factor per shell.
    """
    nr = C.shape[0]
    P = E.shape[0]
    nb_ = prof.shape[1]
    out = np.empty((nr, P))
    c2 = 4.0 * beta0 * TWO_PI_M32
    c1 = 2.0 * np.pi * beta0 * TWO_PI_M32
    for i in range(nr):
        x = C[i, 0]
        y = C[i, 1]
        z = C[i, 2]
        cc = x * x + y * y + z * z
        for q in range(P):
            s = shell[q]
            r = rs[s]
            a = x * E[q, 0] + y * E[q, 1] + z * E[q, 2]
            b2 = cc - a * a
            beta = np.sqrt(b2) if b2 > 0.0 else 0.0
            f = (beta - y0) / dy
            j = int(f)
            if j < 1:
                j = 1
            if j > nb_ - 3:
                j = nb_ - 3
            t = f - j
            w0 = -t * (t - 1.0) * (t - 2.0) / 6.0
            w1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0
            w2 = -(t + 1.0) * t * (t - 2.0) / 2.0
            w3 = (t + 1.0) * t * (t - 1.0) / 6.0
            pv = (w0 * prof[s, j - 1] + w1 * prof[s, j] + w2 * prof[s, j + 1]
                  + w3 * prof[s, j + 2])
            bb = a + r
            k2 = c2 / r * np.exp(-0.25 * (a * a + bb * bb)) * pv
            k1 = c1 * rk[s] * cut1[s] * np.exp(-0.25 * (2.0 * cc + 2.0 * r * a + r * r))
            out[i, q] = scale * (k2 - k1) * W[q]
    return out


@nb.njit(cache=True)
def _far_part(V, center, sT, scale, kappa, beta0, tvals, x0, dx, y0, dy, logtab, sigma, p):
    n = V.shape[0]
    K = np.zeros((n, n))
    for i in range(n):
        c0 = (V[i, 0] - center[0]) / sT
        c1 = (V[i, 1] - center[1]) / sT
        c2 = (V[i, 2] - center[2]) / sT
        for j in range(i + 1, n):
            dxv = V[j, 0] - V[i, 0]
            dyv = V[j, 1] - V[i, 1]
            dzv = V[j, 2] - V[i, 2]
            r = np.sqrt(dxv * dxv + dyv * dyv + dzv * dzv)
            ps = _psi(r, sigma, p)
            if ps == 1.0:
                continue
            kv = kernel_std(c0, c1, c2, (V[j, 0] - center[0]) / sT, (V[j, 1] - center[1]) / sT,
                            (V[j, 2] - center[2]) / sT, kappa, beta0, tvals, x0, dx, y0, dy,
                            logtab, 0.0, 1e300)
            val = scale * kv * (1.0 - ps)
            K[i, j] = val
            K[j, i] = val
    return K


# ----------------------------------------------------------------------------- assembly

def collision_frequency(model: CollisionModel, state: FluidState, grid: VelocityGrid) -> np.ndarray:
    """nu(v_i) = int |v_i-u|^kappa beta0|cos theta| mu(u) du d omega, via a radial reduction."""
    if not model.kappa > -3:
        raise ValueError("kappa must exceed -3")
    c = (grid.nodes - state.u_arr) / np.sqrt(state.T)
    s = np.linalg.norm(c, axis=1)
    # nu depends on |c| only: evaluate on the distinct speeds
    us, inv = np.unique(np.round(s, 12), return_inverse=True)
    vals = nu_std(us, model.kappa, model.beta0)
    return state.rho * state.T ** (0.5 * model.kappa) * vals[inv]


def _contract(grid: VelocityGrid, st: Stencil, kw_fn, mem_limit: float = 3e7) -> np.ndarray:
    """K[i, j] = sum_q kw[i, q] prod_a sinc((v_i - x_j)_a / h + S[q, a] / h).

    The x and y sinc factors depend on the row only through the lattice offsets, so for
    rows sharing ix their products over all (jx, y-offset) pairs are formed once. Stage one
    contracts each ring's azimuth against them; stage two applies the z factor, which is
    constant on a ring. Both stages are plain dense products.
    """
    n = grid.n_axis
    h = grid.h
    N = grid.size
    S = st.S
    P = st.size
    d = np.arange(-(n - 1), n)
    Sx_all = np.sinc(d[:, None] + S[None, :, 0] / h)                     # (2n-1, P)
    # y offsets stored reversed so that jy = 0..n-1 is an ascending window
    Sy_rev = np.sinc(-d[:, None] + S[None, :, 1] / h)
    Sz_ring = np.sinc(d[:, None] + st.ring_z[None, :] / h)               # (2n-1, R)
    idx = n - 1 + np.arange(n)[:, None] - np.arange(n)[None, :]          # [i, j] -> offset row
    Sz3 = np.ascontiguousarray(Sz_ring[idx].transpose(0, 2, 1))          # (iz, ring, jz)
    nring = st.ring_z.size
    ring_sl = [slice(p0 + k * nphi, p0 + (k + 1) * nphi)
               for p0, nr, nphi, r0 in st.blocks for k in range(nr)]
    m2 = n * (2 * n - 1)
    B = n * int(max(1, min(n, mem_limit // (nring * m2 * n))))
    K = np.empty((N, N))
    Rbuf = np.empty(nring * B * m2)   # reused: fresh large buffers pay for page faults
    for ix in range(n):
        XY = (Sx_all[idx[ix]].T[:, :, None] * Sy_rev.T[:, None, :]).reshape(P, m2)
        rows_ix = ix * n * n + np.arange(n * n)
        for c0 in range(0, n * n, B):
            rows = rows_ix[c0:c0 + B]
            kwT = np.ascontiguousarray(kw_fn(rows).T)                    # (P, b)
            R = Rbuf[:nring * rows.size * m2].reshape(nring, rows.size, m2)
            for r, sl in enumerate(ring_sl):
                R[r] = kwT[sl].T @ XY[sl]
            R4 = R.reshape(nring, rows.size, n, 2 * n - 1)
            for b, row in enumerate(rows):
                iy, iz = divmod(int(row) - ix * n * n, n)
                s0 = n - 1 - iy
                A = np.ascontiguousarray(R4[:, b, :, s0:s0 + n]).reshape(nring, n * n)
                K[row] = (A.T @ Sz3[iz]).reshape(N)
    return K


def _assemble_part(model: CollisionModel, state: FluidState, grid: VelocityGrid, m_std=None):
    sT = np.sqrt(state.T)
    # k_phys(v,u) = rho T^{(kappa-3)/2} k_std; the physical volume element of the stencil
    # is used directly, so no further Jacobian appears
    scale = state.rho * state.T ** (0.5 * (model.kappa - 3))
    h = grid.h
    center = state.u_arr.copy()
    C = np.ascontiguousarray((grid.nodes - center) / sT)
    bmax = float(np.max(np.linalg.norm(C, axis=1))) + 2.0
    deg_per_unit = model.ang_factor * np.sqrt(3.0) * np.pi / h
    if m_std is None:
        sig = model.psi_sigma * h
        top = sig * 30.0 ** (1.0 / model.psi_power)
        st = build_stencil(top, h, deg_per_unit, 8 + model.angular_nodes, model.radial_order)
        psi = np.exp(-(st.radii / sig) ** model.psi_power)
        cut1 = np.ones_like(st.radii)
    else:
        top = 2.0 * m_std * sT
        st = build_stencil(top, h, deg_per_unit, 8 + model.angular_nodes, model.radial_order,
                           breaks=(0.5 * top,), r_min=1e-5 * top)
        psi = np.ones_like(st.radii)
        cut1 = chi_tilde(st.radii / sT, m_std)
    rs = st.radii / sT
    dy = 0.04
    bgrid = -2 * dy + dy * np.arange(int(np.ceil(bmax / dy)) + 6)
    prof = np.array([p_integral(r, np.abs(bgrid), model.kappa, m=m_std, rho_max=bmax + 11.0)
                     for r in rs])
    E = st.S / np.linalg.norm(st.S, axis=1)[:, None]
    Wq = st.W * psi[st.shell]
    rk = rs ** model.kappa

    def kw_fn(rows):
        return _near_weights(C[rows], E, st.shell, rs, rk, cut1, prof, bgrid[0], dy, Wq, scale,
                             model.beta0)

    K = _contract(grid, st, kw_fn)
    if m_std is None:
        tab = build_ptable(model.kappa, bmax)
        K += _far_part(np.ascontiguousarray(grid.nodes), center, sT, scale * h ** 3, model.kappa,
                       model.beta0, tab.values, tab.x0, tab.dx, tab.y0, tab.dy, tab.log,
                       model.psi_sigma * h, model.psi_power)
    return K, st.size


def assemble_K(model: CollisionModel, state: FluidState, grid: VelocityGrid,
               with_split: bool = False) -> CollisionOperator:
    t0 = time.perf_counter()
    nu = collision_frequency(model, state, grid)
    K, P = _assemble_part(model, state, grid)
    asym = float(np.linalg.norm(K - K.T) / np.linalg.norm(K))
    K = 0.5 * (K + K.T)
    diag = {"asymmetry_raw": asym, "stencil_points": int(P), "seconds": time.perf_counter() - t0,
            "asymmetry_exceeds_threshold": asym > model.asym_threshold}
    op = CollisionOperator(nu, K, state, grid, model, diagnostics=diag)
    if with_split:
        split_cutoff(model, op)
    return op


def split_cutoff(model: CollisionModel, op: CollisionOperator, m: float | None = None):
    """K^m from the cutoff kernel (relative speed below 2m), K^c = K - K^m."""
    m = model.m if m is None else m
    if not 0 < m <= 1:
        raise ValueError("m must lie in (0, 1]")
    Km, _ = _assemble_part(model, op.state, op.grid, m_std=m / np.sqrt(op.state.T))
    Km = 0.5 * (Km + Km.T)
    Kc = op.K - Km
    op.Km, op.Kc = Km, Kc
    return Km, Kc


def apply_L(op: CollisionOperator, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    return op.nu * h - h @ op.K.T if h.ndim > 1 else op.nu * h - op.K @ h


def sup_operator_norm(grid: VelocityGrid, K: np.ndarray) -> float:
    """max_i sum_j |K_ij|: the L-infinity operator norm of the discrete integral operator."""
    return float(np.max(np.sum(np.abs(K), axis=1)))


# ----------------------------------------------------------------------------- diagnostics

def null_basis(state: FluidState, grid: VelocityGrid) -> np.ndarray:
    """The five collision invariants times sqrt(mu), unnormalised, as rows."""
    V = grid.nodes
    sm = sqrt_maxwellian(state, V)
    c = (V - state.u_arr) / np.sqrt(state.T)
    return np.vstack([sm, c[:, 0] * sm, c[:, 1] * sm, c[:, 2] * sm,
                      (np.sum(c * c, axis=1) - 3.0) / np.sqrt(6.0) * sm])


def null_residuals(op: CollisionOperator) -> np.ndarray:
    X = null_basis(op.state, op.grid)
    return np.array([np.linalg.norm(apply_L(op, x)) / np.linalg.norm(x) for x in X])


def coercivity_constant(op: CollisionOperator, tol: float = 1e-8) -> float:
    """min over h orthogonal to the invariants of <L h, h> / <nu h, h>.

    With g = nu^{1/2} h this is 1 - max eig of nu^{-1/2} K nu^{-1/2} on the complement of
    nu^{-1/2} X (X the invariants); the top eigenvalue is found by Lanczos.
    """
    from scipy.sparse.linalg import LinearOperator, eigsh

    d = 1.0 / np.sqrt(op.nu)
    Q, _ = np.linalg.qr((null_basis(op.state, op.grid) * d).T)
    K = op.K

    def proj(x):
        return x - Q @ (Q.T @ x)

    def mv(x):
        y = proj(np.ravel(x))
        return proj(d * (K @ (d * y)))

    N = op.grid.size
    A = LinearOperator((N, N), matvec=mv, dtype=float)
    v0 = proj(np.ones(N))
    lam = eigsh(A, k=1, which="LA", tol=tol, v0=v0, return_eigenvectors=False)
    return float(1.0 - lam[0])


def diagnostics_json(op: CollisionOperator, coercivity: bool = True) -> dict:
    K = op.K
    # wall-clock time is left out so that reports are reproducible
    out = {k: v for k, v in op.diagnostics.items() if k != "seconds"}
    out["asymmetry_symmetrised"] = float(np.linalg.norm(K - K.T) / np.linalg.norm(K))
    out["null_residuals"] = null_residuals(op).tolist()
    if coercivity:
        out["coercivity_c0"] = coercivity_constant(op)
    out["n_axis"] = op.grid.n_axis
    out["v_max"] = op.grid.v_max
    out["kappa"] = op.model.kappa
    return out


def save_operator(op: CollisionOperator, path) -> None:
    """Binary container (numpy .npz) with nu, K and the split when present."""
    arrays = {"nu": op.nu, "K": op.K, "nodes": op.grid.nodes,
              "state": np.array([op.state.rho, *op.state.u, op.state.T])}
    if op.Km is not None:
        arrays["Km"] = op.Km
    np.savez(path, **arrays)


def load_operator(path, model: CollisionModel, grid: VelocityGrid) -> CollisionOperator:
    z = np.load(path)
    if z["nodes"].shape != grid.nodes.shape or not np.allclose(z["nodes"], grid.nodes):
        raise ValueError(f"{path}: stored operator does not match the grid")
    s = z["state"]
    op = CollisionOperator(z["nu"], z["K"], FluidState(s[0], tuple(s[1:4]), s[4]), grid, model)
    if "Km" in z:
        op.Km = z["Km"]
        op.Kc = op.K - op.Km
    return op


def save_operator_csv(op: CollisionOperator, path) -> None:
    """Sparse triplets (i, j, K_ij) for |K_ij| above 1e-14, plus nu on the diagonal rows."""
    i, j = np.nonzero(np.abs(op.K) > 1e-14)
    with open(path, "w") as fh:
        fh.write("i,j,K\n")
        np.savetxt(fh, np.column_stack([i, j, op.K[i, j]]), delimiter=",",
                   fmt=["%d", "%d", "%.17g"])


def kernel_sup_norm(op_K: np.ndarray) -> float:
    return sup_operator_norm(None, op_K)


# ----------------------------------------------------------------------------- Gamma

@dataclass(frozen=True)
class GammaRule:
    """Product quadrature for the (u, omega) integrals of the bilinear collision form."""

    radial_panels: int = 24
    radial_order: int = 4
    sphere_degree: int = 17
    omega_polar: int = 8
    omega_azimuth: int = 16
    reach: float = 9.0          # radial extent beyond |v - u0| in units of sqrt(T)


def _sphere_rule(deg):
    nt = deg // 2 + 1
    x, w = np.polynomial.legendre.leggauss(nt)
    nphi = deg + 1
    phi = 2 * np.pi * (np.arange(nphi) + 0.5) / nphi
    st = np.sqrt(1 - x * x)
    E = np.stack([np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)),
                  np.outer(x, np.ones(nphi))], axis=-1).reshape(-1, 3)
    W = np.outer(w, np.full(nphi, 2 * np.pi / nphi)).ravel()
    return E, W


def _as_evaluator(f, grid: VelocityGrid):
    """Callables are used as is; grid vectors are read through cubic spline interpolation."""
    if callable(f):
        return f
    from scipy.ndimage import map_coordinates, spline_filter

    arr = np.asarray(f, dtype=float).reshape(grid.shape3)
    coef = spline_filter(arr, order=3, mode="grid-constant")
    x0 = grid.axis[0]
    h = grid.h

    def ev(P):
        idx = ((P - x0) / h).T
        return map_coordinates(coef, idx, order=3, mode="grid-constant", cval=0.0,
                               prefilter=False)

    return ev


def apply_Gamma(model: CollisionModel, state: FluidState, grid: VelocityGrid, h, g,
                nodes=None, rule: GammaRule | None = None) -> np.ndarray:
    """Gamma(h, g) = mu^{-1/2} Q(sqrt(mu) h, sqrt(mu) g) at grid nodes.

    Gain and loss integrals are computed by quadrature in u = v + r e (spherical about v)
    and in omega (polar angle measured from e, hemisphere, weight |cos theta|). Using
    mu(u') mu(v') = mu(u) mu(v), the gain part is int B sqrt(mu(u)) h(u') g(v'). h and g
    may be grid vectors or callables on (M, 3) arrays of velocities.
    """
    rule = GammaRule() if rule is None else rule
    hf = _as_evaluator(h, grid)
    gf = _as_evaluator(g, grid)
    V = grid.nodes if nodes is None else grid.nodes[np.asarray(nodes)]
    sT = np.sqrt(state.T)
    E, We = _sphere_rule(rule.sphere_degree)
    xt, wt = np.polynomial.legendre.leggauss(rule.omega_polar)
    th = 0.25 * np.pi * (xt + 1)            # theta in (0, pi/2)
    wth = 0.25 * np.pi * wt * np.sin(th) * np.cos(th) * 2.0   # hemisphere counted twice
    nph = rule.omega_azimuth
    ph = 2 * np.pi * (np.arange(nph) + 0.5) / nph
    t, w = _gl(rule.radial_order)
    gv = gf(V)
    out = np.empty(V.shape[0])
    for i, v in enumerate(V):
        R = np.linalg.norm(v - state.u_arr) + rule.reach * sT
        br = np.linspace(0.0, R, rule.radial_panels + 1)
        r = (br[:-1, None] + np.diff(br)[:, None] * t).ravel()
        wr = (np.diff(br)[:, None] * w).ravel() * r ** (2 + model.kappa) * model.beta0
        # u = v + r e
        U = v + r[:, None, None] * E[None, :, :]                        # (nr, ne, 3)
        smu = sqrt_maxwellian(state, U)
        loss = np.einsum("r,e,re->", wr, We, smu * hf(U.reshape(-1, 3)).reshape(smu.shape))
        # orthonormal frame (e, a, b) for each direction
        a = np.cross(E, [0.0, 0.0, 1.0])
        small = np.linalg.norm(a, axis=1) < 0.5
        a[small] = np.cross(E[small], [1.0, 0.0, 0.0])
        a /= np.linalg.norm(a, axis=1)[:, None]
        b = np.cross(E, a)
        gain = 0.0
        for ct, st_, wq in zip(np.cos(th), np.sin(th), wth):
            Om = (ct * E[:, None, :] + st_ * (np.cos(ph)[None, :, None] * a[:, None, :]
                                             + np.sin(ph)[None, :, None] * b[:, None, :]))
            # v' = v + r cos(theta) omega, u' = u - r cos(theta) omega
            step = (r[:, None, None, None] * ct) * Om[None]                # (nr, ne, nph, 3)
            Vp = v + step
            Up = U[:, :, None, :] - step
            val = hf(Up.reshape(-1, 3)) * gf(Vp.reshape(-1, 3))
            val = val.reshape(r.size, E.shape[0], nph).sum(axis=2) * (2 * np.pi / nph)
            gain += wq * np.einsum("r,e,re->", wr, We, smu * val)
        out[i] = gain - gv[i] * 2.0 * np.pi * loss
    return out
