"""Wave-packet (FBI-type) transform at spatial scale mu^{-1/2}.

    T f(x, xi) = mu^{n/4} int e^{-i <xi, z-x>} g(mu^{1/2} (z-x)) f(z) dz

The window g is the inverse transform of a radial bump supported in the
unit ball, so for band-limited f on the torus the transform reduces to an
exact mode sum

    T f(x, xi) = mu^{-n/4} sum_k fhat_k ghat((xi - k)/sqrt(mu)) e^{i k x},

which this module evaluates directly: the z-quadrature is exact, and the
discrete adjoint is the exact algebraic adjoint of the tabulated map.
Phase-space grids keep the xi-axis aligned to the mode lattice so that
T*T is a constant multiple of the identity up to the xi-Riemann-sum
error of |ghat|^2 (~1e-10 at the default spacings).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np

from .coeffield import CoefficientField
from .grids import GridFunction
from .lpdecomp import band_pass_value

DEFAULT_BETA = 4.0


@dataclass
class WindowFunction:
    """Radial window with compactly supported Fourier profile.

    ghat(eta) = c * exp(-beta/(1-|eta|^2)) on |eta|<1, normalized to
    ||ghat||_{L^2(R^n)} = 1, equivalent to ||g||_{L^2} = (2 pi)^{-n/2}.
    The physical radial profile is tabulated lazily on demand.
    """

    dim: int
    beta: float
    norm_const: float
    _r_grid: np.ndarray | None = dc_field(default=None, repr=False)
    _g_radial: np.ndarray | None = dc_field(default=None, repr=False)
    _ac_grid: np.ndarray | None = dc_field(default=None, repr=False)
    _ac_vals: np.ndarray | None = dc_field(default=None, repr=False)

    def ghat(self, r) -> np.ndarray:
        r = np.abs(np.asarray(r, dtype=float))
        out = np.zeros_like(r)
        m = r < 1.0
        out[m] = self.norm_const * np.exp(-self.beta / (1.0 - r[m] ** 2))
        return out

    def _build_table(self, rmax: float = 80.0, dr: float = 0.002):
        nodes, wts = np.polynomial.legendre.leggauss(800)
        s = 0.5 * (nodes + 1.0)
        w = 0.5 * wts
        gh = self.ghat(s)
        rr = np.arange(0.0, rmax + dr, dr)
        if self.dim == 1:
            # g(r) = (1/pi) int_0^1 ghat(s) cos(r s) ds
            vals = (np.cos(np.outer(rr, s)) @ (gh * w)) / np.pi
        else:
            from scipy.special import j0
            vals = (j0(np.outer(rr, s)) @ (gh * w * s)) / (2.0 * np.pi)
        self._r_grid, self._g_radial = rr, vals

    def g_phys(self, r) -> np.ndarray:
        """Physical window at radial distances r (linear interp on a fine table)."""
        if self._r_grid is None:
            self._build_table()
        return np.interp(np.abs(np.asarray(r, dtype=float)), self._r_grid, self._g_radial,
                         right=0.0)

    def autocorr(self, r) -> np.ndarray:
        """(g * g)(r): inverse transform of |ghat|^2, radial (tabulated lazily)."""
        if self._ac_grid is None:
            nodes, wts = np.polynomial.legendre.leggauss(800)
            s = 0.5 * (nodes + 1.0)
            w = 0.5 * wts
            gh2 = self.ghat(s) ** 2
            rr = np.arange(0.0, 80.0 + 0.002, 0.002)
            if self.dim == 1:
                vals = (np.cos(np.outer(rr, s)) @ (gh2 * w)) / np.pi
            else:
                from scipy.special import j0
                vals = (j0(np.outer(rr, s)) @ (gh2 * w * s)) / (2.0 * np.pi)
            self._ac_grid, self._ac_vals = rr, vals
        return np.interp(np.abs(np.asarray(r, dtype=float)), self._ac_grid, self._ac_vals,
                         right=0.0)


@lru_cache(maxsize=8)
def make_window(n: int, beta: float = DEFAULT_BETA) -> WindowFunction:
    """Construct the radial window for dimension n (cached)."""
    if n not in (1, 2):
        raise ValueError("dimension must be 1 or 2")
    nodes, wts = np.polynomial.legendre.leggauss(2000)
    s = 0.5 * (nodes + 1.0)
    w = 0.5 * wts
    raw = np.exp(-beta / (1.0 - s**2), where=s < 1.0, out=np.zeros_like(s))
    if n == 1:
        nrm2 = 2.0 * np.sum(raw**2 * w)
    else:
        nrm2 = 2.0 * np.pi * np.sum(raw**2 * s * w)
    return WindowFunction(n, beta, 1.0 / np.sqrt(nrm2))


def default_hxi(mu: float, dim: int) -> float:
    """Largest dyadic lattice-aligned xi spacing meeting the accuracy target."""
    target = np.sqrt(mu) / (16.0 if dim == 1 else 8.0)
    return 2.0 ** np.floor(np.log2(target))


@dataclass
class PhaseSpaceGrid:
    dim: int
    mu: float
    x_axis: np.ndarray
    xi_axis: np.ndarray
    window: WindowFunction

    @property
    def hx(self) -> float:
        return float(self.x_axis[1] - self.x_axis[0])

    @property
    def hxi(self) -> float:
        return float(self.xi_axis[1] - self.xi_axis[0])

    @property
    def nx(self) -> int:
        return len(self.x_axis)

    @property
    def nxi(self) -> int:
        return len(self.xi_axis)

    def weight(self) -> float:
        return (self.hx * self.hxi) ** self.dim

    def check_spacing(self):
        smu = np.sqrt(self.mu)
        if self.hx > 1.0 / (2.0 * smu) + 1e-12:
            raise ValueError(f"x spacing {self.hx:.4g} undersamples packets (need <= mu^-1/2 / 2)")
        if self.hxi > smu / 2.0 + 1e-12:
            raise ValueError(f"xi spacing {self.hxi:.4g} undersamples packets (need <= mu^1/2 / 2)")


def phase_grid(mu: float, dim: int = 1, ximax: float | None = None,
               nx: int | None = None, hxi: float | None = None,
               window: WindowFunction | None = None) -> PhaseSpaceGrid:
    if ximax is None:
        ximax = 4.0 * mu + np.sqrt(mu) + 2.0
    hxi = hxi if hxi is not None else default_hxi(mu, dim)
    if nx is None:
        per = 8.0 if dim == 1 else 4.0   # samples per packet width mu^-1/2
        nx = int(np.ceil(per * np.pi * np.sqrt(mu) / 16.0)) * 16
    x = 2.0 * np.pi * np.arange(nx) / nx
    m = int(np.ceil(ximax / hxi))
    xi = np.arange(-m, m + 1) * hxi
    g = PhaseSpaceGrid(dim, mu, x, xi, window or make_window(dim))
    g.check_spacing()
    return g


@dataclass
class PhaseSpaceFunction:
    """Tabulated function on the (x, xi) grid with quadrature weights."""

    grid: PhaseSpaceGrid
    values: np.ndarray   # (nx, nxi) or (nx, nx, nxi, nxi)

    def norm(self) -> float:
        return float(np.sqrt(self.grid.weight() * np.sum(np.abs(self.values) ** 2)))

    def inner(self, other: "PhaseSpaceFunction") -> complex:
        return complex(self.grid.weight() * np.sum(self.values * np.conj(other.values)))


def _gather_modes(f: GridFunction, cutoff: float = 0.0):
    hat = f.hat()
    if f.dim == 1:
        ks = np.fft.fftfreq(f.n, 1.0 / f.n)
        live = np.abs(hat) > cutoff
        return ks[live][:, None], hat[live]
    k1 = np.fft.fftfreq(f.n, 1.0 / f.n)
    kx, ky = np.meshgrid(k1, k1, indexing="ij")
    live = np.abs(hat) > cutoff
    return np.stack([kx[live], ky[live]], axis=1), hat[live]


def _check_forward_pre(f: GridFunction, mu: float):
    if mu < 4:
        raise ValueError("mu must be >= 4")
    if f.freq_scale != 1.0:
        raise ValueError("transform expects the standard 2*pi torus")
    if f.band_radius() > 8.0 * mu + 1e-9:
        raise ValueError("input spectrum exceeds |xi| <= 8 mu")


def wp_forward(f: GridFunction, mu: float, grid: PhaseSpaceGrid | None = None) -> PhaseSpaceFunction:
    """Tabulate T f on a phase-space grid (exact in z for band-limited f)."""
    _check_forward_pre(f, mu)
    smu = np.sqrt(mu)
    if grid is None:
        grid = phase_grid(mu, f.dim, ximax=f.band_radius() + smu + 2.0)
    grid.check_spacing()
    ks, cs = _gather_modes(f)
    if f.dim == 1:
        G = grid.window.ghat((grid.xi_axis[None, :] - ks[:, 0][:, None]) / smu)
        E = np.exp(1j * np.outer(grid.x_axis, ks[:, 0]))
        vals = mu ** -0.25 * (E @ (cs[:, None] * G))
        return PhaseSpaceFunction(grid, vals)
    # dim 2: scatter mode contributions over lattice-aligned xi offsets
    nx, nxi = grid.nx, grid.nxi
    vals = np.zeros((nx, nx, nxi, nxi), dtype=complex)
    E1 = np.exp(1j * np.outer(grid.x_axis, ks[:, 0]))
    E2 = np.exp(1j * np.outer(grid.x_axis, ks[:, 1]))
    xi0 = grid.xi_axis[0]
    hxi = grid.hxi
    noff = int(np.floor(smu / hxi))
    offs = np.arange(-noff, noff + 1) * hxi
    idx1 = np.round((ks[:, 0] - xi0) / hxi).astype(int)
    idx2 = np.round((ks[:, 1] - xi0) / hxi).astype(int)
    for o1 in offs:
        for o2 in offs:
            r = np.hypot(o1, o2) / smu
            if r >= 1.0:
                continue
            gv = grid.window.ghat(np.array([r]))[0]
            a1 = idx1 + int(round(o1 / hxi))
            a2 = idx2 + int(round(o2 / hxi))
            ok = (a1 >= 0) & (a1 < nxi) & (a2 >= 0) & (a2 < nxi)
            if not ok.any():
                continue
            contrib = mu ** -0.5 * gv * cs[ok]
            np.add.at(vals.transpose(2, 3, 0, 1), (a1[ok], a2[ok]),
                      contrib[:, None, None] * (E1[:, ok].T[:, :, None] * E2[:, ok].T[:, None, :]))
    return PhaseSpaceFunction(grid, vals)


def wp_forward_at(f: GridFunction, mu: float, x_pts: np.ndarray, xi_pts: np.ndarray,
                  window: WindowFunction | None = None) -> np.ndarray:
    """Evaluate T f at arbitrary phase-space points by the exact mode sum."""
    _check_forward_pre(f, mu)
    window = window or make_window(f.dim)
    smu = np.sqrt(mu)
    x_pts = np.atleast_2d(np.asarray(x_pts, dtype=float))
    xi_pts = np.atleast_2d(np.asarray(xi_pts, dtype=float))
    ks, cs = _gather_modes(f)
    out = np.zeros(x_pts.shape[0], dtype=complex)
    if f.dim == 1:
        order = np.argsort(ks[:, 0])
        ks1 = ks[order, 0]
        cs1 = cs[order]
        lo = np.searchsorted(ks1, xi_pts[:, 0] - smu)
        hi = np.searchsorted(ks1, xi_pts[:, 0] + smu)
        wmax = int((hi - lo).max(initial=0))
        if wmax == 0:
            return out
        idx = lo[:, None] + np.arange(wmax)[None, :]
        valid = idx < hi[:, None]
        idx = np.minimum(idx, len(ks1) - 1)
        kk = ks1[idx]
        cc = cs1[idx]
        gh = window.ghat((xi_pts[:, :1] - kk) / smu)
        out = mu ** -0.25 * np.sum(np.where(valid, cc * gh * np.exp(1j * kk * x_pts[:, :1]), 0.0), axis=1)
        return out
    for start in range(0, len(cs), 512):
        kk = ks[start:start + 512]
        cc = cs[start:start + 512]
        d = xi_pts[:, None, :] - kk[None, :, :]
        r = np.sqrt((d**2).sum(-1)) / smu
        gh = window.ghat(r)
        phase = np.exp(1j * (x_pts @ kk.T))
        out += mu ** -0.5 * np.sum(cc[None, :] * gh * phase, axis=1)
    return out


def wp_adjoint(F: PhaseSpaceFunction, mu: float, out_n: int) -> GridFunction:
    """Exact discrete adjoint of the tabulated transform (left inverse on bands)."""
    grid = F.grid
    smu = np.sqrt(mu)
    dim = grid.dim
    kmax_reach = min(out_n // 2 - 1, int(np.floor(grid.xi_axis[-1] + smu)))
    w = grid.weight() * (2.0 * np.pi) ** -dim * mu ** (-dim / 4.0)
    hat = np.zeros((out_n,) * dim, dtype=complex)
    if dim == 1:
        ks = np.arange(-kmax_reach, kmax_reach + 1)
        G = grid.window.ghat((grid.xi_axis[None, :] - ks[:, None]) / smu)
        E = np.exp(-1j * np.outer(ks, grid.x_axis))
        coefs = w * np.sum(G * (E @ F.values), axis=1)
        hat[ks % out_n] = coefs
        vals = np.fft.ifft(hat) * out_n
        return GridFunction(1, out_n, vals)
    xi1 = grid.xi_axis
    xi2 = getattr(grid, "xi_axis2", grid.xi_axis)
    k1list = np.arange(max(-kmax_reach, int(np.floor(xi1[0] - smu))),
                       min(kmax_reach, int(np.ceil(xi1[-1] + smu))) + 1)
    k2list = np.arange(max(-kmax_reach, int(np.floor(xi2[0] - smu))),
                       min(kmax_reach, int(np.ceil(xi2[-1] + smu))) + 1)
    E1 = np.exp(-1j * np.outer(k1list, grid.x_axis))
    E2 = np.exp(-1j * np.outer(k2list, grid.x_axis))
    Fx = np.einsum("ax,by,xyuv->abuv", E1, E2, F.values, optimize=True)
    coefs = np.zeros((len(k1list), len(k2list)), dtype=complex)
    for ia, k1 in enumerate(k1list):
        d1 = (xi1 - k1) / smu
        for ib, k2 in enumerate(k2list):
            d2 = (xi2 - k2) / smu
            r = np.sqrt(d1[:, None] ** 2 + d2[None, :] ** 2)
            gh = grid.window.ghat(r)
            if gh.any():
                coefs[ia, ib] = w * np.sum(gh * Fx[ia, ib])
    hat[np.ix_(k1list % out_n, k2list % out_n)] = coefs
    vals = np.fft.ifftn(hat) * out_n**2
    return GridFunction(2, out_n, vals)


def phase_space_csv_rows(F: PhaseSpaceFunction) -> list[dict]:
    """|T f| magnitude dump (x, xi, magnitude); dim 1 grids only."""
    if F.grid.dim != 1:
        raise ValueError("csv dump supports dim 1")
    rows = []
    for i, x in enumerate(F.grid.x_axis):
        for j, xi in enumerate(F.grid.xi_axis):
            rows.append({"x": float(x), "xi": float(xi), "magnitude": float(abs(F.values[i, j]))})
    return rows


# --- the conjugated generator ---

def _fd_xi(values: np.ndarray, axis: int, hxi: float) -> np.ndarray:
    """Centered difference along a xi-axis, zero beyond the window edge."""
    out = np.zeros_like(values)
    src_p = [slice(None)] * values.ndim
    src_m = [slice(None)] * values.ndim
    dst = [slice(None)] * values.ndim
    dst[axis] = slice(1, -1)
    src_p[axis] = slice(2, None)
    src_m[axis] = slice(0, -2)
    out[tuple(dst)] = (values[tuple(src_p)] - values[tuple(src_m)]) / (2.0 * hxi)
    # one-sided neighbors at the edges (vanishing data assumed beyond)
    first = [slice(None)] * values.ndim
    first[axis] = 0
    second = [slice(None)] * values.ndim
    second[axis] = 1
    out[tuple(first)] = values[tuple(second)] / (2.0 * hxi)
    last = [slice(None)] * values.ndim
    last[axis] = -1
    prev = [slice(None)] * values.ndim
    prev[axis] = -2
    out[tuple(last)] = -values[tuple(prev)] / (2.0 * hxi)
    return out


def _spectral_x(values: np.ndarray, axis: int) -> np.ndarray:
    n = values.shape[axis]
    k = np.fft.fftfreq(n, 1.0 / n)
    if n % 2 == 0:
        k = k.copy()
        k[n // 2] = 0.0
    shape = [1] * values.ndim
    shape[axis] = n
    return np.fft.ifft(np.fft.fft(values, axis=axis) * (1j * k).reshape(shape), axis=axis)


def apply_generator(field: CoefficientField, F: PhaseSpaceFunction) -> PhaseSpaceFunction:
    """Apply A~ = -i d_xi a . d_x + i d_x a . d_xi + (a - xi . d_xi a).

    d_x acts spectrally on the periodic x-axes; d_xi by centered
    differences (the tabulation is smooth at scale mu^{1/2} in xi, so the
    difference quotient is accurate; a difference stencil in x cannot
    resolve the e^{i k x} oscillation at k ~ mu).
    """
    grid = F.grid
    dim = grid.dim
    if dim != field.dim:
        raise ValueError("dimension mismatch")
    if grid.nxi < 5:
        raise ValueError("grid too coarse for the xi difference stencil")
    pts = grid.x_axis[:, None] if dim == 1 else \
        np.stack(np.meshgrid(grid.x_axis, grid.x_axis, indexing="ij"), axis=-1).reshape(-1, 2)
    g, dg = field.metric_at(pts, n_deriv=1)
    xshape = (grid.nx,) * dim
    g = g.reshape(xshape + (dim, dim))
    dg = dg.reshape(xshape + (dim, dim, dim))
    xi2_axis = getattr(grid, "xi_axis2", grid.xi_axis)
    if dim == 1:
        xi = grid.xi_axis[None, :]
        gg = g[:, 0, 0][:, None]
        dgg = dg[:, 0, 0, 0][:, None]
        a = -gg * xi**2
        d_xi_a = -2.0 * gg * xi
        d_x_a = -dgg * xi**2
        sigma = a - xi * d_xi_a
        out = (-1j) * d_xi_a * _spectral_x(F.values, 0) \
            + 1j * d_x_a * _fd_xi(F.values, 1, grid.hxi) \
            + sigma * F.values
        return PhaseSpaceFunction(grid, out)
    xi1 = grid.xi_axis[None, None, :, None]
    xi2 = xi2_axis[None, None, None, :]
    g11 = g[..., 0, 0][:, :, None, None]
    g12 = g[..., 0, 1][:, :, None, None]
    g22 = g[..., 1, 1][:, :, None, None]
    a = -(g11 * xi1**2 + 2 * g12 * xi1 * xi2 + g22 * xi2**2)
    da_dxi1 = -2.0 * (g11 * xi1 + g12 * xi2)
    da_dxi2 = -2.0 * (g12 * xi1 + g22 * xi2)
    def dslice(l):
        return (dg[..., l, 0, 0][:, :, None, None] * xi1**2
                + 2 * dg[..., l, 0, 1][:, :, None, None] * xi1 * xi2
                + dg[..., l, 1, 1][:, :, None, None] * xi2**2)
    da_dx1 = -dslice(0)
    da_dx2 = -dslice(1)
    sigma = a - xi1 * da_dxi1 - xi2 * da_dxi2
    out = (-1j) * (da_dxi1 * _spectral_x(F.values, 0) + da_dxi2 * _spectral_x(F.values, 1)) \
        + 1j * (da_dx1 * _fd_xi(F.values, 2, grid.hxi) + da_dx2 * _fd_xi(F.values, 3, grid.hxi)) \
        + sigma * F.values
    return PhaseSpaceFunction(grid, out)


# --- conjugation residual via a mode-space representation ---
#
# Functions of the form F(x, xi) = sum_k M[k](xi) e^{i k x} are closed under
# T, A, the generator, and multiplication by the (band-limited) coefficient
# functions; x-integrals are then exact.  M is stored in a frame local to
# each mode: M[k, w] is the value at xi = k + delta_w.

class _ModalFrame1D:
    def __init__(self, field: CoefficientField, mu: float, hxi: float | None = None):
        self.mu = mu
        self.smu = np.sqrt(mu)
        self.hxi = hxi if hxi is not None else default_hxi(mu, 1)
        if abs(round(1.0 / self.hxi) - 1.0 / self.hxi) > 1e-12:
            raise ValueError("modal frame needs lattice-aligned xi spacing")
        self.slots_per_unit = int(round(1.0 / self.hxi))
        ghat_modes = np.fft.fft(field.g_inv[0, 0]) / field.grid_n
        live = np.abs(ghat_modes) > 1e-15 * max(np.abs(ghat_modes).max(), 1e-300)
        kk = np.fft.fftfreq(field.grid_n, 1.0 / field.grid_n).astype(int)
        self.coef_modes = [(int(k), ghat_modes[i]) for i, k in enumerate(kk) if live[i]]
        self.mband = max((abs(k) for k, _ in self.coef_modes), default=0)
        kmax = int(np.ceil(4 * mu + self.mband + 2))
        self.ks = np.arange(-kmax, kmax + 1)
        self.kmin = -kmax
        halo = int(np.ceil((self.smu + self.mband + 2) / self.hxi)) + 2
        self.W = halo
        self.deltas = np.arange(-halo, halo + 1) * self.hxi
        self.gh = make_window(1).ghat(self.deltas / self.smu)
        self.window = make_window(1)

    def idx(self, k):
        return k - self.kmin

    def xi_of(self):
        """Absolute xi per (k, w) slot."""
        return self.ks[:, None] + self.deltas[None, :]

    def t_forward(self, c):
        """c: (K, P) mode coefficients -> modal phase array (K, Nw, P)."""
        return self.mu ** -0.25 * c[:, None, :] * self.gh[None, :, None]

    def t_adjoint(self, M):
        return self.mu ** -0.25 * self.hxi * np.einsum("w,kwp->kp", self.gh, M)

    def mult_xfun(self, M, coef_modes):
        """Multiply by sum_m w_m e^{i m x}: shifts mode index and xi-frame."""
        out = np.zeros_like(M)
        K, Nw, _ = M.shape
        for m, wm in coef_modes:
            s = m * self.slots_per_unit
            # target k' = k + m at same absolute xi: local slot w' = w - s
            ksrc = slice(max(0, -m), K - max(0, m))
            kdst = slice(max(0, m), K - max(0, -m))
            wsrc = slice(max(0, s), Nw - max(0, -s))
            wdst = slice(max(0, -s), Nw - max(0, s))
            out[kdst, wdst, :] += wm * M[ksrc, wsrc, :]
        return out

    def apply_A_modes(self, c):
        """(A f)^_k = -sum_m g_m (k-m)^2 c_{k-m} on the contiguous mode array."""
        out = np.zeros_like(c)
        K = len(self.ks)
        for m, wm in self.coef_modes:
            src = slice(max(0, -m), K - max(0, m))
            dst = slice(max(0, m), K - max(0, -m))
            out[dst, :] += wm * (-self.ks[src] ** 2)[:, None] * c[src, :]
        return out

    def apply_A_modes_adjoint(self, c):
        out = np.zeros_like(c)
        K = len(self.ks)
        for m, wm in self.coef_modes:
            # adjoint of the m-shift: k' = k - m, conjugate weight
            src = slice(max(0, m), K - max(0, -m))
            dst = slice(max(0, -m), K - max(0, m))
            out[dst, :] += np.conj(wm) * (-self.ks[dst] ** 2)[:, None] * c[src, :]
        return out

    def fd_xi(self, M):
        out = np.zeros_like(M)
        out[:, 1:-1, :] = (M[:, 2:, :] - M[:, :-2, :]) / (2 * self.hxi)
        out[:, 0, :] = M[:, 1, :] / (2 * self.hxi)
        out[:, -1, :] = -M[:, -2, :] / (2 * self.hxi)
        return out

    def fd_xi_adjoint(self, M):
        # the zero-padded centered difference matrix is exactly skew
        return -self.fd_xi(M)

    def generator(self, M):
        """A~ on the modal array: -i d_xi a d_x + i d_x a d_xi + (a - xi d_xi a)."""
        xi = self.xi_of()[:, :, None]
        dxF = 1j * self.ks[:, None, None] * M
        t1 = (-1j) * self.mult_xfun(-2.0 * xi * dxF, self.coef_modes)
        dxiF = self.fd_xi(M)
        dcoef = [(k, 1j * k * c) for k, c in self.coef_modes]
        t2 = 1j * self.mult_xfun(-(xi**2) * dxiF, dcoef)
        t3 = self.mult_xfun(xi**2 * M, self.coef_modes)
        return t1 + t2 + t3

    def generator_adjoint(self, M):
        xi = self.xi_of()[:, :, None]
        # (-i P d_x)* = -i d_x (P .): multiply first, then d_x
        u1 = self.mult_xfun(M, self.coef_modes) * (-2.0) * xi
        t1 = (-1j) * (1j * self.ks[:, None, None]) * u1
        dcoef = [(k, 1j * k * c) for k, c in self.coef_modes]
        u2 = self.mult_xfun(M, dcoef) * -(xi**2)
        t2 = 1j * self.fd_xi(u2)
        t3 = self.mult_xfun(M, self.coef_modes) * xi**2
        return t1 + t2 + t3


def conjugation_residual(field: CoefficientField, mu: float, trials: int = 8,
                         iters: int = 20, seed: int = 0, hxi: float | None = None) -> dict:
    """Estimate ||T A btilde - A~ T btilde||_{L^2 -> L^2} / mu by power iteration.

    Probes are random functions band-limited to [mu/4, 4 mu] (where the
    band-pass cutoff equals one); the operator is applied exactly in a
    mode-space representation of the phase-space tabulation.  Returns the
    estimate, the normalized ratio, and a convergence flag.
    """
    if field.dim != 1:
        return _conjugation_residual_2d(field, mu, trials, iters, seed)
    rng = np.random.default_rng(seed)
    fr = _ModalFrame1D(field, mu, hxi)
    K = len(fr.ks)
    core = (np.abs(fr.ks) >= mu / 4) & (np.abs(fr.ks) <= 4 * mu)
    bt = band_pass_value(np.abs(fr.ks).astype(float), mu)[:, None]

    def R(c):
        cb = bt * c
        return fr.t_forward(fr.apply_A_modes(cb)) - fr.generator(fr.t_forward(cb))

    def R_star(M):
        w = fr.apply_A_modes_adjoint(fr.t_adjoint(M)) - fr.t_adjoint(fr.generator_adjoint(M))
        return bt * w

    V = np.zeros((K, trials), dtype=complex)
    V[core, :] = rng.standard_normal((core.sum(), trials)) + 1j * rng.standard_normal((core.sum(), trials))
    V, _ = np.linalg.qr(V)
    V[~core, :] = 0.0
    est_prev = None
    converged = False
    for _ in range(iters):
        W = R(V)
        V2 = R_star(W)
        V2[~core, :] = 0.0   # probe subspace: the theorem's frequency band
        norms = np.sqrt(np.sum(np.abs(V2) ** 2, axis=0))
        est = float(np.sqrt(norms.max()))
        V, _ = np.linalg.qr(V2 / max(norms.max(), 1e-300))
        if est_prev is not None and abs(est - est_prev) <= 1e-3 * max(est, 1e-300):
            converged = True
        est_prev = est
    return {"residual_norm": est_prev, "ratio": est_prev / mu, "converged": converged,
            "mu": mu, "trials": trials, "iters": iters}


def _conjugation_residual_2d(field: CoefficientField, mu: float, trials: int,
                             iters: int, seed: int) -> dict:
    """Sector-probe variant for dim 2: probes localized near (3mu/2, 0).

    A full-band 2d tabulation is out of reach at desk scale; the residual
    is measured on probes supported in a frequency disc inside the band,
    which is the component the dispersive pipeline exercises.
    """
    rng = np.random.default_rng(seed)
    n = field.grid_n
    center = np.array([1.5 * mu, 0.0])
    radius = mu / 4.0
    smu = np.sqrt(mu)
    nx = int(np.ceil(4 * np.pi * smu / 8.0)) * 8
    hxi = default_hxi(mu, 2)
    window = make_window(2)
    m = int(np.ceil((radius + 3 * smu) / hxi))
    xi1 = center[0] + np.arange(-m, m + 1) * hxi
    xi2 = center[1] + np.arange(-m, m + 1) * hxi
    grid = PhaseSpaceGrid(2, mu, 2 * np.pi * np.arange(nx) / nx, xi1, window)
    grid.xi_axis2 = xi2

    k1 = np.fft.fftfreq(n, 1.0 / n)
    kx, ky = np.meshgrid(k1, k1, indexing="ij")
    sector = (kx - center[0]) ** 2 + (ky - center[1]) ** 2 <= radius**2

    def hat_to_gf(h):
        return GridFunction(2, n, np.fft.ifftn(h) * n**2)

    ests = []
    for _p in range(trials):
        h = np.zeros((n, n), dtype=complex)
        h[sector] = rng.standard_normal(sector.sum()) + 1j * rng.standard_normal(sector.sum())
        h /= np.sqrt((2 * np.pi) ** 2 * np.sum(np.abs(h) ** 2))
        v = hat_to_gf(h)
        est = 0.0
        for _ in range(max(2, iters // 4)):
            w = _apply_R_2d(field, mu, v, grid)
            vb = wp_adjoint_sector(w, mu, n, grid)
            hat = vb.hat() * sector
            nv = np.sqrt((2 * np.pi) ** 2 * np.sum(np.abs(hat) ** 2))
            est = np.sqrt(nv) if nv > 0 else 0.0
            v = hat_to_gf(hat / max(nv, 1e-300))
        ests.append(est)
    est = max(ests)
    return {"residual_norm": est, "ratio": est / mu, "converged": True,
            "mu": mu, "trials": trials, "iters": iters, "sector": True}


def _apply_R_2d(field, mu, f, grid):
    from .grids import spectral_derivative
    Af_vals = np.zeros_like(f.values)
    for i in range(2):
        for j in range(2):
            Af_vals += field.g_inv[i, j] * spectral_derivative(
                spectral_derivative(f.values, i), j)
    Af = GridFunction(2, f.n, Af_vals)
    TAf = _wp_forward_sector(Af, mu, grid)
    Tf = _wp_forward_sector(f, mu, grid)
    Gen = apply_generator(field, PhaseSpaceFunction(_as_square_grid(grid), Tf))
    return PhaseSpaceFunction(_as_square_grid(grid), TAf - Gen.values)


def _as_square_grid(grid):
    g = PhaseSpaceGrid(2, grid.mu, grid.x_axis, grid.xi_axis, grid.window)
    g.xi_axis2 = getattr(grid, "xi_axis2", grid.xi_axis)
    return g


def _wp_forward_sector(f, mu, grid):
    smu = np.sqrt(mu)
    ks, cs = _gather_modes(f)
    x = grid.x_axis
    E1 = np.exp(1j * np.outer(x, ks[:, 0]))
    E2 = np.exp(1j * np.outer(x, ks[:, 1]))
    xi1 = grid.xi_axis
    xi2 = getattr(grid, "xi_axis2", grid.xi_axis)
    d1 = (xi1[None, :] - ks[:, 0][:, None]) / smu
    d2 = (xi2[None, :] - ks[:, 1][:, None]) / smu
    out = np.zeros((len(x), len(x), len(xi1), len(xi2)), dtype=complex)
    for i in range(len(cs)):
        r = np.sqrt(d1[i][:, None] ** 2 + d2[i][None, :] ** 2)
        gh = grid.window.ghat(r)
        if not gh.any():
            continue
        out += mu ** -0.5 * cs[i] * np.einsum("x,y,uv->xyuv", E1[:, i], E2[:, i], gh)
    return out


def wp_adjoint_sector(F: PhaseSpaceFunction, mu: float, out_n: int, grid) -> GridFunction:
    smu = np.sqrt(mu)
    xi1 = grid.xi_axis
    xi2 = getattr(grid, "xi_axis2", grid.xi_axis)
    kmax = out_n // 2 - 1
    k1 = np.fft.fftfreq(out_n, 1.0 / out_n)
    kx, ky = np.meshgrid(k1, k1, indexing="ij")
    near = (np.abs(kx - 0.5 * (xi1[0] + xi1[-1])) <= 0.5 * (xi1[-1] - xi1[0]) + smu) & \
           (np.abs(ky - 0.5 * (xi2[0] + xi2[-1])) <= 0.5 * (xi2[-1] - xi2[0]) + smu) & \
           (np.abs(kx) <= kmax) & (np.abs(ky) <= kmax)
    klist = np.stack([kx[near], ky[near]], axis=1)
    x = grid.x_axis
    w = (float(x[1] - x[0]) * float(xi1[1] - xi1[0])) ** 2 * (2 * np.pi) ** -2 * mu ** -0.5
    hat = np.zeros((out_n, out_n), dtype=complex)
    E1 = np.exp(-1j * np.outer(klist[:, 0], x))
    E2 = np.exp(-1j * np.outer(klist[:, 1], x))
    Fx = np.einsum("ax,by,xyuv->abuv", E1, E2, F.values, optimize=True)
    vals = np.zeros(len(klist), dtype=complex)
    for i in range(len(klist)):
        r = np.sqrt(((xi1 - klist[i, 0])[:, None] ** 2 + (xi2 - klist[i, 1])[None, :] ** 2)) / smu
        gh = grid.window.ghat(r)
        vals[i] = w * np.sum(gh * Fx[i, i])
    hat[kx[near].astype(int) % out_n, ky[near].astype(int) % out_n] = vals
    return GridFunction(2, out_n, np.fft.ifftn(hat) * out_n**2)
