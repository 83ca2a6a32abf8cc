"""Dyadic Littlewood-Paley partitions, band-pass cutoffs, and frequency-cell partitions.

All cutoffs are built from the compactly supported exponential bump
exp(-1/(1-u^2)) turned into smooth steps and telescoped so that partition
sums are exact (to rounding) at every sampled frequency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import GridFunction, lattice_norms


def bump(u):
    """exp(-1/(1-u^2)) on |u|<1, zero outside."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    m = np.abs(u) < 1.0
    out[m] = np.exp(-1.0 / (1.0 - u[m] ** 2))
    return out


def smooth_step(s):
    """C-infinity step: 0 for s<=0, 1 for s>=1."""
    s = np.asarray(s, dtype=float)
    lo = s <= 0.0
    hi = s >= 1.0
    mid = ~lo & ~hi
    out = np.zeros_like(s)
    out[hi] = 1.0
    sm = s[mid]
    a = np.exp(-1.0 / sm)
    b = np.exp(-1.0 / (1.0 - sm))
    out[mid] = a / (a + b)
    return out


def radial_chi(r):
    """Smooth radial indicator: 1 on r<=1, 0 on r>=2."""
    return 1.0 - smooth_step(np.asarray(r, dtype=float) - 1.0)


@dataclass
class FrequencyCutoff:
    """A smooth frequency cutoff with its tabulated profile.

    kind is one of 'dyadicBand', 'bandPass', 'cell'; params carries
    (j,), (mu,) or (t, m) respectively.  Calling the object evaluates the
    cutoff at frequency points (scalar |xi| handling depends on kind:
    dyadic/band-pass cutoffs are radial, cells take the frequency vector).
    """

    kind: str
    params: tuple
    profile_r: np.ndarray
    profile_vals: np.ndarray

    def __call__(self, xi):
        if self.kind == "dyadicBand":
            (j,) = self.params
            return dyadic_band_value(np.asarray(xi, dtype=float), j)
        if self.kind == "bandPass":
            (mu,) = self.params
            return band_pass_value(np.asarray(xi, dtype=float), mu)
        if self.kind == "cell":
            t, m = self.params
            return cell_value(xi, t, m)
        raise ValueError(self.kind)


def dyadic_band_value(r, j: int):
    """beta_j(|xi|): beta_0 = chi, beta_j = chi(r/2^j) - chi(r/2^{j-1})."""
    r = np.asarray(r, dtype=float)
    if j == 0:
        return radial_chi(r)
    return radial_chi(r / 2.0**j) - radial_chi(r / 2.0 ** (j - 1))


def dyadic_band(j: int) -> FrequencyCutoff:
    rr = np.linspace(0.0, 2.0 ** (j + 1) + 1.0, 2049)
    return FrequencyCutoff("dyadicBand", (j,), rr, dyadic_band_value(rr, j))


def band_pass_value(r, mu: float):
    """beta~_mu(|xi|): 1 on [mu/4, 4mu], 0 outside [mu/8, 8mu]."""
    r = np.asarray(r, dtype=float)
    up = smooth_step((r - mu / 8.0) / (mu / 4.0 - mu / 8.0))
    dn = 1.0 - smooth_step((r - 4.0 * mu) / (8.0 * mu - 4.0 * mu))
    return up * dn


def band_pass(mu: float) -> FrequencyCutoff:
    rr = np.linspace(0.0, 9.0 * mu, 4097)
    return FrequencyCutoff("bandPass", (mu,), rr, band_pass_value(rr, mu))


def n_bands(kmax: float) -> int:
    """Number of dyadic bands needed to cover lattice radius kmax."""
    j = 0
    while 2.0**j < kmax:
        j += 1
    return j + 1


def lp_partition(f: GridFunction) -> list[GridFunction]:
    """Split f into dyadic frequency bands; the bands sum back to f exactly."""
    norms = lattice_norms(f.n, f.dim)
    hat = f.hat()
    jmax = n_bands(norms.max())
    out = []
    for j in range(jmax + 1):
        bj = dyadic_band_value(norms, j)
        vals = np.fft.ifftn(hat * bj) * f.n**f.dim
        out.append(GridFunction(f.dim, f.n, vals, f.freq_scale))
    return out


def band_project(f: GridFunction, mu: float) -> GridFunction:
    """Multiply the spectrum of f by beta~_mu."""
    norms = lattice_norms(f.n, f.dim) * f.freq_scale
    hat = f.hat() * band_pass_value(norms, mu)
    vals = np.fft.ifftn(hat) * f.n**f.dim
    return GridFunction(f.dim, f.n, vals, f.freq_scale)


# frequency cells phi_m(zeta) = phi(sqrt(t) zeta - m), unit-radius profile,
# normalized so that the integer translates sum to one

_CELL_HALO = 2


def _phi_1d(u):
    u = np.asarray(u, dtype=float)
    num = bump(u)
    den = np.zeros_like(u)
    base = np.floor(u)
    for off in range(-_CELL_HALO, _CELL_HALO + 1):
        den += bump(u - (base + off))
    return np.where(num > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)


def cell_value(xi, t: float, m):
    """phi_m at frequency points xi (shape (..., dim) or (...,) in 1d)."""
    rt = np.sqrt(t)
    xi = np.asarray(xi, dtype=float)
    if np.ndim(m) == 0:
        return _phi_1d(rt * xi - m)
    out = 1.0
    for a, ma in enumerate(m):
        out = out * _phi_1d(rt * xi[..., a] - ma)
    return out


def cell_range(t: float, window: tuple[float, float]) -> range:
    """Integer cell indices m (one axis) whose support meets the window."""
    rt = np.sqrt(t)
    lo = int(np.floor(rt * window[0])) - 1
    hi = int(np.ceil(rt * window[1])) + 1
    return range(lo, hi + 1)


def cell_partition(t: float, window, dim: int = 1) -> list[FrequencyCutoff]:
    """Cells of width ~ t^{-1/2} centered at t^{-1/2} m covering the window.

    window is (lo, hi) per axis (same for both axes when dim=2).  The
    returned family sums to one on the window.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    uu = np.linspace(-1.0, 1.0, 513)
    prof = _phi_1d(uu)
    cells = []
    r = cell_range(t, window)
    if dim == 1:
        for m in r:
            cells.append(FrequencyCutoff("cell", (t, m), uu, prof))
    else:
        for m1 in r:
            for m2 in r:
                cells.append(FrequencyCutoff("cell", (t, (m1, m2)), uu, prof))
    return cells
