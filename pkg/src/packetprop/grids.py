"""Complex-valued functions on uniform periodic grids with spectral access.

The spatial domain is the torus [0, L)^dim sampled at n points per axis.
The default period is L = 2*pi, in which case Fourier modes sit on the
integer lattice; a rescaled field may carry a smaller fundamental
frequency `freq_scale` = 2*pi/L.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def axis_points(n: int, freq_scale: float = 1.0) -> np.ndarray:
    """Grid points along one axis of the torus of circumference 2*pi/freq_scale."""
    return (2.0 * np.pi / freq_scale) * np.arange(n) / n


def lattice(n: int, dim: int) -> list[np.ndarray]:
    """Integer mode indices per axis in FFT order."""
    k = np.fft.fftfreq(n, 1.0 / n)
    return [k] * dim


def lattice_norms(n: int, dim: int) -> np.ndarray:
    """Euclidean lattice norm |k| on the full FFT grid, shape (n,)*dim."""
    k = np.fft.fftfreq(n, 1.0 / n)
    if dim == 1:
        return np.abs(k)
    kx, ky = np.meshgrid(k, k, indexing="ij")
    return np.sqrt(kx**2 + ky**2)


@dataclass
class GridFunction:
    """Function sampled on a uniform periodic grid.

    values has shape (n,)*dim; `freq_scale` is the fundamental frequency
    (1.0 on the standard 2*pi torus).
    """

    dim: int
    n: int
    values: np.ndarray
    freq_scale: float = 1.0
    _hat: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.n,) * self.dim:
            raise ValueError(f"values shape {self.values.shape} != {(self.n,) * self.dim}")

    @classmethod
    def from_modes(cls, dim: int, n: int, modes: dict, freq_scale: float = 1.0) -> "GridFunction":
        """Build from {k: coeff} with k an int (dim=1) or int tuple (dim=2)."""
        hat = np.zeros((n,) * dim, dtype=complex)
        for k, c in modes.items():
            idx = (int(k) % n,) if dim == 1 else tuple(int(ki) % n for ki in k)
            hat[idx] += c
        vals = np.fft.ifftn(hat) * n**dim
        return cls(dim, n, vals, freq_scale)

    @property
    def h(self) -> float:
        """Grid spacing per axis."""
        return 2.0 * np.pi / (self.freq_scale * self.n)

    def hat(self) -> np.ndarray:
        """Fourier coefficients: f(x) = sum_k hat[k] e^{i k freq_scale x}."""
        if self._hat is None:
            self._hat = np.fft.fftn(self.values) / self.n**self.dim
        return self._hat

    def norm(self, rho: np.ndarray | None = None) -> float:
        """Discrete L^2 norm, optionally weighted by a density rho."""
        w = np.abs(self.values) ** 2
        if rho is not None:
            w = w * rho
        return float(np.sqrt(self.h**self.dim * np.sum(w)))

    def inner(self, other: "GridFunction", rho: np.ndarray | None = None) -> complex:
        w = self.values * np.conj(other.values)
        if rho is not None:
            w = w * rho
        return complex(self.h**self.dim * np.sum(w))

    def band_radius(self, tol: float = 1e-13) -> float:
        """Largest lattice |k| carrying a coefficient above tol * max|coeff|."""
        hat = self.hat()
        mags = np.abs(hat)
        cut = tol * mags.max() if mags.max() > 0 else 0.0
        norms = lattice_norms(self.n, self.dim)
        live = norms[mags > cut]
        return float(live.max()) if live.size else 0.0

    def band_limited_to(self, radius: float, tol: float = 1e-12) -> bool:
        hat = self.hat()
        norms = lattice_norms(self.n, self.dim)
        outside = np.abs(hat[norms > radius])
        scale = np.abs(hat).max()
        return bool(outside.size == 0 or scale == 0 or outside.max() <= tol * scale)

    def derivative(self, axis: int) -> "GridFunction":
        """Spectral derivative along one axis (Nyquist mode zeroed)."""
        return GridFunction(self.dim, self.n, spectral_derivative(self.values, axis, self.freq_scale), self.freq_scale)


def _ik_axis(n: int, freq_scale: float) -> np.ndarray:
    k = np.fft.fftfreq(n, 1.0 / n)
    if n % 2 == 0:
        k = k.copy()
        k[n // 2] = 0.0  # odd-ball Nyquist mode breaks skew-adjointness
    return 1j * k * freq_scale


def spectral_derivative(values: np.ndarray, axis: int, freq_scale: float = 1.0) -> np.ndarray:
    n = values.shape[axis]
    ik = _ik_axis(n, freq_scale)
    shape = [1] * values.ndim
    shape[axis] = n
    return np.fft.ifftn(np.fft.fftn(values) * ik.reshape(shape))


def random_band_limited(dim: int, n: int, band: tuple[float, float], rng: np.random.Generator,
                        freq_scale: float = 1.0) -> GridFunction:
    """Random complex GridFunction with spectrum supported on band[0] <= |k| <= band[1]."""
    norms = lattice_norms(n, dim)
    mask = (norms >= band[0]) & (norms <= band[1])
    hat = np.zeros((n,) * dim, dtype=complex)
    m = int(mask.sum())
    if m == 0:
        raise ValueError("empty band on this grid")
    hat[mask] = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    vals = np.fft.ifftn(hat) * n**dim
    return GridFunction(dim, n, vals, freq_scale)
