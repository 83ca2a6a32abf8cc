"""Divergence-form operator coefficients: assembly, doubling, regularization, rescaling.

A CoefficientField holds the metric g^{ij}, density rho and optional drift
b^i of the operator

    P f = rho^{-1} sum_ij d_i ( rho g^{ij} d_j f )

on the torus, sampled on a uniform grid.  Fields are immutable after
construction; every operation returns a new field.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .grids import GridFunction, lattice_norms, spectral_derivative


@dataclass
class CoefficientField:
    dim: int
    grid_n: int
    g_inv: np.ndarray          # (dim, dim, *grid), real, symmetric
    rho: np.ndarray            # (*grid), positive
    b_vec: np.ndarray | None = None   # (dim, *grid); stored, excluded from the flow
    lip_bound: float = 0.0     # recorded deviation c0
    freq_support: float = np.inf   # absolute frequency radius; modes >= this vanish
    freq_scale: float = 1.0    # fundamental frequency (1.0 on the 2*pi torus)
    sup_deviation: dict | None = dc_field(default=None, compare=False)
    deriv_constants: list | None = dc_field(default=None, compare=False)
    _modes: dict = dc_field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.g_inv = np.asarray(self.g_inv, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        shape = (self.grid_n,) * self.dim
        if self.g_inv.shape != (self.dim, self.dim) + shape:
            raise ValueError(f"g_inv shape {self.g_inv.shape}")
        if self.rho.shape != shape:
            raise ValueError(f"rho shape {self.rho.shape}")
        self.validate()

    def validate(self):
        for i in range(self.dim):
            for j in range(i + 1, self.dim):
                if not np.array_equal(self.g_inv[i, j], self.g_inv[j, i]):
                    raise ValueError("g_inv not symmetric")
        floor = 1.0 - 2.0 * self.lip_bound
        if floor <= 0:
            raise ValueError("lip_bound too large for ellipticity")
        if self.min_ellipticity() < floor - 1e-12:
            raise ValueError(f"ellipticity {self.min_ellipticity():.6f} below {floor:.6f}")
        if self.rho.min() < floor - 1e-12:
            raise ValueError("density below ellipticity floor")
        if np.isfinite(self.freq_support):
            norms = lattice_norms(self.grid_n, self.dim) * self.freq_scale
            outside = norms >= self.freq_support
            for arr in self._all_entries():
                hat = np.fft.fftn(arr) / self.grid_n**self.dim
                bad = np.abs(hat[outside])
                if bad.size and bad.max() > 1e-12 * max(np.abs(hat).max(), 1e-300):
                    raise ValueError("Fourier support exceeds declared freq_support")

    def _all_entries(self):
        ents = [self.g_inv[i, j] for i in range(self.dim) for j in range(i, self.dim)]
        ents.append(self.rho)
        if self.b_vec is not None:
            ents.extend(self.b_vec[i] for i in range(self.dim))
        return ents

    def min_ellipticity(self) -> float:
        """Smallest eigenvalue of (g^{ij}) over the grid."""
        if self.dim == 1:
            return float(self.g_inv[0, 0].min())
        a, b, d = self.g_inv[0, 0], self.g_inv[0, 1], self.g_inv[1, 1]
        tr = a + d
        disc = np.sqrt((a - d) ** 2 + 4 * b**2)
        return float((0.5 * (tr - disc)).min())

    @property
    def is_flat(self) -> bool:
        eye = np.eye(self.dim)
        for i in range(self.dim):
            for j in range(self.dim):
                if np.abs(self.g_inv[i, j] - eye[i, j]).max() > 0:
                    return False
        return bool(np.abs(self.rho - 1.0).max() == 0)

    # --- exact off-grid evaluation (band-limited fields only) ---

    def _mode_table(self):
        """Union mode set and per-entry coefficients for trig-series evaluation."""
        if "freqs" in self._modes:
            return self._modes
        if not np.isfinite(self.freq_support):
            raise ValueError("off-grid evaluation needs a band-limited field")
        n, d = self.grid_n, self.dim
        k1 = np.fft.fftfreq(n, 1.0 / n)
        if d == 1:
            kvecs = k1[:, None]
        else:
            kx, ky = np.meshgrid(k1, k1, indexing="ij")
            kvecs = np.stack([kx.ravel(), ky.ravel()], axis=1)
        hats = []
        for i in range(d):
            for j in range(d):
                hats.append(np.fft.fftn(self.g_inv[i, j]).ravel() / n**d)
        hats = np.array(hats)
        live = np.abs(hats).max(axis=0) > 1e-15 * max(np.abs(hats).max(), 1e-300)
        self._modes["freqs"] = kvecs[live] * self.freq_scale      # (M, dim)
        self._modes["g_coef"] = hats[:, live].reshape(d, d, -1)   # (dim, dim, M)
        return self._modes

    def metric_at(self, pts: np.ndarray, n_deriv: int = 0):
        """Evaluate g^{ij} (and derivatives) at arbitrary points.

        pts: (B, dim).  Returns g (B,dim,dim); with n_deriv>=1 also
        dg (B,dim,dim,dim) with dg[:,l,i,j] = d_l g^{ij}; with n_deriv>=2
        also d2g (B,dim,dim,dim,dim), d2g[:,l,m,i,j] = d_l d_m g^{ij}.
        """
        tab = self._mode_table()
        F, C = tab["freqs"], tab["g_coef"]
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        E = np.exp(1j * pts @ F.T)                      # (B, M)
        g = np.real(np.einsum("bm,ijm->bij", E, C))
        if n_deriv == 0:
            return g
        dg = np.real(np.einsum("bm,ml,ijm->blij", E, 1j * F, C))
        if n_deriv == 1:
            return g, dg
        d2g = np.real(np.einsum("bm,ml,mk,ijm->blkij", E, 1j * F, 1j * F, C))
        return g, dg, d2g


def assemble_operator(field: CoefficientField, f: GridFunction) -> GridFunction:
    """Apply P = rho^{-1} d_i(rho g^{ij} d_j .) by spectral differentiation."""
    if f.dim != field.dim or f.n != field.grid_n or f.freq_scale != field.freq_scale:
        raise ValueError("grid mismatch between field and function")
    d = field.dim
    out = np.zeros_like(f.values)
    for j in range(d):
        dj = spectral_derivative(f.values, j, field.freq_scale)
        for i in range(d):
            out += spectral_derivative(field.rho * field.g_inv[i, j] * dj, i, field.freq_scale)
    return GridFunction(d, f.n, out / field.rho, field.freq_scale)


# --- doubling across the boundary x_n in {0, pi} ---

@dataclass
class HalfField:
    """Coefficients sampled on x_n in [0, pi] (m+1 inclusive samples, normal axis last).

    For dim=2 the tangential axis carries 2m points so that the doubled
    field lands on a square torus grid.
    """

    dim: int
    m: int
    g_inv: np.ndarray
    rho: np.ndarray
    lip_bound: float = 0.0

    def __post_init__(self):
        shape = (self.m + 1,) if self.dim == 1 else (2 * self.m, self.m + 1)
        if self.g_inv.shape != (self.dim, self.dim) + shape:
            raise ValueError("half-field g_inv shape")
        if self.rho.shape != shape:
            raise ValueError("half-field rho shape")


def double_metric(half: HalfField) -> CoefficientField:
    """Even reflection of the coefficients about x_n = 0 and x_n = pi."""
    if half.dim == 2 and np.abs(half.g_inv[0, 1]).max() > 0:
        raise ValueError("boundary-normal form requires g^{n i} = 0 for i != n")
    if half.rho.min() <= 0:
        raise ValueError("negative density input")
    m = half.m
    fold = np.minimum(np.arange(2 * m), 2 * m - np.arange(2 * m))
    g = half.g_inv[..., fold]
    rho = half.rho[..., fold]
    return CoefficientField(half.dim, 2 * m, g, rho, None, half.lip_bound, np.inf)


def restrict_to_half(field: CoefficientField) -> HalfField:
    """Restrict a doubled field back to x_n in [0, pi]."""
    m = field.grid_n // 2
    sl = slice(0, m + 1)
    return HalfField(field.dim, m, field.g_inv[..., sl].copy(), field.rho[..., sl].copy(),
                     field.lip_bound)


# --- frequency truncation and rescaling ---

def regularize(field: CoefficientField, lam: float) -> CoefficientField:
    """Zero all coefficient modes at lattice radius >= lam^(2/3).

    The sup-norm deviation per entry is recorded on the result
    (`sup_deviation`), and the recorded Lipschitz bound is enlarged if the
    truncation dented the ellipticity floor.
    """
    if lam < 1:
        raise ValueError("lambda must be >= 1")
    if field.freq_scale != 1.0:
        raise ValueError("regularize expects an unrescaled field")
    cutoff = lam ** (2.0 / 3.0)
    norms = lattice_norms(field.grid_n, field.dim)
    keep = norms < cutoff
    dev = {}

    def trunc(arr, name):
        hat = np.fft.fftn(arr) / field.grid_n**field.dim
        new = np.real(np.fft.ifftn(hat * keep) * field.grid_n**field.dim)
        dev[name] = float(np.abs(new - arr).max())
        return new

    d = field.dim
    g = np.empty_like(field.g_inv)
    for i in range(d):
        for j in range(i, d):
            g[i, j] = g[j, i] = trunc(field.g_inv[i, j], f"g{i+1}{j+1}")
    rho = trunc(field.rho, "rho")
    b = None
    if field.b_vec is not None:
        b = np.stack([trunc(field.b_vec[i], f"b{i+1}") for i in range(d)])
    min_e = min(_min_eig(g, d), rho.min())
    c0 = max(field.lip_bound, (1.0 - min_e) / 2.0 + 1e-14) if min_e < 1.0 else field.lip_bound
    out = CoefficientField(d, field.grid_n, g, rho, b, c0, cutoff)
    out.sup_deviation = dev
    return out


def _min_eig(g, d):
    if d == 1:
        return float(g[0, 0].min())
    a, b, dd = g[0, 0], g[0, 1], g[1, 1]
    return float((0.5 * ((a + dd) - np.sqrt((a - dd) ** 2 + 4 * b**2))).min())


def rescale_to_unit(field: CoefficientField, lam: float):
    """Pass to x -> g_lam(lam^{-1/3} x); returns (field, mu) with mu = lam^(2/3).

    Grid samples are unchanged (the stretched grid lands on the same
    sample values); only the fundamental frequency shrinks by lam^(1/3).
    Requires lam^(1/3) to be an integer so the rescaled coefficients stay
    periodic, and a field already regularized at scale lam.  Derivative
    bound constants C_alpha with
    |d^alpha g| <= C_alpha mu^{max(0,|alpha|-2)/2}, |alpha| <= 4,
    are measured spectrally and attached as `deriv_constants`.
    """
    s = round(lam ** (1.0 / 3.0))
    if abs(s**3 - lam) > 1e-9 * lam:
        raise ValueError("lambda must have an integer cube root for an exact rescaling")
    if not np.isfinite(field.freq_support) or field.freq_support > lam ** (2.0 / 3.0) * (1 + 1e-12):
        raise ValueError("unregularized input: regularize at this lambda first")
    mu = float(s * s)
    out = CoefficientField(field.dim, field.grid_n, field.g_inv.copy(), field.rho.copy(),
                           None if field.b_vec is None else field.b_vec.copy(),
                           field.lip_bound, field.freq_support / s, field.freq_scale / s)
    out.deriv_constants = derivative_constants(out, mu)
    return out, mu


def _refined(arr, n, dim, factor=4):
    hat = np.fft.fftn(arr) / n**dim
    big = np.zeros((factor * n,) * dim, dtype=complex)
    k = np.fft.fftfreq(n, 1.0 / n).astype(int)
    if dim == 1:
        big[k] = hat
    else:
        big[np.ix_(k, k)] = hat
    return big, factor * n


def derivative_constants(field: CoefficientField, mu: float, max_order: int = 4) -> list:
    """Measure sup |d^alpha coeff| / mu^{max(0,|alpha|-2)/2} on a refined grid."""
    d = field.dim
    n = field.grid_n
    if d == 1:
        alphas = [(a,) for a in range(max_order + 1)]
    else:
        alphas = [(a, b) for a in range(max_order + 1) for b in range(max_order + 1 - a)]
    k = np.fft.fftfreq(n, 1.0 / n) * field.freq_scale
    rows = []
    entries = [field.g_inv[i, j] for i in range(d) for j in range(i, d)] + [field.rho]
    for alpha in alphas:
        worst = 0.0
        for arr in entries:
            hat_big, nbig = _refined(arr, n, d)
            mult = np.ones((n,) * d, dtype=complex)
            for ax, a in enumerate(alpha):
                shape = [1] * d
                shape[ax] = n
                mult = mult * (1j * k.reshape(shape)) ** a
            hat = np.fft.fftn(arr) / n**d * mult
            big = np.zeros((nbig,) * d, dtype=complex)
            ki = np.fft.fftfreq(n, 1.0 / n).astype(int)
            if d == 1:
                big[ki] = hat
            else:
                big[np.ix_(ki, ki)] = hat
            vals = np.fft.ifftn(big) * nbig**d
            worst = max(worst, float(np.abs(vals).max()))
        env = mu ** (0.5 * max(0, sum(alpha) - 2))
        rows.append({"alpha": "".join(str(a) for a in alpha), "mu": mu, "constant": worst / env})
    return rows


# --- presets ---

def _band_limit_grid(vals: np.ndarray, dim: int, radius_keep: float) -> np.ndarray:
    n = vals.shape[0]
    norms = lattice_norms(n, dim)
    hat = np.fft.fftn(vals) / n**dim
    return np.real(np.fft.ifftn(hat * (norms <= radius_keep)) * n**dim)


def _c2_norm(vals: np.ndarray, dim: int) -> float:
    """max of sup|w|, sup|d w|, sup|d^2 w| measured spectrally on a refined grid."""
    n = vals.shape[0]
    out = 0.0
    orders = [()] + [(i,) for i in range(dim)] + [(i, j) for i in range(dim) for j in range(dim)]
    for order in orders:
        cur = vals.astype(complex)
        for ax in order:
            cur = spectral_derivative(cur, ax)
        big, nbig = _refined(np.real(cur), n, dim)
        out = max(out, float(np.abs(np.fft.ifftn(big) * nbig**dim).max()))
    return out


def flat_field(dim: int = 1, grid_n: int | None = None) -> CoefficientField:
    n = grid_n or (256 if dim == 1 else 64)
    g = np.zeros((dim, dim) + (n,) * dim)
    for i in range(dim):
        g[i, i] = 1.0
    return CoefficientField(dim, n, g, np.ones((n,) * dim), None, 0.0, 1.0)


def perturbed_field(mu: float, dim: int = 1, c0: float = 0.05,
                    grid_n: int | None = None) -> CoefficientField:
    """Theorem-regime metric: ||g - delta||_C2 = c0, modes inside B_sqrt(mu).

    Profiles come from band-limited |sin| kinks (the doubled-metric
    signature), normalized per mu so the C^2 size stays fixed while higher
    derivatives grow like sqrt(mu), matching the rescaled-coefficient
    envelope.
    """
    n = grid_n or (256 if dim == 1 else 64)
    mmax = int(np.floor(np.sqrt(mu)))  # closed ball B_sqrt(mu) admits |k| = sqrt(mu)
    x = 2 * np.pi * np.arange(n) / n

    def shaped(raw):
        w = _band_limit_grid(raw, dim, mmax)
        w = w - w.mean()
        return w / _c2_norm(w, dim)

    if dim == 1:
        w1 = shaped(np.abs(np.sin(x)))
        v1 = shaped(np.abs(np.cos(x)))
        g = np.zeros((1, 1, n))
        g[0, 0] = 1.0 + c0 * w1
        rho = 1.0 + 0.8 * c0 * v1
    else:
        x1, x2 = np.meshgrid(x, x, indexing="ij")
        g = np.zeros((2, 2, n, n))
        g[0, 0] = 1.0 + c0 * shaped(np.abs(np.sin(x1)) * (1.0 + 0.3 * np.cos(x2)))
        g[1, 1] = 1.0 + c0 * shaped(np.abs(np.sin(x2)) * (1.0 + 0.3 * np.cos(x1)))
        rho = 1.0 + 0.8 * c0 * shaped(np.abs(np.sin(x1 + x2)))
    return CoefficientField(dim, n, g, rho, None, c0, mmax + 0.5)


# --- plain-text preset config ---

def parse_preset_config(text: str) -> dict:
    """Key/value preset format.

    Scalar lines: `name = ...`, `dim = 1`, `c0 = 0.05`, `gridn = 256`.
    Coefficient lines: `<entry> <k> <cos_amp> [<sin_amp>]` with entry in
    {g11, g12, g22, rho, b1, b2} and k an integer (dim=1) or `k1,k2`.
    """
    cfg = {"name": "custom", "dim": 1, "c0": 0.05, "gridn": None, "coeffs": []}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, val = (s.strip() for s in line.split("=", 1))
            if key == "name":
                cfg["name"] = val
            elif key == "dim":
                cfg["dim"] = int(val)
            elif key == "c0":
                cfg["c0"] = float(val)
            elif key == "gridn":
                cfg["gridn"] = int(val)
            else:
                raise ValueError(f"unknown config key {key!r}")
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ValueError(f"bad coefficient line {raw!r}")
        entry, kstr = parts[0], parts[1]
        cos_amp = float(parts[2])
        sin_amp = float(parts[3]) if len(parts) == 4 else 0.0
        k = tuple(int(s) for s in kstr.split(",")) if "," in kstr else (int(kstr),)
        cfg["coeffs"].append((entry, k, cos_amp, sin_amp))
    return cfg


def build_field_from_config(cfg: dict) -> CoefficientField:
    dim = cfg["dim"]
    n = cfg["gridn"] or (256 if dim == 1 else 64)
    x = 2 * np.pi * np.arange(n) / n
    grids = np.meshgrid(*([x] * dim), indexing="ij")

    funcs = {}
    kmax = 0.0
    for entry, k, ca, sa in cfg["coeffs"]:
        if len(k) != dim:
            raise ValueError(f"mode {k} has wrong dimension")
        phase = sum(ki * gi for ki, gi in zip(k, grids))
        funcs.setdefault(entry, np.zeros((n,) * dim))
        funcs[entry] += ca * np.cos(phase) + sa * np.sin(phase)
        kmax = max(kmax, float(np.hypot(*k) if dim == 2 else abs(k[0])))

    known = {f"g{i+1}{j+1}" for i in range(dim) for j in range(dim)} | {"rho"} \
        | {f"b{i+1}" for i in range(dim)}
    for name in funcs:
        if name not in known:
            raise ValueError(f"unknown entry {name}")
    # entries listed in the config are defined entirely by their lines
    # (constant terms come from k=0 cos lines); absent entries default to
    # the identity metric and unit density
    g = np.zeros((dim, dim) + (n,) * dim)
    for i in range(dim):
        g[i, i] = 1.0
    for name, vals in funcs.items():
        if name.startswith("g"):
            i, j = int(name[1]) - 1, int(name[2]) - 1
            g[i, j] = g[j, i] = vals
    rho = funcs.get("rho", np.ones((n,) * dim))
    b = None
    bnames = [f"b{i+1}" for i in range(dim)]
    if any(name in funcs for name in bnames):
        b = np.stack([funcs.get(name, np.zeros((n,) * dim)) for name in bnames])
    c0 = cfg["c0"]
    return CoefficientField(dim, n, g, rho, b, c0, kmax + 0.5)


def load_preset(name: str, mu: float = 32.0, dim: int = 1, c0: float = 0.05,
                grid_n: int | None = None) -> CoefficientField:
    """Built-in preset by name, or a config file path."""
    if name == "flat":
        return flat_field(dim, grid_n)
    if name == "perturbed":
        return perturbed_field(mu, dim, c0, grid_n)
    with open(name) as fh:
        return build_field_from_config(parse_preset_config(fh.read()))
