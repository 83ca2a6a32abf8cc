"""Bicharacteristic flow of a(x,xi) = -g^{ij}(x) xi_i xi_j with variational equations.

Hamilton's equations

    dz/dt = d_xi a(z, zeta),   dzeta/dt = -d_x a(z, zeta)

are integrated with a classical fixed-step 4th-order scheme, jointly with
the linearized (Jacobian) flow and, on request, the running action
integral of sigma = a - xi . d_xi a.  Everything is vectorized over a
batch of seeds; a FlowPoint with leading batch dimensions doubles as the
flow field over a phase-space sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coeffield import CoefficientField
from .records import ExperimentRecord


@dataclass
class FlowPoint:
    """Flow state at time t: position, frequency, and the four Jacobian blocks.

    Arrays carry leading batch dimensions; Jacobian blocks are indexed
    J[..., a, b] = d (out_a) / d (in_b).
    """

    z: np.ndarray
    zeta: np.ndarray
    j_zz: np.ndarray
    j_zzeta: np.ndarray
    j_zetaz: np.ndarray
    j_zetazeta: np.ndarray
    t: float
    action: np.ndarray | None = None   # integral of sigma along the path
    dzeta_accum: np.ndarray | None = None  # integral of d^2_zeta a along the path

    def symplectic_residual(self) -> float:
        """Max-norm defect of d_zeta zeta_t . d_z z_t - d_zeta z_t . d_z zeta_t = I."""
        lhs = np.einsum("...ai,...aj->...ij", self.j_zetazeta, self.j_zz) \
            - np.einsum("...ai,...aj->...ij", self.j_zzeta, self.j_zetaz)
        eye = np.eye(self.z.shape[-1])
        return float(np.abs(lhs - eye).max())


def hamiltonian(field: CoefficientField, z: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """a(z, zeta) = -g^{ij}(z) zeta_i zeta_j."""
    g = field.metric_at(z)
    return -np.einsum("...ij,...i,...j->...", g, zeta, zeta)


def sigma_symbol(field: CoefficientField, z, zeta) -> np.ndarray:
    """sigma = a - xi . d_xi a = +g^{ij} zeta_i zeta_j (a is quadratic in zeta)."""
    return -hamiltonian(field, z, zeta)


def _rhs(field, z, zeta, with_jac, J=None):
    g, dg, d2g = field.metric_at(z.reshape(-1, z.shape[-1]), n_deriv=2)
    B = z.shape[:-1]
    n = z.shape[-1]
    g = g.reshape(B + (n, n))
    dg = dg.reshape(B + (n, n, n))
    d2g = d2g.reshape(B + (n, n, n, n))
    vz = -2.0 * np.einsum("...ij,...j->...i", g, zeta)
    vzeta = np.einsum("...aij,...i,...j->...a", dg, zeta, zeta)
    if not with_jac:
        return vz, vzeta, None
    # linearization blocks: d(vz)/dz, d(vz)/dzeta, d(vzeta)/dz, d(vzeta)/dzeta
    a11 = -2.0 * np.einsum("...bij,...j->...ib", dg, zeta)
    a12 = -2.0 * g
    a21 = np.einsum("...abij,...i,...j->...ab", d2g, zeta, zeta)
    a22 = 2.0 * np.einsum("...abj,...j->...ab", dg, zeta)
    top = np.concatenate([a11, a12], axis=-1)
    bot = np.concatenate([a21, a22], axis=-1)
    M = np.concatenate([top, bot], axis=-2)     # (..., 2n, 2n)
    dJ = np.einsum("...ik,...kj->...ij", M, J)
    return vz, vzeta, dJ


def integrate_flow(field: CoefficientField, z0, zeta0, t: float, steps: int = 1024,
                   mu: float | None = None, with_jacobian: bool = True,
                   with_action: bool = False, with_dzeta_accum: bool = False,
                   snapshot_times=None, certify: bool = False):
    """Integrate state and variational equations to time t (negative t runs backward).

    steps is the fixed RK4 step count over |t|.  With snapshot_times, a
    list of FlowPoints at those times (which must be reachable on the step
    grid direction) is returned instead of the endpoint.  certify=True
    re-runs at half the step size and attaches the max state discrepancy
    as `step_halving_error` on the result.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    zeta0 = np.atleast_2d(np.asarray(zeta0, dtype=float))
    n = z0.shape[-1]
    if mu is not None:
        az = np.sqrt((zeta0**2).sum(axis=-1))
        if az.min() < mu / 8 - 1e-9 or az.max() > 8 * mu + 1e-9:
            raise ValueError("seed frequencies outside [mu/8, 8 mu]")
        if abs(t) > 2.0 / mu + 1e-12:
            raise ValueError("|t| beyond 2/mu")
    B = z0.shape[:-1]
    J = np.broadcast_to(np.eye(2 * n), B + (2 * n, 2 * n)).copy() if with_jacobian else None
    z, zeta = z0.copy(), zeta0.copy()
    act = np.zeros(B) if with_action else None
    dza = np.zeros(B + (n, n)) if with_dzeta_accum else None

    want = list(snapshot_times) if snapshot_times is not None else None
    out = []
    h = t / steps

    def pack_rhs(z, zeta, J):
        vz, vzeta, dJ = _rhs(field, z, zeta, with_jacobian, J)
        extras = []
        if with_action:
            extras.append(sigma_symbol(field, z, zeta))
        if with_dzeta_accum:
            g = field.metric_at(z.reshape(-1, n)).reshape(B + (n, n))
            extras.append(-2.0 * g)
        return vz, vzeta, dJ, extras

    def snap(tcur):
        return FlowPoint(z.copy(), zeta.copy(),
                         J[..., :n, :n].copy() if with_jacobian else None,
                         J[..., :n, n:].copy() if with_jacobian else None,
                         J[..., n:, :n].copy() if with_jacobian else None,
                         J[..., n:, n:].copy() if with_jacobian else None,
                         tcur,
                         act.copy() if with_action else None,
                         dza.copy() if with_dzeta_accum else None)

    for step in range(steps):
        tcur = step * h
        if want is not None:
            while want and abs(tcur - want[0]) <= abs(h) * 1e-9:
                out.append(snap(want.pop(0)))
        k1 = pack_rhs(z, zeta, J)
        k2 = pack_rhs(z + 0.5 * h * k1[0], zeta + 0.5 * h * k1[1],
                      None if J is None else J + 0.5 * h * k1[2])
        k3 = pack_rhs(z + 0.5 * h * k2[0], zeta + 0.5 * h * k2[1],
                      None if J is None else J + 0.5 * h * k2[2])
        k4 = pack_rhs(z + h * k3[0], zeta + h * k3[1],
                      None if J is None else J + h * k3[2])
        z = z + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        zeta = zeta + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if with_jacobian:
            J = J + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if with_action:
            act = act + (h / 6.0) * (k1[3][0] + 2 * k2[3][0] + 2 * k3[3][0] + k4[3][0])
        if with_dzeta_accum:
            idx = 1 if with_action else 0
            dza = dza + (h / 6.0) * (k1[3][idx] + 2 * k2[3][idx] + 2 * k3[3][idx] + k4[3][idx])
    if want is not None:
        while want and abs(t - want[0]) <= abs(h) * 1e-9 + 1e-300:
            out.append(snap(want.pop(0)))
        if want:
            raise ValueError(f"snapshot times {want} not on the step grid")
        return out
    result = snap(t)
    if certify:
        fine = integrate_flow(field, z0, zeta0, t, 2 * steps, None, with_jacobian,
                              with_action, with_dzeta_accum)
        err = max(float(np.abs(fine.z - result.z).max()),
                  float(np.abs(fine.zeta - result.zeta).max()))
        result.step_halving_error = err
    return result


def _sample_seeds(rng, count, dim, mu):
    z = rng.uniform(0, 2 * np.pi, size=(count, dim))
    az = np.exp(rng.uniform(np.log(mu / 4), np.log(4 * mu), size=count))
    if dim == 1:
        sgn = rng.choice([-1.0, 1.0], size=count)
        zeta = (az * sgn)[:, None]
    else:
        th = rng.uniform(0, 2 * np.pi, size=count)
        zeta = np.stack([az * np.cos(th), az * np.sin(th)], axis=1)
    return z, zeta


def jacobian_bounds_report(field: CoefficientField, mu: float, samples: int = 24,
                           seed: int = 0, steps: int = 512) -> ExperimentRecord:
    """Maxima of the first- and second-derivative flow ratios over random seeds.

    First-order ratios compare the Jacobian blocks against mu t, t, mu^2 t
    and mu t; the accumulated-Hessian ratio uses mu t^2; order-two ratios
    (by finite differences over seed points) are measured against the
    envelope mu^{2-k} t <mu^{3/2} t>^{j+k-1}.
    """
    rng = np.random.default_rng(seed)
    n = field.dim
    z, zeta = _sample_seeds(rng, samples, n, mu)
    eye = np.eye(n)
    ratios = {key: 0.0 for key in
              ["dz_z/mu_t", "dzeta_z/t", "dz_zeta/mu2_t", "dzeta_zeta/mu_t", "hess_accum/mu_t2",
               "jk20/env", "jk11/env", "jk02/env"]}
    for frac in (0.25, 0.5, 1.0):
        t = frac / mu
        fp = integrate_flow(field, z, zeta, t, max(16, int(steps * frac)),
                            with_jacobian=True, with_dzeta_accum=True)
        ratios["dz_z/mu_t"] = max(ratios["dz_z/mu_t"], float(np.abs(fp.j_zz - eye).max() / (mu * t)))
        ratios["dzeta_z/t"] = max(ratios["dzeta_z/t"], float(np.abs(fp.j_zzeta).max() / t))
        ratios["dz_zeta/mu2_t"] = max(ratios["dz_zeta/mu2_t"], float(np.abs(fp.j_zetaz).max() / (mu**2 * t)))
        ratios["dzeta_zeta/mu_t"] = max(ratios["dzeta_zeta/mu_t"], float(np.abs(fp.j_zetazeta - eye).max() / (mu * t)))
        ratios["hess_accum/mu_t2"] = max(ratios["hess_accum/mu_t2"],
                                         float(np.abs(fp.j_zzeta - fp.dzeta_accum).max() / (mu * t**2)))
        # second derivatives of the flow by central differences of the Jacobians
        bracket = 1.0 + mu**1.5 * t
        for (j, k), key in (((2, 0), "jk20/env"), ((1, 1), "jk11/env"), ((0, 2), "jk02/env")):
            env_z = mu ** (1 - k) * t * bracket ** (j + k - 1)   # mu |d^j d^k z| envelope
            env_zeta = mu ** (2 - k) * t * bracket ** (j + k - 1)
            dz_step = 1e-3
            dzeta_step = 1e-3 * mu
            for axis in range(n):
                if j > 0:
                    dzp = np.zeros_like(z); dzp[:, axis] = dz_step
                    fp_p = integrate_flow(field, z + dzp, zeta, t, max(16, int(steps * frac)))
                    fp_m = integrate_flow(field, z - dzp, zeta, t, max(16, int(steps * frac)))
                    dJz = (np.abs(fp_p.j_zz - fp_m.j_zz).max() if j == 2 else
                           np.abs(fp_p.j_zzeta - fp_m.j_zzeta).max()) / (2 * dz_step)
                    dJzeta = (np.abs(fp_p.j_zetaz - fp_m.j_zetaz).max() if j == 2 else
                              np.abs(fp_p.j_zetazeta - fp_m.j_zetazeta).max()) / (2 * dz_step)
                    if j == 2 or (j == 1 and k == 1):
                        ratios[key] = max(ratios[key], float(dJz / env_z), float(dJzeta / env_zeta))
                if k == 2:
                    dzp = np.zeros_like(zeta); dzp[:, axis] = dzeta_step
                    fp_p = integrate_flow(field, z, zeta + dzp, t, max(16, int(steps * frac)))
                    fp_m = integrate_flow(field, z, zeta - dzp, t, max(16, int(steps * frac)))
                    dJz = np.abs(fp_p.j_zzeta - fp_m.j_zzeta).max() / (2 * dzeta_step)
                    dJzeta = np.abs(fp_p.j_zetazeta - fp_m.j_zetazeta).max() / (2 * dzeta_step)
                    ratios[key] = max(ratios[key], float(dJz / env_z), float(dJzeta / env_zeta))
    rec = ExperimentRecord("jacobian_bounds", {"mu": mu, "samples": samples, "seed": seed})
    rec.scalars.update(ratios)
    return rec


def rescaling_check(field: CoefficientField, mu: float, samples: int = 10,
                    seed: int = 0, t: float | None = None, steps: int = 1024) -> ExperimentRecord:
    """Exact quadratic-homogeneity identity of the flow, integrated both ways.

    Compares (z_t, zeta_t)(z, zeta) with (z_{mu t}(z, zeta/mu), mu zeta_{mu t}(z, zeta/mu));
    the reported discrepancy max(|dz|, |dzeta|/mu) is integrator error only.
    """
    rng = np.random.default_rng(seed)
    z, zeta = _sample_seeds(rng, samples, field.dim, mu)
    t = t if t is not None else 1.0 / mu
    lhs = integrate_flow(field, z, zeta, t, steps, with_jacobian=False)
    rhs = integrate_flow(field, z, zeta / mu, mu * t, steps, with_jacobian=False)
    disc = max(float(np.abs(lhs.z - rhs.z).max()),
               float(np.abs(lhs.zeta - mu * rhs.zeta).max()) / mu)
    rec = ExperimentRecord("rescaling_check", {"mu": mu, "samples": samples, "t": t, "seed": seed})
    rec.scalars["discrepancy"] = disc
    return rec


def trajectory_rows(field: CoefficientField, z0, zeta0, t: float, steps: int,
                    n_snap: int = 17) -> list[dict]:
    """CSV-ready trajectory dump: t, state, Jacobian entries, symplectic residual."""
    times = np.linspace(0.0, t, n_snap)
    snaps = integrate_flow(field, z0, zeta0, t, steps, snapshot_times=list(times))
    rows = []
    for fp in snaps:
        row = {"t": fp.t}
        for a in range(field.dim):
            row[f"z{a+1}"] = float(fp.z[0, a])
            row[f"zeta{a+1}"] = float(fp.zeta[0, a])
        for name, block in (("Jzz", fp.j_zz), ("Jzzeta", fp.j_zzeta),
                            ("Jzetaz", fp.j_zetaz), ("Jzetazeta", fp.j_zetazeta)):
            for a in range(field.dim):
                for b in range(field.dim):
                    row[f"{name}{a+1}{b+1}"] = float(block[0, a, b])
        row["symplectic_residual"] = fp.symplectic_residual()
        rows.append(row)
    return rows
