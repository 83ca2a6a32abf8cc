"""Configuration-driven experiment runner.

Subcommands: verify, flow, kernel, dispersive, strichartz, modes.  Each
run writes per-experiment CSVs, plot-data series and a summary into the
output directory; the exit code is 0 iff every configured check passed.
Runs are deterministic under a fixed --seed (byte-identical outputs).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import coeffield, hamflow, lpdecomp, oracle, parametrix, wavepacket
from .grids import random_band_limited
from .records import ExperimentRecord, emit_report, write_plot_series

EXPERIMENTS = ("verify", "flow", "kernel", "dispersive", "strichartz", "modes")


@dataclass
class ExperimentConfig:
    experiment: str
    preset: str = "flat"
    dim: int = 1
    mu: float = 32.0
    lam: float | None = None
    tmin: float | None = None
    tmax: float | None = None
    tcount: int = 8
    p: float = 4.0
    q: float = 4.0
    seed: int = 0
    out: str = "out"
    extra: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.mu < 4:
            raise ValueError("mu must be >= 4")

    def tgrid(self) -> np.ndarray:
        lo = self.tmin if self.tmin is not None else self.mu**-2
        hi = self.tmax if self.tmax is not None else parametrix.EPS_TIME / self.mu
        return np.geomspace(lo, hi, self.tcount)

    def field(self) -> coeffield.CoefficientField:
        return coeffield.load_preset(self.preset, self.mu, self.dim)


def run_experiment(config: ExperimentConfig) -> list[ExperimentRecord]:
    return _DISPATCH[config.experiment](config)


def _run_verify(cfg: ExperimentConfig) -> list[ExperimentRecord]:
    rng = np.random.default_rng(cfg.seed)
    field = cfg.field()
    mu = cfg.mu
    rec = ExperimentRecord("verify", {"preset": cfg.preset, "mu": mu, "dim": cfg.dim,
                                      "seed": cfg.seed})
    n = 1 << int(np.ceil(np.log2(16 * mu)))
    f = random_band_limited(cfg.dim, min(n, 256 if cfg.dim == 2 else n), (mu / 4, 4 * mu), rng)
    F = wavepacket.wp_forward(f, mu) if cfg.dim == 1 else None
    if F is not None:
        iso = abs(F.norm() / f.norm() - 1.0)
        rec.add_check("isometry", iso <= 1e-6, iso, "<=1e-6")
        back = wavepacket.wp_adjoint(F, mu, f.n)
        inv = np.sqrt(np.sum(np.abs(back.values - f.values) ** 2)
                      / np.sum(np.abs(f.values) ** 2))
        rec.add_check("inversion", inv <= 1e-6, inv, "<=1e-6")
    z0 = rng.uniform(0, 2 * np.pi, (8, cfg.dim))
    zeta0 = rng.uniform(mu / 2, 2 * mu, (8, cfg.dim)) * rng.choice([-1, 1], (8, cfg.dim))
    fp = hamflow.integrate_flow(field, z0, zeta0, 1.0 / mu, 1024)
    sym = fp.symplectic_residual()
    rec.add_check("symplectic_identity", sym <= 1e-8, sym, "<=1e-8")
    back_fp = hamflow.integrate_flow(field, fp.z, fp.zeta, -1.0 / mu, 1024,
                                     with_jacobian=False)
    rt = max(float(np.abs(back_fp.z - z0).max()), float(np.abs(back_fp.zeta - zeta0).max() / mu))
    rec.add_check("round_trip", rt <= 1e-9, rt, "<=1e-9")
    resc = hamflow.rescaling_check(field, mu, samples=6, seed=cfg.seed)
    rec.add_check("rescaling_identity", resc.scalars["discrepancy"] <= 1e-8,
                  resc.scalars["discrepancy"], "<=1e-8")
    gf = random_band_limited(cfg.dim, 64, (0, 20), rng)
    parts = lpdecomp.lp_partition(gf)
    recon = sum(p.values for p in parts)
    lp_err = float(np.abs(recon - gf.values).max() / np.abs(gf.values).max())
    rec.add_check("lp_reconstruction", lp_err <= 1e-12, lp_err, "<=1e-12")
    win = wavepacket.make_window(cfg.dim)
    rr = np.arange(0.0, 80.0, 0.002)
    gv = win.g_phys(rr)
    if cfg.dim == 1:
        nrm = np.sqrt(2.0 * np.trapezoid(gv**2, rr))
    else:
        nrm = np.sqrt(2 * np.pi * np.trapezoid(gv**2 * rr, rr))
    win_err = abs(nrm - (2 * np.pi) ** (-cfg.dim / 2.0))
    rec.add_check("window_norm", win_err <= 1e-10, win_err, "<=1e-10")
    return [rec]


def _run_flow(cfg: ExperimentConfig) -> list[ExperimentRecord]:
    field = cfg.field()
    rep = hamflow.jacobian_bounds_report(field, cfg.mu, samples=16, seed=cfg.seed)
    resc = hamflow.rescaling_check(field, cfg.mu, samples=8, seed=cfg.seed)
    resc.add_check("rescaling_identity", resc.scalars["discrepancy"] <= 1e-8,
                   resc.scalars["discrepancy"], "<=1e-8")
    rng = np.random.default_rng(cfg.seed)
    z0 = rng.uniform(0, 2 * np.pi, (1, cfg.dim))
    zeta0 = np.full((1, cfg.dim), cfg.mu * 1.1 / np.sqrt(cfg.dim))
    traj = ExperimentRecord("trajectory", {"mu": cfg.mu, "preset": cfg.preset})
    traj.rows = hamflow.trajectory_rows(field, z0, zeta0, 1.0 / cfg.mu, 1024)
    return [rep, resc, traj]


def _run_kernel(cfg: ExperimentConfig) -> list[ExperimentRecord]:
    field = cfg.field()
    mu = cfg.mu
    t = cfg.tmin if cfg.tmin is not None else 4.0 * mu**-2
    rec = ExperimentRecord("kernel_slice", {"preset": cfg.preset, "mu": mu, "t": t})
    x = np.pi if cfg.dim == 1 else np.zeros(2)
    span = 2.0 * t * 8.0 * mu * 1.15 + 20.0 / np.sqrt(mu)
    if cfg.dim == 1:
        ys = x + np.linspace(-span, span, 101)
        vals = np.abs(parametrix.kernel_total(field, mu, t, x, ys))
        rec.rows = [{"x": float(x), "y": float(y), "abs_kernel": float(v)}
                    for y, v in zip(ys, vals)]
    else:
        radii = np.linspace(0, span, 61)
        vals = np.abs(parametrix.kernel_total(field, mu, t, x,
                                              [np.array([r, 0.0]) for r in radii]))
        rec.rows = [{"x": 0.0, "y": float(r), "abs_kernel": float(v)}
                    for r, v in zip(radii, vals)]
    coarse = float(np.abs(parametrix.kernel_total(field, mu, t, x, [ys[len(ys) // 3]] if cfg.dim == 1
                                                  else [np.array([radii[20], 0.0])])[0]))
    fine = float(np.abs(parametrix.kernel_total(field, mu, t, x, [ys[len(ys) // 3]] if cfg.dim == 1
                                                else [np.array([radii[20], 0.0])], refine=2)[0]))
    drel = abs(fine - coarse) / max(abs(fine), 1e-300)
    rec.scalars["refinement_delta"] = drel
    rec.add_check("quadrature_refinement", drel <= 1e-3, drel, "<=1e-3")
    return [rec]


def _run_dispersive(cfg: ExperimentConfig) -> list[ExperimentRecord]:
    field = cfg.field()
    rec = parametrix.dispersive_scan(field, cfg.mu, cfg.tgrid())
    target = -cfg.dim / 2.0
    tol = 0.15 if (cfg.preset == "flat" and cfg.dim == 1) else 0.2
    slope = rec.scalars["slope"]
    rec.add_check("dispersive_slope", abs(slope - target) <= tol, slope,
                  f"={target}+-{tol}")
    sup0 = float(np.abs(parametrix.kernel_total(
        field, cfg.mu, cfg.mu**-2,
        np.pi if cfg.dim == 1 else np.zeros(2),
        [0.0 if cfg.dim == 1 else np.zeros(2)])[0]))
    short = rec.scalars["short_time_sup"] = max(
        sup0, max(r["sup_kernel"] for r in rec.rows if r["t"] <= cfg.mu**-2 * 1.001))
    rec.add_check("short_time_bound", short <= 10.0 * cfg.mu**cfg.dim, short,
                  f"<=10 mu^{cfg.dim}")
    return [rec]


def _run_strichartz(cfg: ExperimentConfig) -> list[ExperimentRecord]:
    recs = []
    fam = cfg.extra.get("family", "disk")
    ks = cfg.extra.get("ks", [16, 24, 32, 40, 48, 56, 64])
    if fam == "disk":
        family = oracle.disk_gallery_family(ks)
        target, tol = 1.0 / 6.0, 0.03
    elif fam == "sphere":
        family = oracle.sphere_highest_weight_family(ks)
        target, tol = 1.0 / 8.0, 0.02
    elif fam == "torus":
        family = oracle.torus_plane_wave_family(ks)
        target, tol = 0.0, 0.02
    else:
        raise ValueError(f"unknown family {fam!r}")
    rec = oracle.loss_exponent_fit(family, cfg.p, cfg.q)
    slope = rec.scalars["slope"]
    rec.add_check("loss_exponent", abs(slope - target) <= tol, slope, f"={target}+-{tol}")
    recs.append(rec)
    grid_n = 512 if cfg.mu <= 32 else 1024
    quot = oracle.strichartz_quotient(
        coeffield.load_preset(cfg.preset, cfg.mu, 1, grid_n=grid_n),
        cfg.mu, 8.0, 4.0, trials=3, seed=cfg.seed)
    recs.append(quot)
    return recs


def _run_modes(cfg: ExperimentConfig) -> list[ExperimentRecord]:
    ks = cfg.extra.get("ks", [8, 16, 32, 64])
    rec = ExperimentRecord("modes", {"ks": " ".join(str(k) for k in ks)})
    rows = []
    for k in ks:
        d = oracle.disk_gallery_mode(k)
        s = oracle.sphere_highest_weight(k)
        bd = float(np.abs(d.samples[-1]).max())   # outermost radial node
        rows.append({"k": k, "disk_eigenvalue": d.eigenvalue,
                     "sphere_eigenvalue": s.eigenvalue,
                     "disk_l4": oracle.ModeFamily("disk", [d]).lq_norm(d, 4),
                     "sphere_l4": oracle.ModeFamily("sphere", [s]).lq_norm(s, 4),
                     "disk_boundary_max": bd})
    rec.rows = rows
    zero_res = max(abs(float(
        __import__("scipy.special", fromlist=["jv"]).jv(k, oracle.bessel_first_zero(k))))
        for k in ks)
    rec.add_check("bessel_zero_residual", zero_res <= 1e-10, zero_res, "<=1e-10")
    return [rec]


_DISPATCH = {"verify": _run_verify, "flow": _run_flow, "kernel": _run_kernel,
             "dispersive": _run_dispersive, "strichartz": _run_strichartz,
             "modes": _run_modes}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="packetprop",
                                 description="wave-packet parametrix experiments")
    sub = ap.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--preset", default="flat",
                       help="flat, perturbed, or a preset config path")
        p.add_argument("--dim", type=int, default=1, choices=(1, 2))
        p.add_argument("--mu", type=float, default=32.0)
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--pq", default="4,4", help="exponent pair, e.g. 4,4")
        p.add_argument("--tmin", type=float, default=None)
        p.add_argument("--tmax", type=float, default=None)
        p.add_argument("--tcount", type=int, default=8)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out")
        if name == "strichartz":
            p.add_argument("--family", default="disk", choices=("disk", "sphere", "torus"))
            p.add_argument("--ks", default=None, help="comma-separated mode indices")
    return ap


def config_from_args(args) -> ExperimentConfig:
    p, q = (float(s) for s in args.pq.split(","))
    extra = {}
    if getattr(args, "family", None):
        extra["family"] = args.family
    if getattr(args, "ks", None):
        extra["ks"] = [int(s) for s in args.ks.split(",")]
    return ExperimentConfig(args.experiment, args.preset, args.dim, args.mu, args.lam,
                            args.tmin, args.tmax, args.tcount, p, q, args.seed, args.out,
                            extra)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = config_from_args(args)
    records = run_experiment(cfg)
    paths = emit_report(records, cfg.out)
    for rec in records:
        if rec.rows and "t" in rec.rows[0] and "sup_kernel" in rec.rows[0]:
            write_plot_series(f"{cfg.out}/{rec.name}_plot.csv",
                              [r["t"] for r in rec.rows],
                              [r["sup_kernel"] for r in rec.rows], "t", "sup_kernel")
    ok = all(rec.all_passed() for rec in records)
    for rec in records:
        for line in rec.summary_lines():
            print(line)
    print(f"report written to {cfg.out} ({len(paths)} files)")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
