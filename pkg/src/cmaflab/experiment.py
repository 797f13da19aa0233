"""Batch runner: build a run from a config, execute it, verify it and write artifacts."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .chern_ricci import estimate_tmax, seminorm_history, smoothing_diagnostic
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .elliptic import check_elliptic_stability, density_mass_bounds, solve_elliptic
from .errors import AdmissibilityError, CMAFError, ConfigurationError, SolverError
from .estimates import (EstimateRecord, EstimateReport, check_barrier, check_comparison, check_mass_monotonicity,
                        check_parabolic_stability, check_semiconcavity, check_time_derivative_bounds,
                        check_uniform_bound, elliptic_barriers, nested_pole_sets, ratio_ok, refinement_ratio,
                        sup_forcing_at_zero, weighted_laplacian_sups)
from .flow import (DensitySpec, fit_rescaling_constant, graded_times, path_shrink_constant,
                   regularization_ladder, rescaling_epsilon, run_flow, smooth_density)
from .grid import HermitianField, TorusGrid
from .io import FLAG_CRF, write_csv, write_snapshots, write_time_series
from .presets import build_geometry, density_preset, forcing_preset, initial_datum, model_density

log = logging.getLogger(__name__)

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2


@dataclass
class Setup:
    grid: TorusGrid
    path: object
    rho: object
    extras: dict
    density: DensitySpec
    forcing: object
    phi0: np.ndarray
    times: np.ndarray
    rough: bool
    tol: float = 1e-10


def build_setup(cfg: ExperimentConfig, N: int | None = None) -> Setup:
    g = cfg.geometry
    T = cfg.schedule["T"]
    grid, path, rho, extras = build_geometry(g["preset"], g["n"], N or g["N"], T, kappa=g["kappa"],
                                             delta=g["delta"], chi_scale=g["chi"])
    if cfg.is_crf:
        density = model_density(grid, extras["exponents"])
    else:
        d = cfg.density
        density = density_preset(grid, d["preset"], value=d["value"], amplitude=d["amplitude"],
                                 exponents=d["exponents"], p=d["p"])
    f = cfg.forcing
    forcing = forcing_preset(f["preset"], lam=f["lambda"], table=f["table"])
    i = cfg.initial
    phi0 = initial_datum(grid, i["preset"], value=i["value"], amplitude=i["amplitude"], slope=i["slope"])
    times = graded_times(T, cfg.schedule["steps"], cfg.schedule["ratio"])
    return Setup(grid, path, rho, extras, density, forcing, phi0, times, i["preset"] == "kink",
                 cfg.tolerances["newton"])


def _run(setup: Setup, phi0=None, density=None):
    traj = run_flow(setup.phi0 if phi0 is None else phi0, setup.path, setup.density if density is None else density,
                    setup.forcing, setup.path.T, setup.times, tol=setup.tol)
    traj.meta["rough"] = setup.rough
    return traj


def sweep_values(cfg: ExperimentConfig) -> list:
    """Stability sweep parameters: the fixed list, then seeded random draws in ``[0.05, 0.3]``."""
    rng = np.random.default_rng(cfg.seed)
    extra = rng.uniform(0.05, 0.3, size=cfg.checks["random_sweep"])
    return [float(s) for s in cfg.checks["sweep"]] + [float(s) for s in extra]


def sweep_density(setup: Setup, s: float) -> DensitySpec:
    c = setup.grid.coords()
    f = setup.density.f * np.broadcast_to(np.exp(s * np.sin(2 * np.pi * c[0])), setup.grid.shape)
    return smooth_density(setup.grid, f, setup.density.p)


def upper_form(setup: Setup) -> HermitianField:
    """``m omega_X`` with ``m`` the largest eigenvalue of ``omega_t`` over sampled times (at least 1)."""
    m = 1.0
    for t in np.linspace(0.0, setup.path.T, 11):
        m = max(m, float(np.max(np.linalg.eigvalsh(setup.path.at(t).coeffs))))
    return HermitianField.identity(setup.grid) * m


def _with_ratios(rec: EstimateRecord, ratios: dict) -> EstimateRecord:
    ok = all(ratio_ok(r) for r in ratios.values())
    details = dict(rec.details, **{f"ratio_{k}": v for k, v in ratios.items()})
    return EstimateRecord(rec.name, rec.anchor, rec.measured, rec.bound, rec.margin, bool(rec.passed and ok), details)


def _failed(name: str, exc: Exception) -> EstimateRecord:
    return EstimateRecord(name, "check could not be evaluated", float("nan"), float("nan"), float("nan"), False,
                          {"error": f"{type(exc).__name__}: {exc}"})


@dataclass
class ExperimentResult:
    status: int
    out_dir: Path | None
    report: EstimateReport | None = None
    files: list = field(default_factory=list)
    message: str = ""


class _Runner:
    def __init__(self, cfg: ExperimentConfig, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = max(1, threads)
        self.files: list[str] = []
        self.extra_runs: dict = {}

    # artifacts ----------------------------------------------------------------
    def csv(self, name, header, rows):
        write_csv(self.out / name, header, rows)
        self.files.append(name)

    def snapshots(self, name, traj, flags=0):
        if self.cfg.output["snapshots"]:
            write_snapshots(self.out / name, traj, flags)
            self.files.append(name)

    def text(self, name, content):
        (self.out / name).write_text(content)
        self.files.append(name)

    # orchestration ------------------------------------------------------------
    def execute(self) -> tuple[int, EstimateReport]:
        cfg = self.cfg
        setup = build_setup(cfg)
        self.setup = setup
        flags = FLAG_CRF if cfg.is_crf else 0
        traj = _run(setup)
        self.traj = traj
        self.snapshots("trajectory.cmaf", traj, flags)
        write_time_series(self.out / "time_series.csv", traj)
        self.files.append("time_series.csv")
        report = EstimateReport(meta={"config": cfg.source, "seed": cfg.seed})
        if traj.failed:
            report.add(EstimateRecord("flow", "flow reaches T", float(traj.times[-1]), cfg.schedule["T"],
                                      float(traj.times[-1] - cfg.schedule["T"]), False, {"error": traj.failure}))
            return EXIT_SOLVER, report
        self._prepare_auxiliary_runs()
        status = EXIT_OK
        for name in cfg.checks["enabled"]:
            try:
                rec = getattr(self, f"check_{name}")()
            except (SolverError, AdmissibilityError) as exc:
                log.error("check %s failed: %s", name, exc)
                rec, status = _failed(name, exc), EXIT_SOLVER
            except CMAFError as exc:
                log.error("check %s could not run: %s", name, exc)
                rec = _failed(name, exc)
            report.add(rec)
        return status, report

    def _prepare_auxiliary_runs(self):
        """Launch every extra flow the enabled checks need in a work pool; results keep config order."""
        cfg, setup = self.cfg, self.setup
        enabled = set(cfg.checks["enabled"])
        jobs = {}
        if cfg.checks["refine"] and enabled & {"barrier", "time_derivative", "semiconcavity", "weighted_laplacian"}:
            jobs["coarse"] = lambda: self._coarse_run()
        if "comparison" in enabled:
            off = cfg.checks["offset"]
            c = setup.grid.coords()
            jobs["ordered"] = lambda: _run(setup, setup.phi0 + off)
            jobs["crossed"] = lambda: _run(setup, setup.phi0 + off * np.broadcast_to(
                np.cos(2 * np.pi * c[0]), setup.grid.shape))
        if "parabolic_stability" in enabled:
            for s in sweep_values(cfg):
                jobs[("sweep", s)] = (lambda s=s: _run(setup, density=sweep_density(setup, s)))
        if "ladder" in enabled:
            jobs["ladder"] = lambda: regularization_ladder(
                setup.phi0, setup.path, setup.density, setup.forcing, cfg.checks["ladder_levels"],
                T=setup.path.T, schedule=setup.times, sigma0=4 * setup.grid.h if setup.rough else 0.0,
                eps=cfg.checks["eps"], tol=setup.tol)

        def guarded(fn):
            try:
                return fn()
            except CMAFError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            keys = list(jobs)
            for key, res in zip(keys, pool.map(lambda k: guarded(jobs[k]), keys)):
                self.extra_runs[key] = res

    def _coarse_run(self):
        N = self.cfg.geometry["N"] // 2
        if N < 8:
            raise ConfigurationError("refinement needs N >= 16")
        setup = build_setup(self.cfg, N)
        return setup, _run(setup)

    def _aux(self, key):
        res = self.extra_runs[key]
        if isinstance(res, Exception):
            raise res
        if hasattr(res, "failed") and res.failed:
            raise SolverError(f"auxiliary run {key!r} failed: {res.failure}")
        return res

    # checks ---------------------------------------------------------------------
    def check_uniform_bound(self):
        s = self.setup
        barriers = elliptic_barriers(s.path.base, s.density, self.cfg.tolerances["elliptic"], upper=upper_form(s))
        return check_uniform_bound(self.traj, lam_F=s.forcing.lam_F,
                                   F0_sup=sup_forcing_at_zero(s.forcing, s.grid, s.path.T), barriers=barriers,
                                   eps_grid=self.cfg.tolerances["eps_grid"])

    def _barrier(self, setup, traj):
        alpha = self.cfg.checks["alpha"] or 0.5 / setup.path.T
        return check_barrier(traj, setup.rho, alpha=alpha, A=setup.path.A, lam_F=setup.forcing.lam_F)

    def check_barrier(self):
        rec = self._barrier(self.setup, self.traj)
        if self.cfg.checks["refine"]:
            cs, ct = self._aux("coarse")
            coarse = self._barrier(cs, ct)
            rec = _with_ratios(rec, {"C": refinement_ratio(coarse.measured, rec.measured)})
        return rec

    def check_time_derivative(self):
        rec = check_time_derivative_bounds(self.traj)
        if self.cfg.checks["refine"]:
            coarse = check_time_derivative_bounds(self._aux("coarse")[1])
            rec = _with_ratios(rec, {k: refinement_ratio(coarse.details[k], rec.details[k])
                                     for k in ("C_upper", "C_lower")})
        return rec

    def check_semiconcavity(self):
        rec = check_semiconcavity(self.traj)
        if self.cfg.checks["refine"]:
            coarse = check_semiconcavity(self._aux("coarse")[1])
            rec = _with_ratios(rec, {"C_semi": refinement_ratio(coarse.measured, rec.measured)})
        return rec

    def check_comparison(self):
        lam = self.setup.forcing.lam_F
        ordered = check_comparison(self.traj, self._aux("ordered"), lam_F=lam)
        crossed = check_comparison(self.traj, self._aux("crossed"), lam_F=lam)
        worst = min((ordered, crossed), key=lambda r: r.margin)
        return EstimateRecord("comparison", ordered.anchor, worst.measured, worst.bound, worst.margin,
                              bool(ordered.passed and crossed.passed),
                              {"ordered": ordered.details | {"margin": ordered.margin},
                               "crossed": crossed.details | {"margin": crossed.margin}})

    def check_mass_monotonicity(self):
        s = self.setup
        return check_mass_monotonicity(self.traj, s.path, s.density, s.forcing)

    def check_subsolution(self):
        s, cfg = self.setup, self.cfg
        sv = cfg.checks["rescale"]
        eps0 = cfg.checks["eps"]
        T_prime = s.path.T / (1 + eps0)
        A1 = path_shrink_constant(s.path, eps0, T_prime)
        eps1 = rescaling_epsilon(eps0, A1)
        rho1 = solve_elliptic(s.path.base * eps1, s.density.f, tol=cfg.tolerances["elliptic"]).phi.values
        fitted = {}
        for sval in (sv, 2.0 - sv):
            fitted[f"s={sval:.6g}"] = fit_rescaling_constant(self.traj, s.path, s.density, sval, rho1, A1=A1,
                                                             eps0=eps0)
        C = max(fitted.values())
        return EstimateRecord("subsolution", "u^s = (a/s) phi(ts) + (1-a) rho_1 - C|s-1|t is a subsolution",
                              float(C), float(C), 0.0, bool(np.isfinite(C)),
                              {"A1": A1, "eps1": eps1, "fitted": fitted})

    def check_elliptic_stability(self):
        s = self.setup
        dens = {f"s={v:.6g}": sweep_density(s, v).f for v in sweep_values(self.cfg)}
        p = s.density.p
        B = 1.0
        for f in dens.values():
            lo, hi = density_mass_bounds(f, s.grid, p, s.grid.n)
            B = max(B, 1.0 / lo, hi)
        verdict = check_elliptic_stability(s.path.base, dens, p, B * (1 + 1e-12), tol=self.cfg.tolerances["elliptic"])
        self.csv("elliptic_stability.csv", ["pair", "sup_diff", "rhs_bracket", "implied_C"],
                 [(f"{r.label[0]}|{r.label[1]}", r.lhs, r.bracket, r.implied) for r in verdict.records])
        implied = [r.implied for r in verdict.records]
        return EstimateRecord("elliptic_stability", "|phi1 - phi2|_inf <= C(|phi1 - phi2|_1^a + |f1 - f2|_p)^{1/n}",
                              float(max(implied)), 50.0, float(50.0 - verdict.spread), verdict.passed,
                              {"alpha": verdict.alpha, "spread": verdict.spread, "B": B})

    def check_parabolic_stability(self):
        s = self.setup
        runs, dens = {}, {}
        for v in sweep_values(self.cfg):
            key = f"s={v:.6g}"
            runs[key] = self._aux(("sweep", v))
            dens[key] = sweep_density(s, v).f
        rec = check_parabolic_stability(runs, dens, eps=self.cfg.checks["eps"], p=s.density.p)
        self.csv("parabolic_stability.csv", ["pair", "sup_diff", "rhs_bracket", "implied_B"],
                 [(f"{a}|{b}", lhs, br, imp) for (a, b), lhs, br, imp in rec.details["pairs"]])
        return rec

    def check_ladder(self):
        lad = self._aux("ladder")
        for j, tr in zip(lad.levels, lad.trajectories):
            self.snapshots(f"ladder_level_{j}.cmaf", tr)
        self.csv("ladder.csv", ["level", "next_level", "sup_distance"],
                 [(str(j), str(j + 1), d) for j, d in zip(lad.levels, lad.distances)])
        d = lad.distances
        slack = [d[k] * (1 + 1e-9) + 1e-12 - d[k + 1] for k in range(len(d) - 1)] or [0.0]
        return EstimateRecord("ladder", "sup_[eps,T] |phi^j - phi^(j+1)| decreases in j", float(d[-1]), float(d[0]),
                              float(min(slack)), bool(lad.monotone), {"distances": list(map(float, d))})

    def _weighted(self, setup, traj):
        radii = self.cfg.checks["radii"]
        Ks = [K & traj.unmasked for K in nested_pole_sets(setup.grid, radii)]
        delta = self.cfg.checks["weight_delta"]
        psi_minus = setup.density._psi_minus_eff
        return [weighted_laplacian_sups(traj, psi_minus, delta, K, self.cfg.checks["eps"]) for K in Ks]

    def check_weighted_laplacian(self):
        sups = self._weighted(self.setup, self.traj)
        weighted = [w for w, _ in sups]
        plain = [u for _, u in sups]
        grows = all(b >= a * (1 - 1e-12) for a, b in zip(plain, plain[1:])) and plain[-1] > plain[0]
        finite = bool(np.all(np.isfinite(weighted)))
        details = {"radii": list(self.cfg.checks["radii"]), "weighted": weighted, "unweighted": plain,
                   "delta": self.cfg.checks["weight_delta"]}
        rec = EstimateRecord("weighted_laplacian", "sup |Delta phi_t| <= B e^{-delta psi_minus} on K",
                             float(weighted[-1]), float(weighted[-1]), 0.0, bool(finite and grows), details)
        if self.cfg.checks["refine"]:
            cs, ct = self._aux("coarse")
            coarse = self._weighted(cs, ct)
            rec = _with_ratios(rec, {"weighted": refinement_ratio(coarse[-1][0], weighted[-1])})
        return rec

    def check_smoothing(self):
        rec = smoothing_diagnostic(self.traj, self.cfg.checks["eps"])
        hist = seminorm_history(self.traj, self.traj.unmasked)
        self.csv("seminorms.csv", ["t", "C0", "C1", "C2"], hist.tolist())
        return rec

    def check_tmax(self):
        e = self.setup.extras
        theta0, chi = e["theta0"], e["chi"]
        if self.setup.grid.n == 2 and self.setup.grid.N > 8:
            # the cone program grows with N^4; the spatial profiles are resolved at N = 8
            from .presets import crf_forms

            small = TorusGrid(2, 8)
            theta0, chi, _ = crf_forms(small, self.cfg.geometry["preset"], chi_scale=self.cfg.geometry["chi"])
        tmax = estimate_tmax(theta0, chi, t_cap=max(10.0, 2 * self.setup.path.T))
        T = self.setup.path.T
        return EstimateRecord("tmax", "T < T_max = sup{t : theta0 + t chi + dd^c psi > 0}", float(tmax), float(T),
                              float(tmax - T), bool(tmax > T), {"grid_N": theta0.grid.N})


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_config(cfg: ExperimentConfig, out=None, *, threads: int = 1, seed: int | None = None) -> ExperimentResult:
    """Run a parsed config; ``seed`` overrides the config seed."""
    if seed is not None:
        cfg.seed = int(seed)
    out = Path(out if out is not None else cfg.output["dir"])
    out.mkdir(parents=True, exist_ok=True)
    runner = _Runner(cfg, out, threads)
    start = time.perf_counter()
    message = ""
    try:
        status, report = runner.execute()
    except CMAFError as exc:
        log.error("experiment failed: %s", exc)
        status, report, message = EXIT_SOLVER, EstimateReport(), str(exc)
        report.add(_failed("setup", exc))
    runner.text("report.txt", report.to_text())
    runner.text("report.csv", report.to_csv())
    runner.text("report.json", json.dumps([{"name": r.name, "passed": r.passed, "measured": r.measured,
                                            "bound": r.bound, "margin": r.margin, "details": r.details}
                                           for r in report.records], indent=1, default=_jsonable) + "\n")
    manifest = {
        "config": cfg.source,
        "config_sha256": cfg.digest,
        "seed": cfg.seed,
        "status": status,
        "checks": list(cfg.checks["enabled"]),
        "files": [{"name": name, "sha256": _digest(out / name), "bytes": (out / name).stat().st_size}
                  for name in sorted(set(runner.files))],
        # volatile fields, not covered by any digest
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "runtime_seconds": round(time.perf_counter() - start, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return ExperimentResult(status, out, report, sorted(set(runner.files)), message)


def run_experiment(config, out=None, *, threads: int = 1, seed: int | None = None) -> ExperimentResult:
    """Parse ``config`` (a path or an :class:`ExperimentConfig`) and run it.

    Parse errors give status 2 without touching the output directory.
    """
    try:
        cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    except ConfigError as exc:
        return ExperimentResult(EXIT_CONFIG, None, message=str(exc))
    return run_config(cfg, out, threads=threads, seed=seed)


def verify_manifest(out) -> list:
    """Names of files whose digest no longer matches the manifest."""
    out = Path(out)
    manifest = json.loads((out / "manifest.json").read_text())
    return [f["name"] for f in manifest["files"] if _digest(out / f["name"]) != f["sha256"]]


__all__ = ["run_experiment", "run_config", "build_setup", "verify_manifest", "ExperimentResult", "parse_config",
           "EXIT_OK", "EXIT_SOLVER", "EXIT_CONFIG"]
