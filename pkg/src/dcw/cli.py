"""``dcw`` command line: parse a config, run one engine, write CSVs, manifest and a plot script."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import chaos, cycles, fokker_planck, macro, particles
from .config import (ENGINES, PRESETS, SCHEMA, ConfigError, RunConfig, build_config, preset,
                     raw_values, resolve, to_text)
from .model import DomainError, NoConvergenceError, NumericalError
from .records import write_csv

log = logging.getLogger("dcw")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_NO_CONVERGENCE = 0, 2, 3, 4
MANIFEST = "manifest.ini"
SUMMARY = "summary.json"
FAILED = "FAILED"
PLOT_SCRIPT = "plot_phase.py"


def param_tag(cfg: RunConfig) -> str:
    return f"a{cfg.alpha:g}_b{cfg.beta:g}_s{cfg.sigma:g}"


def _run_particles(cfg: RunConfig, out: Path, summary: dict) -> list[Path]:
    init = particles.InitialCondition(cfg.lambda0, cfg.m0)
    run = particles.simulate(cfg.params, init, cfg.horizon, cfg.cadence, cfg.seed,
                             keep_events=bool(cfg.keep_events))
    files = [run.record.to_csv(out / f"particles_{param_tag(cfg)}_n{cfg.n_particles}_seed{cfg.seed}.csv")]
    lg = run.log
    summary.update(proposed=lg.proposed, accepted=lg.accepted, acceptance_ratio=lg.acceptance_ratio)
    if cfg.keep_events:
        files.append(write_csv(out / f"events_{param_tag(cfg)}_n{cfg.n_particles}_seed{cfg.seed}.csv",
                               ("t", "particle", "spin_before"),
                               zip(lg.times, lg.particles, lg.spins_before)))
    return files


def _sample_times(cfg: RunConfig) -> np.ndarray:
    k = int(np.floor(cfg.horizon / cfg.cadence + 1e-9))
    t = np.arange(k + 1) * cfg.cadence
    if cfg.horizon - t[-1] > 1e-9 * cfg.horizon:
        t = np.append(t, cfg.horizon)
    return np.minimum(t, cfg.horizon)


def _run_ode(cfg: RunConfig, out: Path, summary: dict) -> list[Path]:
    params = cfg.params
    if cfg.sigma > 0:
        log.warning("engine ode ignores sigma = %g (noiseless dynamics)", cfg.sigma)
    state = macro.MacroState(cfg.m0, cfg.lambda0)
    traj = macro.integrate(state, params, cfg.horizon, coords=cfg.coords, t_eval=_sample_times(cfg))
    summary.update(steps=traj.stats["steps"], nfev=traj.stats["nfev"],
                   max_abs_m=traj.stats.get("max_abs_m"))
    return [traj.to_csv(out / f"ode_{param_tag(cfg)}.csv")]


def _run_pde(cfg: RunConfig, out: Path, summary: dict) -> list[Path]:
    params = cfg.params
    grid = fokker_planck.default_grid(params, cfg.lambda0, cfg.half_width, cfg.n_cells)
    init = fokker_planck.initial_density(grid, cfg.lambda0, cfg.m0)
    files = []
    try:
        res = fokker_planck.solve(init, params, cfg.horizon, cfg.cadence, snapshot_times=cfg.snapshots,
                                  dt=cfg.dt)
    finally:
        summary.update(grid_half_width=grid.L, n_cells=grid.n_cells, dl=grid.dl)
    tag = param_tag(cfg)
    files.append(res.record.to_csv(out / f"pde_{tag}.csv"))
    for t, snap in sorted(res.snapshots.items()):
        files.append(snap.to_csv(out / f"pde_{tag}_t{t:g}.csv"))
    summary.update(dt=res.dt, max_mass_drift=res.max_mass_drift, min_nu=res.min_nu,
                   max_boundary_mass=res.max_boundary_mass,
                   moment_residuals=fokker_planck.moment_residuals(res, params))
    return files


def _run_cycle(cfg: RunConfig, out: Path, summary: dict) -> list[Path]:
    res = cycles.find_limit_cycle(cfg.params, y_start=cfg.y_start, y_cap=cfg.y_cap)
    summary["has_cycle"] = res.has_cycle
    if not res.has_cycle:
        summary["reason"] = res.reason
        return []
    summary.update(y0_p=res.y0_p, period=res.period, amplitude_m=res.amplitude_m, delta_w=res.delta_w,
                   closure_error=res.closure_error)
    return [write_csv(out / f"cycle_{param_tag(cfg)}.csv", ("t", "y", "lambda"), res.orbit)]


def _run_scan(cfg: RunConfig, out: Path, summary: dict) -> list[Path]:
    betas = cycles.beta_grid(cfg.beta_start, cfg.beta_stop, cfg.beta_step)
    rows = cycles.bifurcation_scan(cfg.alpha, betas, workers=cfg.workers,
                                   y_start=cfg.y_start, y_cap=cfg.y_cap)
    path = cycles.write_scan_csv(rows, out / f"scan_a{cfg.alpha:g}.csv")
    failed = [r for r in rows if r["has_cycle"] == "failed"]
    summary.update(points=len(rows), failed={repr(r["beta"]): r["status"] for r in failed})
    if failed:
        raise NoConvergenceError(f"cycle search failed at {len(failed)} of {len(rows)} beta values; "
                                 f"see {path.name} and {SUMMARY}")
    return [path]


def _run_chaos(cfg: RunConfig, out: Path, summary: dict) -> list[Path]:
    init = particles.InitialCondition(cfg.lambda0, cfg.m0)
    study = chaos.convergence_study(cfg.params, cfg.horizon, cfg.n_list, cfg.replicas, cfg.seed,
                                    init=init, grid_step=cfg.grid_step)
    summary.update(slope=study.slope, intercept=study.intercept)
    return [study.to_csv(out / f"chaos_{param_tag(cfg)}_seed{cfg.seed}.csv")]


RUNNERS = {"particles": _run_particles, "ode": _run_ode, "pde": _run_pde, "cycle": _run_cycle,
           "scan": _run_scan, "chaos": _run_chaos}


PLOT_TEMPLATE = '''"""Phase plot of the runs in this directory.

Axes: horizontal = m (magnetization), vertical = mean intensity lambda
(column lambda_mean, or lambda for noiseless runs); a second panel shows m
against t.  Limits are auto-scaled.  Requires matplotlib.
"""
import csv
import sys
from pathlib import Path

import matplotlib.pyplot as plt

HERE = Path(__file__).resolve().parent
FILES = {files!r}


def load(name):
    with open(HERE / name, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {{k: [float(r[k]) for r in rows] for k in rows[0]}} if rows else {{}}


def main():
    fig, (ax_phase, ax_time) = plt.subplots(1, 2, figsize=(10, 4))
    for name in FILES:
        cols = load(name)
        if "t" not in cols or not ("m" in cols or "y" in cols):
            continue
        lam = cols.get("lambda_mean", cols.get("lambda"))
        m = cols.get("m")
        if m is None:  # Lienard coordinates: m = (y/2 - lambda) / beta
            m = [(y / 2 - l) / {beta!r} for y, l in zip(cols["y"], lam)]
        ax_phase.plot(m, lam, lw=0.8, label=name)
        ax_time.plot(cols["t"], m, lw=0.8)
    ax_phase.set_xlabel("m")
    ax_phase.set_ylabel("mean lambda")
    ax_time.set_xlabel("t")
    ax_time.set_ylabel("m")
    ax_phase.legend(fontsize=6)
    fig.tight_layout()
    target = sys.argv[1] if len(sys.argv) > 1 else str(HERE / "phase.png")
    fig.savefig(target, dpi=150)


if __name__ == "__main__":
    main()
'''


def write_plot_script(out: Path, files, cfg: RunConfig) -> Path:
    names = [Path(f).name for f in files]
    path = out / PLOT_SCRIPT
    path.write_text(PLOT_TEMPLATE.format(files=names, beta=cfg.beta if cfg.beta > 0 else 1.0),
                    encoding="utf-8")
    return path


def run(cfg: RunConfig) -> int:
    """Execute a resolved config; artifacts go to ``cfg.out``.  Returns the exit code."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED).unlink(missing_ok=True)
    (out / MANIFEST).write_text(to_text(cfg, header=f"dcw {cfg.engine} run; resolved configuration"),
                                encoding="utf-8")
    summary = {"engine": cfg.engine, "status": "ok"}
    code, files = EXIT_OK, []
    try:
        files = RUNNERS[cfg.engine](cfg, out, summary)
    except (ConfigError, DomainError) as exc:
        code, message = EXIT_CONFIG, str(exc)
    except NoConvergenceError as exc:
        code, message = EXIT_NO_CONVERGENCE, str(exc)
    except NumericalError as exc:
        code, message = EXIT_NUMERICAL, str(exc)
    if code != EXIT_OK:
        summary["status"] = "failed"
        summary["error"] = message
        (out / FAILED).write_text(message + "\n", encoding="utf-8")
        log.error("%s", message)
    files = files or sorted(p for p in out.glob("*.csv"))
    summary["files"] = [Path(f).name for f in files]
    (out / SUMMARY).write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n",
                               encoding="utf-8")
    write_plot_script(out, [f for f in files if Path(f).suffix == ".csv"], cfg)
    return code


def _parse_beta(text: str):
    """'x' or 'start:stop:step'."""
    parts = text.split(":")
    if len(parts) == 1:
        return {"beta": parts[0]}
    if len(parts) == 3:
        return {"beta_start": parts[0], "beta_stop": parts[1], "beta_step": parts[2]}
    raise argparse.ArgumentTypeError(f"--beta takes a value or start:stop:step, got {text!r}")


# flag -> (section, key)
FLAG_KEYS = {
    "alpha": ("model", "alpha"), "sigma": ("model", "sigma"), "n": ("model", "n_particles"),
    "lambda0": ("run", "lambda0"), "m0": ("run", "m0"), "horizon": ("run", "horizon"),
    "cadence": ("run", "cadence"), "seed": ("run", "seed"), "out": ("run", "out"),
    "coords": ("ode", "coords"), "workers": ("scan", "workers"), "replicas": ("chaos", "replicas"),
    "n_list": ("chaos", "n_list"), "snapshots": ("pde", "snapshots"),
}
_FIELD_SECTION = {name: section for section, table in SCHEMA.items() for _, (name, _) in table.items()}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcw", description="Dissipative Curie-Weiss simulations.")
    p.add_argument("engine", choices=ENGINES)
    p.add_argument("--config", type=Path, help="key = value file with [model], [run] and engine sections")
    p.add_argument("--preset", help="parameter set: " + ", ".join(PRESETS))
    p.add_argument("--alpha")
    p.add_argument("--beta", type=_parse_beta, help="value, or start:stop:step for engine scan")
    p.add_argument("--sigma")
    p.add_argument("--n", help="number of particles")
    p.add_argument("--lambda0")
    p.add_argument("--m0")
    p.add_argument("--horizon")
    p.add_argument("--cadence")
    p.add_argument("--seed")
    p.add_argument("--out", help="output directory (relative paths are taken under $DCW_OUT)")
    p.add_argument("--coords", help="ode coordinates: macro or lienard")
    p.add_argument("--workers")
    p.add_argument("--replicas")
    p.add_argument("--n-list", dest="n_list", help="chaos particle numbers, e.g. 250,1000,4000")
    p.add_argument("--snapshots", help="pde snapshot times, e.g. '1 5'")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> RunConfig:
    errors: list = []
    values: dict = {}
    if args.preset:
        try:
            values.update(preset(args.preset))
        except ConfigError as exc:
            errors.extend(exc.errors)
    if args.config:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            errors.append(f"cannot read config file: {exc}")
        else:
            values.update(raw_values(text, errors))
    lines = {}
    for flag, (section, key) in FLAG_KEYS.items():
        v = getattr(args, flag)
        if v is not None:
            lines.setdefault(section, []).append(f"{key} = {v}")
    if args.beta:
        for key, v in args.beta.items():
            lines.setdefault(_FIELD_SECTION[key], []).append(f"{key} = {v}")
    for item in args.set:
        target, sep, v = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not (sep and dot):
            errors.append(f"--set expects SECTION.KEY=VALUE, got {item!r}")
            continue
        lines.setdefault(section, []).append(f"{key} = {v.strip()}")
    lines.setdefault("run", []).append(f"engine = {args.engine}")
    text = "\n".join(f"[{s}]\n" + "\n".join(body) for s, body in lines.items())
    values.update(raw_values(text, errors))
    return build_config(values, errors)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="dcw: %(levelname)s: %(message)s")
    try:
        cfg = resolve(config_from_args(args))
    except ConfigError as exc:
        for err in exc.errors:
            print(f"dcw: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    code = run(cfg)
    if code == EXIT_OK:
        log.info("wrote %s", cfg.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
