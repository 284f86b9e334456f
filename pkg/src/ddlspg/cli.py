"""Command line entry point.

Each subcommand reads the JSON configuration, reads the artifacts earlier
steps left under ``--out`` (or the directories named in ``paths``), and
writes its own artifacts next to them::

    <out>/fom/        fom-solve      x.ddrb, fom.json
    <out>/snapshots/  train          states.ddrb, params.ddrb, residuals/, plan.json
    <out>/bases/      build-bases    phi_*.ddrb, bases.json, decomposition.json, constraints/
    <out>/hyper/      build-hyper    hyper.json, phi_r_*.ddrb
    <out>/rom/        rom-solve      x.ddrb, rom.json
    <out>/study/      study          study.csv, pareto_<method>.csv, plot_data.json, records.json
    <out>/report/     report         the same tables regenerated from a study.csv

Exit codes: 0 success, 2 configuration or missing-input error, 3 solver
non-convergence, 1 any other failure.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .bases import BasisSet, build_bases, build_residual_bases
from .config import load_config
from .ddrb import jsonable, write_ddrb, write_json
from .decomp import build_decomposition, build_strong_constraints, build_weak_constraints
from .errors import ConfigError, DdlspgError, NonConvergence, ParameterOutOfDomain
from .harness import StudySpec, aposteriori_residual, read_records_csv, relative_error, report, run_study
from .hyper import build_hyper, load_hyper, save_hyper
from .mesh_fom import newton_solve, problem_from_config
from .sqp import RomProblem, reconstruct_global, sqp_solve
from .training import SnapshotStore, TrainingPlan, run_bottom_up, run_top_down

__all__ = ["main", "build_parser"]

_log = logging.getLogger("ddlspg")

COMMANDS = ("fom-solve", "train", "build-bases", "build-hyper", "rom-solve", "study", "report")


def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _add_globals(p):
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON configuration file")
    p.add_argument("--seed", type=_u64, default=argparse.SUPPRESS, help="override the configuration seed")
    p.add_argument("--out", default=argparse.SUPPRESS, help="artifact directory (default: ./out)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress")


def build_parser():
    parser = argparse.ArgumentParser(prog="ddlspg", description="Domain-decomposition least-squares ROM toolkit")
    _add_globals(parser)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "fom-solve": "Newton solve of the full model at the configured parameter",
        "train": "generate state and residual snapshots",
        "build-bases": "POD bases, decomposition and compatibility constraints",
        "build-hyper": "sample meshes and residual weighting",
        "rom-solve": "solve the reduced model and compare with the full model",
        "study": "parameter study with Pareto fronts",
        "report": "regenerate tables from an existing study.csv",
    }
    for name in COMMANDS:
        _add_globals(sub.add_parser(name, help=helps[name]))
    return parser


# ------------------------------------------------------------------ context


class _Context:
    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = Path(out)
        self.problem = problem_from_config(cfg["problem"])
        self._d = None

    @property
    def d(self):
        if self._d is None:
            self._d = build_decomposition(self.problem, tuple(self.cfg["decomposition"]["split"]))
        return self._d

    @property
    def mu(self):
        mu = self.cfg.get("mu")
        try:
            return self.problem.check_param(self.problem.reference_param() if mu is None else mu)
        except ParameterOutOfDomain as exc:
            raise ConfigError(f"config error at mu: {exc}") from exc

    def path(self, key, default):
        p = self.cfg["paths"].get(key)
        return Path(p) if p else self.out / default

    def require(self, path, what, step):
        if not path.exists():
            raise ConfigError(f"{what} not found at {path}; run `{step}` first or set paths")
        return path

    def constraints(self):
        c = self.cfg["constraints"]
        if c["mode"] == "strong":
            return build_strong_constraints(self.d, c["pairs"])
        return build_weak_constraints(self.d, c["n_c"], self.cfg["seed"], c["pairs"])

    def newton(self, mu):
        n = self.cfg["newton"]
        return newton_solve(self.problem, mu, tol=n["tol"], max_iters=n["max_iters"])


# ----------------------------------------------------------------- commands


def cmd_fom_solve(ctx):
    mu = ctx.mu
    t0 = time.perf_counter()
    sol = ctx.newton(mu)
    elapsed = time.perf_counter() - t0
    outdir = ctx.out / "fom"
    write_ddrb(outdir / "x.ddrb", sol.x.reshape(-1, 1))
    info = {"mu": mu, "n": ctx.problem.n, "newton_iters": sol.newton_iters,
            "residual_history": sol.residual_history, "time": elapsed}
    if ctx.problem.kind == "burgers":
        exact = ctx.problem.exact_state(mu)
        info["relative_error_vs_exact"] = float(np.linalg.norm(sol.x - exact) / np.linalg.norm(exact))
    write_json(outdir / "fom.json", info)
    return info


def cmd_train(ctx):
    t = ctx.cfg["training"]
    mode = t["mode"]
    plan = TrainingPlan(ctx.problem, mode=mode, grid=tuple(t["grid"]),
                        decomposition=ctx.d if mode == "bottom_up" else None,
                        n_samples=t["n_samples"], eta=t["eta"], seed=ctx.cfg["seed"],
                        mu_train=t["mu_train"], workers=t["workers"])
    store = run_top_down(plan) if mode == "top_down" else run_bottom_up(plan)
    store.save(ctx.out / "snapshots")
    return {"mode": mode, "skipped": len(store.skipped)}


def _load_store(ctx):
    return SnapshotStore.load(ctx.require(ctx.path("snapshots", "snapshots"), "snapshots", "train"))


def cmd_build_bases(ctx):
    store = _load_store(ctx)
    b = ctx.cfg["bases"]
    basis = build_bases(store.snapshots, ctx.d, b["kind"], b["upsilon_int"], b.get("upsilon_bnd"), b["energy"])
    outdir = ctx.out / "bases"
    basis.save(outdir)
    write_json(outdir / "decomposition.json", ctx.d.to_json())
    c = ctx.constraints()
    c.save(outdir / "constraints")
    return {"kind": basis.kind, "n_int": basis.n_int, "n_bnd": basis.n_bnd, "n_A": c.n_A}


def _load_bases(ctx):
    return BasisSet.load(ctx.require(ctx.path("bases", "bases"), "bases", "build-bases"), ctx.d)


def cmd_build_hyper(ctx):
    h = ctx.cfg["hyper"]
    basis = _load_bases(ctx)
    if h["scheme"] == "identity":
        hyper = build_hyper(ctx.problem, ctx.d, "identity")
    else:
        store = _load_store(ctx)
        if store.residuals is None or store.residuals.shape[1] == 0:
            raise ConfigError("hyper-reduction needs residual snapshots from top_down training")
        r = ctx.cfg["residual_bases"]
        rb = build_residual_bases(store.residuals, ctx.d, r["upsilon"], r["energy"])
        hyper = build_hyper(ctx.problem, ctx.d, h["scheme"], rb, h["ratio"], basis.n_hat,
                            h["corner_mode"], h["n_w"])
    save_hyper(hyper, ctx.out / "hyper")
    return {"scheme": hyper.scheme, "counts": hyper.counts()}


def cmd_rom_solve(ctx):
    mu = ctx.mu
    basis = _load_bases(ctx)
    hpath = ctx.path("hyper", "hyper")
    hyper = load_hyper(ctx.problem, ctx.d, hpath) if (hpath / "hyper.json").exists() else None
    rp = RomProblem(ctx.problem, ctx.d, basis, ctx.constraints(), hyper, mu)
    s = ctx.cfg["solver"]
    sol = sqp_solve(rp, tol=s["tol"], max_iters=s["max_iters"])
    t0 = time.perf_counter()
    fom = ctx.newton(mu)
    t_fom = time.perf_counter() - t0
    x, disc = reconstruct_global(sol, ctx.d, mode="port-average")
    outdir = ctx.out / "rom"
    write_ddrb(outdir / "x.ddrb", x.reshape(-1, 1))
    info = {"mu": mu, "scheme": rp.hyper.scheme, "basis": basis.kind, "constraint": rp.constraints.mode,
            "rel_err": relative_error(sol, fom, ctx.d), "aposteriori_residual": aposteriori_residual(sol, rp),
            "iterations": sol.iterations, "timings": sol.timings, "fom_time": t_fom,
            "port_discrepancy": disc, "n_hat": basis.n_hat, "n_A": rp.rank_A, "trace": sol.trace}
    write_json(outdir / "rom.json", info)
    return info


def cmd_study(ctx):
    st = ctx.cfg["study"]
    spec = StudySpec(
        mu=tuple(ctx.mu), basis_kinds=tuple(st["basis_kinds"]), constraints=tuple(st["constraints"]),
        upsilon_state=tuple(st["upsilon_state"]), upsilon_bnd=tuple(st["upsilon_bnd"]),
        upsilon_res=tuple(st["upsilon_res"]), ratios=tuple(st["ratios"]), methods=tuple(st["methods"]),
        energy=ctx.cfg["bases"]["energy"], residual_energy=ctx.cfg["residual_bases"]["energy"],
        corner_mode=ctx.cfg["hyper"]["corner_mode"], n_weak_seeds=st["n_weak_seeds"],
        seed=ctx.cfg["seed"], timing_repeats=st["timing_repeats"], workers=st["workers"],
        tol=ctx.cfg["solver"]["tol"], max_iters=ctx.cfg["solver"]["max_iters"])
    store = _load_store(ctx)
    records, fronts = run_study(ctx.problem, ctx.d, store, spec, fom=ctx.newton(ctx.mu))
    outdir = ctx.out / "study"
    report(records, outdir)
    write_json(outdir / "records.json", [{**r.row(), "dims": r.dims, "seeds": r.seeds} for r in records])
    return {"records": len(records), "fronts": {m: len(f) for m, f in fronts.items()}}


def cmd_report(ctx):
    src = ctx.require(ctx.path("study", "study") / "study.csv", "study.csv", "study")
    records = read_records_csv(src)
    paths = report(records, ctx.out / "report")
    return {"written": [str(p) for p in paths]}


HANDLERS = {"fom-solve": cmd_fom_solve, "train": cmd_train, "build-bases": cmd_build_bases,
            "build-hyper": cmd_build_hyper, "rom-solve": cmd_rom_solve, "study": cmd_study,
            "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if not hasattr(args, "config"):
            raise ConfigError("--config is required")
        cfg = load_config(args.config, seed=getattr(args, "seed", None))
        try:
            ctx = _Context(cfg, getattr(args, "out", "out"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        summary = HANDLERS[args.command](ctx)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DdlspgError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    summary = {k: v for k, v in summary.items() if k != "trace"}
    print(json.dumps({"command": args.command, **summary}, default=jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
