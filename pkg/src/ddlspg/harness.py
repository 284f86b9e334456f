"""Error metrics, the online cost model, parameter studies and report files.

The study runner sweeps basis kinds, compatibility constraints, truncation
levels and sample-mesh ratios, records one :class:`RunRecord` per setting and
extracts the error/time Pareto front per method.
"""

import csv
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .bases import build_bases, build_residual_bases, parse_upsilon
from .ddrb import write_json
from .decomp import build_strong_constraints, build_weak_constraints
from .errors import DdlspgError, EmptyInput, ZeroReference
from .hyper import build_hyper
from .mesh_fom import newton_solve
from .sqp import RomProblem, sqp_solve

__all__ = [
    "METHODS",
    "METHOD_SCHEMES",
    "CSV_COLUMNS",
    "relative_error",
    "aposteriori_residual",
    "CostDims",
    "CostEstimate",
    "cost_model",
    "cost_dims_from",
    "RunRecord",
    "StudySpec",
    "run_study",
    "pareto_front",
    "write_records_csv",
    "read_records_csv",
    "fit_bound_constant",
    "report",
]

_log = logging.getLogger(__name__)

METHODS = ("DDLSPG", "DDGNAT", "Collocation")
METHOD_SCHEMES = {"DDLSPG": "identity", "DDGNAT": "gappy", "Collocation": "collocation"}
CSV_COLUMNS = ("method", "basis", "constraint", "n_c", "upsilon_state", "upsilon_bnd", "upsilon_res",
               "ratio", "rel_err", "t_asm", "t_solve", "t_total", "seed")


# ------------------------------------------------------------------ metrics


def relative_error(rom, fom, d):
    """Root-mean-square over subdomains of the relative state error.

    Each subdomain contributes ``||x~_i - x_i||^2 / ||x_i||^2`` with ``x_i`` the
    FOM state restricted to the subdomain's interior followed by its interface.
    """
    x = fom.x if hasattr(fom, "x") else np.asarray(fom, dtype=float)
    terms = []
    for s, xi_rom in zip(d.subdomains, rom.subdomain_states):
        ref = x[s.state]
        nrm = float(np.linalg.norm(ref))
        if nrm == 0.0:
            raise ZeroReference(f"subdomain {s.index} has a zero reference state")
        terms.append(float(np.linalg.norm(xi_rom - ref)) ** 2 / nrm ** 2)
    return float(np.sqrt(np.mean(terms)))


def aposteriori_residual(rom, rp):
    """Computable residual metric ``(sum_i ||B_i r_i(x~_i)||^2)^(1/2)``.

    ``rp`` is the :class:`RomProblem` the solution came from; its hyper-reduction
    supplies ``B_i`` and the sampled rows.
    """
    total = 0.0
    for i, yi in enumerate(rp.split(rom.state.y)):
        r, _ = rp.subdomain_terms(i, yi, jacobian=False)
        total += float(r @ r)
    return float(np.sqrt(total))


def fit_bound_constant(errors, metrics):
    """Smallest ``c`` with ``error <= c * metric`` on the given runs."""
    e = np.asarray(errors, dtype=float)
    m = np.asarray(metrics, dtype=float)
    if e.size == 0:
        raise EmptyInput("no runs to fit")
    if np.any(m <= 0):
        raise ValueError("residual metrics must be positive to fit a ratio")
    return float(np.max(e / m))


# --------------------------------------------------------------- cost model


@dataclass
class CostDims:
    """Per-subdomain dimensions entering the operation counts.

    Every per-subdomain field is a sequence with one entry per subdomain.
    ``n_A`` is the number of constraint rows.  ``c_r``/``c_J`` are flops per
    residual entry and per Jacobian row.  ``w_int``/``w_bnd`` are average
    Jacobian nonzeros per row in interior and interface columns.
    """

    n_int_hat: list
    n_bnd_hat: list
    n_A: int
    n_s_int: list
    n_s_bnd: list
    n_s_r: list
    n_B: list
    c_r: list
    c_J: list
    w_int: list
    w_bnd: list

    def __post_init__(self):
        k = len(self.n_int_hat)
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "n_A":
                if v < 0:
                    raise ValueError("n_A must be nonnegative")
                continue
            v = list(v) if np.ndim(v) else [v] * k
            if len(v) != k:
                raise ValueError(f"{f.name} needs one entry per subdomain")
            if any(x < 0 for x in v):
                raise ValueError(f"{f.name} must be nonnegative")
            setattr(self, f.name, v)

    @property
    def n_subdomains(self):
        return len(self.n_int_hat)


@dataclass
class CostEstimate:
    """Flop counts per SQP iteration.

    ``step1``..``step3`` are per-subdomain lists (parallel steps).  ``step4``
    to ``step7`` are serial scalars.  ``parallel_assembly`` charges the
    slowest subdomain for steps 1-3, ``serial_assembly`` sums them.
    """

    step1: list
    step2: list
    step3: list
    step4: float
    step5: float
    step6: float
    step7: float

    @property
    def parallel_assembly(self):
        return max(a + b + c for a, b, c in zip(self.step1, self.step2, self.step3)) + self.step4

    @property
    def serial_assembly(self):
        return sum(self.step1) + sum(self.step2) + sum(self.step3) + self.step4

    @property
    def solve(self):
        return self.step5 + self.step6 + self.step7

    @property
    def total(self):
        return self.parallel_assembly + self.solve


def cost_model(dims, scheme="identity", basis_kind="port"):
    """Evaluate the per-iteration operation counts for the given dimensions.

    The gappy term of step 2 is charged only for ``scheme == "gappy"`` (the
    only dense ``B_i``).  For full-subdomain bases ``n_int_hat`` holds the
    single per-subdomain width, the interface width equals it, and the solve
    dimension is ``sum_i n_hat_i + n_A``.
    """
    full = basis_kind == "full_subdomain"
    nO = dims.n_int_hat
    nG = dims.n_int_hat if full else dims.n_bnd_hat
    nA = dims.n_A
    dense = 1 if scheme == "gappy" else 0
    s1, s2, s3 = [], [], []
    for i in range(dims.n_subdomains):
        a, b = nO[i], nG[i]
        nB, nsr = dims.n_B[i], dims.n_s_r[i]
        s1.append(2 * dims.n_s_int[i] * a + 2 * dims.n_s_bnd[i] * b)
        s2.append(nsr * dims.c_r[i] + nsr * dims.c_J[i] + 2 * nsr * dims.w_int[i] * a
                  + 2 * nsr * dims.w_bnd[i] * b + 4 * nA * b + dense * 2 * nB * nsr * (1 + a + b))
        s3.append(2 * a * nB + 2 * b * nB + b + nB ** 2 * (b ** 2 + 2 * b * a + a ** 2))
    k = dims.n_subdomains
    if full:
        size = sum(nO) + nA
        upd = 2 * sum(nO)
    else:
        size = sum(nO) + sum(nG) + nA
        upd = 2 * sum(a + b for a, b in zip(nO, nG))
    return CostEstimate(s1, s2, s3, 2 * k * nA, size ** 3 / 3.0, upd, 2 * nA)


def cost_dims_from(rp, flops_per_nonzero=2.0):
    """Read :class:`CostDims` off a :class:`RomProblem`.

    Nonzero counts come from the sampled Jacobian pattern at the zero state.
    ``c_r`` and ``c_J`` are estimated as ``flops_per_nonzero`` times the
    average nonzeros per sampled row.
    """
    keys = ("n_int_hat", "n_bnd_hat", "n_s_int", "n_s_bnd", "n_s_r", "n_B", "c_r", "c_J", "w_int", "w_bnd")
    out = {k: [] for k in keys}
    for i, h in enumerate(rp.hyper.subdomains):
        J = h.op.jacobian(np.zeros(h.op.cols.size), rp.mu).tocsc()
        nr = max(J.shape[0], 1)
        nnz_int = np.diff(J.indptr)[h.int_cols].sum() if h.int_cols.size else 0
        nnz_bnd = np.diff(J.indptr)[h.bnd_cols].sum() if h.bnd_cols.size else 0
        w = (nnz_int + nnz_bnd) / nr
        c = h.counts
        out["n_int_hat"].append(rp.bases.Phi_int[i].shape[1])
        out["n_bnd_hat"].append(rp.bases.Phi_bnd[i].shape[1])
        out["n_s_int"].append(c["n_s_int"])
        out["n_s_bnd"].append(c["n_s_bnd"])
        out["n_s_r"].append(c["n_s_r"])
        out["n_B"].append(c["n_B"])
        out["c_r"].append(flops_per_nonzero * w)
        out["c_J"].append(flops_per_nonzero * w)
        out["w_int"].append(nnz_int / nr)
        out["w_bnd"].append(nnz_bnd / nr)
    return CostDims(n_A=rp.rank_A, **out)


# ------------------------------------------------------------------ records


@dataclass
class RunRecord:
    """One study row.  ``upsilon_res`` and ``ratio`` are 0 for DDLSPG (no sample mesh).

    Weak-constraint rows average over the seeds in ``seeds``; ``seed`` is the first.
    """

    method: str
    basis: str
    constraint: str
    n_c: int
    upsilon_state: float
    upsilon_bnd: float
    upsilon_res: float
    ratio: float
    rel_err: float
    t_asm: float
    t_solve: float
    t_total: float
    seed: int
    dims: dict = field(default=None, compare=False)
    seeds: list = field(default=None, compare=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not self.rel_err >= 0:
            raise ValueError("relative error must be nonnegative")

    def row(self):
        d = asdict(self)
        return {k: d[k] for k in CSV_COLUMNS}

    @property
    def key(self):
        return (self.method, self.basis, self.constraint, self.n_c, self.upsilon_state,
                self.upsilon_bnd, self.upsilon_res, self.ratio)


_CSV_TYPES = {"method": str, "basis": str, "constraint": str, "n_c": int, "upsilon_state": float,
              "upsilon_bnd": float, "upsilon_res": float, "ratio": float, "rel_err": float,
              "t_asm": float, "t_solve": float, "t_total": float, "seed": int}


def write_records_csv(path, records):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            w.writeheader()
            for r in records:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_records_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [RunRecord(**{k: _CSV_TYPES[k](v) for k, v in row.items()}) for row in reader]


def pareto_front(records):
    """Records not dominated in (rel_err, t_total).

    A record is dominated when another is no worse in both and strictly better
    in at least one.  Input order is kept.
    """
    recs = list(records)
    front = []
    for r in recs:
        dominated = any(q.rel_err <= r.rel_err and q.t_total <= r.t_total
                        and (q.rel_err < r.rel_err or q.t_total < r.t_total) for q in recs)
        if not dominated:
            front.append(r)
    return front


# -------------------------------------------------------------------- study


@dataclass
class StudySpec:
    """Grid for :func:`run_study`.

    ``constraints`` mixes ``"strong"`` and integers (weak constraints per
    port).  ``upsilon_bnd`` entries of ``None`` reuse the state value.
    Residual levels and ratios apply to the hyper-reduced methods only.
    """

    mu: tuple
    basis_kinds: tuple = ("port", "skeleton", "full_interface", "full_subdomain")
    constraints: tuple = ("strong", 1, 2, 3, 4, 5)
    upsilon_state: tuple = (1e-5,)
    upsilon_bnd: tuple = (None,)
    upsilon_res: tuple = (1e-12,)
    ratios: tuple = (1.0, 1.5, 2.0, 4.0)
    methods: tuple = ("DDLSPG", "DDGNAT", "Collocation")
    energy: str = "sigma"
    residual_energy: str = "sigma"
    corner_mode: str = "interface"
    n_weak_seeds: int = 5
    seed: int = 0
    timing_repeats: int = 1
    workers: int = 1
    tol: float = 1e-8
    max_iters: int = 50

    def __post_init__(self):
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        for c in self.constraints:
            if c != "strong" and not (isinstance(c, int) and c >= 1):
                raise ValueError(f"constraint entries must be 'strong' or positive integers, got {c!r}")
        if self.n_weak_seeds < 1 or self.timing_repeats < 1:
            raise ValueError("n_weak_seeds and timing_repeats must be at least 1")


def _solve_timed(rp, spec):
    """Solve ``timing_repeats`` times and average the timings."""
    sols = [sqp_solve(rp, tol=spec.tol, max_iters=spec.max_iters) for _ in range(spec.timing_repeats)]
    t = {k: float(np.mean([s.timings[k] for s in sols])) for k in ("assembly", "solve", "total")}
    return sols[-1], t


def run_study(problem, d, snapshots, spec, fom=None):
    """Run every grid point of ``spec`` and return ``(records, fronts)``.

    ``snapshots`` is a :class:`SnapshotStore` (its residuals feed the
    hyper-reduced methods).  Weak-constraint settings are averaged over
    ``n_weak_seeds`` test-function draws starting at ``spec.seed``.  Failed
    runs are logged and skipped.  ``fronts`` maps method to its Pareto front.
    """
    mu = problem.check_param(spec.mu)
    if fom is None:
        fom = newton_solve(problem, mu)
    X = snapshots.snapshots
    need_res = any(m != "DDLSPG" for m in spec.methods)
    res_bases = {}
    if need_res:
        for ur in spec.upsilon_res:
            try:
                res_bases[ur] = build_residual_bases(snapshots.residuals, d, ur, spec.residual_energy)
            except (DdlspgError, ValueError) as exc:
                _log.warning("residual basis at %s failed: %s", ur, exc)
    strong = build_strong_constraints(d) if "strong" in spec.constraints else None

    jobs = []
    for kind, us, ub in itertools.product(spec.basis_kinds, spec.upsilon_state, spec.upsilon_bnd):
        jobs.append((kind, us, ub))

    def basis_job(job):
        kind, us, ub = job
        try:
            B = build_bases(X, d, kind, us, ub, spec.energy)
        except (DdlspgError, ValueError) as exc:
            _log.warning("bases %s failed: %s", job, exc)
            return []
        hypers = [("DDLSPG", None, None, build_hyper(problem, d, "identity"))] if "DDLSPG" in spec.methods else []
        for m in spec.methods:
            if m == "DDLSPG":
                continue
            for ur, ratio in itertools.product(spec.upsilon_res, spec.ratios):
                if ur not in res_bases:
                    continue
                try:
                    h = build_hyper(problem, d, METHOD_SCHEMES[m], res_bases[ur], ratio, B.n_hat, spec.corner_mode)
                except (DdlspgError, ValueError) as exc:
                    _log.warning("%s hyper (%s, ratio %s) failed: %s", m, ur, ratio, exc)
                    continue
                hypers.append((m, ur, ratio, h))
        out = []
        for (m, ur, ratio, h), c in itertools.product(hypers, spec.constraints):
            seeds = [None] if c == "strong" else [spec.seed + k for k in range(spec.n_weak_seeds)]
            errs, tims, dims = [], [], None
            try:
                for sd in seeds:
                    cs = strong if c == "strong" else build_weak_constraints(d, c, sd)
                    rp = RomProblem(problem, d, B, cs, h, mu)
                    sol, t = _solve_timed(rp, spec)
                    errs.append(relative_error(sol, fom, d))
                    tims.append(t)
                    if dims is None:
                        dims = {"n_hat": B.n_hat, "n_int": B.n_int, "n_bnd": B.n_bnd, "n_A": rp.rank_A,
                                "n_s": [x.counts["n_s_r"] for x in h.subdomains],
                                "iterations": sol.iterations}
            except DdlspgError as exc:
                _log.warning("run %s %s %s failed: %s", m, job, c, exc)
                continue
            out.append(RunRecord(
                method=m, basis=kind, constraint="strong" if c == "strong" else "weak",
                n_c=0 if c == "strong" else int(c), upsilon_state=float(parse_upsilon(us)),
                upsilon_bnd=float(parse_upsilon(us if ub is None else ub)),
                upsilon_res=float(parse_upsilon(ur)) if ur is not None else 0.0,
                ratio=float(ratio) if ratio is not None else 0.0,
                rel_err=float(np.mean(errs)),
                t_asm=float(np.mean([t["assembly"] for t in tims])),
                t_solve=float(np.mean([t["solve"] for t in tims])),
                t_total=float(np.mean([t["total"] for t in tims])),
                seed=int(spec.seed), dims=dims, seeds=[s for s in seeds if s is not None]))
        return out

    if spec.workers > 1:
        with ThreadPoolExecutor(spec.workers) as pool:
            parts = list(pool.map(basis_job, jobs))
    else:
        parts = [basis_job(j) for j in jobs]
    records = sorted((r for p in parts for r in p), key=lambda r: tuple(map(str, r.key)))
    fronts = {m: pareto_front([r for r in records if r.method == m]) for m in spec.methods}
    return records, fronts


# ------------------------------------------------------------------- report


def _plot_data(records):
    """Error-vs-time scatter per method and error-vs-constraints tables per basis kind."""
    scatter = {}
    for r in records:
        scatter.setdefault(r.method, []).append(
            {"t_total": r.t_total, "rel_err": r.rel_err, "basis": r.basis,
             "constraint": r.constraint, "n_c": r.n_c})
    table = {}
    for r in records:
        col = "strong" if r.constraint == "strong" else str(r.n_c)
        row = table.setdefault(r.method, {}).setdefault(r.basis, {})
        row.setdefault(col, []).append(r.rel_err)
    table = {m: {b: {c: float(np.min(v)) for c, v in cols.items()} for b, cols in rows.items()}
             for m, rows in table.items()}
    return {"error_vs_time": scatter, "error_vs_constraints": table}


def report(records, outdir):
    """Write ``study.csv``, ``pareto_<method>.csv`` and ``plot_data.json``.

    Returns the list of written paths.
    """
    records = list(records)
    if not records:
        raise EmptyInput("no records to report")
    outdir = Path(outdir)
    paths = [write_records_csv(outdir / "study.csv", records)]
    for m in sorted({r.method for r in records}):
        front = pareto_front([r for r in records if r.method == m])
        paths.append(write_records_csv(outdir / f"pareto_{m}.csv", front))
    plot = outdir / "plot_data.json"
    try:
        write_json(plot, _plot_data(records))
    except OSError as exc:
        raise OSError(f"cannot write {plot}: {exc}") from exc
    paths.append(plot)
    return paths
