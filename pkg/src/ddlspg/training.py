"""Offline snapshot generation.

Top-down: global Newton solves on an equispaced ``n1 x n2`` grid over the
parameter domain, keeping converged states and the residuals of every
non-final Newton iterate.

Bottom-up: each subdomain is solved on its own with random Dirichlet data on
its interface.  Every port gets a random Legendre series with decaying
coefficients ``sum_k r_k k**(-eta) L^k``, ``r_k ~ U(-1, 1)``.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import legendre

from .bases import SubdomainSnapshots
from .ddrb import read_ddrb, read_json, write_ddrb, write_json
from .errors import NonConvergence, SingularJacobian, UnsupportedPortGeometry
from .mesh_fom import LocalOperator, newton_solve

__all__ = [
    "TrainingPlan",
    "SnapshotStore",
    "parameter_grid",
    "run_top_down",
    "run_bottom_up",
    "legendre_port_functions",
    "port_boundary_values",
    "SubdomainOperator",
]

_log = logging.getLogger(__name__)


@dataclass
class TrainingPlan:
    problem: object
    mode: str = "top_down"
    grid: tuple = (20, 20)
    decomposition: object = None
    n_samples: int = 200
    eta: float = 2.0
    seed: int = 0
    mu_train: object = (5.0, 5.0)
    workers: int = 1

    def __post_init__(self):
        if self.mode not in ("top_down", "bottom_up"):
            raise ValueError("mode must be 'top_down' or 'bottom_up'")
        if self.mode == "top_down":
            n1, n2 = self.grid
            if n1 < 1 or n2 < 1:
                raise ValueError("grid needs at least one point per axis")
        else:
            if self.eta <= 0:
                raise ValueError("eta must be positive")
            if self.decomposition is None:
                raise ValueError("bottom-up training needs a decomposition")
            for mu in self.mu_list():
                self.problem.check_param(mu)

    def mu_list(self):
        """Per-subdomain training parameters for bottom-up runs."""
        mu = np.asarray(self.mu_train, dtype=float)
        n_sub = self.decomposition.n_subdomains
        if mu.ndim == 1:
            return [mu] * n_sub
        if mu.shape != (n_sub, 2):
            raise ValueError("mu_train must be a pair or one pair per subdomain")
        return list(mu)

    def describe(self):
        out = {"mode": self.mode, "problem": self.problem.kind}
        if self.mode == "top_down":
            out["grid"] = list(self.grid)
        else:
            out.update(n_samples=self.n_samples, eta=self.eta, seed=self.seed,
                       mu_train=[m.tolist() for m in self.mu_list()],
                       legendre_order="total degree, then lexicographic in (deg_x1, deg_x2)")
        return out


@dataclass
class SnapshotStore:
    plan: dict
    states: np.ndarray = None
    params: np.ndarray = None
    residuals: np.ndarray = None
    residual_iter: np.ndarray = None
    residual_sample: np.ndarray = None
    newton_iters: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    subdomain_blocks: list = None

    @property
    def snapshots(self):
        """What the basis builders consume."""
        if self.subdomain_blocks is not None:
            return SubdomainSnapshots(self.subdomain_blocks)
        return self.states

    def save(self, outdir):
        outdir = Path(outdir)
        meta = dict(plan=self.plan, skipped=self.skipped, newton_iters=self.newton_iters)
        if self.subdomain_blocks is not None:
            for i, b in enumerate(self.subdomain_blocks):
                write_ddrb(outdir / f"subdomain_{i}.ddrb", b)
            meta["n_subdomains"] = len(self.subdomain_blocks)
        else:
            write_ddrb(outdir / "states.ddrb", self.states)
            write_ddrb(outdir / "params.ddrb", self.params)
            cols = {}
            for k in np.unique(self.residual_iter):
                sel = self.residual_iter == k
                write_ddrb(outdir / "residuals" / f"iter_{int(k)}.ddrb", self.residuals[:, sel])
                cols[str(int(k))] = self.residual_sample[sel].tolist()
            meta["residual_columns"] = cols
        write_json(outdir / "plan.json", meta)
        return outdir

    @classmethod
    def load(cls, outdir):
        outdir = Path(outdir)
        meta = read_json(outdir / "plan.json")
        if "n_subdomains" in meta:
            blocks = [read_ddrb(outdir / f"subdomain_{i}.ddrb") for i in range(meta["n_subdomains"])]
            return cls(meta["plan"], newton_iters=meta["newton_iters"], skipped=meta["skipped"],
                       subdomain_blocks=blocks)
        states = read_ddrb(outdir / "states.ddrb")
        R, it, smp = [], [], []
        for k, samples in sorted(meta["residual_columns"].items(), key=lambda kv: int(kv[0])):
            R.append(read_ddrb(outdir / "residuals" / f"iter_{k}.ddrb"))
            it += [int(k)] * len(samples)
            smp += samples
        order = np.lexsort((np.asarray(it), np.asarray(smp)))
        residuals = np.hstack(R)[:, order] if R else np.zeros((states.shape[0], 0))
        return cls(meta["plan"], states, read_ddrb(outdir / "params.ddrb"), residuals,
                   np.asarray(it)[order], np.asarray(smp)[order], meta["newton_iters"], meta["skipped"])


def parameter_grid(param_domain, n1, n2):
    (a0, a1), (b0, b1) = np.asarray(param_domain, dtype=float)
    g1 = np.linspace(a0, a1, n1) if n1 > 1 else np.array([0.5 * (a0 + a1)])
    g2 = np.linspace(b0, b1, n2) if n2 > 1 else np.array([0.5 * (b0 + b1)])
    M1, M2 = np.meshgrid(g1, g2, indexing="ij")
    return np.column_stack([M1.ravel(), M2.ravel()])


def run_top_down(plan):
    problem = plan.problem
    mus = parameter_grid(problem.param_domain, *plan.grid)

    def solve(mu):
        try:
            return newton_solve(problem, mu, keep_residuals=True)
        except (NonConvergence, SingularJacobian) as exc:
            _log.warning("skipping mu=%s: %s", mu.tolist(), exc)
            return None

    problem.global_operator  # build once before any threads start
    if plan.workers > 1:
        with ThreadPoolExecutor(plan.workers) as pool:
            sols = list(pool.map(solve, mus))
    else:
        sols = [solve(mu) for mu in mus]
    keep = [k for k, s in enumerate(sols) if s is not None]
    states = np.column_stack([sols[k].x for k in keep]) if keep else np.zeros((problem.n, 0))
    R, it, smp = [], [], []
    for col, k in enumerate(keep):
        snaps = sols[k].residual_snapshots
        R.append(snaps)
        it += list(range(snaps.shape[1]))
        smp += [col] * snaps.shape[1]
    return SnapshotStore(
        plan=plan.describe(),
        states=states,
        params=mus[keep],
        residuals=np.hstack(R) if R else np.zeros((problem.n, 0)),
        residual_iter=np.asarray(it, dtype=int),
        residual_sample=np.asarray(smp, dtype=int),
        newton_iters=[sols[k].newton_iters for k in keep],
        skipped=[mus[k].tolist() for k in range(len(mus)) if sols[k] is None],
    )


# ------------------------------------------------------------- bottom-up


def _port_nodes(port, problem):
    nodes = problem.dof_node[port.dofs]
    return nodes, problem.mesh.coords[problem.mesh.free_nodes[nodes]]


def legendre_port_functions(port, problem):
    """Tensor Legendre functions evaluated at the port's DOFs.

    Returns an array ``(port size, K)`` with ``K`` the number of distinct port
    nodes.  Column ``k`` holds the ``k``-th function in total-degree-then-
    lexicographic order of ``(deg_x1, deg_x2)``; both DOFs of a node share the
    node's value.
    """
    nodes, xy = _port_nodes(port, problem)
    uniq, first = np.unique(nodes, return_index=True)
    pts = xy[first]
    axes, degs = [], []
    for ax in range(2):
        vals = np.unique(np.round(pts[:, ax], 12))
        lo, hi = vals[0], vals[-1]
        t = np.zeros(pts.shape[0]) if hi == lo else 2 * (pts[:, ax] - lo) / (hi - lo) - 1
        axes.append(t)
        degs.append(vals.size)
    if degs[0] * degs[1] != uniq.size:
        raise UnsupportedPortGeometry(f"port {port.id} nodes do not form a full rectangular grid")
    pairs = sorted(((a, b) for a in range(degs[0]) for b in range(degs[1])), key=lambda ab: (ab[0] + ab[1], ab))
    F = np.empty((uniq.size, len(pairs)))
    for k, (a, b) in enumerate(pairs):
        F[:, k] = legendre.legval(axes[0], np.eye(a + 1)[a]) * legendre.legval(axes[1], np.eye(b + 1)[b])
    where = np.searchsorted(uniq, nodes)
    return F[where]


def port_boundary_values(port, problem, eta, rng):
    """One random draw of ``sum_k r_k k^-eta L^k`` on the port, per velocity component."""
    F = legendre_port_functions(port, problem)
    comp = problem.dof_component[port.dofs]
    K = F.shape[1]
    weights = np.arange(1, K + 1, dtype=float) ** (-eta)
    out = np.empty(port.size)
    for c in range(problem.dofs_per_node):
        r = rng.uniform(-1.0, 1.0, K)
        sel = comp == c
        out[sel] = F[sel] @ (r * weights)
    return out


class SubdomainOperator(LocalOperator):
    """Interior residual rows of one subdomain as a square system in its interior DOFs.

    Interface values are frozen at ``x_interface``.
    """

    def __init__(self, problem, subdomain, x_interface):
        self._local = problem.local_operator(subdomain.interior)
        self.rows = subdomain.interior
        self.cols = subdomain.interior
        cols = self._local.cols
        state = np.concatenate([subdomain.interior, subdomain.interface])
        order = np.argsort(state, kind="stable")
        at = np.searchsorted(state[order], cols)
        if np.any(at >= state.size) or np.any(state[order[np.minimum(at, state.size - 1)]] != cols):
            raise ValueError("subdomain rows read columns outside the subdomain state")
        where = order[at]
        # interior rows may touch only part of the interface
        self._int_pos = np.searchsorted(cols, subdomain.interior)
        touched = where >= subdomain.n_interior
        self._buf = np.zeros(cols.size)
        self._buf[touched] = np.asarray(x_interface)[where[touched] - subdomain.n_interior]

    def _full(self, xi):
        v = self._buf.copy()
        v[self._int_pos] = xi
        return v

    def residual(self, xc, mu):
        return self._local.residual(self._full(xc), mu)

    def jacobian(self, xc, mu):
        return self._local.jacobian(self._full(xc), mu)[:, self._int_pos].tocsr()

    def linearize(self, xc, mu, V):
        W = np.zeros((self._buf.size, V.shape[1]))
        W[self._int_pos] = V
        return self._local.linearize(self._full(xc), mu, W)


def run_bottom_up(plan, newton_tol=1e-10):
    problem, d = plan.problem, plan.decomposition
    blocks, iters, skipped = [], [], []
    for s, mu in zip(d.subdomains, plan.mu_list()):
        rng = np.random.default_rng([int(plan.seed), s.index])
        cols = []
        for k in range(plan.n_samples):
            xg = np.empty(s.n_interface)
            for j in s.ports:
                p = d.ports[j]
                xg[p.local[s.index]] = port_boundary_values(p, problem, plan.eta, rng)
            op = SubdomainOperator(problem, s, xg)
            try:
                sol = newton_solve(problem, mu, tol=newton_tol, operator=op)
            except (NonConvergence, SingularJacobian) as exc:
                _log.warning("subdomain %d sample %d skipped: %s", s.index, k, exc)
                skipped.append([s.index, k])
                continue
            cols.append(np.concatenate([sol.x, xg]))
            iters.append(sol.newton_iters)
        blocks.append(np.column_stack(cols) if cols else np.zeros((s.n_interior + s.n_interface, 0)))
    return SnapshotStore(plan=plan.describe(), newton_iters=iters, skipped=skipped, subdomain_blocks=blocks)
