"""Constrained Gauss-Newton SQP for the decomposed least-squares ROM.

Unknowns are the reduced coordinates ``y_i`` of every subdomain.  For
interior/boundary bases ``y_i = (xhat_int_i, xhat_bnd_i)``.  For full-subdomain
bases ``y_i = xhat_i`` drives both the interior and the interface rows.  The
problem solved is

    minimize  1/2 sum_i ||B_i r_i(Phi_int_i xhat, Phi_bnd_i xhat)||^2
    s.t.      sum_i A_i Phi_bnd_i xhat_bnd_i = 0.

The constraint rows are replaced once by an orthonormal basis of their row
space (SVD, relative rank threshold 1e-12).  The feasible set is unchanged.
Redundant rows (multi-member ports, incompatible bases) would otherwise make
the saddle matrix singular, and badly scaled rows would make it
ill-conditioned.  Multipliers are mapped back to the original rows.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .errors import NonConvergence, NonFiniteAssembly, PortMismatch, SingularSaddle
from .hyper import build_hyper

__all__ = [
    "RomProblem",
    "SqpState",
    "RomSolution",
    "assemble_kkt",
    "sqp_solve",
    "nullspace_reduce",
    "reconstruct_global",
]

RANK_RTOL = 1e-12
MERIT_ULPS = 100.0


class RomProblem:
    """Bundles FOM, decomposition, bases, constraints and hyper-reduction for one parameter."""

    def __init__(self, problem, d, bases, constraints=None, hyper=None, mu=None):
        self.problem = problem
        self.d = d
        self.bases = bases
        self.constraints = constraints
        self.hyper = hyper if hyper is not None else build_hyper(problem, d, "identity")
        self.mu = problem.check_param(problem.reference_param() if mu is None else mu)
        self.coupled = bases.coupled
        if bases.n_subdomains != d.n_subdomains or len(self.hyper.subdomains) != d.n_subdomains:
            raise ValueError("bases/hyper do not match the decomposition")
        self.n_y = []
        self.W = []
        for s, Pi, Pb, h in zip(d.subdomains, bases.Phi_int, bases.Phi_bnd, self.hyper.subdomains):
            if Pi.shape[0] != s.n_interior or Pb.shape[0] != s.n_interface:
                raise ValueError(f"subdomain {s.index}: basis rows do not match the decomposition")
            ni, nb = Pi.shape[1], Pb.shape[1]
            if self.coupled and ni != nb:
                raise ValueError("full-subdomain bases need matching interior/interface widths")
            ny = ni if self.coupled else ni + nb
            W = np.zeros((h.op.cols.size, ny))
            if self.coupled:
                W[h.int_cols] = Pi[h.int_pos]
                W[h.bnd_cols] = Pb[h.bnd_pos]
            else:
                W[h.int_cols, :ni] = Pi[h.int_pos]
                W[h.bnd_cols, ni:] = Pb[h.bnd_pos]
            self.n_y.append(ny)
            self.W.append(W)
        self._projected = [h.op.project(W, h.weight_matrix()) for W, h in zip(self.W, self.hyper.subdomains)]
        self.offsets = np.concatenate([[0], np.cumsum(self.n_y)]).astype(int)
        self._build_constraints()

    def with_mu(self, mu):
        """Same offline data, different parameter."""
        other = object.__new__(RomProblem)
        other.__dict__.update(self.__dict__)
        other.mu = self.problem.check_param(mu)
        return other

    def _bnd_slice(self, i):
        if self.coupled:
            return slice(0, self.n_y[i])
        return slice(self.bases.Phi_int[i].shape[1], self.n_y[i])

    def _build_constraints(self):
        c = self.constraints
        N = int(self.offsets[-1])
        if c is None or c.n_A == 0:
            self.M_full = np.zeros((0, N))
        else:
            M = np.zeros((c.n_A, N))
            for i, (Ai, Pb) in enumerate(zip(c.A, self.bases.Phi_bnd)):
                cols = np.arange(self.offsets[i], self.offsets[i + 1])[self._bnd_slice(i)]
                M[:, cols] = np.asarray(Ai @ Pb)
            self.M_full = M
        if self.M_full.shape[0] == 0:
            self.M = np.zeros((0, N))
            self.Z = np.eye(N)
            self.U_r = np.zeros((0, 0))
            self.S_r = np.zeros(0)
            self.rank_A = 0
            return
        U, S, Vt = la.svd(self.M_full, full_matrices=True)
        r = int(np.sum(S > RANK_RTOL * S[0])) if S.size and S[0] > 0 else 0
        self.rank_A = r
        self.M = Vt[:r]
        self.Z = Vt[r:].T
        self.S_r = S[:r]
        self.U_r = U[:, :r]

    def multipliers(self, lam):
        """Map multipliers of the orthonormal rows back to the original constraint rows."""
        if self.M_full.shape[0] == 0:
            return np.zeros(0)
        return self.U_r @ (lam / self.S_r)

    @property
    def n_coords(self):
        return int(self.offsets[-1])

    def split(self, y):
        return [y[self.offsets[i]:self.offsets[i + 1]] for i in range(len(self.n_y))]

    def coords(self, y_i, i):
        """Return ``(xhat_int, xhat_bnd)`` for subdomain ``i``."""
        if self.coupled:
            return y_i, y_i
        ni = self.bases.Phi_int[i].shape[1]
        return y_i[:ni], y_i[ni:]

    def subdomain_terms(self, i, y_i, jacobian=True):
        """Weighted residual ``B r`` and, if asked, weighted reduced Jacobian for subdomain ``i``."""
        pr = self._projected[i]
        if pr is not None:
            return pr.linearize(y_i, self.mu) if jacobian else (pr.residual(y_i, self.mu), None)
        h = self.hyper.subdomains[i]
        W = self.W[i]
        xc = W @ y_i
        if jacobian:
            r, JW = h.op.linearize(xc, self.mu, W)
            return h.weight(r), h.weight(JW)
        return h.weight(h.op.residual(xc, self.mu)), None


@dataclass
class SqpState:
    y: np.ndarray
    lam: np.ndarray
    k: int = 0
    alpha: float = None
    kkt_norm: float = None
    stationarity: float = None
    feasibility: float = None


@dataclass
class RomSolution:
    state: SqpState
    xhat_int: list
    xhat_bnd: list
    x_int: list
    x_bnd: list
    lam: np.ndarray
    objective: float
    trace: list = field(default_factory=list)
    converged: bool = True
    timings: dict = field(default_factory=dict)
    coupled: bool = False

    @property
    def iterations(self):
        return self.state.k

    @property
    def subdomain_states(self):
        return [np.concatenate([a, b]) for a, b in zip(self.x_int, self.x_bnd)]


def _evaluate(rp, y, jacobian=True, timer=None):
    rs, Js, times = [], [], []
    for i, yi in enumerate(rp.split(y)):
        t0 = time.perf_counter()
        r, J = rp.subdomain_terms(i, yi, jacobian)
        times.append(time.perf_counter() - t0)
        rs.append(r)
        Js.append(J)
    if timer is not None:
        timer.append(times)
    return rs, Js


def _objective(rs):
    return 0.5 * float(sum(r @ r for r in rs))


def _gradient_hessian(rp, rs, Js):
    g = np.concatenate([J.T @ r for r, J in zip(rs, Js)]) if rs else np.zeros(0)
    H = la.block_diag(*[J.T @ J for J in Js]) if Js else np.zeros((0, 0))
    return g, H


def assemble_kkt(rp, state):
    """Saddle matrix and right-hand side ``-(grad L, c)`` at ``state``.

    The constraint block uses the orthonormal constraint rows, and
    ``state.lam`` is taken in that space.
    """
    y = np.asarray(state.y, dtype=float)
    rs, Js = _evaluate(rp, y)
    return _kkt_from_terms(rp, y, np.asarray(state.lam, dtype=float), rs, Js)


def _kkt_from_terms(rp, y, lam, rs, Js):
    g, H = _gradient_hessian(rp, rs, Js)
    M = rp.M
    m = M.shape[0]
    K = np.zeros((H.shape[0] + m, H.shape[0] + m))
    K[: H.shape[0], : H.shape[0]] = H
    K[H.shape[0]:, : H.shape[0]] = M
    K[: H.shape[0], H.shape[0]:] = M.T
    rhs = -np.concatenate([g + M.T @ lam, M @ y])
    if not (np.all(np.isfinite(K)) and np.all(np.isfinite(rhs))):
        raise NonFiniteAssembly("non-finite entries in the KKT system")
    return K, rhs


def _solve_saddle(rp, g, H, y):
    """Solve the Gauss-Newton saddle system through the constraint null space.

    With orthonormal constraint rows ``M`` and null-space basis ``Z`` the step
    is ``p = -M^T M y + Z q`` where ``(Z^T H Z) q = -Z^T (g + H p_range)``.  The
    new multipliers follow from stationarity, ``lam = -M (g + H p)``.  This
    avoids factoring the indefinite matrix, whose conditioning degrades with
    the scale of ``H`` even when the reduced Hessian is well conditioned.
    Raises :class:`SingularSaddle` when ``Z^T H Z`` is not positive definite.
    """
    M, Z = rp.M, rp.Z
    p = -(M.T @ (M @ y))
    if Z.shape[1]:
        Hr = Z.T @ H @ Z
        b = -(Z.T @ (g + H @ p))
        try:
            c = la.cho_factor(0.5 * (Hr + Hr.T), check_finite=False)
        except la.LinAlgError as exc:
            raise SingularSaddle(f"reduced Hessian is not positive definite: {exc}") from exc
        p = p + Z @ la.cho_solve(c, b, check_finite=False)
    lam = -(M @ (g + H @ p))
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(lam))):
        raise SingularSaddle("saddle solve produced non-finite values")
    return p, lam


def sqp_solve(rp, y0=None, lam0=None, tol=1e-8, max_iters=50, line_search=True):
    """Gauss-Newton SQP with a backtracking line search on the merit function.

    ``y0``: stacked initial coordinates (default zero).  ``lam0``: initial
    multipliers for the orthonormal constraint rows (default zero).  Stops when
    the KKT residual is at most ``tol * max(1, initial KKT residual)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    t_start = time.perf_counter()
    N, m = rp.n_coords, rp.M.shape[0]
    y = np.zeros(N) if y0 is None else np.array(y0, dtype=float)
    lam = np.zeros(m) if lam0 is None else np.array(lam0, dtype=float)
    if y.shape != (N,) or lam.shape != (m,):
        raise ValueError("initial guess has the wrong size")
    asm_times, solve_time = [], 0.0
    trace = []
    rs, Js = _evaluate(rp, y, timer=asm_times)
    f = _objective(rs)
    target = None
    k = 0
    alpha = None
    while True:
        t0 = time.perf_counter()
        K, rhs = _kkt_from_terms(rp, y, lam, rs, Js)
        stat = float(np.linalg.norm(rhs[:N]))
        feas = float(np.linalg.norm(rp.M_full @ y)) if m else 0.0
        kkt = float(np.hypot(stat, feas))
        if target is None:
            target = tol * max(1.0, kkt)
        trace.append({"iteration": k, "kkt": kkt, "stationarity": stat, "feasibility": feas,
                      "alpha": alpha, "objective": 2.0 * f})
        if kkt <= target:
            solve_time += time.perf_counter() - t0
            break
        if k >= max_iters:
            raise NonConvergence(f"SQP did not converge in {max_iters} iterations", trace)
        g = -rhs[:N] - rp.M.T @ lam
        p, lam_new = _solve_saddle(rp, g, K[:N, :N], y)
        dlam = lam_new - lam
        solve_time += time.perf_counter() - t0
        rho = 10.0 * (np.abs(lam + dlam).max() if m else 0.0) + 1.0
        merit0 = 2.0 * f + rho * feas
        # near the solution the merit is flat to rounding; tolerate that much
        slack = MERIT_ULPS * np.finfo(float).eps * max(1.0, abs(merit0))
        alpha = 1.0
        while True:
            yt = y + alpha * p
            # trial points may overflow; a non-finite merit just shortens the step
            with np.errstate(over="ignore", invalid="ignore"):
                rs_t, _ = _evaluate(rp, yt, jacobian=False, timer=asm_times)
                ft = _objective(rs_t)
                merit = 2.0 * ft + rho * (np.linalg.norm(rp.M_full @ yt) if m else 0.0)
            if not line_search or (np.isfinite(merit) and merit <= merit0 + slack):
                break
            alpha *= 0.5
            if alpha < 2.0**-10:
                raise NonConvergence("SQP line search could not reduce the merit function", trace)
        y = yt
        lam = lam + alpha * dlam
        k += 1
        rs, Js = _evaluate(rp, y, timer=asm_times)
        f = _objective(rs)

    state = SqpState(y, lam, k, alpha, kkt, stat, feas)
    xi, xb, Xi, Xb = [], [], [], []
    for i, yi in enumerate(rp.split(y)):
        a, b = rp.coords(yi, i)
        xi.append(a)
        xb.append(b)
        Xi.append(rp.bases.Phi_int[i] @ a)
        Xb.append(rp.bases.Phi_bnd[i] @ b)
    t_asm = float(sum(max(t) for t in asm_times if t))
    # online time uses the parallel accounting: slowest subdomain per assembly, serial solve
    timings = {"assembly": t_asm, "solve": solve_time, "total": t_asm + solve_time,
               "assembly_serial": float(sum(sum(t) for t in asm_times)),
               "wall": time.perf_counter() - t_start}
    lam_full = rp.multipliers(lam)
    return RomSolution(state, xi, xb, Xi, Xb, lam_full, 2.0 * f, trace, True, timings, rp.coupled)


def nullspace_reduce(c, bases):
    """Orthonormal basis of the kernel of ``[A_1 Phi_bnd_1, ..., A_N Phi_bnd_N]``.

    Returns ``(Nbar, blocks)`` where ``blocks[i]`` are the rows of ``Nbar``
    belonging to subdomain ``i``'s interface coordinates.
    """
    widths = bases.n_bnd
    total = int(sum(widths))
    if c is None or c.n_A == 0:
        Nbar = np.eye(total)
    else:
        M = np.hstack([np.asarray(Ai @ Pb) for Ai, Pb in zip(c.A, bases.Phi_bnd)])
        Nbar = la.null_space(M, rcond=RANK_RTOL)
    offs = np.concatenate([[0], np.cumsum(widths)]).astype(int)
    return Nbar, [Nbar[offs[i]:offs[i + 1]] for i in range(len(widths))]


def reconstruct_global(solution, d, mode="strict", tol=1e-8):
    """Scatter subdomain states into one global vector.

    ``strict`` demands that every port carries the same values in all of its
    member subdomains (up to ``tol`` relative to the largest port value);
    ``port-average`` averages them instead.  Returns ``(x, discrepancy)``.
    """
    if mode not in ("strict", "port-average"):
        raise ValueError("mode must be 'strict' or 'port-average'")
    x = np.zeros(d.n)
    for s, xi in zip(d.subdomains, solution.x_int):
        x[s.interior] = xi
    disc, scale = 0.0, 0.0
    for p in d.ports:
        vals = np.stack([solution.x_bnd[m][p.local[m]] for m in p.members])
        disc = max(disc, float(np.abs(vals - vals[0]).max()))
        scale = max(scale, float(np.abs(vals).max()))
        x[p.dofs] = vals.mean(axis=0)
    if mode == "strict" and disc > tol * max(1.0, scale):
        raise PortMismatch(disc)
    return x, disc
