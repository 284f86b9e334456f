"""Structured meshes and the two benchmark full-order models.

Both models expose the same small surface: a residual ``r(x; mu)`` over the
free degrees of freedom, its sparse Jacobian, and *local operators* that
evaluate a subset of residual rows while reading only the state entries those
rows touch.  Local operators are what the decomposition and hyper-reduction
layers build on, so that sampled evaluations cost O(#rows) and never O(n).

DOF ordering: free nodes are numbered row by row (x1 fastest) after removing
Dirichlet nodes; with two unknowns per node the components are interleaved,
``dof = dofs_per_node * free_node + component``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    NonConvergence,
    NonFiniteState,
    ParameterOutOfDomain,
    SingularDenominator,
    SingularJacobian,
)

__all__ = [
    "StructuredMesh",
    "FomProblem",
    "HeatFem",
    "BurgersFd",
    "FomSolution",
    "LocalOperator",
    "assemble_residual",
    "assemble_jacobian",
    "newton_solve",
    "burgers_exact",
    "heat_problem",
    "burgers_problem",
    "problem_from_config",
    "BURGERS_CONSTANTS",
]

BURGERS_CONSTANTS = {"nu": 0.1, "x10": 1.0, "a3": 0.0, "a4": 0.0, "a5": 1.0}


class StructuredMesh:
    """Uniform tensor-product grid of ``nx`` by ``ny`` cells.

    Nodes are numbered ``j * (nx + 1) + i``.  Every node on the outer boundary
    is a Dirichlet node; all others are free.
    """

    def __init__(self, nx, ny, domain_box=((0.0, 1.0), (0.0, 1.0)), dofs_per_node=1):
        nx, ny = int(nx), int(ny)
        if nx < 2 or ny < 2:
            raise ValueError("need at least 2 cells per axis to have a free node")
        if dofs_per_node not in (1, 2):
            raise ValueError("dofs_per_node must be 1 or 2")
        (x0, x1), (y0, y1) = domain_box
        if not (x1 > x0 and y1 > y0):
            raise ValueError("empty domain box")
        self.nx, self.ny = nx, ny
        self.domain_box = ((float(x0), float(x1)), (float(y0), float(y1)))
        self.dofs_per_node = int(dofs_per_node)
        self.hx = (x1 - x0) / nx
        self.hy = (y1 - y0) / ny
        xs = np.linspace(x0, x1, nx + 1)
        ys = np.linspace(y0, y1, ny + 1)
        X, Y = np.meshgrid(xs, ys)
        self.coords = np.column_stack([X.ravel(), Y.ravel()])
        I, J = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
        self.node_i = I.ravel()
        self.node_j = J.ravel()
        self.boundary = (self.node_i == 0) | (self.node_i == nx) | (self.node_j == 0) | (self.node_j == ny)
        self.free_nodes = np.flatnonzero(~self.boundary)
        self.node_to_free = np.full(self.n_nodes, -1, dtype=np.int64)
        self.node_to_free[self.free_nodes] = np.arange(self.free_nodes.size)

    @property
    def n_nodes(self):
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_free(self):
        return self.free_nodes.size * self.dofs_per_node

    def node(self, i, j):
        return j * (self.nx + 1) + i


class LocalOperator:
    """Residual rows ``rows`` as a function of the state entries ``cols``.

    ``cols`` lists every free DOF that the rows depend on, sorted.  Callers pass
    ``x[cols]``; nothing else is read.
    """

    rows: np.ndarray
    cols: np.ndarray

    def residual(self, xc, mu):
        raise NotImplementedError

    def jacobian(self, xc, mu):
        """Sparse ``len(rows) x len(cols)`` Jacobian."""
        raise NotImplementedError

    def linearize(self, xc, mu, V):
        """Return ``(r, J @ V)`` for a dense block ``V`` of shape ``(len(cols), k)``."""
        raise NotImplementedError

    def project(self, V, B=None):
        """Precompute ``y -> (B r(V y), B J V)`` once, or return ``None`` if unsupported.

        ``B`` is a dense weighting matrix (``None`` means identity).  Operators
        that are affine up to a pointwise nonlinearity can fold every
        parameter-independent product offline.
        """
        return None


@dataclass
class FomSolution:
    x: np.ndarray
    mu: np.ndarray
    newton_iters: int
    residual_history: list
    residual_snapshots: np.ndarray = field(default=None, repr=False)


class FomProblem:
    """Shared plumbing: parameter checks, DOF metadata, global operator cache."""

    kind = "abstract"

    def __init__(self, mesh, param_domain):
        self.mesh = mesh
        pd = np.asarray(param_domain, dtype=float)
        if pd.shape != (2, 2) or np.any(pd[:, 1] < pd[:, 0]):
            raise ValueError("param_domain must be [[lo1, hi1], [lo2, hi2]]")
        self.param_domain = pd
        g = mesh.dofs_per_node
        self.dofs_per_node = g
        self.n = mesh.n_free
        self.dof_node = np.repeat(np.arange(mesh.free_nodes.size), g)
        self.dof_component = np.tile(np.arange(g), mesh.free_nodes.size)
        self.dof_coords = mesh.coords[mesh.free_nodes][self.dof_node]
        self._global = None
        self._pattern = None

    def check_param(self, mu):
        mu = np.asarray(mu, dtype=float).reshape(-1)
        if mu.size != 2 or not np.all(np.isfinite(mu)):
            raise ParameterOutOfDomain(f"parameter must be a finite pair, got {mu}")
        lo, hi = self.param_domain[:, 0], self.param_domain[:, 1]
        slack = 1e-12 * np.maximum(1.0, np.abs(self.param_domain).max(axis=1))
        if np.any(mu < lo - slack) or np.any(mu > hi + slack):
            raise ParameterOutOfDomain(f"parameter {mu.tolist()} outside {self.param_domain.tolist()}")
        return mu

    def check_state(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"state must have length {self.n}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NonFiniteState("state contains non-finite entries")
        return x

    @property
    def global_operator(self):
        if self._global is None:
            self._global = self.local_operator(np.arange(self.n))
        return self._global

    @property
    def pattern(self):
        """Structural sparsity of the Jacobian (state independent), as CSR booleans."""
        if self._pattern is None:
            self._pattern = self._structure().astype(bool).tocsr()
        return self._pattern

    def local_operator(self, rows):
        raise NotImplementedError

    def _structure(self):
        raise NotImplementedError

    def full_field(self, x, mu):
        """Nodal field of shape ``(n_nodes, dofs_per_node)`` including Dirichlet values."""
        raise NotImplementedError

    def reference_param(self):
        return self.param_domain.mean(axis=1)


def _rows_cols(mats, rows):
    """Row-slice every matrix and return the union of touched columns."""
    sliced = [m[rows] for m in mats]
    cols = np.unique(np.concatenate([s.indices for s in sliced])) if sliced else np.array([], int)
    return sliced, cols


# ---------------------------------------------------------------- heat (Q1 FEM)

_GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)
_Q1_SIGNS = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)


def _q1_reference():
    """Shape values and reference gradients at the 2x2 Gauss points."""
    pts = np.array([[a, b] for b in _GAUSS for a in _GAUSS])
    N = np.empty((4, 4))
    dN = np.empty((4, 4, 2))
    for q, (xi, eta) in enumerate(pts):
        for a, (sx, sy) in enumerate(_Q1_SIGNS):
            N[q, a] = 0.25 * (1 + sx * xi) * (1 + sy * eta)
            dN[q, a, 0] = 0.25 * sx * (1 + sy * eta)
            dN[q, a, 1] = 0.25 * sy * (1 + sx * xi)
    return pts, N, dN


class HeatFem(FomProblem):
    """Q1 finite elements for -lap(u) + (mu1/mu2)(exp(mu2 u) - 1) = s(x) on the unit square.

    The nonlinear term and the load are integrated with 2x2 Gauss quadrature.
    With ``Q`` the (quadrature point x free node) interpolation matrix and ``w``
    the quadrature weights, the residual reads ``K x + Q^T (w * g(Q x)) - f``.
    """

    kind = "heat"

    def __init__(self, mesh, param_domain=((0.01, 10.0), (0.01, 10.0)), amplitude=100.0):
        if mesh.dofs_per_node != 1:
            raise ValueError("heat problem has one unknown per node")
        super().__init__(mesh, param_domain)
        self.amplitude = float(amplitude)
        self._assemble()

    def source(self, xy):
        return self.amplitude * np.sin(2 * np.pi * xy[:, 0]) * np.sin(2 * np.pi * xy[:, 1])

    def _assemble(self):
        m = self.mesh
        hx, hy = m.hx, m.hy
        pts, N, dN = _q1_reference()
        det = 0.25 * hx * hy
        grad = dN * np.array([2.0 / hx, 2.0 / hy])
        Ke = det * np.einsum("qad,qbd->ab", grad, grad)

        ei, ej = np.meshgrid(np.arange(m.nx), np.arange(m.ny))
        ei, ej = ei.ravel(), ej.ravel()
        n0 = m.node(ei, ej)
        enodes = np.column_stack([n0, n0 + 1, n0 + 1 + (m.nx + 1), n0 + (m.nx + 1)])
        efree = m.node_to_free[enodes]
        ne = enodes.shape[0]

        a_idx, b_idx = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
        rr = efree[:, a_idx.ravel()]
        cc = efree[:, b_idx.ravel()]
        vv = np.broadcast_to(Ke.ravel(), rr.shape)
        keep = (rr >= 0) & (cc >= 0)
        self.K = sp.csr_matrix((vv[keep], (rr[keep], cc[keep])), shape=(self.n, self.n))

        x0 = m.coords[enodes[:, 0]]
        qxy = x0[:, None, :] + 0.5 * (pts[None, :, :] + 1.0) * np.array([hx, hy])
        qxy = qxy.reshape(-1, 2)
        qrow = np.repeat(np.arange(ne * 4), 4)
        qcol = np.repeat(efree, 4, axis=0).reshape(ne, 4, 4).reshape(-1)
        qval = np.tile(N.ravel(), ne)
        keep = qcol >= 0
        self.Q = sp.csr_matrix((qval[keep], (qrow[keep], qcol[keep])), shape=(ne * 4, self.n))
        self.w = np.full(ne * 4, det)
        self.f = self.Q.T @ (self.w * self.source(qxy))
        self._Qt = self.Q.T.tocsr()

    @staticmethod
    def nonlinearity(u, mu):
        m1, m2 = float(mu[0]), float(mu[1])
        with np.errstate(over="ignore", invalid="ignore"):
            if m2 == 0.0:
                return m1 * u, np.full_like(u, m1)
            e = np.exp(m2 * u)
            return (m1 / m2) * np.expm1(m2 * u), m1 * e

    def _structure(self):
        return abs(self.K) + self._Qt @ self.Q

    def local_operator(self, rows):
        return _HeatLocal(self, np.asarray(rows, dtype=np.int64))

    def full_field(self, x, mu):
        out = np.zeros((self.mesh.n_nodes, 1))
        out[self.mesh.free_nodes, 0] = x
        return out


class _HeatLocal(LocalOperator):
    def __init__(self, prob, rows):
        self.rows = rows
        qp = np.unique(prob._Qt[rows].indices)
        Qs = prob.Q[qp]
        (Kr,), cols = _rows_cols([prob.K], rows)
        cols = np.union1d(cols, Qs.indices)
        self.cols = cols
        self.K = Kr[:, cols].tocsr()
        self.Qc = Qs[:, cols].tocsr()
        self.QtW = (Qs[:, rows].multiply(prob.w[qp][:, None])).T.tocsr()
        self.f = prob.f[rows]
        self._g = prob.nonlinearity

    def residual(self, xc, mu):
        g, _ = self._g(self.Qc @ xc, mu)
        return self.K @ xc + self.QtW @ g - self.f

    def jacobian(self, xc, mu):
        _, dg = self._g(self.Qc @ xc, mu)
        return (self.K + self.QtW @ sp.diags(dg) @ self.Qc).tocsr()

    def linearize(self, xc, mu, V):
        g, dg = self._g(self.Qc @ xc, mu)
        r = self.K @ xc + self.QtW @ g - self.f
        JV = self.K @ V + self.QtW @ (dg[:, None] * (self.Qc @ V))
        return r, JV

    def project(self, V, B=None):
        return _HeatProjected(self, V, B)


class _HeatProjected:
    """Heat rows restricted to the trial space ``x = V y`` and weighted by ``B``.

    ``B r(V y) = (B K V) y + B Q^T W g(Q V y) - B f``.  ``B K V``, ``Q V`` and
    ``B f`` are fixed offline.  The sparse ``Q^T W`` is applied before ``B``.
    """

    def __init__(self, loc, V, B):
        self.B = B
        self.KV = np.asarray(loc.K @ V)
        self.QV = np.asarray(loc.Qc @ V)
        self.QtW = loc.QtW
        self.f = loc.f
        if B is not None:
            self.KV = B @ self.KV
            self.f = B @ self.f
        self._g = loc._g

    def _w(self, v):
        return v if self.B is None else self.B @ v

    def residual(self, y, mu):
        g, _ = self._g(self.QV @ y, mu)
        return self.KV @ y + self._w(self.QtW @ g) - self.f

    def linearize(self, y, mu):
        g, dg = self._g(self.QV @ y, mu)
        r = self.KV @ y + self._w(self.QtW @ g) - self.f
        return r, self.KV + self._w(self.QtW @ (dg[:, None] * self.QV))


# ------------------------------------------------------------- Burgers (FD)


def burgers_exact(coords, mu, constants=None):
    """Closed-form steady Burgers velocity ``u = -2 nu grad(Phi) / Phi``.

    ``mu = (a1, lam)`` with ``a2 = a1``; remaining coefficients come from
    ``constants`` (defaults in ``BURGERS_CONSTANTS``).  The x1-derivative of
    ``Phi`` contains ``exp(+) - exp(-)``, and the x2-derivative of the bilinear
    part is ``a3 + a4 x1``.
    """
    c = dict(BURGERS_CONSTANTS)
    if constants:
        c.update(constants)
    xy = np.atleast_2d(np.asarray(coords, dtype=float))
    a1, lam = float(mu[0]), float(mu[1])
    a2 = float(c.get("a2", a1)) if c.get("a2") is not None else a1
    nu, x10, a3, a4, a5 = c["nu"], c["x10"], c["a3"], c["a4"], c["a5"]
    x1, x2 = xy[:, 0], xy[:, 1]
    ep = np.exp(lam * (x1 - x10))
    em = np.exp(-lam * (x1 - x10))
    phi = a1 + a2 * x1 + a3 * x2 + a4 * x1 * x2 + a5 * (ep + em) * np.cos(lam * x2)
    scale = np.abs(a1) + np.abs(a2 * x1) + np.abs(a3 * x2) + np.abs(a4 * x1 * x2) + np.abs(a5) * (ep + em)
    if not np.all(np.isfinite(phi)) or np.any(np.abs(phi) <= 1e-14 * scale):
        raise SingularDenominator("Phi vanishes (to rounding) or overflows at a node")
    dphi1 = a2 + a4 * x2 + lam * a5 * (ep - em) * np.cos(lam * x2)
    dphi2 = a3 + a4 * x1 - lam * a5 * (ep + em) * np.sin(lam * x2)
    return -2 * nu * dphi1 / phi, -2 * nu * dphi2 / phi


class BurgersFd(FomProblem):
    """Centred differences for u . grad(u) = nu lap(u) on a rectangle.

    Dirichlet values on the whole boundary come from :func:`burgers_exact`.
    Writing ``e`` for the extended vector of all nodal unknowns (boundary
    included), each residual row is ``(P1 e)(G1 e) + (P2 e)(G2 e) - nu (L e)``,
    where ``P1``/``P2`` pick the two velocity components at the row's node and
    ``G1``/``G2``/``L`` are difference stencils acting on the row's component.
    """

    kind = "burgers"

    def __init__(self, mesh, param_domain=((1.0, 1.0e4), (5.0, 25.0)), constants=None):
        if mesh.dofs_per_node != 2:
            raise ValueError("Burgers problem has two unknowns per node")
        super().__init__(mesh, param_domain)
        self.constants = dict(BURGERS_CONSTANTS)
        if constants:
            unknown = set(constants) - set(BURGERS_CONSTANTS) - {"a2"}
            if unknown:
                raise ValueError(f"unknown Burgers constants {sorted(unknown)}")
            self.constants.update(constants)
        self.nu = float(self.constants["nu"])
        self._bcache = {}
        self._assemble()

    def _assemble(self):
        m = self.mesh
        N = m.n_nodes
        fn = m.free_nodes
        nf = fn.size
        stride = m.nx + 1
        h1, h2 = m.hx, m.hy
        rows = np.arange(2 * nf)
        nodes = np.repeat(fn, 2)
        comp = np.tile([0, 1], nf)
        ext = lambda nd, c: 2 * nd + c  # noqa: E731
        shape = (2 * nf, 2 * N)

        def mat(entries):
            r = np.concatenate([rows for _ in entries])
            c = np.concatenate([e[0] for e in entries])
            v = np.concatenate([np.full(rows.size, e[1]) for e in entries])
            return sp.csr_matrix((v, (r, c)), shape=shape)

        self.P1 = mat([(ext(nodes, 0), 1.0)])
        self.P2 = mat([(ext(nodes, 1), 1.0)])
        self.G1 = mat([(ext(nodes + 1, comp), 0.5 / h1), (ext(nodes - 1, comp), -0.5 / h1)])
        self.G2 = mat([(ext(nodes + stride, comp), 0.5 / h2), (ext(nodes - stride, comp), -0.5 / h2)])
        self.L = mat([
            (ext(nodes + 1, comp), 1 / h1**2),
            (ext(nodes - 1, comp), 1 / h1**2),
            (ext(nodes + stride, comp), 1 / h2**2),
            (ext(nodes - stride, comp), 1 / h2**2),
            (ext(nodes, comp), -2 / h1**2 - 2 / h2**2),
        ])
        # extended index -> free DOF (or -1 on the boundary)
        ext_to_free = np.full(2 * N, -1, dtype=np.int64)
        ext_to_free[2 * fn] = 2 * np.arange(nf)
        ext_to_free[2 * fn + 1] = 2 * np.arange(nf) + 1
        self.ext_to_free = ext_to_free
        self.boundary_ext = np.flatnonzero(ext_to_free < 0)
        self._ext_to_bpos = np.full(2 * N, -1, dtype=np.int64)
        self._ext_to_bpos[self.boundary_ext] = np.arange(self.boundary_ext.size)

    def boundary_values(self, mu):
        """Exact-solution values at every boundary entry of the extended vector."""
        key = (float(mu[0]), float(mu[1]))
        vals = self._bcache.get(key)
        if vals is None:
            bn = np.flatnonzero(self.mesh.boundary)
            u1, u2 = burgers_exact(self.mesh.coords[bn], key, self.constants)
            full = np.zeros(2 * self.mesh.n_nodes)
            full[2 * bn] = u1
            full[2 * bn + 1] = u2
            vals = full[self.boundary_ext]
            if len(self._bcache) > 64:
                self._bcache.clear()
            self._bcache[key] = vals
        return vals

    def exact_state(self, mu):
        """Exact solution at the free DOFs, interleaved ``(u1, u2)`` per node."""
        mu = self.check_param(mu)
        u1, u2 = burgers_exact(self.mesh.coords[self.mesh.free_nodes], mu, self.constants)
        return np.column_stack([u1, u2]).ravel()

    def _structure(self):
        S = abs(self.P1) + abs(self.P2) + abs(self.G1) + abs(self.G2) + abs(self.L)
        S = S.tocsc()[:, np.flatnonzero(self.ext_to_free >= 0)]
        # columns of the free block are already in free-DOF order
        return S.tocsr()

    def local_operator(self, rows):
        return _BurgersLocal(self, np.asarray(rows, dtype=np.int64))

    def full_field(self, x, mu):
        mu = self.check_param(mu)
        e = np.zeros(2 * self.mesh.n_nodes)
        e[self.boundary_ext] = self.boundary_values(mu)
        free = self.ext_to_free >= 0
        e[free] = x[self.ext_to_free[free]]
        return e.reshape(-1, 2)


class _BurgersLocal(LocalOperator):
    def __init__(self, prob, rows):
        self.rows = rows
        mats = [prob.P1, prob.P2, prob.G1, prob.G2, prob.L]
        sliced, ext_cols = _rows_cols(mats, rows)
        free_map = prob.ext_to_free[ext_cols]
        is_free = free_map >= 0
        order = np.argsort(free_map[is_free], kind="stable")
        free_ext = ext_cols[is_free][order]
        bnd_ext = ext_cols[~is_free]
        self.cols = free_map[is_free][order]
        layout = np.concatenate([free_ext, bnd_ext])
        self._nf = free_ext.size
        self._bpos = prob._ext_to_bpos[bnd_ext]
        self._prob = prob
        self.P1, self.P2, self.G1, self.G2, self.L = [s[:, layout].tocsr() for s in sliced]
        nf = self._nf
        self._F = [m[:, :nf].tocsr() for m in (self.P1, self.P2, self.G1, self.G2, self.L)]
        self.nu = prob.nu

    def _ext(self, xc, mu):
        if self._bpos.size:
            return np.concatenate([xc, self._prob.boundary_values(mu)[self._bpos]])
        return np.asarray(xc, dtype=float)

    def _parts(self, xc, mu):
        e = self._ext(xc, mu)
        return self.P1 @ e, self.P2 @ e, self.G1 @ e, self.G2 @ e, self.L @ e

    def residual(self, xc, mu):
        p1, p2, g1, g2, le = self._parts(xc, mu)
        return p1 * g1 + p2 * g2 - self.nu * le

    def jacobian(self, xc, mu):
        p1, p2, g1, g2, _ = self._parts(xc, mu)
        P1, P2, G1, G2, L = self._F
        J = sp.diags(g1) @ P1 + sp.diags(p1) @ G1 + sp.diags(g2) @ P2 + sp.diags(p2) @ G2 - self.nu * L
        return J.tocsr()

    def linearize(self, xc, mu, V):
        p1, p2, g1, g2, le = self._parts(xc, mu)
        P1, P2, G1, G2, L = self._F
        r = p1 * g1 + p2 * g2 - self.nu * le
        JV = (g1[:, None] * (P1 @ V) + p1[:, None] * (G1 @ V)
              + g2[:, None] * (P2 @ V) + p2[:, None] * (G2 @ V) - self.nu * (L @ V))
        return r, JV


# ------------------------------------------------------------ public helpers


def assemble_residual(problem, x, mu):
    x = problem.check_state(x)
    mu = problem.check_param(mu)
    return problem.global_operator.residual(x, mu)


def assemble_jacobian(problem, x, mu):
    x = problem.check_state(x)
    mu = problem.check_param(mu)
    return problem.global_operator.jacobian(x, mu)


def _lu_solve(J, rhs):
    try:
        with np.errstate(all="ignore"):
            lu = spla.splu(J.tocsc())
            p = lu.solve(rhs)
    except RuntimeError as exc:
        raise SingularJacobian(str(exc)) from exc
    if not np.all(np.isfinite(p)):
        raise SingularJacobian("Newton step is not finite")
    return p


def newton_solve(problem, mu, x0=None, tol=1e-10, max_iters=50, keep_residuals=False, operator=None):
    """Damped Newton-Raphson on ``r(x; mu) = 0``.

    Steps are halved until the residual norm drops (smallest step 2**-10).
    Convergence means ``||r|| <= tol * max(1, ||r(x0)||)``.  With
    ``keep_residuals`` the residual at every iterate except the converged one
    is returned column-wise in ``residual_snapshots``.

    ``operator`` lets callers solve a square sub-system (see the training
    module); it must map the iterate to residual/Jacobian like a global one.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    mu = problem.check_param(mu)
    op = problem.global_operator if operator is None else operator
    size = op.cols.size
    if x0 is None:
        x = np.zeros(size)
    else:
        x = np.array(x0, dtype=float)
        if x.shape != (size,):
            raise ValueError(f"x0 must have length {size}")
        if not np.all(np.isfinite(x)):
            raise NonFiniteState("initial guess contains non-finite entries")
    r = op.residual(x, mu)
    nr = np.linalg.norm(r)
    history = [nr]
    snaps = []
    target = tol * max(1.0, nr)
    it = 0
    while nr > target:
        if it >= max_iters:
            raise NonConvergence(f"Newton did not converge in {max_iters} iterations", history)
        p = _lu_solve(op.jacobian(x, mu), -r)
        alpha = 1.0
        while True:
            xt = x + alpha * p
            with np.errstate(all="ignore"):
                rt = op.residual(xt, mu)
                nt = np.linalg.norm(rt)
            if np.isfinite(nt) and nt < nr:
                break
            alpha *= 0.5
            if alpha < 2.0**-10:
                raise NonConvergence("line search could not reduce the residual", history)
        if keep_residuals:
            snaps.append(r)
        x, r, nr = xt, rt, nt
        it += 1
        history.append(nr)
    snap_mat = np.column_stack(snaps) if snaps else np.zeros((r.size, 0))
    return FomSolution(x=x, mu=mu, newton_iters=it, residual_history=history,
                       residual_snapshots=snap_mat if keep_residuals else None)


# ----------------------------------------------------------------- factories


def heat_problem(nx=40, ny=40, param_domain=((0.01, 10.0), (0.01, 10.0))):
    return HeatFem(StructuredMesh(nx, ny, ((0.0, 1.0), (0.0, 1.0)), 1), param_domain)


def burgers_problem(nx=120, ny=12, param_domain=((1.0, 1.0e4), (5.0, 25.0)), constants=None,
                    domain_box=((-1.0, 1.0), (0.0, 0.05))):
    return BurgersFd(StructuredMesh(nx, ny, domain_box, 2), param_domain, constants)


_PROBLEM_KEYS = {"problem", "nx", "ny", "domain_box", "constants", "param_domain"}


def problem_from_config(cfg):
    """Build a problem from a mapping with keys problem/nx/ny/domain_box/constants/param_domain."""
    unknown = set(cfg) - _PROBLEM_KEYS
    if unknown:
        raise ValueError(f"unknown problem keys: {sorted(unknown)}")
    kind = cfg.get("problem")
    if kind == "heat":
        box = cfg.get("domain_box", ((0.0, 1.0), (0.0, 1.0)))
        mesh = StructuredMesh(cfg.get("nx", 40), cfg.get("ny", 40), box, 1)
        consts = cfg.get("constants") or {}
        extra = set(consts) - {"amplitude"}
        if extra:
            raise ValueError(f"unknown heat constants {sorted(extra)}")
        return HeatFem(mesh, cfg.get("param_domain", ((0.01, 10.0), (0.01, 10.0))),
                       consts.get("amplitude", 100.0))
    if kind == "burgers":
        box = cfg.get("domain_box", ((-1.0, 1.0), (0.0, 0.05)))
        mesh = StructuredMesh(cfg.get("nx", 120), cfg.get("ny", 12), box, 2)
        return BurgersFd(mesh, cfg.get("param_domain", ((1.0, 1.0e4), (5.0, 25.0))), cfg.get("constants"))
    raise ValueError(f"problem must be 'heat' or 'burgers', got {kind!r}")
