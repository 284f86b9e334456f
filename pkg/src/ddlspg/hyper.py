"""Residual weighting per subdomain: identity, collocation, gappy POD.

A sample mesh is a set of *nodes*.  Each sampled node contributes all of its
residual rows (one per unknown at the node).  Given the sampled rows, only
the state entries those rows touch (the induced samplers) ever need to be
formed online.
"""

from dataclasses import dataclass, field
from math import ceil, floor
from pathlib import Path

import numpy as np
import scipy.linalg as la

from .bases import ResidualBasis
from .ddrb import read_ddrb, read_json, write_ddrb, write_json
from .errors import GappyRankDeficient, InsufficientBudget, SampleRankFailure

__all__ = [
    "SCHEMES",
    "SubdomainHyper",
    "HyperData",
    "greedy_sample_mesh",
    "corner_nodes",
    "build_weighting",
    "induce_state_samplers",
    "build_hyper",
    "save_hyper",
    "load_hyper",
]

SCHEMES = ("identity", "collocation", "gappy")


def _rank_ok(M, rtol=1e-12):
    if M.shape[1] == 0:
        return True
    s = np.linalg.svd(M, compute_uv=False)
    return s.size >= M.shape[1] and s[0] > 0 and s[-1] > rtol * s[0]


def greedy_sample_mesh(Phi_r, n_s, n_w=None, corners=(), dofs_per_node=1):
    """Greedy node selection driven by residual-basis reconstruction error.

    ``Phi_r`` has one row per residual DOF, ``dofs_per_node`` consecutive rows
    per node.  The search starts from ``corners`` and adds nodes until ``n_s``
    are selected.  Working columns of ``Phi_r`` are consumed in rounds.  In
    every round the not-yet-used columns are fitted by least squares on the
    currently sampled rows, and the node whose rows carry the largest squared
    misfit is added (ties go to the lowest node index).  Returns node indices
    in selection order, corners first.
    """
    Phi_r = np.asarray(Phi_r, dtype=float)
    g = int(dofs_per_node)
    n_rows, n_hat = Phi_r.shape
    if n_rows % g:
        raise ValueError("row count is not a multiple of dofs_per_node")
    n_nodes = n_rows // g
    sel = list(dict.fromkeys(int(c) for c in corners))
    if n_s < len(sel):
        raise InsufficientBudget(f"budget {n_s} is below the {len(sel)} seeded corner nodes")
    if n_s > n_nodes:
        raise InsufficientBudget(f"budget {n_s} exceeds the {n_nodes} available nodes")
    if n_w is None:
        n_w = min(n_hat, g * n_s)
    if not 1 <= n_w <= min(n_hat, g * n_s):
        raise ValueError(f"n_w={n_w} must lie in [1, min(n_hat_r, dofs_per_node * n_s)]")
    n_a = n_s - len(sel)
    if n_a == 0:
        return np.asarray(sel, dtype=np.int64)

    n_it = min(n_w, n_a)
    n_rhs = ceil(n_w / n_a)
    n_ci_min = floor(n_w / n_it)
    n_add_min = floor(n_a * n_rhs / n_w)
    taken = np.zeros(n_nodes, dtype=bool)
    taken[sel] = True
    offs = np.arange(g)
    n_b = 0
    for j in range(1, n_it + 1):
        n_ci = n_ci_min + (1 if j <= n_w % n_it else 0)
        n_add = n_add_min + (1 if n_rhs == 1 and j <= n_a % n_w else 0)
        block = Phi_r[:, n_b:n_b + n_ci]
        if j == 1:
            R = block
        else:
            rows = (g * np.asarray(sel)[:, None] + offs).ravel()
            A = Phi_r[rows, :n_b]
            if not _rank_ok(A):
                raise SampleRankFailure(f"sampled rows cannot fit {n_b} residual modes")
            coef = np.linalg.lstsq(A, block[rows], rcond=None)[0]
            R = block - Phi_r[:, :n_b] @ coef
        score = (R ** 2).sum(axis=1).reshape(n_nodes, g).sum(axis=1)
        for _ in range(n_add):
            cand = np.where(taken, -np.inf, score)
            l = int(np.argmax(cand))
            taken[l] = True
            sel.append(l)
        n_b += n_ci
    return np.asarray(sel, dtype=np.int64)


def corner_nodes(d, i, mode="interface"):
    """Seed nodes (local node indices into subdomain ``i``'s residual rows).

    ``"interface"``: every residual node of the subdomain that carries an
    interface DOF.  ``"corner"``: only those nodes in ports shared by three or
    more subdomains.
    """
    s = d.subdomains[i]
    g = d.dofs_per_node
    if mode == "interface":
        dofs = s.interface
    elif mode == "corner":
        ports = [d.ports[j] for j in s.ports if len(d.ports[j].members) > 2]
        dofs = np.concatenate([p.dofs for p in ports]) if ports else np.zeros(0, int)
    elif mode == "none":
        dofs = np.zeros(0, int)
    else:
        raise ValueError("corner mode must be 'interface', 'corner' or 'none'")
    # only interface DOFs that are also this subdomain's residual rows
    mask = np.isin(dofs, s.rows)
    owned = np.searchsorted(s.rows, dofs[mask])
    return np.unique(owned // g)


@dataclass
class SubdomainHyper:
    """Everything the online solver needs for one subdomain.

    ``rows``: sampled residual rows as positions in the subdomain's rows.
    ``op``: local operator over the sampled rows.  ``int_cols``/``bnd_cols``:
    positions in ``op.cols`` of interior/interface DOFs.  ``int_pos``/
    ``bnd_pos``: where those DOFs sit in the subdomain's interior/interface
    vectors (the induced samplers Z^Omega, Z^Gamma).  ``qr``: stored factors
    ``(Q, R)`` of ``Z Phi_r`` for gappy weighting, else ``None``.
    """

    scheme: str
    rows: np.ndarray
    op: object
    int_cols: np.ndarray
    bnd_cols: np.ndarray
    int_pos: np.ndarray
    bnd_pos: np.ndarray
    qr: tuple = None
    nodes: np.ndarray = None

    @property
    def n_B(self):
        return self.qr[1].shape[0] if self.qr is not None else self.rows.size

    @property
    def counts(self):
        return {"n_s_r": int(self.rows.size), "n_s_int": int(self.int_pos.size),
                "n_s_bnd": int(self.bnd_pos.size), "n_B": int(self.n_B)}

    def weight(self, v):
        """Apply B to sampled residual rows (vector or column block)."""
        if self.qr is None:
            return v
        Q, R = self.qr
        return la.solve_triangular(R, Q.T @ v, check_finite=False)

    def weight_matrix(self):
        """Dense ``B = R^-1 Q^T`` for gappy weighting, ``None`` otherwise."""
        return None if self.qr is None else self.weight(np.eye(self.rows.size))


@dataclass
class HyperData:
    scheme: str
    subdomains: list
    sample_nodes: list = field(default_factory=list)
    residual_basis: object = None
    ratio: float = None

    def counts(self):
        return [h.counts for h in self.subdomains]


def induce_state_samplers(d, problem, i, sampled_rows):
    """Local operator over sampled rows plus the induced interior/interface samplers.

    ``sampled_rows`` are positions into subdomain ``i``'s residual rows.
    Returns ``(op, int_cols, bnd_cols, int_pos, bnd_pos)``.
    """
    s = d.subdomains[i]
    rows = s.rows[np.asarray(sampled_rows, dtype=np.int64)]
    op = problem.local_operator(rows)
    in_int = np.isin(op.cols, s.interior)
    in_bnd = np.isin(op.cols, s.interface)
    if not np.all(in_int | in_bnd):
        raise ValueError("sampled rows read state outside the subdomain")
    int_cols = np.flatnonzero(in_int)
    bnd_cols = np.flatnonzero(in_bnd)
    int_pos = np.searchsorted(s.interior, op.cols[int_cols])
    iface_order = np.argsort(s.interface, kind="stable")
    bnd_pos = iface_order[np.searchsorted(s.interface[iface_order], op.cols[bnd_cols])]
    return op, int_cols, bnd_cols, int_pos, bnd_pos


def build_weighting(scheme, Phi_r, sampled_rows):
    """Stored factors for B: ``None`` for identity/collocation, ``(Q, R)`` of Z Phi_r for gappy."""
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    if scheme != "gappy":
        return None
    ZP = np.asarray(Phi_r)[np.asarray(sampled_rows)]
    if ZP.shape[0] < ZP.shape[1] or not _rank_ok(ZP):
        raise GappyRankDeficient("sampled residual basis is rank deficient")
    Q, R = la.qr(ZP, mode="economic")
    return Q, R


def build_hyper(problem, d, scheme="identity", residual_basis=None, ratio=2.0, n_hat=None,
                corner_mode="interface", n_w=None):
    """Assemble a :class:`HyperData` for every subdomain.

    For collocation and gappy schemes the sample mesh has
    ``ceil(ratio * n_hat_r_i)`` nodes.  ``n_hat`` (reduced state sizes) is
    optional.  When it is given, the condition ``n_s >= n_hat_r >= n_hat`` is
    checked.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    g = d.dofs_per_node
    subs, nodes_all = [], []
    for i, s in enumerate(d.subdomains):
        if scheme == "identity":
            rows = np.arange(s.n_r)
            op, ic, bc, ip, bp = induce_state_samplers(d, problem, i, rows)
            subs.append(SubdomainHyper(scheme, rows, op, ic, bc, ip, bp, None, np.arange(s.n_r // g)))
        else:
            if residual_basis is None:
                raise ValueError("hyper-reduction needs residual bases")
            Phi_r = residual_basis.Phi_r[i]
            n_r_hat = Phi_r.shape[1]
            if n_hat is not None and n_r_hat < n_hat[i]:
                raise InsufficientBudget(f"subdomain {i}: residual basis ({n_r_hat}) smaller than state basis ({n_hat[i]})")
            n_s = int(ceil(ratio * n_r_hat - 1e-9))
            n_s = min(n_s, s.n_r // g)
            if g * n_s < n_r_hat:
                raise InsufficientBudget(f"subdomain {i}: {n_s} sample nodes cannot fit {n_r_hat} residual modes")
            seeds = corner_nodes(d, i, corner_mode)
            nodes = greedy_sample_mesh(Phi_r, n_s, n_w, seeds, g)
            subs.append(_assemble(problem, d, scheme, i, nodes, Phi_r))
    return HyperData(scheme, subs, [h.nodes for h in subs], residual_basis, ratio if scheme != "identity" else None)


def _assemble(problem, d, scheme, i, nodes, Phi_r):
    g = d.dofs_per_node
    nodes = np.sort(np.asarray(nodes, dtype=np.int64))
    rows = (g * nodes[:, None] + np.arange(g)).ravel()
    qr = build_weighting(scheme, Phi_r, rows) if scheme == "gappy" else None
    op, ic, bc, ip, bp = induce_state_samplers(d, problem, i, rows)
    return SubdomainHyper(scheme, rows, op, ic, bc, ip, bp, qr, nodes)


def save_hyper(hyper, outdir):
    """Write sample nodes and residual bases; operators are rebuilt on load."""
    outdir = Path(outdir)
    meta = {"scheme": hyper.scheme, "ratio": hyper.ratio,
            "sample_nodes": [np.asarray(n).tolist() for n in hyper.sample_nodes]}
    rb = hyper.residual_basis
    if rb is not None:
        meta["residual"] = {"n_snapshots": rb.n_snapshots, "upsilon": rb.upsilon, "n_subdomains": len(rb.Phi_r)}
        for i, P in enumerate(rb.Phi_r):
            write_ddrb(outdir / f"phi_r_{i}.ddrb", P)
    write_json(outdir / "hyper.json", meta)
    return outdir


def load_hyper(problem, d, outdir):
    """Inverse of :func:`save_hyper` for the given problem and decomposition."""
    outdir = Path(outdir)
    meta = read_json(outdir / "hyper.json")
    scheme = meta["scheme"]
    if scheme == "identity":
        return build_hyper(problem, d, "identity")
    r = meta["residual"]
    rb = ResidualBasis([read_ddrb(outdir / f"phi_r_{i}.ddrb") for i in range(r["n_subdomains"])],
                       r["n_snapshots"], r["upsilon"])
    if len(meta["sample_nodes"]) != d.n_subdomains:
        raise ValueError("stored sample meshes do not match the decomposition")
    subs = [_assemble(problem, d, scheme, i, n, rb.Phi_r[i]) for i, n in enumerate(meta["sample_nodes"])]
    return HyperData(scheme, subs, [h.nodes for h in subs], rb, meta["ratio"])
