"""Algebraic non-overlapping decomposition, ports and compatibility constraints.

Residual rows are split by a ``px x py`` grid over the free nodes.  A
subdomain's state is every column its residual rows touch in the Jacobian.
Columns touched by exactly one subdomain are *interior*.  The rest are
*interface* DOFs, shared with neighbours.  Interface DOFs touched by the same
set of subdomains form a *port*.

Subdomains are numbered with the y block index running fastest.  Each
subdomain orders its interface DOFs port by port, so every port occupies a
contiguous slice of the interface vector.
"""

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .ddrb import read_ddrb, read_json, write_ddrb, write_json
from .errors import DegenerateSplit, TestFunctionRankFailure

__all__ = [
    "Port",
    "Subdomain",
    "Decomposition",
    "ConstraintSet",
    "build_decomposition",
    "decomposition_from_sets",
    "build_strong_constraints",
    "build_weak_constraints",
    "effective_dofs",
    "reduced_constraint_matrix",
    "numerical_rank",
]


@dataclass
class Port:
    id: int
    members: tuple
    dofs: np.ndarray
    local: dict = field(default_factory=dict)

    @property
    def size(self):
        return int(self.dofs.size)

    @property
    def n_conditions(self):
        return len(self.members) - 1


@dataclass
class Subdomain:
    index: int
    rows: np.ndarray
    interior: np.ndarray
    interface: np.ndarray
    ports: list

    @property
    def n_r(self):
        return int(self.rows.size)

    @property
    def n_interior(self):
        return int(self.interior.size)

    @property
    def n_interface(self):
        return int(self.interface.size)

    @property
    def state(self):
        """Global indices of the subdomain state (interior first, then interface)."""
        return np.concatenate([self.interior, self.interface])


@dataclass
class Decomposition:
    n: int
    subdomains: list
    ports: list
    grid_split: tuple = (1, 1)
    dofs_per_node: int = 1

    @property
    def n_subdomains(self):
        return len(self.subdomains)

    @property
    def n_ports(self):
        return len(self.ports)

    def restrict(self, x, i):
        """Return ``(x_interior, x_interface)`` of subdomain ``i``."""
        s = self.subdomains[i]
        return x[s.interior], x[s.interface]

    def sizes(self):
        return {
            "n_r": [s.n_r for s in self.subdomains],
            "n_interior": [s.n_interior for s in self.subdomains],
            "n_interface": [s.n_interface for s in self.subdomains],
            "port_sizes": [p.size for p in self.ports],
        }

    def to_json(self):
        return {
            "n": self.n,
            "grid_split": list(self.grid_split),
            "dofs_per_node": self.dofs_per_node,
            "subdomains": [
                {"rows": s.rows, "interior": s.interior, "interface": s.interface, "ports": s.ports}
                for s in self.subdomains
            ],
            "ports": [
                {"id": p.id, "members": list(p.members), "dofs": p.dofs,
                 "local": {str(k): [int(v[0]), int(v[-1]) + 1] for k, v in p.local.items()}}
                for p in self.ports
            ],
        }

    @classmethod
    def from_json(cls, obj):
        subs = [
            Subdomain(i, np.asarray(s["rows"], int), np.asarray(s["interior"], int),
                      np.asarray(s["interface"], int), list(s["ports"]))
            for i, s in enumerate(obj["subdomains"])
        ]
        ports = [
            Port(p["id"], tuple(p["members"]), np.asarray(p["dofs"], int),
                 {int(k): np.arange(a, b) for k, (a, b) in p["local"].items()})
            for p in obj["ports"]
        ]
        return cls(obj["n"], subs, ports, tuple(obj["grid_split"]), obj["dofs_per_node"])


def _block_bounds(count, parts):
    return [(k * count) // parts for k in range(parts + 1)]


def build_decomposition(problem, grid_split):
    """Split the free-node grid into ``px x py`` blocks and derive interior/interface/ports."""
    px, py = (int(v) for v in grid_split)
    if px < 1 or py < 1:
        raise DegenerateSplit("grid split entries must be positive")
    mesh = problem.mesh
    fx, fy = mesh.nx - 1, mesh.ny - 1
    if px > fx or py > fy:
        raise DegenerateSplit(f"split {px}x{py} leaves an empty subdomain on a {fx}x{fy} free-node grid")
    bx, by = _block_bounds(fx, px), _block_bounds(fy, py)
    g = problem.dofs_per_node
    fi = mesh.node_i[mesh.free_nodes] - 1
    fj = mesh.node_j[mesh.free_nodes] - 1
    xb = np.searchsorted(bx, fi, side="right") - 1
    yb = np.searchsorted(by, fj, side="right") - 1
    owner_node = xb * py + yb
    owner = np.repeat(owner_node, g)
    row_sets = [np.flatnonzero(owner == s) for s in range(px * py)]
    if any(r.size == 0 for r in row_sets):
        raise DegenerateSplit("split produced an empty subdomain")
    return decomposition_from_sets(problem.pattern, row_sets, (px, py), g)


def decomposition_from_sets(pattern, row_sets, grid_split=(1, 1), dofs_per_node=1):
    """Decomposition from an explicit residual-row partition and a Jacobian pattern."""
    pattern = sp.csr_matrix(pattern)
    n = pattern.shape[0]
    allrows = np.sort(np.concatenate(row_sets))
    if allrows.size != n or np.any(allrows != np.arange(n)):
        raise DegenerateSplit("row sets must partition the residual rows")
    supports = [np.unique(pattern[r].indices) for r in row_sets]
    count = np.zeros(pattern.shape[1], dtype=np.int64)
    for sup in supports:
        count[sup] += 1
    members = [[] for _ in range(pattern.shape[1])]
    for s, sup in enumerate(supports):
        for c in sup[count[sup] > 1]:
            members[c].append(s)
    groups = {}
    for c in np.flatnonzero(count > 1):
        groups.setdefault(tuple(members[c]), []).append(c)
    keys = sorted(groups, key=lambda k: (len(k), k))
    ports = [Port(j, k, np.asarray(groups[k], dtype=np.int64)) for j, k in enumerate(keys)]

    subs = []
    for s, (rows, sup) in enumerate(zip(row_sets, supports)):
        interior = sup[count[sup] == 1]
        plist = [p.id for p in ports if s in p.members]
        pieces, start = [], 0
        for j in plist:
            p = ports[j]
            p.local[s] = np.arange(start, start + p.size)
            start += p.size
            pieces.append(p.dofs)
        iface = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int64)
        subs.append(Subdomain(s, np.sort(rows), interior, iface, plist))
    return Decomposition(n, subs, ports, tuple(grid_split), dofs_per_node)


# ------------------------------------------------------------- constraints


@dataclass
class ConstraintSet:
    """Per-subdomain constraint blocks ``A_i`` acting on interface coordinates.

    ``pair_blocks`` lists ``(port, anchor, other)`` for every block of rows of
    the unweighted operator, in order.  For weak constraints ``G`` maps port id
    to its test-function matrix and ``C`` is the block-diagonal weight with
    ``A_i = C @ Abar_i``.
    """

    mode: str
    A: list
    pair_blocks: list
    n_c: dict = field(default_factory=dict)
    seed: int = None
    G: dict = field(default_factory=dict)
    C: object = None
    pairs: str = "chain"

    @property
    def n_A(self):
        return int(self.A[0].shape[0]) if self.A else 0

    def residual(self, x_interfaces):
        """Sum_i A_i x_Gamma_i."""
        out = np.zeros(self.n_A)
        for Ai, xi in zip(self.A, x_interfaces):
            out += Ai @ xi
        return out

    def save(self, outdir):
        outdir = Path(outdir)
        for i, Ai in enumerate(self.A):
            write_ddrb(outdir / f"A_{i}.ddrb", Ai.toarray())
        for j, Gj in self.G.items():
            write_ddrb(outdir / f"G_{j}.ddrb", Gj)
        write_json(outdir / "constraints.json", {
            "mode": self.mode, "seed": self.seed, "pairs": self.pairs,
            "n_c": {str(k): v for k, v in self.n_c.items()},
            "pair_blocks": [list(b) for b in self.pair_blocks], "n_subdomains": len(self.A)})

    @classmethod
    def load(cls, outdir):
        outdir = Path(outdir)
        meta = read_json(outdir / "constraints.json")
        A = [sp.csr_matrix(read_ddrb(outdir / f"A_{i}.ddrb")) for i in range(meta["n_subdomains"])]
        n_c = {int(k): v for k, v in meta["n_c"].items()}
        G = {j: read_ddrb(outdir / f"G_{j}.ddrb") for j in n_c} if meta["mode"] == "weak" else {}
        return cls(meta["mode"], A, [tuple(b) for b in meta["pair_blocks"]], n_c, meta["seed"], G,
                   None, meta["pairs"])


def _pairs_of(members, pairs):
    if pairs == "chain":
        return [(members[0], m) for m in members[1:]]
    if pairs == "all":
        return list(combinations(members, 2))
    raise ValueError("pairs must be 'chain' or 'all'")


def _unweighted(d, pairs):
    blocks = [(p.id, a, b) for p in d.ports for a, b in _pairs_of(p.members, pairs)]
    n_rows = sum(d.ports[j].size for j, _, _ in blocks)
    trip = [([], [], []) for _ in d.subdomains]
    row = 0
    for j, a, b in blocks:
        p = d.ports[j]
        r = np.arange(row, row + p.size)
        for sub, sign in ((a, 1.0), (b, -1.0)):
            trip[sub][0].append(r)
            trip[sub][1].append(p.local[sub])
            trip[sub][2].append(np.full(p.size, sign))
        row += p.size
    A = []
    for s, (rr, cc, vv) in zip(d.subdomains, trip):
        if rr:
            A.append(sp.csr_matrix((np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))),
                                   shape=(n_rows, s.n_interface)))
        else:
            A.append(sp.csr_matrix((n_rows, s.n_interface)))
    return A, blocks


def build_strong_constraints(d, pairs="chain"):
    """Exact port equality.

    ``pairs="chain"`` writes ``|S_j| - 1`` blocks per port (lowest member minus
    each other member); ``pairs="all"`` writes one block per unordered pair.
    """
    A, blocks = _unweighted(d, pairs)
    return ConstraintSet("strong", A, blocks, pairs=pairs)


def build_weak_constraints(d, n_c_per_port, seed, pairs="chain", max_draws=10):
    """Port equality tested against ``n_c`` random Gaussian functionals per port.

    ``n_c_per_port`` is an int (capped at each port's size) or a mapping/sequence
    with one value per port, which must satisfy ``1 <= n_c_j <= port size``.
    """
    if isinstance(n_c_per_port, (int, np.integer)):
        if n_c_per_port < 1:
            raise ValueError("need at least one test function per port")
        n_c = {p.id: min(int(n_c_per_port), p.size) for p in d.ports}
    else:
        vals = dict(n_c_per_port) if isinstance(n_c_per_port, dict) else dict(enumerate(n_c_per_port))
        n_c = {}
        for p in d.ports:
            v = int(vals[p.id])
            if not 1 <= v <= p.size:
                raise ValueError(f"port {p.id}: n_c={v} outside [1, {p.size}]")
            n_c[p.id] = v
    G = {}
    for p in d.ports:
        rng = np.random.default_rng([int(seed), p.id])
        for _ in range(max_draws):
            Gj = rng.standard_normal((n_c[p.id], p.size))
            if np.linalg.matrix_rank(Gj) == n_c[p.id]:
                G[p.id] = Gj
                break
        else:
            raise TestFunctionRankFailure(f"port {p.id}: no full-rank draw in {max_draws} attempts")
    Abar, blocks = _unweighted(d, pairs)
    C = sp.block_diag([G[j] for j, _, _ in blocks], format="csr") if blocks else sp.csr_matrix((0, 0))
    A = [(C @ Ai).tocsr() for Ai in Abar]
    return ConstraintSet("weak", A, blocks, n_c, int(seed), G, C, pairs)


def numerical_rank(M, rtol=1e-12):
    M = np.asarray(M.toarray() if sp.issparse(M) else M, dtype=float)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0


def reduced_constraint_matrix(c, bases):
    """Stack ``[A_1 Phi_G_1, ..., A_N Phi_G_N]`` as a dense matrix."""
    blocks = [np.asarray(Ai @ Pg) for Ai, Pg in zip(c.A, bases.Phi_bnd)]
    if not blocks:
        return np.zeros((0, 0))
    return np.hstack(blocks)


def effective_dofs(bases, c):
    """Free reduced coordinates left after the constraints: sum n_hat - rank(A Phi)."""
    total = sum(bases.n_hat)
    if c is None or c.n_A == 0:
        return total
    return total - numerical_rank(reduced_constraint_matrix(c, bases))
