"""POD and the subdomain basis constructions.

``pod(X, upsilon)`` keeps the smallest number of left singular vectors whose
cumulative singular-value fraction ``sum_{j<=i} s_j / sum_k s_k`` reaches
``1 - upsilon``.  So ``upsilon`` is the fraction of (singular-value) energy
that may be *discarded*: ``upsilon = 1e-5`` keeps 99.999 %.  Config files may
also write it as the string ``"1-1e-5"``.  :func:`parse_upsilon` maps that
spelling to ``1e-5``.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la

from .ddrb import read_ddrb, read_json, write_ddrb, write_json
from .errors import EmptyBoundaryBasis, ZeroSnapshots

__all__ = [
    "PodResult",
    "BasisSet",
    "ResidualBasis",
    "SubdomainSnapshots",
    "BASIS_KINDS",
    "ENERGY_RULES",
    "pod",
    "parse_upsilon",
    "build_interior_bases",
    "build_boundary_bases",
    "build_full_subdomain_bases",
    "build_bases",
    "build_residual_bases",
]

BASIS_KINDS = ("port", "skeleton", "full_interface", "full_subdomain")
ZERO_SV = 1e-14
ENERGY_RULES = ("sigma", "sigma2")


@dataclass
class PodResult:
    basis: np.ndarray
    sigma: np.ndarray
    upsilon: float

    @property
    def p(self):
        return self.basis.shape[1]


def parse_upsilon(value):
    """Accept ``1e-5`` or the string ``"1-1e-5"`` (both mean: discard 1e-5)."""
    if isinstance(value, str):
        s = value.replace(" ", "")
        v = float(s[2:]) if s.startswith("1-") else float(s)
    else:
        v = float(value)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"energy criterion must lie in [0, 1], got {v}")
    return v


def _fix_signs(U):
    if U.size == 0:
        return U
    scale = np.abs(U).max(axis=0)
    lead = np.argmax(np.abs(U) > 1e-12 * scale, axis=0)
    signs = np.sign(U[lead, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def pod(snapshots, upsilon, energy="sigma"):
    """Truncated left singular vectors of ``snapshots``.

    ``energy="sigma"`` measures the cumulative fraction with singular values,
    ``energy="sigma2"`` with their squares.
    """
    if energy not in ENERGY_RULES:
        raise ValueError(f"energy must be one of {ENERGY_RULES}")
    X = np.asarray(snapshots, dtype=float)
    if X.ndim != 2 or X.size == 0:
        raise ValueError("snapshot matrix must be a non-empty 2-D array")
    upsilon = parse_upsilon(upsilon)
    if not np.all(np.isfinite(X)):
        raise ValueError("snapshots contain non-finite entries")
    U, s, _ = la.svd(X, full_matrices=False, lapack_driver="gesdd")
    if s.size == 0 or s[0] == 0.0:
        raise ZeroSnapshots("snapshot matrix is identically zero")
    rank = int(np.sum(s > ZERO_SV * s[0]))
    kept = s[:rank] if energy == "sigma" else s[:rank] ** 2
    frac = np.cumsum(kept) / kept.sum()
    p = int(np.flatnonzero(frac >= (1.0 - upsilon) - 4 * np.finfo(float).eps)[0]) + 1
    return PodResult(_fix_signs(U[:, :p]), s, upsilon)


class SubdomainSnapshots:
    """Per-subdomain snapshot blocks ``[interior rows; interface rows]`` (bottom-up training)."""

    def __init__(self, blocks):
        self.blocks = [np.asarray(b, dtype=float) for b in blocks]


def _interior(X, d, i):
    s = d.subdomains[i]
    if isinstance(X, SubdomainSnapshots):
        return X.blocks[i][: s.n_interior]
    return X[s.interior]


def _interface(X, d, i):
    s = d.subdomains[i]
    if isinstance(X, SubdomainSnapshots):
        return X.blocks[i][s.n_interior:]
    return X[s.interface]


def _stacked(X, d, i):
    if isinstance(X, SubdomainSnapshots):
        return X.blocks[i]
    return X[d.subdomains[i].state]


def build_interior_bases(X, d, upsilon, energy="sigma"):
    return [pod(_interior(X, d, i), upsilon, energy) for i in range(d.n_subdomains)]


def _port_snapshots(X, d, port):
    if isinstance(X, SubdomainSnapshots):
        parts = [_interface(X, d, m)[port.local[m]] for m in port.members]
        return np.hstack(parts)
    return X[port.dofs]


def _rrqr_columns(Y, rtol=1e-10):
    if Y.shape[1] == 0 or not np.any(Y):
        return Y[:, :0]
    Q, R, _ = la.qr(Y, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    r = int(np.sum(diag > rtol * diag[0]))
    return _fix_signs(Q[:, :r])


def build_boundary_bases(X, d, upsilon, kind, energy="sigma"):
    """Interface bases of the requested kind.

    Returns ``(Phi_bnd, port_blocks, pods)``: the per-subdomain bases, the
    shared per-port blocks for the port kind (empty dict otherwise), and the
    POD results the bases came from.
    """
    if kind not in ("port", "skeleton", "full_interface"):
        raise ValueError(f"unknown boundary basis kind {kind!r}")
    out, blocks, pods = [], {}, {}
    if kind == "port":
        for p in d.ports:
            try:
                res = pod(_port_snapshots(X, d, p), upsilon, energy)
            except ZeroSnapshots as exc:
                raise EmptyBoundaryBasis(f"port {p.id}: snapshots vanish") from exc
            blocks[p.id] = res.basis
            pods[p.id] = res
        for s in d.subdomains:
            out.append(la.block_diag(*[blocks[j] for j in s.ports]) if s.ports
                       else np.zeros((0, 0)))
    elif kind == "skeleton":
        if isinstance(X, SubdomainSnapshots):
            raise ValueError("skeleton bases need global snapshots")
        skel = np.unique(np.concatenate([s.interface for s in d.subdomains] + [np.zeros(0, int)]))
        if skel.size == 0:
            return [np.zeros((0, 0)) for _ in d.subdomains], {}, {}
        try:
            res = pod(X[skel], upsilon, energy)
        except ZeroSnapshots as exc:
            raise EmptyBoundaryBasis("skeleton snapshots vanish") from exc
        pods["skeleton"] = res
        where = np.searchsorted(skel, np.arange(d.n))
        for s in d.subdomains:
            if s.n_interface == 0:
                out.append(np.zeros((0, 0)))
                continue
            q = _rrqr_columns(res.basis[where[s.interface]])
            if q.shape[1] == 0:
                raise EmptyBoundaryBasis(f"subdomain {s.index}: restricted skeleton basis has rank 0")
            out.append(q)
    else:
        for s in d.subdomains:
            if s.n_interface == 0:
                out.append(np.zeros((0, 0)))
                continue
            try:
                res = pod(_interface(X, d, s.index), upsilon, energy)
            except ZeroSnapshots as exc:
                raise EmptyBoundaryBasis(f"subdomain {s.index}: interface snapshots vanish") from exc
            pods[s.index] = res
            out.append(res.basis)
    return out, blocks, pods


def build_full_subdomain_bases(X, d, upsilon, energy="sigma"):
    """Coupled bases: one POD of the stacked subdomain state, split into row blocks."""
    Phi, Pint, Pbnd, pods = [], [], [], []
    for s in d.subdomains:
        res = pod(_stacked(X, d, s.index), upsilon, energy)
        pods.append(res)
        Phi.append(res.basis)
        Pint.append(res.basis[: s.n_interior])
        Pbnd.append(res.basis[s.n_interior:])
    return Phi, Pint, Pbnd, pods


@dataclass
class BasisSet:
    kind: str
    Phi_int: list
    Phi_bnd: list
    upsilon_int: float
    upsilon_bnd: float
    port_blocks: dict = field(default_factory=dict)
    sigma: dict = field(default_factory=dict)
    energy: str = "sigma"

    @property
    def coupled(self):
        """True when interior and interface share coordinates (full-subdomain kind)."""
        return self.kind == "full_subdomain"

    @property
    def n_subdomains(self):
        return len(self.Phi_int)

    @property
    def n_int(self):
        return [P.shape[1] for P in self.Phi_int]

    @property
    def n_bnd(self):
        return [P.shape[1] for P in self.Phi_bnd]

    @property
    def n_hat(self):
        """Reduced coordinates per subdomain."""
        if self.coupled:
            return self.n_int
        return [a + b for a, b in zip(self.n_int, self.n_bnd)]

    def save(self, outdir):
        outdir = Path(outdir)
        for i, (Pi, Pb) in enumerate(zip(self.Phi_int, self.Phi_bnd)):
            write_ddrb(outdir / f"phi_int_{i}.ddrb", Pi)
            write_ddrb(outdir / f"phi_bnd_{i}.ddrb", Pb)
        write_json(outdir / "bases.json", {
            "kind": self.kind, "upsilon_int": self.upsilon_int, "upsilon_bnd": self.upsilon_bnd,
            "energy": self.energy, "n_subdomains": self.n_subdomains, "n_int": self.n_int, "n_bnd": self.n_bnd,
            "ports": {str(j): b.shape[1] for j, b in self.port_blocks.items()},
            "sigma": {str(k): v for k, v in self.sigma.items()}})

    @classmethod
    def load(cls, outdir, d=None):
        outdir = Path(outdir)
        meta = read_json(outdir / "bases.json")
        Pi = [read_ddrb(outdir / f"phi_int_{i}.ddrb") for i in range(meta["n_subdomains"])]
        Pb = [read_ddrb(outdir / f"phi_bnd_{i}.ddrb") for i in range(meta["n_subdomains"])]
        blocks = {}
        if meta["kind"] == "port" and d is not None:
            for p in d.ports:
                m = p.members[0]
                blocks[p.id] = Pb[m][p.local[m]][:, _port_columns(d, m, p.id, meta["ports"])]
        return cls(meta["kind"], Pi, Pb, meta["upsilon_int"], meta["upsilon_bnd"], blocks,
                   {k: np.asarray(v) for k, v in meta["sigma"].items()}, meta.get("energy", "sigma"))


def _port_columns(d, sub, port_id, widths):
    start = 0
    for j in d.subdomains[sub].ports:
        w = widths[str(j)]
        if j == port_id:
            return np.arange(start, start + w)
        start += w
    raise KeyError(port_id)


def build_bases(X, d, kind, upsilon_int, upsilon_bnd=None, energy="sigma"):
    """One-stop construction of a :class:`BasisSet`.

    For the full-subdomain kind only ``upsilon_int`` is used.
    """
    if kind not in BASIS_KINDS:
        raise ValueError(f"basis kind must be one of {BASIS_KINDS}")
    ui = parse_upsilon(upsilon_int)
    if kind == "full_subdomain":
        _, Pint, Pbnd, pods = build_full_subdomain_bases(X, d, ui, energy)
        return BasisSet(kind, Pint, Pbnd, ui, ui, {}, {f"sub{i}": r.sigma for i, r in enumerate(pods)}, energy)
    ub = ui if upsilon_bnd is None else parse_upsilon(upsilon_bnd)
    ints = build_interior_bases(X, d, ui, energy)
    bnd, blocks, pods = build_boundary_bases(X, d, ub, kind, energy)
    sigma = {f"int{i}": r.sigma for i, r in enumerate(ints)}
    sigma.update({f"bnd{k}": r.sigma for k, r in pods.items()})
    return BasisSet(kind, [r.basis for r in ints], bnd, ui, ub, blocks, sigma, energy)


@dataclass
class ResidualBasis:
    Phi_r: list
    n_snapshots: int
    upsilon: float

    @property
    def n_hat(self):
        return [P.shape[1] for P in self.Phi_r]


def build_residual_bases(residual_snapshots, d, upsilon, energy="sigma"):
    R = np.asarray(residual_snapshots, dtype=float)
    if R.ndim != 2 or R.shape[1] == 0:
        raise ValueError("need at least one residual snapshot")
    u = parse_upsilon(upsilon)
    return ResidualBasis([pod(R[s.rows], u, energy).basis for s in d.subdomains], R.shape[1], u)
