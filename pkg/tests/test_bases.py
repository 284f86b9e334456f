import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddlspg.bases import BasisSet, build_bases, build_residual_bases, parse_upsilon, pod
from ddlspg.decomp import (
    build_decomposition,
    build_strong_constraints,
    numerical_rank,
    reduced_constraint_matrix,
)
from ddlspg.errors import ZeroSnapshots
from ddlspg.mesh_fom import heat_problem
from ddlspg.training import TrainingPlan, run_top_down


def test_pod_truncation_rules_on_diagonal_example():
    X = np.diag([3.0, 1.0])
    # singular-value fractions 0.75, 1.0: 1 - 0.2 = 0.8 needs both vectors
    assert pod(X, 0.2).p == 2
    # squared fractions 0.9, 1.0: one vector suffices
    assert pod(X, 0.2, energy="sigma2").p == 1
    assert pod(X, "1-0.2").p == 2


def test_parse_upsilon_spellings():
    assert parse_upsilon("1-1e-5") == 1e-5
    assert parse_upsilon(" 1 - 0.25 ") == 0.25
    assert parse_upsilon(1e-3) == 1e-3
    with pytest.raises(ValueError):
        parse_upsilon(1.5)
    with pytest.raises(ValueError):
        parse_upsilon("2")


def test_pod_rejects_zero_and_bad_input():
    with pytest.raises(ZeroSnapshots):
        pod(np.zeros((4, 3)), 1e-3)
    with pytest.raises(ValueError):
        pod(np.array([[np.nan, 1.0]]), 1e-3)
    with pytest.raises(ValueError):
        pod(np.ones((3, 3)), 1e-3, energy="l1")


def test_pod_zero_upsilon_keeps_the_numerical_rank(rng):
    X = rng.standard_normal((20, 3)) @ rng.standard_normal((3, 10))
    assert pod(X, 0.0).p == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 12), st.integers(1, 12),
       st.floats(1e-6, 0.5))
def test_pod_projection_error_bounds(seed, m, k, ups):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m, k)) * np.logspace(0, -4, k)
    s = np.linalg.svd(X, compute_uv=False)
    for energy in ("sigma", "sigma2"):
        P = pod(X, ups, energy).basis
        assert np.allclose(P.T @ P, np.eye(P.shape[1]), atol=1e-12)
        err = np.linalg.norm(X - P @ (P.T @ X))
        if energy == "sigma2":
            # discarded squared energy <= ups * total
            assert err <= np.sqrt(ups / (1 - ups)) * np.linalg.norm(P.T @ X) * (1 + 1e-9) + 1e-12
        else:
            # discarded singular values sum to at most ups * sum(s)
            assert err <= ups * s.sum() * (1 + 1e-9) + 1e-12


def test_pod_is_deterministic_in_sign(rng):
    X = rng.standard_normal((8, 5))
    a = pod(X, 1e-3).basis
    b = pod(X.copy(), 1e-3).basis
    assert np.array_equal(a, b)


@pytest.fixture(scope="module")
def small():
    p = heat_problem(20, 20)
    d = build_decomposition(p, (2, 2))
    return p, d, run_top_down(TrainingPlan(p, grid=(6, 6)))


@pytest.mark.parametrize("kind", ["port", "skeleton", "full_interface", "full_subdomain"])
def test_bases_have_the_right_shapes_and_are_orthonormal(small, kind):
    _, d, store = small
    b = build_bases(store.snapshots, d, kind, 1e-4)
    for s, Pi, Pb in zip(d.subdomains, b.Phi_int, b.Phi_bnd):
        assert Pi.shape[0] == s.n_interior and Pb.shape[0] == s.n_interface
        if kind == "full_subdomain":
            Phi = np.vstack([Pi, Pb])
            assert Pi.shape[1] == Pb.shape[1]
            assert np.allclose(Phi.T @ Phi, np.eye(Phi.shape[1]), atol=1e-10)
        else:
            assert np.allclose(Pi.T @ Pi, np.eye(Pi.shape[1]), atol=1e-10)
            assert np.allclose(Pb.T @ Pb, np.eye(Pb.shape[1]), atol=1e-10)
    assert b.coupled == (kind == "full_subdomain")


def test_port_bases_share_blocks_across_members(small):
    _, d, store = small
    b = build_bases(store.snapshots, d, "port", 1e-4)
    for s, Pb in zip(d.subdomains, b.Phi_bnd):
        col = 0
        for j in s.ports:
            block = b.port_blocks[j]
            rows = d.ports[j].local[s.index]
            w = block.shape[1]
            assert np.array_equal(Pb[rows, col:col + w], block)
            others = np.setdiff1d(np.arange(s.n_interface), rows)
            assert np.all(Pb[others, col:col + w] == 0)
            col += w
        assert col == Pb.shape[1]


def test_shared_port_coordinates_satisfy_strong_constraints(small, rng):
    _, d, store = small
    b = build_bases(store.snapshots, d, "port", 1e-4)
    c = build_strong_constraints(d)
    A = reduced_constraint_matrix(c, b)
    coords = {j: rng.standard_normal(b.port_blocks[j].shape[1]) for j in b.port_blocks}
    y = np.concatenate([np.concatenate([coords[j] for j in s.ports]) for s in d.subdomains])
    assert np.allclose(A @ y, 0, atol=1e-12)
    # chain links: members - 1 per port, each contributing the port width
    links = sum((len(p.members) - 1) * b.port_blocks[p.id].shape[1] for p in d.ports)
    assert numerical_rank(A) == links


def test_bases_round_trip(small, tmp_path):
    _, d, store = small
    b = build_bases(store.snapshots, d, "port", 1e-4, 1e-3, energy="sigma2")
    b.save(tmp_path)
    c = BasisSet.load(tmp_path, d)
    assert c.kind == "port" and c.energy == "sigma2" and c.upsilon_bnd == 1e-3
    assert all(np.array_equal(x, y) for x, y in zip(b.Phi_int + b.Phi_bnd, c.Phi_int + c.Phi_bnd))
    assert all(np.array_equal(b.port_blocks[j], c.port_blocks[j]) for j in b.port_blocks)


def test_residual_bases_cover_subdomain_rows(small):
    _, d, store = small
    r = build_residual_bases(store.residuals, d, 1e-12)
    assert [P.shape[0] for P in r.Phi_r] == [s.n_r for s in d.subdomains]
    with pytest.raises(ValueError):
        build_residual_bases(np.zeros((d.n, 0)), d, 1e-12)


def test_unknown_kind_is_rejected(small):
    _, d, store = small
    with pytest.raises(ValueError):
        build_bases(store.snapshots, d, "ports", 1e-4)


@pytest.mark.slow
def test_heat_fine_squared_energy_dimensions():
    # 80x80 mesh, 2x2 split, 400 snapshots, energy 1 - 1e-5 on squared singular values
    p = heat_problem(80, 80)
    d = build_decomposition(p, (2, 2))
    store = run_top_down(TrainingPlan(p, grid=(20, 20)))
    c = build_strong_constraints(d)
    port = build_bases(store.snapshots, d, "port", "1-1e-5", energy="sigma2")
    assert port.n_int == [4, 2, 2, 4]
    assert [port.port_blocks[j].shape[1] for j in range(d.n_ports)] == [3, 3, 3, 3, 2]
    assert numerical_rank(reduced_constraint_matrix(c, port)) == 18
    skel = build_bases(store.snapshots, d, "skeleton", "1-1e-5", energy="sigma2")
    assert skel.n_bnd == [3, 3, 3, 3]
    assert numerical_rank(reduced_constraint_matrix(c, skel)) == 9
