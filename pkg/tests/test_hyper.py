import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddlspg.bases import build_residual_bases
from ddlspg.errors import InsufficientBudget, SampleRankFailure
from ddlspg.hyper import (
    build_hyper,
    build_weighting,
    corner_nodes,
    greedy_sample_mesh,
    induce_state_samplers,
    load_hyper,
    save_hyper,
)
from ddlspg.mesh_fom import assemble_residual

# Four nodes, two residual vectors, one unknown per node.
TOYS = [
    np.array([[1.0, 0.0], [0.5, 1.0], [0.2, 0.3], [0.1, 2.0]]),
    np.array([[0.3, 1.0], [0.9, 0.2], [0.9, -0.4], [0.1, 0.5]]),
    np.array([[1.0, 1.0], [1.0, -1.0], [0.0, 0.5], [0.0, 0.7]]),
    np.array([[2.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 3.0]]),
]


def brute_force(Phi, rounds, seeds=(), g=1):
    """Exhaustive argmax over unselected nodes.

    ``rounds`` lists ``(first_column, n_columns, n_add)`` per greedy round.
    Each round's misfit is computed by solving the normal equations on the
    currently sampled rows, then every candidate node is scored in a loop.
    """
    sel = list(seeds)
    n_nodes = Phi.shape[0] // g
    for c0, nc, n_add in rounds:
        R = []
        for q in range(c0, c0 + nc):
            if c0 == 0:
                R.append(Phi[:, q])
                continue
            rows = [g * l + k for l in sel for k in range(g)]
            A = Phi[rows][:, :c0]
            alpha = np.linalg.solve(A.T @ A, A.T @ Phi[rows, q])
            R.append(Phi[:, q] - Phi[:, :c0] @ alpha)
        for _ in range(n_add):
            best, best_score = None, -1.0
            for l in range(n_nodes):
                if l in sel:
                    continue
                score = sum(r[g * l + k] ** 2 for r in R for k in range(g))
                if score > best_score:
                    best, best_score = l, score
            sel.append(best)
    return sel


@pytest.mark.parametrize("Phi", TOYS)
def test_greedy_matches_brute_force_without_seeds(Phi):
    # budget 3, two working columns: round 1 adds two nodes from column 1,
    # round 2 adds one node from the fitted column 2
    got = greedy_sample_mesh(Phi, 3, 2).tolist()
    assert got == brute_force(Phi, [(0, 1, 2), (1, 1, 1)])
    assert len(set(got)) == 3


@pytest.mark.parametrize("Phi", TOYS)
@pytest.mark.parametrize("seed_node", range(4))
def test_greedy_matches_brute_force_with_corner_seed(Phi, seed_node):
    got = greedy_sample_mesh(Phi, 3, 2, corners=[seed_node]).tolist()
    assert got[0] == seed_node
    assert len(got) == 3 == len(set(got))
    assert got == brute_force(Phi, [(0, 1, 1), (1, 1, 1)], seeds=[seed_node])


@pytest.mark.parametrize("Phi", TOYS)
def test_greedy_single_round_budget_two(Phi):
    # budget 2 with two working columns: two rounds, one node each
    assert greedy_sample_mesh(Phi, 2, 2).tolist() == brute_force(Phi, [(0, 1, 1), (1, 1, 1)])
    # one working column: a single round adds both nodes
    assert greedy_sample_mesh(Phi, 2, 1).tolist() == brute_force(Phi, [(0, 1, 2)])


def test_greedy_ties_go_to_lowest_node():
    Phi = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    assert greedy_sample_mesh(Phi, 1, 1).tolist() == [0]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 2), st.sampled_from([None, 0, 1, 2, 3]))
def test_greedy_random_toys_match_brute_force(seed, g, corner):
    Phi = np.random.default_rng(seed).standard_normal((4 * g, 2))
    seeds = [] if corner is None else [corner]
    n_s = 3
    got = greedy_sample_mesh(Phi, n_s, 2, corners=seeds, dofs_per_node=g).tolist()
    n_a = n_s - len(seeds)
    rounds = [(0, 1, 2), (1, 1, 1)] if n_a == 3 else [(0, 1, 1), (1, 1, 1)]
    assert got == brute_force(Phi, rounds, seeds, g)
    assert len(got) == n_s and set(seeds) <= set(got)


def test_budget_equal_to_seed_count_returns_seeds():
    assert greedy_sample_mesh(TOYS[0], 2, 1, corners=[3, 1]).tolist() == [3, 1]


def test_budget_errors():
    with pytest.raises(InsufficientBudget):
        greedy_sample_mesh(TOYS[0], 1, 1, corners=[0, 1])
    with pytest.raises(InsufficientBudget):
        greedy_sample_mesh(TOYS[0], 5, 1)
    with pytest.raises(ValueError):
        greedy_sample_mesh(TOYS[0], 1, 2)


def test_rank_failure_is_reported():
    # a zero working column leaves nothing to fit the second round with
    Phi = np.array([[0.0, 1.0], [0.0, 1.0], [0.0, 2.0], [0.0, 3.0]])
    with pytest.raises(SampleRankFailure):
        greedy_sample_mesh(Phi, 3, 2, corners=[3])


def test_gappy_weight_is_pseudoinverse_of_sampled_basis(rng):
    Phi = np.linalg.qr(rng.standard_normal((30, 4)))[0]
    rows = np.array([1, 4, 7, 9, 15, 22, 28])
    Q, R = build_weighting("gappy", Phi, rows)
    v = rng.standard_normal(rows.size)
    assert np.allclose(np.linalg.solve(R, Q.T @ v), np.linalg.pinv(Phi[rows]) @ v)
    assert build_weighting("collocation", Phi, rows) is None


@pytest.fixture(scope="module")
def hyper_setup(heat_small):
    p, d, store = heat_small
    rb = build_residual_bases(store.residuals, d, 1e-10)
    return p, d, rb


@pytest.mark.parametrize("scheme", ["collocation", "gappy"])
def test_sample_meshes_contain_seeds_and_have_budget_size(hyper_setup, scheme):
    p, d, rb = hyper_setup
    h = build_hyper(p, d, scheme, rb, ratio=2.0)
    for i, (sub, Pr) in enumerate(zip(h.subdomains, rb.Phi_r)):
        n_s = min(int(np.ceil(2.0 * Pr.shape[1])), d.subdomains[i].n_r)
        assert sub.nodes.size == n_s
        assert set(corner_nodes(d, i).tolist()) <= set(sub.nodes.tolist())
        assert sub.bnd_pos.size > 0


def test_induced_samplers_reproduce_global_rows(hyper_setup, rng):
    p, d, rb = hyper_setup
    h = build_hyper(p, d, "gappy", rb, ratio=2.0)
    x = 0.1 * rng.standard_normal(p.n)
    mu = (4.0, 6.0)
    r = assemble_residual(p, x, mu)
    for s, sub in zip(d.subdomains, h.subdomains):
        xc = np.empty(sub.op.cols.size)
        xc[sub.int_cols] = x[s.interior][sub.int_pos]
        xc[sub.bnd_cols] = x[s.interface][sub.bnd_pos]
        assert np.allclose(sub.op.residual(xc, mu), r[s.rows[sub.rows]])


def test_identity_scheme_samples_everything(hyper_setup):
    p, d, _ = hyper_setup
    h = build_hyper(p, d, "identity")
    for s, sub in zip(d.subdomains, h.subdomains):
        assert sub.rows.size == s.n_r
        assert sub.int_pos.size == s.n_interior and sub.bnd_pos.size == s.n_interface


def test_residual_basis_smaller_than_state_basis_is_rejected(hyper_setup):
    p, d, rb = hyper_setup
    with pytest.raises(InsufficientBudget):
        build_hyper(p, d, "gappy", rb, n_hat=[P.shape[1] + 1 for P in rb.Phi_r])


def test_corner_modes(hyper_setup):
    _, d, _ = hyper_setup
    every = corner_nodes(d, 0, "interface")
    only = corner_nodes(d, 0, "corner")
    assert set(only.tolist()) < set(every.tolist())
    assert corner_nodes(d, 0, "none").size == 0
    with pytest.raises(ValueError):
        corner_nodes(d, 0, "edges")


def test_hyper_round_trip(hyper_setup, tmp_path):
    p, d, rb = hyper_setup
    h = build_hyper(p, d, "gappy", rb, ratio=1.5)
    save_hyper(h, tmp_path)
    g = load_hyper(p, d, tmp_path)
    assert g.scheme == "gappy" and g.ratio == 1.5
    for a, b in zip(h.subdomains, g.subdomains):
        assert np.array_equal(a.rows, b.rows)
        assert np.allclose(a.qr[1], b.qr[1])


def test_induce_samplers_rejects_nothing_for_own_rows(hyper_setup):
    p, d, _ = hyper_setup
    op, ic, bc, ip, bp = induce_state_samplers(d, p, 1, [0, 1, 2])
    assert ic.size + bc.size == op.cols.size
