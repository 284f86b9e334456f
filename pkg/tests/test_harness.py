import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddlspg.errors import EmptyInput, ZeroReference
from ddlspg.harness import (
    CSV_COLUMNS,
    CostDims,
    RunRecord,
    StudySpec,
    cost_dims_from,
    cost_model,
    fit_bound_constant,
    pareto_front,
    read_records_csv,
    relative_error,
    report,
    run_study,
    write_records_csv,
)
from ddlspg.sqp import RomSolution, SqpState


def _rec(err, t, method="DDLSPG", basis="port", n_c=0):
    return RunRecord(method, basis, "strong" if n_c == 0 else "weak", n_c, 1e-5, 1e-5, 0.0, 0.0,
                     err, t / 2, t / 2, t, 0)


# ----------------------------------------------------------------- metrics


def test_relative_error_is_rms_of_subdomain_errors(heat_small):
    _, d, _ = heat_small
    x = np.ones(d.n)
    scale = [1.1, 1.0, 1.0, 0.7]
    states = [scale[i] * x[s.state] for i, s in enumerate(d.subdomains)]
    rom = RomSolution(SqpState(np.zeros(0), np.zeros(0)), [], [],
                      [v[:s.n_interior] for v, s in zip(states, d.subdomains)],
                      [v[s.n_interior:] for v, s in zip(states, d.subdomains)], np.zeros(0), 0.0)
    # per-subdomain relative errors 0.1, 0, 0, 0.3
    assert relative_error(rom, x, d) == pytest.approx(np.sqrt((0.01 + 0.09) / 4))
    with pytest.raises(ZeroReference):
        relative_error(rom, np.zeros(d.n), d)


def test_fit_bound_constant():
    assert fit_bound_constant([1.0, 4.0, 3.0], [2.0, 2.0, 6.0]) == 2.0
    with pytest.raises(EmptyInput):
        fit_bound_constant([], [])
    with pytest.raises(ValueError):
        fit_bound_constant([1.0], [0.0])


# -------------------------------------------------------------- cost model


def test_cost_two_subdomains_identity_port():
    dims = CostDims(n_int_hat=[2, 3], n_bnd_hat=[1, 2], n_A=3, n_s_int=[10, 12], n_s_bnd=[4, 5],
                    n_s_r=[14, 17], n_B=[14, 17], c_r=5, c_J=7, w_int=3, w_bnd=1)
    c = cost_model(dims, "identity", "port")
    # step 1: 2*10*2 + 2*4*1 = 48 ; 2*12*3 + 2*5*2 = 92
    assert c.step1 == [48, 92]
    # step 2: 14*5 + 14*7 + 2*14*3*2 + 2*14*1*1 + 4*3*1 = 376
    #         17*5 + 17*7 + 2*17*3*3 + 2*17*1*2 + 4*3*2 = 602
    assert c.step2 == [376, 602]
    # step 3: 2*2*14 + 2*1*14 + 1 + 14^2 (1 + 4 + 4) = 1849
    #         2*3*17 + 2*2*17 + 2 + 17^2 (4 + 12 + 9) = 7397
    assert c.step3 == [1849, 7397]
    assert c.step4 == 12            # 2 * 2 * 3
    assert c.step5 == 1331 / 3      # (2 + 3 + 1 + 2 + 3)^3 / 3
    assert c.step6 == 16            # 2 * ((2 + 1) + (3 + 2))
    assert c.step7 == 6             # 2 * 3
    assert c.parallel_assembly == 92 + 602 + 7397 + 12
    assert c.serial_assembly == 48 + 92 + 376 + 602 + 1849 + 7397 + 12


def test_cost_gappy_charges_the_dense_weighting():
    dims = CostDims(n_int_hat=[2], n_bnd_hat=[2], n_A=0, n_s_int=[6], n_s_bnd=[3], n_s_r=[8], n_B=[5],
                    c_r=[4], c_J=[6], w_int=[2], w_bnd=[1])
    g = cost_model(dims, "gappy")
    # 8*4 + 8*6 + 2*8*2*2 + 2*8*1*2 + 0 + 2*5*8*(1 + 2 + 2) = 576
    assert g.step2 == [576]
    assert g.step1 == [36] and g.step3 == [442]   # 2*6*2+2*3*2 ; 20+20+2+25*16
    assert (g.step4, g.step5, g.step6, g.step7) == (0, 64 / 3, 8, 0)
    # collocation has a diagonal B: no dense term
    assert cost_model(dims, "collocation").step2 == [176]


def test_cost_step_four_example():
    dims = CostDims(n_int_hat=[0] * 4, n_bnd_hat=[0] * 4, n_A=12, n_s_int=0, n_s_bnd=0, n_s_r=0, n_B=0,
                    c_r=0, c_J=0, w_int=0, w_bnd=0)
    c = cost_model(dims)
    assert c.step4 == 96            # 2 * 4 * 12
    assert c.step5 == 12 ** 3 / 3
    assert c.step7 == 24


def test_cost_full_subdomain_solve():
    dims = CostDims(n_int_hat=[3] * 4, n_bnd_hat=[3] * 4, n_A=2, n_s_int=5, n_s_bnd=2, n_s_r=7, n_B=7,
                    c_r=0, c_J=0, w_int=0, w_bnd=0)
    c = cost_model(dims, "identity", "full_subdomain")
    assert c.step5 == 14 ** 3 / 3   # (4*3 + 2)^3 / 3 = 914.67
    assert c.step6 == 24            # 2 * (4 * 3)
    assert c.step1 == [42] * 4      # 2*5*3 + 2*2*3


def test_cost_identity_full_sampling_step_one():
    dims = CostDims(n_int_hat=[4], n_bnd_hat=[3], n_A=0, n_s_int=[100], n_s_bnd=[20], n_s_r=[110], n_B=[110],
                    c_r=0, c_J=0, w_int=0, w_bnd=0)
    assert cost_model(dims).step1 == [920]   # 2*100*4 + 2*20*3


def test_cost_dims_validation():
    with pytest.raises(ValueError):
        CostDims([1, 2], [1, 2], 1, [1], 1, 1, 1, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        CostDims([1], [1], -1, 1, 1, 1, 1, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        CostDims([1], [1], 1, -1, 1, 1, 1, 1, 1, 1, 1)


_dim = st.integers(0, 40)


@settings(max_examples=50, deadline=None)
@given(st.lists(_dim, min_size=11, max_size=11), st.integers(0, 10), st.sampled_from(["identity", "gappy"]))
def test_cost_is_monotone_in_every_dimension(vals, which, scheme):
    names = ["n_int_hat", "n_bnd_hat", "n_A", "n_s_int", "n_s_bnd", "n_s_r", "n_B", "c_r", "c_J", "w_int", "w_bnd"]
    base = dict(zip(names, vals))
    base["n_int_hat"] = [base["n_int_hat"]]
    bumped = dict(base)
    if which == 0:
        bumped["n_int_hat"] = [base["n_int_hat"][0] + 1]
    else:
        bumped[names[which]] += 1
    a = cost_model(CostDims(**base), scheme)
    b = cost_model(CostDims(**bumped), scheme)
    assert b.total >= a.total and b.serial_assembly >= a.serial_assembly and b.solve >= a.solve


def test_cost_dims_from_identity_rom(heat_small):
    from ddlspg.bases import build_bases
    from ddlspg.decomp import build_strong_constraints
    from ddlspg.sqp import RomProblem

    p, d, store = heat_small
    b = build_bases(store.snapshots, d, "port", 1e-4)
    rp = RomProblem(p, d, b, build_strong_constraints(d))
    dims = cost_dims_from(rp)
    assert dims.n_s_r == [s.n_r for s in d.subdomains]
    assert dims.n_s_int == [s.n_interior for s in d.subdomains]
    assert dims.n_int_hat == b.n_int and dims.n_A == rp.rank_A
    assert all(w > 0 for w in dims.w_int)


# ------------------------------------------------------- records and fronts


def test_pareto_example():
    recs = [_rec(0.1, 1.0), _rec(0.2, 2.0), _rec(0.05, 3.0)]
    front = pareto_front(recs)
    assert [(r.rel_err, r.t_total) for r in front] == [(0.1, 1.0), (0.05, 3.0)]
    assert pareto_front(recs[:1]) == recs[:1]
    assert pareto_front([]) == []


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=12))
def test_pareto_invariants(points):
    recs = [_rec(e, t) for e, t in points]
    front = pareto_front(recs)
    assert front
    for r in recs:
        if r in front:
            continue
        assert any(q.rel_err <= r.rel_err and q.t_total <= r.t_total for q in front)
    for a in front:
        for b in front:
            assert not (b.rel_err <= a.rel_err and b.t_total <= a.t_total
                        and (b.rel_err < a.rel_err or b.t_total < a.t_total))


def test_record_validation():
    with pytest.raises(ValueError):
        _rec(0.1, 1.0, method="LSPG")
    with pytest.raises(ValueError):
        _rec(float("nan"), 1.0)


def test_csv_round_trip(tmp_path):
    recs = [_rec(0.1 / 3, 1.0 / 7), _rec(2e-17, 5.0, method="DDGNAT", basis="skeleton", n_c=3)]
    path = write_records_csv(tmp_path / "s.csv", recs)
    assert path.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert read_records_csv(path) == recs
    (tmp_path / "bad.csv").write_text("method,basis\nDDLSPG,port\n")
    with pytest.raises(ValueError):
        read_records_csv(tmp_path / "bad.csv")


def test_report_files(tmp_path):
    recs = [_rec(0.1, 1.0), _rec(0.2, 2.0), _rec(0.3, 0.5, method="DDGNAT", n_c=1)]
    paths = report(recs, tmp_path)
    names = sorted(p.name for p in paths)
    assert names == ["pareto_DDGNAT.csv", "pareto_DDLSPG.csv", "plot_data.json", "study.csv"]
    assert len(read_records_csv(tmp_path / "pareto_DDLSPG.csv")) == 1
    plot = json.loads((tmp_path / "plot_data.json").read_text())
    assert plot["error_vs_constraints"]["DDLSPG"]["port"]["strong"] == 0.1
    assert plot["error_vs_constraints"]["DDGNAT"]["port"]["1"] == 0.3
    with pytest.raises(EmptyInput):
        report([], tmp_path)


def test_study_settings_validation():
    with pytest.raises(ValueError):
        StudySpec(mu=(1, 1), methods=("LSPG",))
    with pytest.raises(ValueError):
        StudySpec(mu=(1, 1), constraints=("strong", 0))


def test_small_study(heat_small):
    p, d, store = heat_small
    spec = StudySpec(mu=(5.0, 5.0), basis_kinds=("port", "full_interface"), constraints=("strong", 1),
                     upsilon_state=(1e-4,), upsilon_res=(1e-8,), ratios=(2.0,),
                     methods=("DDLSPG", "DDGNAT"), n_weak_seeds=2, workers=2)
    records, fronts = run_study(p, d, store, spec)
    keys = [r.key for r in records]
    assert keys == sorted(keys, key=lambda k: tuple(map(str, k)))
    assert len(set(keys)) == len(keys)
    lspg = [r for r in records if r.method == "DDLSPG"]
    assert {(r.basis, r.constraint) for r in lspg} == {("port", "strong"), ("port", "weak"),
                                                      ("full_interface", "strong"), ("full_interface", "weak")}
    assert all(r.ratio == 0.0 and r.upsilon_res == 0.0 for r in lspg)
    assert all(r.seeds == [0, 1] for r in records if r.constraint == "weak")
    for m, front in fronts.items():
        assert all(r in records and r.method == m for r in front)
    # same inputs, same records (timings aside)
    again, _ = run_study(p, d, store, spec)
    assert [(r.key, r.rel_err) for r in again] == [(r.key, r.rel_err) for r in records]
