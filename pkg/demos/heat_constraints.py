"""Port bases against full-interface bases, strong against weak constraints.

Full-interface bases cannot match each other along a port, so strong
compatibility collapses the solution; a single weak constraint per port
recovers it.  Runs in well under a minute.
"""

from ddlspg.bases import build_bases
from ddlspg.decomp import build_decomposition, build_strong_constraints, build_weak_constraints
from ddlspg.harness import relative_error
from ddlspg.mesh_fom import heat_problem, newton_solve
from ddlspg.sqp import RomProblem, sqp_solve
from ddlspg.training import TrainingPlan, run_top_down

mu = (5.005, 5.005)
p = heat_problem(40, 40)
d = build_decomposition(p, (2, 2))
store = run_top_down(TrainingPlan(p, grid=(20, 20), workers=4))
fom = newton_solve(p, mu)

for kind in ("port", "full_interface"):
    b = build_bases(store.states, d, kind, "1-1e-5", energy="sigma2")
    for name, c in [("strong", build_strong_constraints(d)), ("weak n_c=1", build_weak_constraints(d, 1, seed=0))]:
        sol = sqp_solve(RomProblem(p, d, b, c, mu=mu))
        print(f"{kind:15s} {name:11s} error {relative_error(sol, fom, d):.2e}  iterations {sol.iterations}")
