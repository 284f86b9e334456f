"""DD-LSPG and DD-GNAT on the coarse Burgers problem against the exact solution."""

import numpy as np

from ddlspg.bases import build_bases, build_residual_bases
from ddlspg.decomp import build_decomposition, build_strong_constraints
from ddlspg.harness import relative_error
from ddlspg.hyper import build_hyper
from ddlspg.mesh_fom import burgers_problem, newton_solve
from ddlspg.sqp import RomProblem, reconstruct_global, sqp_solve
from ddlspg.training import TrainingPlan, run_top_down

mu = (7692.5384, 21.9230)
p = burgers_problem(120, 12)
d = build_decomposition(p, (4, 2))
store = run_top_down(TrainingPlan(p, grid=(6, 6)))
b = build_bases(store.states, d, "port", "1-1e-5")
rb = build_residual_bases(store.residuals, d, "1-1e-10")
strong = build_strong_constraints(d)
fom = newton_solve(p, mu)
exact = p.exact_state(mu)
print(f"FOM vs exact: {np.linalg.norm(fom.x - exact) / np.linalg.norm(exact):.2e}")

for name, hyper in [("DD-LSPG", None), ("DD-GNAT", build_hyper(p, d, "gappy", rb, ratio=2.0, n_hat=b.n_hat))]:
    sol = sqp_solve(RomProblem(p, d, b, strong, hyper, mu))
    x, _ = reconstruct_global(sol, d)
    print(f"{name}: vs FOM {relative_error(sol, fom, d):.2e}, "
          f"vs exact {np.linalg.norm(x - exact) / np.linalg.norm(exact):.2e}, "
          f"{sol.iterations} iterations, {1e3 * sol.timings['total']:.1f} ms online")
