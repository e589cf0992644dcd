"""NFE of explicit RK45 against ABM with functional and Jacobi-Newton correctors."""

from dimwise.odesolve import SolverConfig, abm_solve, make_problem, rk45_adaptive

for name in ("decay", "stiff_decay", "linear_system", "hollow_random"):
    p = make_problem(name)
    rows = [("rk45", rk45_adaptive(p, SolverConfig()))]
    for corrector in ("functional", "jacobi_newton"):
        rows.append((f"abm-{corrector}", abm_solve(p, SolverConfig(corrector=corrector))))
    print(name)
    for label, traj in rows:
        s = traj.stats
        print(f"  {label:<18} nfe={s.nfe:<6} accepted={s.n_steps_accepted:<5} "
              f"rejected={s.n_steps_rejected}")
