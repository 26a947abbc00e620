"""
Population quantities behind the estimator
==========================================

Compare a Bellman-complete fixture with one that is only realizable. In
the complete case the weighted feature mean follows the target policy
exactly; otherwise the two drift apart even though the estimator still
targets a well defined population weight.
"""

import numpy as np

from qmmr import (
    FixtureShape, check_completeness, compute_feature_dynamics, coverage_norms, generate_mdp,
    leverage_constant, population_weights_linear, rho_upper_bound, sample_trajectories,
    run_qmmr, softmax_policy, tracking_error, uniform_policy,
)

shape = FixtureShape(horizon=3, states=4, actions=2, dim=4)
target = softmax_policy(shape.states_per_level, shape.actions, temperature=0.3, seed=2)
behavior = uniform_policy(shape.states_per_level, shape.actions)

for kind in ("linear_complete", "misspecified_linear"):
    mdp, feats = generate_mdp(kind, shape, seed=2, target=target)
    pop = compute_feature_dynamics(mdp, target, behavior, feats)
    norms = coverage_norms(pop)
    print(f"\n{kind}")
    for h in range(1, mdp.horizon + 1):
        gap = np.linalg.norm(pop.psi[h] - pop.mean_pi[h])
        print(f"  h={h} completeness={check_completeness(mdp, target, feats, h):.1e} "
              f"|psi - E phi|={gap:.1e} coverage={norms[h]['psi']:.3f} "
              f"kappa={leverage_constant(mdp, behavior, feats, h):.2f} "
              f"rho_1:h<={rho_upper_bound(pop, 1, h):.2f}")

    # One draw per n, so the decrease is noisy; the tracking command averages trials.
    wstar = population_weights_linear(pop)
    for n in (500, 2000, 8000):
        ds = sample_trajectories(mdp, behavior, n, seed=n)
        wm, _ = run_qmmr(ds, feats, target, v_max=mdp.v_max)
        print(f"  n={n:<5} tracking error per level:",
              np.round(tracking_error(wm, wstar, ds)[1:], 4))
