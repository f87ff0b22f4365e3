"""Single-unit gradient flow inside and outside the guaranteed region of attraction.

A unit with fan-in p = 4 and fan-out q = 3 is integrated from random starts.
With eps1 below lam / (2 (eta + kappa)) every start inside the ball of
radius lam / (eta + kappa) - eps1 decays to the pruned state (0, 0, eps1)
and the Lyapunov function never rises. With eps1 ten times over that limit
and an adversarial cost difference the same starts need not converge.
"""
import numpy as np

from varprune.convergence import (UnitDynamics, integrate, lyapunov_V, roa_radius, sample_ball_starts,
                                  stability_check)
from varprune.hyperprior import ClipBounds, Flattening


def sweep(lam, eta, kappa, eps1, diff, radius, dt=1e-2, T=50.0, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 4))
    A *= eta / np.linalg.norm(A, 2)
    dyn = UnitDynamics(0.5 * A, 0.5 * A.T, lam, diff, Flattening(0.1), ClipBounds(eps1, 1e-4), (1e-6, 1 - 1e-6))
    starts = sample_ball_starts(rng, 50, 3, 4, radius, eps1, theta_min=1e-3)
    traj = integrate(dyn, starts, dt, T)
    w_f, w_b, th = dyn.split(traj)
    rise = np.max(np.diff(lyapunov_V(w_f, w_b, th, eps1), axis=0))
    done = np.sum(np.max(np.abs(traj[-1] - dyn.equilibrium()), axis=1) < 1e-4)
    print(f"  stability condition {stability_check(lam, eta, kappa, eps1)}, {done}/50 converged, "
          f"largest V increase per step {rise:.2e}")


def bounded_diff(kappa, c):
    return lambda w_f, w_b: kappa * 0.5 * (np.sum(w_f ** 2, -1) + np.sum(w_b ** 2, -1)) * np.tanh(
        np.concatenate([w_f, w_b], -1) @ c)


c = np.random.default_rng(5).normal(size=7)
c /= np.linalg.norm(c)
print("inside the conditions: lam = 1, eta = kappa = 2, eps1 = 0.05")
sweep(1.0, 2.0, 2.0, 0.05, bounded_diff(2.0, c), roa_radius(1.0, 2.0, 2.0, 0.05), T=100.0)

print("outside: lam = 1, eta = kappa = 20, eps1 = 10 x the limit, diff = +kappa phi")
adversarial = lambda w_f, w_b: 20.0 * 0.5 * (np.sum(w_f ** 2, -1) + np.sum(w_b ** 2, -1))
sweep(1.0, 20.0, 20.0, 10 * 0.5 / 40.0, adversarial, 1.0 / 40.0, dt=1e-3, T=20.0)
