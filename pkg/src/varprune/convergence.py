"""Single-unit gradient-flow dynamics, Lyapunov checks and empirical bound estimates.

The state of one unit is its fan-out weights ``w_f`` (q), fan-in weights
``w_b`` (p) and gate probability ``theta``::

    dw_f/dt   = -theta M1 w_b - lam w_f
    dw_b/dt   = -theta M2 w_f - lam w_b
    dtheta/dt = -diff(w_f, w_b) - reg_term(theta)

with the pruned equilibrium at ``(0, 0, eps1)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .hyperprior import ClipBounds, Flattening, reg_term
from .network import Dense, backward, forward, sample_gates
from .estimators import sampling_diff
from .tensor import NumericError

BLOWUP = 1e12


def zero_diff(w_f, w_b):
    return np.zeros(np.shape(w_f)[:-1])


@dataclass(eq=False)
class UnitDynamics:
    M1: np.ndarray            # (q, p)
    M2: np.ndarray            # (p, q)
    lam: float
    diff_fn: object = zero_diff
    hp: object = None
    cb: ClipBounds = None
    theta_bounds: tuple = (1e-6, 1.0 - 1e-6)

    def __post_init__(self):
        self.M1 = np.atleast_2d(np.asarray(self.M1, dtype=np.float64))
        self.M2 = np.atleast_2d(np.asarray(self.M2, dtype=np.float64))
        if self.M1.shape[::-1] != self.M2.shape:
            raise ValueError(f"M1 {self.M1.shape} and M2 {self.M2.shape} are not transposed shapes")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.hp is None:
            self.hp = Flattening(0.1)
        if self.cb is None:
            self.cb = ClipBounds()
        if not 0 < self.theta_bounds[0] < self.cb.eps1:
            raise ValueError("lower theta bound must lie in (0, eps1)")
        d = self.diff_fn(np.zeros(self.q), np.zeros(self.p))
        if np.any(np.asarray(d) != 0):
            raise ValueError("diff_fn must vanish at zero weights")

    @property
    def q(self):
        return self.M1.shape[0]

    @property
    def p(self):
        return self.M1.shape[1]

    @property
    def eps1(self):
        return self.cb.eps1

    def split(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x[..., :self.q], x[..., self.q:self.q + self.p], x[..., -1]

    def join(self, w_f, w_b, theta):
        return np.concatenate([w_f, w_b, np.asarray(theta)[..., None]], axis=-1)

    def equilibrium(self):
        return self.join(np.zeros(self.q), np.zeros(self.p), self.eps1)


def ode_rhs(dyn, w_f, w_b, theta):
    theta = np.asarray(theta, dtype=np.float64)
    if np.any((theta <= 0) | (theta >= 1)):
        raise ValueError("theta must lie strictly inside (0, 1)")
    dwf = -theta[..., None] * (w_b @ dyn.M1.T) - dyn.lam * w_f
    dwb = -theta[..., None] * (w_f @ dyn.M2.T) - dyn.lam * w_b
    dth = -np.asarray(dyn.diff_fn(w_f, w_b)) - reg_term(dyn.hp, dyn.cb, theta)
    return dwf, dwb, dth


def _rhs_flat(dyn, x):
    lo, hi = dyn.theta_bounds
    w_f, w_b, th = dyn.split(x)
    dwf, dwb, dth = ode_rhs(dyn, w_f, w_b, np.clip(th, lo, hi))
    return dyn.join(dwf, dwb, dth)


def integrate(dyn, x0, dt, T, every=1):
    """Classical RK4 from ``x0`` (one state or a batch of states) for ``T/dt`` steps.

    Theta is clamped to the configured bounds after every step. Returns the
    states at ``t = 0, every*dt, 2*every*dt, ...`` with time on the first axis.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    steps = int(round(T / dt))
    lo, hi = dyn.theta_bounds
    x = np.array(x0, dtype=np.float64)
    x[..., -1] = np.clip(x[..., -1], lo, hi)
    out = [x.copy()]
    for s in range(1, steps + 1):
        k1 = _rhs_flat(dyn, x)
        k2 = _rhs_flat(dyn, x + 0.5 * dt * k1)
        k3 = _rhs_flat(dyn, x + 0.5 * dt * k2)
        k4 = _rhs_flat(dyn, x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        x[..., -1] = np.clip(x[..., -1], lo, hi)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > BLOWUP:
            raise NumericError(f"trajectory blew up at t = {s * dt:g}")
        if s % every == 0:
            out.append(x.copy())
    return np.array(out)


def lyapunov_V(w_f, w_b, theta, eps1):
    w_f, w_b = np.asarray(w_f, dtype=np.float64), np.asarray(w_b, dtype=np.float64)
    phi = 0.5 * (np.sum(w_f * w_f, axis=-1) + np.sum(w_b * w_b, axis=-1))
    return phi + 0.5 * (np.asarray(theta) - eps1) ** 2


def roa_radius(lam, eta, kappa, eps1):
    return lam / (eta + kappa) - eps1


def roa_contains(w_f, w_b, theta, lam, eta, kappa, eps1):
    """Strict membership in the guaranteed region of attraction around ``(0, 0, eps1)``."""
    r = roa_radius(lam, eta, kappa, eps1)
    if r <= 0:
        warnings.warn("empty region of attraction: eps1 >= lam / (eta + kappa)", RuntimeWarning)
        return False
    w_f, w_b = np.asarray(w_f, dtype=np.float64), np.asarray(w_b, dtype=np.float64)
    total = float(w_f @ w_f + w_b @ w_b + (theta - eps1) ** 2)
    return total < r * r


def stability_check(lam, eta, kappa, eps1):
    """``0 < eps1 < lam / (2 (eta + kappa))``."""
    return bool(0 < eps1 < 0.5 * lam / (eta + kappa))


def sample_ball_starts(rng, n, q, p, radius, eps1, theta_min=0.0):
    """Uniform draws from the open ball of ``radius`` around ``(0, 0, eps1)`` with theta > theta_min."""
    dim = q + p + 1
    out = []
    while len(out) < n:
        v = rng.normal(size=dim)
        v *= radius * rng.random() ** (1.0 / dim) / np.linalg.norm(v)
        v[-1] += eps1
        if v[-1] > theta_min and np.sum((v - np.r_[np.zeros(q + p), eps1]) ** 2) < radius * radius:
            out.append(v)
    return np.array(out)


# ---------------------------------------------------------------------------
# bounds on real networks

@dataclass
class BoundReport:
    kappa_hat: float
    eta_hat: float
    lipschitz_prod: float


def lipschitz_bound(weights):
    """``(mean_l ||W_l||_F^2) ** (L/2)`` over the weight matrices (biases excluded)."""
    weights = list(weights)
    L = len(weights)
    if L == 0:
        raise ValueError("need at least one weight matrix")
    return float(np.mean([np.sum(np.square(W)) for W in weights]) ** (L / 2.0))


def _unit_arrays(net, gi, j):
    li = net.gated_layers[gi]
    layer = net.layers[li]
    nxt = li + 1
    if not isinstance(layer, Dense) or nxt >= len(net.layers) or not isinstance(net.layers[nxt], Dense):
        raise ValueError("bound estimation is implemented for dense units feeding a dense layer")
    return li, nxt


def empirical_bounds(net, gates, data, unit, n_samples, rng, batch_size=32, rescale=(0.25, 2.0)):
    """Empirical kappa and eta for one dense unit.

    ``kappa_hat`` is the largest observed ``|C1_hat - C0_hat| / phi`` over
    random minibatches, gate samples and rescalings of the unit's weights;
    ``eta_hat`` the largest observed top singular value of the sampled
    ``M1 + M2^T``.
    """
    gi, j = unit
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not gates[gi].alive[j]:
        raise ValueError("unit is not alive")
    li, nxt = _unit_arrays(net, gi, j)
    N = data.inputs.shape[0]
    B = min(batch_size, N)
    kappa, eta = 0.0, 0.0
    for _ in range(n_samples):
        probe = net.copy()
        s = rng.uniform(*rescale)
        probe.layers[li].W[j] *= s
        probe.layers[nxt].W[:, j] *= s
        probe.touch()
        w_b, w_f = probe.layers[li].W[j], probe.layers[nxt].W[:, j]
        phi = 0.5 * (float(w_b @ w_b) + float(w_f @ w_f))
        if phi == 0.0:
            raise ValueError("the probed unit has zero weights (phi = 0)")
        idx = rng.integers(0, N, size=B)
        X, Y = data.inputs[idx], data.targets[idx]
        xi = sample_gates(gates, rng)
        if phi >= 1e-8:
            d = sampling_diff(probe, X, Y, gates, rng, N, xi=xi, units=[(gi, j)]).values[gi][j]
            kappa = max(kappa, abs(d) / phi)
        xi_on = [x.copy() for x in xi]
        xi_on[gi][j] = 1.0
        _, trace = forward(probe, X, xi_on)
        grads = backward(probe, trace, Y, N)
        zeta = trace.pre[li][:, j]
        act = probe.layers[li].act
        safe = np.where(zeta == 0, 1.0, zeta)
        a1 = np.where(zeta == 0, act.grad(zeta), act(zeta) / safe)
        a2 = act.grad(zeta)
        zb = trace.inputs[li]
        df = grads.deltas[nxt]
        M = (df * (a1 + a2)[:, None]).T @ zb
        eta = max(eta, float(np.linalg.norm(M, 2)))
    weights = [net.layers[i].W for i in net.weighted_layers]
    return BoundReport(kappa, eta, lipschitz_bound(weights))
