"""Estimators of the per-unit cost difference C1 - C0.

C1 (C0) is the expected minibatch cost ``(N/B) * sum_i loss_i`` with one
unit's gate forced on (off), the expectation taken over all other gates.
Negative values mean the unit lowers the cost, i.e. it is useful.

Every estimator returns an :class:`EstimateReport` with one array per gated
layer (full width, dead units report 0).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .network import backward, forward, sample_gates, unit_phi

MAX_ENUMERATED_UNITS = 16


@dataclass(frozen=True)
class Taylor:
    name = "taylor"


@dataclass(frozen=True)
class Concrete:
    t: float = 0.1
    name = "concrete"

    def __post_init__(self):
        if not 0.0 < self.t < 1.0:
            raise ValueError(f"temperature must lie in (0, 1), got {self.t}")


@dataclass(frozen=True)
class Sampling:
    name = "sampling"


@dataclass(frozen=True)
class Hybrid:
    k: int = 0
    name = "hybrid"

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"hybrid sampling-unit count must be >= 0, got {self.k}")


@dataclass(frozen=True)
class BruteForce:
    name = "brute_force"


def estimator_from_name(name, t=0.1, k=0):
    table = {"taylor": Taylor(), "sampling": Sampling(), "brute_force": BruteForce()}
    if name == "concrete":
        return Concrete(t)
    if name == "hybrid":
        return Hybrid(k)
    if name not in table:
        raise ValueError(f"unknown estimator {name!r}")
    return table[name]


@dataclass(eq=False)
class EstimateReport:
    values: list      # one array per gated layer
    kinds: list       # estimator name per unit, same layout
    alive: list

    def flat(self):
        """Values of the alive units, layer by layer."""
        return np.concatenate([v[a] for v, a in zip(self.values, self.alive)])

    def flat_kinds(self):
        return [k for ks, a in zip(self.kinds, self.alive) for k, keep in zip(ks, a) if keep]

    def check(self):
        for v in self.values:
            if not np.all(np.isfinite(v)):
                raise FloatingPointError("non-finite estimate")
        return self


def _report(values, gates, name):
    values = [np.where(g.alive, v, 0.0) for v, g in zip(values, gates)]
    kinds = [np.full(g.alive.shape, name, dtype=object) for g in gates]
    return EstimateReport(values, kinds, [g.alive.copy() for g in gates]).check()


def _unit_sums(post, grad):
    axes = (0,) if post.ndim == 2 else (0, 2, 3)
    return np.sum(post * grad, axis=axes)


# ---------------------------------------------------------------------------
# Taylor / straight-through

def taylor_diff(trace, gates):
    """``sum_i z_i * dC/d(gated z_i)`` per unit from one sampled backward pass.

    The backward pass already carries the N/B factor; for conv filters the
    sum also runs over spatial positions.
    """
    if trace.gate_grads is None:
        raise ValueError("trace has no gate gradients; run backward on it first")
    gated_post = [p for p, g in zip(trace.post, trace.gates) if g is not None]
    if len(gated_post) != len(gates):
        raise ValueError("trace and gate list disagree")
    values = [_unit_sums(z, d) for z, d in zip(gated_post, trace.gate_grads)]
    return _report(values, gates, "taylor")


# ---------------------------------------------------------------------------
# CONCRETE relaxation

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def concrete_logit(theta, u, t):
    return (np.log1p(-theta) - np.log(theta) + np.log(u) - np.log1p(-u)) / t


def concrete_xi(theta, u, t):
    """Relaxed gate ``1 - sigmoid(h)``; tends to ``u < theta`` as t -> 0."""
    return 1.0 - _sigmoid(concrete_logit(theta, u, t))


def concrete_dxi_dtheta(theta, u, t):
    """Derivative of :func:`concrete_xi` w.r.t. theta (positive: more theta, larger gate)."""
    s = _sigmoid(concrete_logit(theta, u, t))
    return s * (1.0 - s) / (t * theta * (1.0 - theta))


def concrete_grad(net, batch, targets, gates, rng, t=0.1, n_data=None, theta_bounds=(1e-5, 1.0 - 1e-5)):
    """Single-sample relaxed estimate of dC/dtheta for every unit.

    All gates are relaxed at once, one forward/backward pass is run, and
    the chain rule ``dC/dxi * dxi/dtheta`` gives the value per unit.
    """
    if not 0.0 < t < 1.0:
        raise ValueError(f"temperature must lie in (0, 1), got {t}")
    lo, hi = theta_bounds
    xi, dxi = [], []
    for g in gates:
        theta = np.clip(g.theta, lo, hi)
        u = rng.random(theta.shape)
        u = np.clip(u, 1e-300, 1.0 - 1e-16)
        x = np.where(g.alive, concrete_xi(theta, u, t), 0.0)
        xi.append(x)
        dxi.append(concrete_dxi_dtheta(theta, u, t))
    _, trace = forward(net, batch, xi)
    backward(net, trace, targets, n_data)
    gated_post = [p for p, g in zip(trace.post, trace.gates) if g is not None]
    values = [_unit_sums(z, d) * s for z, d, s in zip(gated_post, trace.gate_grads, dxi)]
    return _report(values, gates, "concrete")


# ---------------------------------------------------------------------------
# exact and sampled flips

def _alive_units(gates):
    return [(gi, j) for gi, g in enumerate(gates) for j in np.flatnonzero(g.alive)]


def _config_costs(net, batch, targets, gates, configs, n_data=None, chunk_rows=200_000):
    """Minibatch cost for each row of ``configs`` (K x M, over the alive units)."""
    batch = np.asarray(batch, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    units = _alive_units(gates)
    configs = np.asarray(configs, dtype=np.float64)
    configs = configs.reshape(configs.shape[0] if configs.ndim == 2 else -1, len(units))
    B = batch.shape[0]
    scale = 1.0 if n_data is None else n_data / B
    per = max(1, chunk_rows // B)
    out = np.empty(configs.shape[0])
    for start in range(0, configs.shape[0], per):
        block = configs[start:start + per]
        K = block.shape[0]
        xi = [np.zeros((K, g.theta.size)) for g in gates]
        for col, (gi, j) in enumerate(units):
            xi[gi][:, j] = block[:, col]
        xi = [np.repeat(x, B, axis=0) for x in xi]
        reps = np.concatenate([batch] * K, axis=0)
        outputs, _ = forward(net, reps, xi)
        losses, _ = net.loss.per_sample(outputs, np.concatenate([targets] * K, axis=0))
        out[start:start + K] = scale * losses.reshape(K, B).sum(axis=1)
    return out


def enumerate_configs(m):
    if m > MAX_ENUMERATED_UNITS:
        raise ValueError(f"{m} gated units is too many to enumerate (limit {MAX_ENUMERATED_UNITS})")
    return np.array(list(itertools.product((0.0, 1.0), repeat=m)), dtype=np.float64).reshape(2 ** m, m)


def config_weights(gates, configs):
    """Per-config, per-unit factors ``theta`` or ``1 - theta``."""
    theta = np.concatenate([g.theta[g.alive] for g in gates])
    return np.where(configs > 0.5, theta[None, :], 1.0 - theta[None, :])


def _split(flat, gates):
    values, pos = [], 0
    for g in gates:
        v = np.zeros(g.theta.size)
        n = int(g.alive.sum())
        v[g.alive] = flat[pos:pos + n]
        pos += n
        values.append(v)
    return values


def brute_force_diff(net, batch, targets, gates, n_data=None):
    """Exact C1 - C0 by enumerating every gate configuration of the alive units."""
    units = _alive_units(gates)
    m = len(units)
    configs = enumerate_configs(m)
    costs = _config_costs(net, batch, targets, gates, configs, n_data)
    factors = config_weights(gates, configs)
    diff = np.empty(m)
    for j in range(m):
        others = np.prod(np.delete(factors, j, axis=1), axis=1)
        on = configs[:, j] > 0.5
        diff[j] = np.sum(others[on] * costs[on]) - np.sum(others[~on] * costs[~on])
    return _report(_split(diff, gates), gates, "brute_force")


def expected_cost(net, batch, targets, gates, n_data=None):
    """Exact expected cost over all gate configurations."""
    configs = enumerate_configs(len(_alive_units(gates)))
    costs = _config_costs(net, batch, targets, gates, configs, n_data)
    return float(np.sum(np.prod(config_weights(gates, configs), axis=1) * costs))


def exact_expectation(gates, fn):
    """Expectation of ``fn(xi_list)`` (an array) over the gate distribution."""
    units = _alive_units(gates)
    configs = enumerate_configs(len(units))
    probs = np.prod(config_weights(gates, configs), axis=1)
    total = None
    for cfg, p in zip(configs, probs):
        if p == 0.0:
            continue
        xi = [np.zeros(g.theta.size) for g in gates]
        for col, (gi, j) in enumerate(units):
            xi[gi][j] = cfg[col]
        val = p * np.asarray(fn(xi), dtype=np.float64)
        total = val if total is None else total + val
    return total


def sampling_diff(net, batch, targets, gates, rng, n_data=None, xi=None, units=None):
    """Flip one gate at a time on a shared sample and difference the costs.

    ``xi`` is the shared realisation (drawn from ``rng`` when omitted);
    ``units`` restricts the flips to a subset of ``(layer, unit)`` pairs.
    """
    if xi is None:
        xi = sample_gates(gates, rng)
    alive = _alive_units(gates)
    base = np.concatenate([x[g.alive] for x, g in zip(xi, gates)])
    chosen = range(len(alive)) if units is None else [alive.index(u) for u in units]
    chosen = list(chosen)
    configs = [base]
    for col in chosen:
        c = base.copy()
        c[col] = 1.0 - c[col]
        configs.append(c)
    costs = _config_costs(net, batch, targets, gates, np.array(configs), n_data)
    diff = np.zeros(len(alive))
    for r, col in enumerate(chosen, start=1):
        on, off = (costs[0], costs[r]) if base[col] > 0.5 else (costs[r], costs[0])
        diff[col] = on - off
    return _report(_split(diff, gates), gates, "sampling")


def hybrid_diff(net, trace, batch, targets, gates, rng, k, n_data=None, xi=None):
    """Sampling estimates for the ``k`` alive units of largest weight energy, Taylor for the rest."""
    report = taylor_diff(trace, gates)
    if k <= 0:
        return report
    alive = _alive_units(gates)
    phis = []
    for gi, j in alive:
        li = net.gated_layers[gi]
        phis.append(unit_phi(net, li)[j])
    order = np.argsort(-np.asarray(phis), kind="stable")[:k]
    picked = [alive[i] for i in sorted(order)]
    if xi is None:
        xi = [g for g in trace.gates if g is not None]
    sampled = sampling_diff(net, batch, targets, gates, rng, n_data, xi=xi, units=picked)
    for gi, j in picked:
        report.values[gi][j] = sampled.values[gi][j]
        report.kinds[gi][j] = "sampling"
    return report
