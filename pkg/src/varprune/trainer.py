"""Joint training of weights and gate probabilities with on-line unit pruning.

One iteration samples a minibatch with replacement and one gate
realisation, back-propagates, estimates every unit's cost difference,
takes an optimiser step on weights and gate probabilities together, then
projects unit weights, clips the probabilities and prunes. Dead units are
physically removed at epoch boundaries.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import estimators as est
from .hyperprior import Beta, ClipBounds, Flattening, reg_term
from .network import (
    apply_plan,
    backward,
    compact,
    fixed_gates,
    forward,
    init_gates,
    prune_unit,
    sample_gates,
    scale_units,
    unit_sqnorms,
)
from .tensor import CategoricalCE, NumericError


class ConfigError(ValueError):
    """Invalid training configuration."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    lam: float = 20.0
    tau: float = 1.0
    prior: str = "flattening"
    log_gamma: float = -25.0
    alpha: float = 0.9
    beta: float = 1e10
    eps1: float = None          # None: derived from theta1
    eps2: float = 1e-4
    theta1: float = 1e-4
    theta_l: float = None       # None: min(1e-5, eps1 / 10)
    theta_h: float = 1.0 - 1e-5
    theta0: float = 0.5
    phi_max: float = 1e6
    optimizer: str = "adam"
    lr: float = 1e-3
    rm_tau: float = math.inf    # Robbins-Monro decay horizon for SGD
    epochs: int = 50
    ft_epochs: int = 10
    ft_lr: float = 1e-4
    estimator: str = "taylor"
    concrete_t: float = 0.1
    hybrid_k: int = 0
    prune_rule: str = "tol"     # "tol": theta < theta_tol; "drop": fall from running max
    theta_tol: float = 1e-3
    theta_per: float = 0.1
    n0: int = None              # None: three epochs of iterations
    final_tol: float = 1e-3
    input_threshold: float = None
    grad_tol: float = 1e-6
    seed: int = 0

    def hyper_prior(self):
        if self.prior == "flattening":
            return Flattening.from_log(self.log_gamma)
        if self.prior == "beta":
            return Beta(self.alpha, self.beta)
        raise ConfigError(f"unknown prior {self.prior!r}")

    def clip_bounds(self):
        hp = self.hyper_prior()
        if self.eps1 is not None:
            return ClipBounds(self.eps1, self.eps2)
        return ClipBounds.from_theta1(hp, self.theta1, self.eps2)

    def theta_range(self):
        cb = self.clip_bounds()
        lo = self.theta_l if self.theta_l is not None else min(1e-5, cb.eps1 / 10.0)
        return lo, self.theta_h

    def estimator_kind(self):
        return est.estimator_from_name(self.estimator, self.concrete_t, self.hybrid_k)

    def validate(self, n_data=None):
        try:
            hp = self.hyper_prior()
            cb = self.clip_bounds()
            self.estimator_kind()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        lo, hi = self.theta_range()
        checks = [
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (n_data is None or self.batch_size <= n_data, "batch_size exceeds the data set size"),
            (self.lam > 0, "lam must be positive"),
            (self.tau > 0, "tau must be positive"),
            (self.phi_max > 0, "phi_max must be positive"),
            (0 < lo < cb.eps1, f"theta_l must lie in (0, eps1={cb.eps1:g})"),
            (1.0 - cb.eps2 < hi < 1.0, f"theta_h must lie in (1 - eps2, 1)"),
            (0 <= self.theta0 <= 1, "theta0 must lie in [0, 1]"),
            (self.optimizer in ("adam", "sgd"), "optimizer must be 'adam' or 'sgd'"),
            (self.lr > 0 and self.ft_lr > 0, "learning rates must be positive"),
            (self.rm_tau > 0, "rm_tau must be positive"),
            (0 < self.concrete_t < 1, "concrete_t must lie in (0, 1)"),
            (self.hybrid_k >= 0, "hybrid_k must be >= 0"),
            (self.epochs >= 0 and self.ft_epochs >= 0, "epoch counts must be >= 0"),
            (self.prune_rule in ("tol", "drop"), "prune_rule must be 'tol' or 'drop'"),
            (0 < self.theta_per < 1, "theta_per must lie in (0, 1)"),
            (self.theta_tol > 0, "theta_tol must be positive"),
            (self.input_threshold is None or self.input_threshold >= 0, "input_threshold must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return hp, cb

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# optimisers keyed by parameter name

class SGD:
    """Plain gradient steps with ``a(n) = lr / (1 + n / decay)``."""

    kind = "sgd"

    def __init__(self, lr, decay=math.inf):
        self.lr, self.decay, self.t = float(lr), float(decay), 0

    def rate(self, n=None):
        n = self.t if n is None else n
        return self.lr / (1.0 + n / self.decay)

    def step(self, params, grads):
        a = self.rate()
        for name, g in grads.items():
            params[name] -= a * g
        self.t += 1

    def compact(self, plan):
        pass

    def select(self, name, keep):
        pass

    def state(self):
        return {"t": self.t}, {}

    def load(self, scalars, arrays):
        self.t = int(scalars["t"])


class Adam:
    kind = "adam"

    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = float(lr), b1, b2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        # bias corrections folded into the step size and epsilon
        rate = self.lr * math.sqrt(c2) / c1
        eps = self.eps * math.sqrt(c2)
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            buf = np.multiply(g, 1.0 - self.b1)
            m *= self.b1
            m += buf
            np.multiply(buf, g, out=buf)
            buf *= (1.0 - self.b2) / (1.0 - self.b1)
            v *= self.b2
            v += buf
            np.sqrt(v, out=buf)
            buf += eps
            np.divide(m, buf, out=buf)
            buf *= rate
            params[name] -= buf

    def compact(self, plan):
        apply_plan(self.m, plan)
        apply_plan(self.v, plan)

    def select(self, name, keep):
        for store in (self.m, self.v):
            if name in store:
                store[name] = store[name][keep].copy()

    def state(self):
        arrays = {f"m/{k}": v for k, v in self.m.items()}
        arrays.update({f"v/{k}": v for k, v in self.v.items()})
        return {"t": self.t, "lr": self.lr}, arrays

    def load(self, scalars, arrays):
        self.t = int(scalars["t"])
        self.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v/")}


def make_optimizer(kind, lr, decay=math.inf):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr, decay)
    raise ConfigError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# state

@dataclass
class MetricsRow:
    phase: str
    epoch: int
    iteration: int
    train_loss: float
    test_accuracy: float
    test_loss: float
    alive: list
    pruning_ratio: float
    theta_mean: list
    theta_min: list
    theta_max: list

    def flat(self):
        out = {k: getattr(self, k) for k in
               ("phase", "epoch", "iteration", "train_loss", "test_accuracy", "test_loss", "pruning_ratio")}
        for name in ("alive", "theta_mean", "theta_min", "theta_max"):
            for i, v in enumerate(getattr(self, name)):
                out[f"{name}_{i}"] = v
        return out


@dataclass(eq=False)
class TrainState:
    net: object
    gates: list
    config: TrainConfig
    rng: np.random.Generator
    opt: object
    n: int = 0
    epoch: int = 0
    phase: str = "train"
    initial_weights: int = 0
    initial_widths: list = field(default_factory=list)
    history: list = field(default_factory=list)
    theta_history: list = field(default_factory=list)   # per epoch: list of per-layer arrays over initial units
    last_theta: list = field(default_factory=list)      # per layer, over initial units
    pruned: int = 0
    converged: bool = False
    iters_per_epoch: int = 0
    ft_start: int = 0


def init_state(net, config, rng=None):
    config.validate()
    gates = init_gates(net, config.theta0)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    opt = make_optimizer(config.optimizer, config.lr, config.rm_tau)
    widths = net.widths()
    return TrainState(
        net=net, gates=gates, config=config, rng=rng, opt=opt,
        initial_weights=net.weight_count(), initial_widths=list(widths),
        last_theta=[np.full(w, config.theta0) for w in widths],
    )


def regularized_gradients(net, grads, lam):
    """Data gradients plus ``lam * W`` (biases included), keyed by parameter name."""
    out = {}
    for i, wb in enumerate(grads.weights):
        if wb is None:
            continue
        layer = net.layers[i]
        out[f"{i}.W"] = wb[0] + lam * layer.W
        out[f"{i}.b"] = wb[1] + lam * layer.b
    return out


def gate_gradients(state, report):
    """``C1 - C0`` estimate plus the hyper-prior log term; zero for dead units."""
    cfg = state.config
    hp, cb = cfg.hyper_prior(), cfg.clip_bounds()
    lo, hi = cfg.theta_range()
    out = []
    for g, v in zip(state.gates, report.values):
        grad = np.zeros_like(g.theta)
        if g.alive.any():
            # the log term is infinite at 0 and 1; evaluate it on the clipped range
            grad[g.alive] = v[g.alive] + reg_term(hp, cb, np.clip(g.theta[g.alive], lo, hi))
        out.append(grad)
    return out


def _params(state):
    params = state.net.named_params()
    for gi, g in enumerate(state.gates):
        params[f"theta.{gi}"] = g.theta
    return params


def project_units(net, phi_max):
    """Rescale units so that ``||w_b||^2 + ||w_f||^2 <= 2 phi_max``."""
    scaled = 0
    for li in net.gated_layers:
        b, f = unit_sqnorms(net, li)
        total = b + f
        over = total > 2.0 * phi_max
        if over.any():
            factors = np.ones_like(total)
            factors[over] = np.sqrt(2.0 * phi_max / total[over])
            scale_units(net, li, factors)
            scaled += int(over.sum())
    return scaled


def _estimate(state, trace, X, Y, n_data, xi):
    kind = state.config.estimator_kind()
    net, gates, rng = state.net, state.gates, state.rng
    if isinstance(kind, est.Taylor):
        return est.taylor_diff(trace, gates)
    if isinstance(kind, est.Concrete):
        return est.concrete_grad(net, X, Y, gates, rng, kind.t, n_data, state.config.theta_range())
    if isinstance(kind, est.Sampling):
        return est.sampling_diff(net, X, Y, gates, rng, n_data, xi=xi)
    if isinstance(kind, est.Hybrid):
        return est.hybrid_diff(net, trace, X, Y, gates, rng, kind.k, n_data, xi=xi)
    return est.brute_force_diff(net, X, Y, gates, n_data)


def train_step(state, X, Y, n_data=None):
    """One iteration on the minibatch ``(X, Y)``; returns the summed minibatch loss."""
    cfg = state.config
    net, gates = state.net, state.gates
    n_data = X.shape[0] if n_data is None else n_data
    xi = sample_gates(gates, state.rng)
    _, trace = forward(net, X, xi)
    grads = backward(net, trace, Y, n_data)
    if not math.isfinite(grads.loss):
        raise NumericError(f"non-finite loss at iteration {state.n}")
    wgrads = regularized_gradients(net, grads, cfg.lam)
    report = _estimate(state, trace, X, Y, n_data, xi)
    tgrads = gate_gradients(state, report)
    all_grads = dict(wgrads)
    for gi, g in enumerate(tgrads):
        all_grads[f"theta.{gi}"] = g
    sq = sum(float(np.vdot(g, g)) for g in all_grads.values())
    if not math.isfinite(sq):
        raise NumericError(f"non-finite gradient at iteration {state.n}")

    frozen = [g.theta[~g.alive].copy() for g in gates]
    state.opt.step(_params(state), all_grads)
    for li, g, keep in zip(net.gated_layers, gates, frozen):
        if not g.alive.all():
            g.theta[~g.alive] = keep
            scale_units(net, li, g.alive.astype(np.float64))
    net.touch()
    project_units(net, cfg.phi_max)
    lo, hi = cfg.theta_range()
    for g in gates:
        np.clip(g.theta, lo, hi, out=g.theta, where=g.alive)
        g.theta_max = np.maximum(g.theta_max, g.theta)
    state.n += 1
    prune_scan(state, state.n)
    state.converged = math.sqrt(sq) < cfg.grad_tol
    return grads.loss


def prune_scan(state, n):
    """Prune every alive unit meeting the configured condition; returns ``(layer, initial id)`` pairs."""
    cfg = state.config
    n0 = cfg.n0 if cfg.n0 is not None else 3 * max(1, state.iters_per_epoch)
    pruned = []
    for gi, g in enumerate(state.gates):
        if cfg.prune_rule == "tol":
            hit = g.theta < cfg.theta_tol
        else:
            hit = (g.theta < g.theta_max * (1.0 - cfg.theta_per)) & (n > n0)
        for j in np.flatnonzero(hit & g.alive):
            if prune_unit(state.net, state.gates, gi, j):
                state.pruned += 1
                pruned.append((gi, int(g.ids[j])))
    return pruned


def _record_theta(state):
    for gi, g in enumerate(state.gates):
        state.last_theta[gi][g.ids] = g.theta
    state.theta_history.append([t.copy() for t in state.last_theta])


def compact_state(state):
    plans = compact(state.net, state.gates)
    for gi, plan in enumerate(plans):
        if plan:
            state.opt.compact(plan)
            # gates were already reduced; keep the optimiser's theta moments in step
            keep = plan[0][2]
            state.opt.select(f"theta.{gi}", keep)
    return plans


def evaluate(net, X, Y, gates=None, chunk=2048):
    """Top-1 accuracy (classification) and mean per-sample loss.

    With ``gates`` the gates are fixed at their probabilities.
    """
    xi = fixed_gates(gates) if gates is not None else None
    correct, total_loss = 0, 0.0
    for start in range(0, X.shape[0], chunk):
        xb, yb = X[start:start + chunk], Y[start:start + chunk]
        out, _ = forward(net, xb, xi)
        losses, _ = net.loss.per_sample(out, yb)
        total_loss += float(losses.sum())
        if isinstance(net.loss, CategoricalCE):
            correct += int(np.sum(out.argmax(axis=1) == yb.argmax(axis=1)))
    n = X.shape[0]
    acc = correct / n if isinstance(net.loss, CategoricalCE) else float("nan")
    return acc, total_loss / n


def count_small_inputs(net, threshold):
    if threshold is None:
        return 0
    first = net.layers[net.weighted_layers[0]].W
    return int(np.sum(np.abs(first) < threshold))


def pruning_ratio(initial_weights, net, input_threshold=None):
    """Percentage of the initial weight count no longer present (biases excluded)."""
    if hasattr(initial_weights, "weight_count"):
        initial_weights = initial_weights.weight_count()
    remaining = net.weight_count() - count_small_inputs(net, input_threshold)
    return 100.0 * (initial_weights - remaining) / initial_weights


def _metrics(state, test, train_loss, input_threshold=None):
    net, gates = state.net, state.gates
    if test is not None:
        acc, tl = evaluate(net, test.inputs, test.targets, gates if state.phase == "train" else None)
    else:
        acc, tl = float("nan"), float("nan")
    stats = []
    for g in gates:
        t = g.theta[g.alive]
        stats.append((float(t.mean()), float(t.min()), float(t.max())) if t.size else (float("nan"),) * 3)
    return MetricsRow(
        phase=state.phase, epoch=state.epoch, iteration=state.n, train_loss=train_loss,
        test_accuracy=acc, test_loss=tl, alive=[int(g.alive.sum()) for g in gates],
        pruning_ratio=pruning_ratio(state.initial_weights, net, input_threshold),
        theta_mean=[s[0] for s in stats], theta_min=[s[1] for s in stats], theta_max=[s[2] for s in stats],
    )


def run_epoch(state, train, test=None):
    """``ceil(N/B)`` iterations with minibatches drawn with replacement, then compaction and metrics."""
    cfg = state.config
    N = train.inputs.shape[0]
    B = cfg.batch_size
    iters = -(-N // B)
    state.iters_per_epoch = iters
    total, count = 0.0, 0
    for _ in range(iters):
        idx = state.rng.integers(0, N, size=B)
        loss = train_step(state, train.inputs[idx], train.targets[idx], N)
        total += loss
        count += B
        if state.converged:
            break
    compact_state(state)
    state.epoch += 1
    _record_theta(state)
    row = _metrics(state, test, total / count)
    state.history.append(row)
    return row


def train(state, train_set, test=None, epochs=None, on_epoch=None):
    epochs = state.config.epochs if epochs is None else epochs
    target = state.epoch + epochs
    while state.epoch < target and not state.converged:
        row = run_epoch(state, train_set, test)
        if on_epoch is not None:
            on_epoch(state, row)
    return state


def finalize_gates(state):
    """Units with theta below the final tolerance are removed, all others are kept on for good."""
    tol = state.config.final_tol
    for gi, g in enumerate(state.gates):
        for j in np.flatnonzero(g.alive & (g.theta < tol)):
            if prune_unit(state.net, state.gates, gi, j):
                state.pruned += 1
    compact_state(state)
    state.phase = "finalized"
    return state


def final_gates(state):
    return [np.ones(g.theta.size) for g in state.gates]


def fine_tune_step(state, X, Y, n_data):
    xi = final_gates(state)
    _, trace = forward(state.net, X, xi)
    grads = backward(state.net, trace, Y, n_data)
    if not math.isfinite(grads.loss):
        raise NumericError(f"non-finite loss at iteration {state.n}")
    state.opt.step(state.net.named_params(), regularized_gradients(state.net, grads, state.config.lam))
    state.net.touch()
    state.n += 1
    return grads.loss


def fine_tune(state, train_set, test=None, epochs=None, lr=None, on_epoch=None, threshold_inputs=True):
    """Regularised training of the deterministic network; gate parameters are not touched.

    With ``threshold_inputs`` the configured input-layer magnitude threshold
    is applied after the last epoch.
    """
    cfg = state.config
    epochs = cfg.ft_epochs if epochs is None else epochs
    lr = cfg.ft_lr if lr is None else lr
    if state.phase != "fine_tune":
        state.phase = "fine_tune"
        state.opt = make_optimizer(cfg.optimizer, lr, cfg.rm_tau)
        state.ft_start = state.epoch
    target = state.ft_start + epochs
    N = train_set.inputs.shape[0]
    B = cfg.batch_size
    iters = -(-N // B)
    while state.epoch < target:
        total = 0.0
        for _ in range(iters):
            idx = state.rng.integers(0, N, size=B)
            total += fine_tune_step(state, train_set.inputs[idx], train_set.targets[idx], N)
        state.epoch += 1
        thr = None
        if state.epoch == target and threshold_inputs and cfg.input_threshold is not None:
            thr = cfg.input_threshold
            apply_input_threshold(state.net, thr)
        _record_theta(state)
        row = _metrics(state, test, total / (iters * B), thr)
        state.history.append(row)
        if on_epoch is not None:
            on_epoch(state, row)
    return state


def apply_input_threshold(net, threshold):
    first = net.layers[net.weighted_layers[0]]
    first.W[np.abs(first.W) < threshold] = 0.0
    net.touch()


def run(net, config, train_set, test=None, on_epoch=None, on_phase=None):
    """Main training, finalisation and fine-tuning; returns the final state."""
    state = init_state(net, config)
    config.validate(train_set.inputs.shape[0])
    train(state, train_set, test, on_epoch=on_epoch)
    if on_phase:
        on_phase(state, "train")
    finalize_gates(state)
    if on_phase:
        on_phase(state, "finalized")
    fine_tune(state, train_set, test, on_epoch=on_epoch)
    if on_phase:
        on_phase(state, "fine_tune")
    return state


def summary(state):
    last = state.history[-1] if state.history else None
    return {
        "widths": state.net.widths(),
        "initial_widths": state.initial_widths,
        "pruning_ratio": last.pruning_ratio if last else 0.0,
        "test_accuracy": last.test_accuracy if last else float("nan"),
        "iterations": state.n,
        "epochs": state.epoch,
    }


def config_dict(cfg):
    return asdict(cfg)


def train_baseline(net, config, train_set, test=None):
    """The same schedule without gates or pruning: main epochs at ``lr`` then fine-tuning epochs at ``ft_lr``."""
    state = init_state(net, config)
    state.phase = "finalized"
    for g in state.gates:
        g.theta[:] = 1.0
    fine_tune(state, train_set, test, epochs=config.epochs, lr=config.lr, threshold_inputs=False)
    state.phase = "finalized"
    fine_tune(state, train_set, test, epochs=config.ft_epochs, lr=config.ft_lr)
    return state
