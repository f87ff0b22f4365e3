"""Gated feed-forward networks with one Bernoulli gate per unit or filter.

A gated layer's outputs are multiplied by their gates before the next
weighted layer reads them; biases are never gated. Pooling and flattening
sit between weighted layers and carry no parameters.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    CategoricalCE,
    Identity,
    LeakyReLU,
    affine_backward,
    check_finite,
    conv2d_backward,
    conv2d_forward,
    pool_backward,
    pool_forward,
)


class StaleTraceError(RuntimeError):
    """The trace was produced before the network was last modified."""


@dataclass(eq=False)
class Dense:
    W: np.ndarray  # (out, in)
    b: np.ndarray
    gated: bool = True
    act: object = field(default_factory=LeakyReLU)

    @property
    def units(self):
        return self.W.shape[0]


@dataclass(eq=False)
class Conv:
    W: np.ndarray  # filter bank (F, C, k, k)
    b: np.ndarray
    gated: bool = True
    act: object = field(default_factory=LeakyReLU)

    @property
    def units(self):
        return self.W.shape[0]


@dataclass(eq=False)
class Pool:
    pass


@dataclass(eq=False)
class Flatten:
    pass


WEIGHTED = (Dense, Conv)


class Network:
    def __init__(self, layers, loss=None, input_shape=None):
        self.layers = list(layers)
        self.loss = loss if loss is not None else CategoricalCE()
        if input_shape is None:
            first = self.layers[0]
            input_shape = (first.W.shape[1],) if isinstance(first, Dense) else None
        self.input_shape = tuple(input_shape)
        self.version = 0
        self.shapes()  # validates the chain
        weighted = [layer for layer in self.layers if isinstance(layer, WEIGHTED)]
        if not weighted or weighted[-1].gated:
            raise ValueError("the output layer must be an ungated weighted layer")
        if not isinstance(self.layers[-1], WEIGHTED):
            raise ValueError("the network must end in a weighted layer")

    def touch(self):
        self.version += 1

    def shapes(self):
        """Output shape (without batch axis) of every layer."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if len(shape) != 1 or shape[0] != layer.W.shape[1]:
                    raise ValueError(f"layer {i}: dense layer expects ({layer.W.shape[1]},), got {shape}")
                shape = (layer.W.shape[0],)
            elif isinstance(layer, Conv):
                f, c, kh, kw = layer.W.shape
                if len(shape) != 3 or shape[0] != c:
                    raise ValueError(f"layer {i}: conv layer expects {c} channels, got {shape}")
                if kh > shape[1] or kw > shape[2]:
                    raise ValueError(f"layer {i}: kernel larger than input {shape}")
                shape = (f, shape[1] - kh + 1, shape[2] - kw + 1)
            elif isinstance(layer, Pool):
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ValueError(f"layer {i}: pooling needs even spatial dims, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            else:
                raise TypeError(f"unknown layer type {type(layer).__name__}")
            out.append(shape)
        return out

    @property
    def gated_layers(self):
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, WEIGHTED) and layer.gated]

    @property
    def weighted_layers(self):
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, WEIGHTED)]

    def named_params(self):
        params = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, WEIGHTED):
                params[f"{i}.W"] = layer.W
                params[f"{i}.b"] = layer.b
        return params

    def weight_count(self):
        return int(sum(self.layers[i].W.size for i in self.weighted_layers))

    def widths(self):
        return [self.layers[i].units for i in self.gated_layers]

    def copy(self):
        return copy.deepcopy(self)


def dense_net(sizes, rng, loss=None, slope=1e-3):
    """Glorot-normal MLP; every hidden layer is gated, the output layer is not."""
    layers = []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = k == len(sizes) - 2
        std = np.sqrt(2.0 / (n_in + n_out))
        layers.append(
            Dense(
                W=rng.normal(0.0, std, size=(n_out, n_in)),
                b=np.zeros(n_out),
                gated=not last,
                act=Identity() if last else LeakyReLU(slope),
            )
        )
    return Network(layers, loss=loss, input_shape=(sizes[0],))


def lenet5(rng, loss=None, slope=1e-3, in_shape=(1, 28, 28), widths=(6, 16, 120, 84), n_classes=10):
    """LeNet5 with valid 5x5 convolutions and 2x2 max pooling; all hidden structures gated."""
    c1, c2, d1, d2 = widths

    def glorot(shape, fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)

    act = LeakyReLU(slope)
    h = (in_shape[1] - 4) // 2
    h = (h - 4) // 2
    flat = c2 * h * h
    layers = [
        Conv(glorot((c1, in_shape[0], 5, 5), in_shape[0] * 25, c1 * 25), np.zeros(c1), True, act),
        Pool(),
        Conv(glorot((c2, c1, 5, 5), c1 * 25, c2 * 25), np.zeros(c2), True, act),
        Pool(),
        Flatten(),
        Dense(glorot((d1, flat), flat, d1), np.zeros(d1), True, act),
        Dense(glorot((d2, d1), d1, d2), np.zeros(d2), True, act),
        Dense(glorot((n_classes, d2), d2, n_classes), np.zeros(n_classes), False, Identity()),
    ]
    return Network(layers, loss=loss, input_shape=in_shape)


# ---------------------------------------------------------------------------
# gates

@dataclass(eq=False)
class GateState:
    """Variational gate parameters of one gated layer."""

    theta: np.ndarray
    pi_star: np.ndarray
    last_xi: np.ndarray
    theta_max: np.ndarray
    alive: np.ndarray
    ids: np.ndarray  # unit index in the initial architecture

    @classmethod
    def fresh(cls, units, theta0=0.5):
        theta = np.full(units, float(theta0))
        return cls(
            theta=theta,
            pi_star=theta.copy(),
            last_xi=np.ones(units),
            theta_max=theta.copy(),
            alive=np.ones(units, dtype=bool),
            ids=np.arange(units),
        )

    def select(self, keep):
        return GateState(*(getattr(self, f)[keep].copy() for f in
                           ("theta", "pi_star", "last_xi", "theta_max", "alive", "ids")))


def init_gates(net, theta0=0.5):
    return [GateState.fresh(net.layers[i].units, theta0) for i in net.gated_layers]


def sample_gates(gates, rng):
    """One Bernoulli realisation per gate, shared by the whole minibatch."""
    xi = []
    for g in gates:
        if np.any((g.theta < 0) | (g.theta > 1)):
            raise ValueError("gate probabilities must lie in [0, 1]")
        draw = (rng.random(g.theta.shape) < g.theta).astype(np.float64)
        draw[~g.alive] = 0.0
        g.last_xi = draw
        xi.append(draw)
    return xi


def fixed_gates(gates, value=None):
    """Deterministic gates: alive units get ``value`` (or their theta), dead ones 0."""
    out = []
    for g in gates:
        v = g.theta.copy() if value is None else np.full(g.theta.shape, float(value))
        v[~g.alive] = 0.0
        out.append(v)
    return out


# ---------------------------------------------------------------------------
# forward / backward

@dataclass(eq=False)
class ForwardTrace:
    inputs: list      # input of every layer (already gated upstream)
    pre: list         # pre-activations zeta, None for parameter-free layers
    post: list        # activations before gating (z)
    gates: list       # gate array applied after each layer, or None
    pool: list        # argmax traces
    outputs: np.ndarray
    version: int
    batch: int
    gate_grads: list = None   # filled by backward: dloss/d(gated output) per gated layer
    loss: float = None


def _apply_gate(z, xi):
    xi = np.asarray(xi, dtype=np.float64)
    if z.ndim == 2:
        return z * xi
    if xi.ndim == 1:
        return z * xi[None, :, None, None]
    return z * xi[:, :, None, None]


def forward(net, batch, xi=None, check=True):
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"batch of shape {x.shape[1:]} does not match network input {net.input_shape}")
    gated = net.gated_layers
    if xi is None:
        xi = [np.ones(net.layers[i].units) for i in gated]
    if len(xi) != len(gated):
        raise ValueError(f"expected {len(gated)} gate arrays, got {len(xi)}")
    gate_of = dict(zip(gated, xi))
    inputs, pre, post, gates, pools = [], [], [], [], []
    h = x
    for i, layer in enumerate(net.layers):
        inputs.append(h)
        zeta = z = g = tr = None
        if isinstance(layer, Dense):
            zeta = h @ layer.W.T + layer.b
            z = layer.act(zeta)
        elif isinstance(layer, Conv):
            zeta = conv2d_forward(h, layer.W, layer.b)
            z = layer.act(zeta)
        elif isinstance(layer, Pool):
            z, tr = pool_forward(h)
        else:
            z = h.reshape(h.shape[0], -1)
        out = z
        if i in gate_of:
            g = gate_of[i]
            out = _apply_gate(z, g)
        pre.append(zeta)
        post.append(z)
        gates.append(g)
        pools.append(tr)
        h = out
    if check:
        check_finite(h, "network outputs")
    trace = ForwardTrace(inputs, pre, post, gates, pools, h, net.version, x.shape[0])
    return h, trace


@dataclass(eq=False)
class Gradients:
    weights: list     # (dW, db) per layer, None for parameter-free layers
    deltas: list      # dC/dzeta per layer (scaled)
    loss: float       # summed batch loss (unscaled)
    losses: np.ndarray


def backward(net, trace, targets, n_data=None):
    """Backpropagate the minibatch cost ``(N/B) * sum_i loss_i``.

    ``n_data`` is the data-set size N; by default the batch is the data set.
    Along the way the gradient w.r.t. each gated output (before the gate
    multiplies it) is stored in ``trace.gate_grads``.
    """
    if trace.version != net.version:
        raise StaleTraceError("trace does not belong to the current network state")
    losses, dout = net.loss.per_sample(trace.outputs, np.asarray(targets, dtype=np.float64))
    scale = 1.0 if n_data is None else n_data / trace.batch
    grad = dout * scale
    n = len(net.layers)
    weights, deltas = [None] * n, [None] * n
    gate_grads = {}
    for i in range(n - 1, -1, -1):
        layer = net.layers[i]
        if trace.gates[i] is not None:
            gate_grads[i] = grad
            grad = _apply_gate(grad, trace.gates[i])
        if isinstance(layer, Dense):
            delta = grad * layer.act.grad(trace.pre[i])
            dW, db, grad = affine_backward(layer.W, trace.inputs[i], delta)
            weights[i], deltas[i] = (dW, db), delta
        elif isinstance(layer, Conv):
            delta = grad * layer.act.grad(trace.pre[i])
            dW, db, grad = conv2d_backward(trace.inputs[i], layer.W, delta)
            weights[i], deltas[i] = (dW, db), delta
        elif isinstance(layer, Pool):
            grad = pool_backward(grad, trace.pool[i])
        else:
            grad = grad.reshape(trace.inputs[i].shape)
    trace.gate_grads = [gate_grads[i] for i in net.gated_layers]
    trace.loss = float(losses.sum())
    return Gradients(weights, deltas, trace.loss, losses)


def batch_losses(net, batch, targets, xi=None):
    outputs, _ = forward(net, batch, xi)
    losses, _ = net.loss.per_sample(outputs, np.asarray(targets, dtype=np.float64))
    return losses


# ---------------------------------------------------------------------------
# unit views

def _downstream(net, li):
    """Next weighted layer after gated layer ``li`` and the spatial block size
    a flatten in between maps each channel to (1 when there is none)."""
    shapes = net.shapes()
    block = 1
    for k in range(li + 1, len(net.layers)):
        layer = net.layers[k]
        if isinstance(layer, WEIGHTED):
            return k, block
        if isinstance(layer, Flatten):
            block = int(np.prod(shapes[k - 1][1:])) if len(shapes[k - 1]) == 3 else 1
    raise ValueError(f"gated layer {li} has no weighted layer downstream")


def fanin_matrix(net, li):
    layer = net.layers[li]
    return layer.W.reshape(layer.units, -1)


def fanout_matrix(net, li):
    k, block = _downstream(net, li)
    units = net.layers[li].units
    Wk = net.layers[k].W
    if isinstance(net.layers[k], Conv):
        return Wk.transpose(1, 0, 2, 3).reshape(units, -1)
    return Wk.reshape(Wk.shape[0], units, block).transpose(1, 0, 2).reshape(units, -1)


def unit_sqnorms(net, li):
    """Per-unit ``||w_b||^2`` and ``||w_f||^2`` of gated layer ``li``."""
    fi = fanin_matrix(net, li)
    fo = fanout_matrix(net, li)
    return np.einsum("ij,ij->i", fi, fi), np.einsum("ij,ij->i", fo, fo)


def scale_units(net, li, factors):
    """Multiply fan-in and fan-out weights of every unit by ``factors``."""
    factors = np.asarray(factors, dtype=np.float64)
    layer = net.layers[li]
    layer.W *= factors.reshape((-1,) + (1,) * (layer.W.ndim - 1))
    k, block = _downstream(net, li)
    Wk = net.layers[k].W
    if isinstance(net.layers[k], Conv):
        Wk *= factors[None, :, None, None]
    else:
        Wk[...] = (Wk.reshape(Wk.shape[0], layer.units, block) * factors[None, :, None]).reshape(Wk.shape)
    net.touch()


@dataclass
class UnitView:
    layer: int        # index into net.layers
    unit: int
    w_b: np.ndarray
    w_f: np.ndarray

    @property
    def phi(self):
        return 0.5 * (float(self.w_f @ self.w_f) + float(self.w_b @ self.w_b))


def unit_views(net):
    views = []
    for li in net.gated_layers:
        fi, fo = fanin_matrix(net, li), fanout_matrix(net, li)
        for j in range(net.layers[li].units):
            views.append(UnitView(li, j, fi[j].copy(), fo[j].copy()))
    return views


def unit_phi(net, li):
    b, f = unit_sqnorms(net, li)
    return 0.5 * (b + f)


# ---------------------------------------------------------------------------
# pruning and compaction

def prune_unit(net, gates, gate_index, unit):
    """Zero the unit's fan-in and fan-out and mark it dead.

    Returns True if the unit was alive before the call.
    """
    g = gates[gate_index]
    if not g.alive[unit]:
        return False
    li = net.gated_layers[gate_index]
    factors = np.ones(net.layers[li].units)
    factors[unit] = 0.0
    scale_units(net, li, factors)
    g.alive[unit] = False
    g.last_xi[unit] = 0.0
    return True


def compaction_plan(net, gate_index, keep):
    """Index selections that remove the dropped units of one gated layer.

    Returns a list of ``(param_name, axis, indices)`` usable on the network
    parameters and on any optimiser state keyed the same way.
    """
    li = net.gated_layers[gate_index]
    keep = np.asarray(keep)
    k, block = _downstream(net, li)
    plan = [(f"{li}.W", 0, keep), (f"{li}.b", 0, keep)]
    if isinstance(net.layers[k], Conv) or block == 1:
        plan.append((f"{k}.W", 1, keep))
    else:
        cols = (keep[:, None] * block + np.arange(block)[None, :]).ravel()
        plan.append((f"{k}.W", 1, cols))
    return plan


def apply_plan(arrays, plan):
    for name, axis, idx in plan:
        if name in arrays:
            arrays[name] = np.take(arrays[name], idx, axis=axis)
    return arrays


def compact(net, gates):
    """Physically remove dead units. Returns the plans applied (one list per gated layer)."""
    plans = []
    for gi in range(len(gates)):
        keep = np.flatnonzero(gates[gi].alive)
        if keep.size == gates[gi].alive.size:
            plans.append([])
            continue
        plan = compaction_plan(net, gi, keep)
        params = apply_plan(net.named_params(), plan)
        for name, arr in params.items():
            idx, attr = name.split(".")
            setattr(net.layers[int(idx)], attr, np.ascontiguousarray(arr))
        gates[gi] = gates[gi].select(keep)
        plans.append(plan)
    net.touch()
    net.shapes()
    return plans
