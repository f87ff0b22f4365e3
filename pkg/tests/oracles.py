"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np

from varprune.estimators import brute_force_diff, exact_expectation, taylor_diff
from varprune.network import Conv, Dense, Flatten, Network, Pool, backward, dense_net, forward, init_gates
from varprune.tensor import CategoricalCE, GaussianNLL, Identity, LeakyReLU


def cost(net, X, Y, xi, n_data=None):
    out, _ = forward(net, X, xi)
    losses, _ = net.loss.per_sample(out, Y)
    scale = 1.0 if n_data is None else n_data / X.shape[0]
    return scale * float(losses.sum())


def numeric_grads(net, X, Y, xi, n_data=None, h=1e-6):
    """Central differences of the minibatch cost w.r.t. every weight and bias."""
    out = {}
    for name, arr in net.named_params().items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = cost(net, X, Y, xi, n_data)
            flat[k] = old - h
            down = cost(net, X, Y, xi, n_data)
            flat[k] = old
            gflat[k] = (up - down) / (2 * h)
        out[name] = g
    return out


def analytic_grads(net, X, Y, xi, n_data=None):
    _, trace = forward(net, X, xi)
    grads = backward(net, trace, Y, n_data)
    out = {}
    for i, wb in enumerate(grads.weights):
        if wb is not None:
            out[f"{i}.W"], out[f"{i}.b"] = wb
    return out


def relative_error(a, b):
    """``||a - b|| / (||a|| + ||b||)`` over all parameters stacked into one vector."""
    a = np.concatenate([a[k].ravel() for k in sorted(a)])
    b = np.concatenate([b[k].ravel() for k in sorted(b)])
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def random_problem(rng):
    """A small random gated net (dense or conv), a batch and a frozen gate draw."""
    B = int(rng.integers(1, 6))
    if rng.random() < 0.25:
        C, F = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        out = int(rng.integers(2, 4))
        layers = [
            Conv(rng.normal(0, 1.0 / np.sqrt(9 * C), (F, C, 3, 3)), rng.normal(0, 0.1, F), True, LeakyReLU(0.1)),
            Pool(),
            Flatten(),
            Dense(rng.normal(0, 1.0 / np.sqrt(4 * F), (out, F * 4)), rng.normal(0, 0.1, out), False, Identity()),
        ]
        net = Network(layers, CategoricalCE(), (C, 6, 6))
        X = rng.normal(size=(B, C, 6, 6))
        Y = np.eye(out)[rng.integers(0, out, B)]
    else:
        sizes = [int(rng.integers(1, 6))] + [int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 3)))]
        sizes.append(int(rng.integers(1, 4)))
        layers = []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = k == len(sizes) - 2
            # fan-in scaled weights keep logits O(1); a saturated softmax leaves a cost near
            # 1e-8 whose differences drown in rounding and test the oracle, not backward
            layers.append(Dense(rng.normal(0, 1.0 / np.sqrt(a), (b, a)), rng.normal(0, 0.1, b), not last,
                                Identity() if last else LeakyReLU(float(rng.uniform(0.01, 0.5)))))
        if rng.random() < 0.5:
            loss = GaussianNLL(float(rng.uniform(0.5, 2.0)))
            Y = rng.normal(size=(B, sizes[-1]))
        else:
            loss = CategoricalCE()
            Y = np.eye(sizes[-1])[rng.integers(0, sizes[-1], B)]
        net = Network(layers, loss, (sizes[0],))
        X = rng.normal(size=(B, sizes[0]))
    xi = [(rng.random(net.layers[i].units) < 0.7).astype(float) for i in net.gated_layers]
    n_data = int(B * rng.integers(1, 4))
    return net, X, Y, xi, n_data


def gradient_check(rng):
    net, X, Y, xi, n_data = random_problem(rng)
    return relative_error(analytic_grads(net, X, Y, xi, n_data), numeric_grads(net, X, Y, xi, n_data))


def tiny(seed, sizes=(2, 3, 2), n=8, theta=None):
    """A small enumerable gated net with random biases, gate probabilities and a batch."""
    rng = np.random.default_rng(seed)
    net = dense_net(list(sizes), rng, slope=0.1)
    for i in net.weighted_layers:
        net.layers[i].b[:] = rng.normal(0, 0.3, net.layers[i].b.shape)
    gates = init_gates(net)
    for g in gates:
        g.theta[:] = rng.uniform(0.2, 0.8, g.theta.size) if theta is None else theta
    X = rng.normal(size=(n, sizes[0]))
    Y = np.eye(sizes[-1])[rng.integers(0, sizes[-1], n)]
    return net, gates, X, Y


def taylor_at(net, X, Y, xi, gates, n_data=None):
    _, tr = forward(net, X, xi)
    backward(net, tr, Y, n_data)
    return taylor_diff(tr, gates)


def taylor_probe_errors(seed, scales):
    """|E[taylor] - brute force| of a probed unit whose fan-out is rescaled.

    The probed gate is held on (theta = 1) so every draw expands around
    the on state; at theta = 1/2 the on and off expansions average into a
    trapezoid rule and the second-order term cancels.
    """
    net, gates, X, Y = tiny(seed)
    gates[0].theta[0] = 1.0
    w = net.layers[1].W[:, 0].copy()
    errs = []
    for s in scales:
        net.layers[1].W[:, 0] = s * w
        net.touch()
        bf = brute_force_diff(net, X, Y, gates).values[0][0]
        tm = exact_expectation(gates, lambda xi: taylor_at(net, X, Y, xi, gates).values[0][0])
        errs.append(abs(tm - bf))
    return np.array(errs)
