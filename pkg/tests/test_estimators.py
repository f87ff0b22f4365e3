import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varprune.estimators import (
    BruteForce,
    Concrete,
    Hybrid,
    Sampling,
    Taylor,
    brute_force_diff,
    concrete_dxi_dtheta,
    concrete_grad,
    concrete_xi,
    enumerate_configs,
    estimator_from_name,
    exact_expectation,
    expected_cost,
    hybrid_diff,
    sampling_diff,
    taylor_diff,
)
from varprune.network import (
    Conv,
    Dense,
    Flatten,
    GateState,
    Network,
    Pool,
    backward,
    forward,
    init_gates,
    sample_gates,
)
from varprune.tensor import Identity, LeakyReLU

from oracles import taylor_at, taylor_probe_errors, tiny


def taylor_mean(net, gates, X, Y):
    return exact_expectation(gates, lambda xi: taylor_at(net, X, Y, xi, gates).flat())


class LinearLoss:
    """Loss linear in the network output, used to build an exactly linear cost."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)

    def per_sample(self, outputs, targets):
        return outputs @ self.c, np.broadcast_to(self.c, outputs.shape).copy()


class TestKinds:
    def test_names(self):
        assert estimator_from_name("taylor") == Taylor()
        assert estimator_from_name("concrete", t=0.2) == Concrete(0.2)
        assert estimator_from_name("hybrid", k=3) == Hybrid(3)
        assert estimator_from_name("sampling") == Sampling()
        assert estimator_from_name("brute_force") == BruteForce()
        with pytest.raises(ValueError):
            estimator_from_name("nope")

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.1])
    def test_temperature_range(self, t):
        with pytest.raises(ValueError):
            Concrete(t)

    def test_hybrid_k(self):
        with pytest.raises(ValueError):
            Hybrid(-1)


class TestBruteForce:
    def test_single_unit_is_two_forwards(self):
        net, gates, X, Y = tiny(0, sizes=(2, 1, 2))
        on = brute_force_diff(net, X, Y, gates).flat()[0]
        losses = [net.loss.per_sample(forward(net, X, [np.array([v])])[0], Y)[0].sum() for v in (1.0, 0.0)]
        assert np.isclose(on, losses[0] - losses[1], rtol=1e-13)

    def test_all_on_reduces_to_two_forwards(self):
        net, gates, X, Y = tiny(1, theta=1.0)
        d = brute_force_diff(net, X, Y, gates).flat()
        base = net.loss.per_sample(forward(net, X)[0], Y)[0].sum()
        xi = [np.array([1.0, 0.0, 1.0])]
        off = net.loss.per_sample(forward(net, X, xi)[0], Y)[0].sum()
        assert np.isclose(d[1], base - off, rtol=1e-13)

    def test_expected_cost_against_monte_carlo(self):
        net, gates, X, Y = tiny(2)
        rng = np.random.default_rng(0)
        draws = 100_000
        xi = (rng.random((draws, 3)) < gates[0].theta).astype(float)
        costs = np.zeros(draws)
        for k in range(0, draws, 5000):
            blk = xi[k:k + 5000]
            out, _ = forward(net, np.tile(X, (blk.shape[0], 1)), [np.repeat(blk, 8, axis=0)])
            costs[k:k + 5000] = net.loss.per_sample(out, np.tile(Y, (blk.shape[0], 1)))[0].reshape(-1, 8).sum(1)
        se = costs.std(ddof=1) / np.sqrt(draws)
        assert abs(costs.mean() - expected_cost(net, X, Y, gates)) < 3 * se

    def test_is_derivative_of_expected_cost(self):
        # E[C] is multilinear in theta, so dE[C]/dtheta_j is exactly C1 - C0
        net, gates, X, Y = tiny(3)
        d = brute_force_diff(net, X, Y, gates).flat()
        h = 1e-5
        for j in range(3):
            up = [GateState.fresh(3)]
            up[0].theta[:] = gates[0].theta
            up[0].theta[j] += h
            dn = [GateState.fresh(3)]
            dn[0].theta[:] = gates[0].theta
            dn[0].theta[j] -= h
            fd = (expected_cost(net, X, Y, up) - expected_cost(net, X, Y, dn)) / (2 * h)
            assert np.isclose(fd, d[j], rtol=1e-7, atol=1e-9)

    def test_too_many_units(self):
        with pytest.raises(ValueError):
            enumerate_configs(17)


class TestTaylor:
    def test_zero_fan_out(self):
        net, gates, X, Y = tiny(4)
        net.layers[1].W[:, 1] = 0.0
        assert taylor_at(net, X, Y, sample_gates(gates, np.random.default_rng(0)), gates).values[0][1] == 0.0

    def test_needs_backward(self):
        net, gates, X, _ = tiny(4)
        _, tr = forward(net, X)
        with pytest.raises(ValueError):
            taylor_diff(tr, gates)

    def test_equals_gate_derivative(self):
        # straight-through estimate = dC/dxi_j at the sampled gates
        net, gates, X, Y = tiny(5, sizes=(3, 4, 3, 2))
        xi = [np.array([1.0, 0.0, 1.0, 1.0]), np.array([0.0, 1.0, 1.0])]
        t = taylor_at(net, X, Y, xi, gates, n_data=24)
        h = 1e-6
        for gi, j in [(0, 0), (0, 1), (1, 0), (1, 2)]:
            vals = []
            for s in (h, -h):
                x2 = [a.copy() for a in xi]
                x2[gi][j] += s
                out, _ = forward(net, X, x2)
                vals.append(3.0 * net.loss.per_sample(out, Y)[0].sum())
            assert np.isclose((vals[0] - vals[1]) / (2 * h), t.values[gi][j], rtol=1e-6, atol=1e-9)

    def test_conv_sums_over_positions(self):
        rng = np.random.default_rng(6)
        net = Network([Conv(rng.normal(0, .4, (2, 1, 3, 3)), np.zeros(2), True, LeakyReLU(0.1)),
                       Pool(), Flatten(), Dense(rng.normal(0, .4, (2, 8)), np.zeros(2), False, Identity())],
                      input_shape=(1, 6, 6))
        gates = init_gates(net)
        X, Y = rng.normal(size=(4, 1, 6, 6)), np.eye(2)[[0, 1, 0, 1]]
        t = taylor_at(net, X, Y, [np.array([1.0, 1.0])], gates)
        h = 1e-6
        for j in range(2):
            c = []
            for s in (h, -h):
                xi = [np.ones(2)]
                xi[0][j] += s
                c.append(net.loss.per_sample(forward(net, X, xi)[0], Y)[0].sum())
            assert np.isclose((c[0] - c[1]) / (2 * h), t.values[0][j], rtol=1e-6)

    def test_exact_for_linear_cost(self):
        rng = np.random.default_rng(7)
        layers = [Dense(rng.normal(size=(3, 2)), rng.normal(size=3), True, Identity()),
                  Dense(rng.normal(size=(2, 3)), rng.normal(size=2), True, Identity()),
                  Dense(rng.normal(size=(1, 2)), rng.normal(size=1), False, Identity())]
        net = Network(layers, LinearLoss([1.5]), (2,))
        gates = init_gates(net)
        gates[0].theta[:] = [0.3, 0.6, 0.9]
        gates[1].theta[:] = [0.4, 0.7]
        X, Y = rng.normal(size=(8, 2)), np.zeros((8, 1))
        bf = brute_force_diff(net, X, Y, gates).flat()
        assert np.allclose(taylor_mean(net, gates, X, Y), bf, rtol=0, atol=1e-10)

    def test_error_quarters_per_halving(self):
        ratios = [r[0] / r[1] for r in (taylor_probe_errors(s, [1.0, 0.5]) for s in range(50))]
        assert 3.0 <= np.mean(ratios) <= 5.0

    def test_empirical_order(self):
        scales = np.array([1.0, 0.5, 0.25, 0.125])
        orders = []
        for s in range(20):
            e = taylor_probe_errors(s, scales)
            orders.append(np.polyfit(np.log(scales), np.log(e), 1)[0])
        assert np.median(orders) >= 1.5


class TestConcrete:
    def test_hard_limit(self):
        th = np.array([0.3, 0.3, 0.7, 0.7])
        u = np.array([0.2, 0.4, 0.6, 0.8])
        assert np.allclose(concrete_xi(th, u, 1e-4), [1, 0, 1, 0], atol=1e-12)

    def test_centre_point(self):
        assert concrete_xi(0.5, 0.5, 0.1) == 0.5
        assert np.isclose(concrete_dxi_dtheta(0.5, 0.5, 0.1), 10.0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.05, 0.95))
    def test_derivative_against_differences(self, theta, u, t):
        h = 1e-7
        fd = (concrete_xi(theta + h, u, t) - concrete_xi(theta - h, u, t)) / (2 * h)
        d = concrete_dxi_dtheta(theta, u, t)
        assert d >= 0
        assert np.isclose(fd, d, rtol=1e-5, atol=1e-7)

    def test_mean_near_brute_force(self):
        net, gates, X, Y = tiny(8)
        bf = brute_force_diff(net, X, Y, gates).flat()
        rng = np.random.default_rng(1)
        mean = np.mean([concrete_grad(net, X, Y, gates, rng, 0.1).flat() for _ in range(20_000)], axis=0)
        assert np.linalg.norm(mean - bf) < 0.1 * np.linalg.norm(bf)

    def test_pruned_units_report_zero(self):
        net, gates, X, Y = tiny(9)
        gates[0].alive[2] = False
        r = concrete_grad(net, X, Y, gates, np.random.default_rng(0))
        assert r.values[0][2] == 0.0 and r.flat().size == 2


class TestSampling:
    def test_deterministic_gates_equal_brute_force(self):
        net, gates, X, Y = tiny(10, sizes=(2, 3, 3, 2))
        gates[0].theta[:] = [1.0, 0.0, 1.0]
        gates[1].theta[:] = [0.0, 1.0, 1.0]
        s = sampling_diff(net, X, Y, gates, np.random.default_rng(0)).flat()
        assert np.allclose(s, brute_force_diff(net, X, Y, gates).flat(), rtol=1e-12, atol=1e-12)

    def test_mean_within_three_se(self):
        net, gates, X, Y = tiny(11, sizes=(2, 3, 3, 2))
        bf = brute_force_diff(net, X, Y, gates).flat()
        rng = np.random.default_rng(2)
        draws = np.array([sampling_diff(net, X, Y, gates, rng).flat() for _ in range(20_000)])
        se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(0) - bf) < 3 * se)

    def test_orientation(self):
        # a unit that lowers the cost gets a negative estimate
        net, gates, X, Y = tiny(12, theta=1.0)
        s = sampling_diff(net, X, Y, gates, np.random.default_rng(0)).flat()
        c_on = net.loss.per_sample(forward(net, X)[0], Y)[0].sum()
        c_off = net.loss.per_sample(forward(net, X, [np.array([0.0, 1.0, 1.0])])[0], Y)[0].sum()
        assert np.isclose(s[0], c_on - c_off)


@pytest.mark.parametrize("kind", ["taylor", "concrete", "sampling", "brute_force"])
def test_zero_fan_out_gives_zero(kind):
    net, gates, X, Y = tiny(13, sizes=(2, 3, 3, 2))
    net.layers[2].W[:, 1] = 0.0
    rng = np.random.default_rng(0)
    if kind == "taylor":
        r = taylor_at(net, X, Y, sample_gates(gates, rng), gates)
    elif kind == "concrete":
        r = concrete_grad(net, X, Y, gates, rng)
    elif kind == "sampling":
        r = sampling_diff(net, X, Y, gates, rng)
    else:
        r = brute_force_diff(net, X, Y, gates)
    assert abs(r.values[1][1]) <= 1e-12


class TestHybrid:
    def setup_method(self):
        self.net, self.gates, self.X, self.Y = tiny(14, sizes=(2, 4, 3, 2))
        self.xi = sample_gates(self.gates, np.random.default_rng(3))
        _, self.trace = forward(self.net, self.X, self.xi)
        backward(self.net, self.trace, self.Y)

    def run(self, k):
        return hybrid_diff(self.net, self.trace, self.X, self.Y, self.gates, np.random.default_rng(0), k, xi=self.xi)

    def test_k0_is_taylor(self):
        assert np.array_equal(self.run(0).flat(), taylor_diff(self.trace, self.gates).flat())

    def test_k_all_is_sampling(self):
        s = sampling_diff(self.net, self.X, self.Y, self.gates, None, xi=self.xi).flat()
        assert np.array_equal(self.run(7).flat(), s)

    def test_k1_picks_largest_unit(self):
        self.net.layers[0].W[2] *= 20.0
        self.net.touch()
        _, self.trace = forward(self.net, self.X, self.xi)
        backward(self.net, self.trace, self.Y)
        r = self.run(1)
        t = taylor_diff(self.trace, self.gates)
        s = sampling_diff(self.net, self.X, self.Y, self.gates, None, xi=self.xi)
        assert r.kinds[0][2] == "sampling" and r.values[0][2] == s.values[0][2]
        mask = np.ones(7, dtype=bool)
        mask[2] = False
        assert np.array_equal(r.flat()[mask], t.flat()[mask])
        assert r.flat_kinds().count("sampling") == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1e-5, 0.5, 1 - 1e-5]))
def test_outputs_finite_at_theta_extremes(seed, theta):
    net, gates, X, Y = tiny(seed, theta=theta)
    rng = np.random.default_rng(seed)
    assert np.all(np.isfinite(concrete_grad(net, X, Y, gates, rng).flat()))
    assert np.all(np.isfinite(sampling_diff(net, X, Y, gates, rng).flat()))
    assert np.all(np.isfinite(taylor_at(net, X, Y, sample_gates(gates, rng), gates).flat()))


def test_all_units_dead():
    net, gates, X, Y = tiny(15)
    gates[0].alive[:] = False
    rng = np.random.default_rng(0)
    assert not sampling_diff(net, X, Y, gates, rng).values[0].any()
    assert not brute_force_diff(net, X, Y, gates).values[0].any()
    assert np.isclose(expected_cost(net, X, Y, gates), net.loss.per_sample(forward(net, X, [np.zeros(3)])[0], Y)[0].sum())
