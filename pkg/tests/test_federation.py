import numpy as np
import pytest

from fedmeta.data import NodeData
from fedmeta.federation import (
    DivergenceError,
    FedConfig,
    aggregate,
    evaluate,
    fast_adapt,
    global_objective,
    init_params,
    inner_update,
    local_round,
    meta_gradient,
    run_fedavg,
    run_fedml,
)
from fedmeta.model import LossSpec, Params, Sample, grad_theta, hessian_vec, loss

from conftest import make_federation, make_node, random_batch, random_params
from oracles import count_correct, fd_gradient, rel_err


class TestInnerUpdate:
    def test_alpha_zero_identity(self, spec):
        node = make_node(4, 6, 5, 5, seed=1)
        p = random_params(4, 6, 2)
        out = inner_update(p, node, 0.0, spec)
        np.testing.assert_array_equal(out.values, p.values)

    def test_fixed_point_at_minimizer(self):
        from scipy.optimize import minimize

        node = make_node(3, 5, 8, 5, seed=3)
        sp = LossSpec(0.1)
        fun = lambda v: loss(Params(v, 3, 5), node.train, sp)
        jac = lambda v: grad_theta(Params(v, 3, 5), node.train, sp).values
        res = minimize(fun, np.zeros(18), jac=jac, method="L-BFGS-B", tol=1e-14)
        p = Params(res.x, 3, 5)
        out = inner_update(p, node, 0.05, sp)
        np.testing.assert_allclose(out.values, p.values, atol=1e-6)

    def test_matches_fd_gradient_step(self, spec):
        node = make_node(4, 6, 5, 5, seed=4)
        p = random_params(4, 6, 5)
        alpha = 0.03
        fd = fd_gradient(lambda v: loss(p.with_values(v), node.train, spec), p.values)
        out = inner_update(p, node, alpha, spec)
        np.testing.assert_allclose(out.values, p.values - alpha * fd, atol=1e-8)


class TestMetaGradient:
    def test_alpha_zero_reduces_to_test_gradient(self, spec):
        node = make_node(4, 6, 5, 7, seed=6)
        p = random_params(4, 6, 7)
        mg = meta_gradient(p, node, 0.0, spec)
        g_test = grad_theta(p, node.test, spec)
        np.testing.assert_allclose(mg.values, g_test.values, atol=1e-14)

    @pytest.mark.parametrize("seed", [10, 11, 12])
    def test_matches_fd_of_meta_objective(self, seed, spec):
        node = make_node(5, 8, 5, 6, seed=seed)
        p = random_params(5, 8, seed + 1)
        alpha = 0.05

        def G(v):
            q = p.with_values(v)
            phi = inner_update(q, node, alpha, spec)
            return loss(phi, node.test, spec)

        mg = meta_gradient(p, node, alpha, spec).values
        fd = fd_gradient(G, p.values, eps=1e-5)
        assert rel_err(mg, fd) < 1e-5

    def test_first_order_differs_by_curvature_term(self, spec):
        node = make_node(4, 6, 5, 6, seed=13)
        p = random_params(4, 6, 14)
        alpha = 0.07
        exact = meta_gradient(p, node, alpha, spec)
        first = meta_gradient(p, node, alpha, spec, first_order=True)
        hv = hessian_vec(p, node.train, spec, first)
        np.testing.assert_allclose(
            exact.values, first.values - alpha * hv.values, atol=1e-10
        )


class TestLocalRound:
    def test_beta_zero_identity(self, spec):
        node = make_node(4, 6, 5, 6, seed=15)
        p = random_params(4, 6, 16)
        cfg = FedConfig(alpha=0.01, beta=0.0, total_steps=1, local_steps=1)
        out = local_round(p, node, cfg, spec)
        np.testing.assert_array_equal(out.values, p.values)

    def test_two_steps_equal_chained_single_steps(self, spec):
        node = make_node(4, 6, 5, 6, seed=17)
        p = random_params(4, 6, 18)
        two = FedConfig(alpha=0.01, beta=0.01, total_steps=2, local_steps=2)
        one = FedConfig(alpha=0.01, beta=0.01, total_steps=1, local_steps=1)
        out2 = local_round(p, node, two, spec)
        chained = local_round(local_round(p, node, one, spec), node, one, spec)
        np.testing.assert_array_equal(out2.values, chained.values)

    def test_descent_under_small_beta(self):
        sp = LossSpec(0.1)
        node = make_node(4, 6, 6, 8, seed=19)
        p = random_params(4, 6, 20)
        cfg = FedConfig(alpha=0.005, beta=0.001, total_steps=5, local_steps=5)

        def G_i(q):
            return loss(inner_update(q, node, cfg.alpha, sp), node.test, sp)

        out = local_round(p, node, cfg, sp)
        assert G_i(out) <= G_i(p)

    def test_divergence_guard_names_node(self, spec):
        node = make_node(4, 6, 5, 6, seed=21, node_id=77)
        p = random_params(4, 6, 22)
        cfg = FedConfig(alpha=0.01, beta=1e9, total_steps=3, local_steps=3)
        with pytest.raises(DivergenceError, match="node 77"):
            local_round(p, node, cfg, spec)


class TestAggregate:
    def test_identical_inputs(self):
        p = random_params(3, 4, 23)
        out = aggregate([p, p, p], [0.2, 0.3, 0.5])
        np.testing.assert_allclose(out.values, p.values, atol=1e-15)

    def test_half_half_mean(self):
        a, b = random_params(3, 4, 24), random_params(3, 4, 25)
        out = aggregate([a, b], [0.5, 0.5])
        np.testing.assert_array_equal(out.values, 0.5 * a.values + 0.5 * b.values)

    def test_matches_reversed_accumulation(self):
        rng = np.random.default_rng(26)
        ps = [random_params(3, 4, 100 + i) for i in range(6)]
        w = rng.uniform(0.1, 1.0, 6)
        w /= w.sum()
        out = aggregate(ps, w)
        acc = np.zeros_like(out.values)
        for wi, p in zip(reversed(w), reversed(ps)):
            acc += wi * p.values
        assert np.linalg.norm(out.values - acc) < 1e-12

    def test_layout_mismatch_rejected(self):
        with pytest.raises(ValueError, match="layout"):
            aggregate([random_params(3, 4, 1), random_params(4, 3, 1)], [0.5, 0.5])


class TestRunFedml:
    def test_single_node_single_step_is_one_meta_step(self, spec):
        fed = make_federation(4, 6, 2, seed=30, n_targets=1)
        cfg = FedConfig(alpha=0.01, beta=0.01, total_steps=1, local_steps=1, seed=5)
        params, logs = run_fedml(fed, cfg, spec)
        theta0 = init_params(4, 6, 5)
        mg = meta_gradient(theta0, fed.sources[0], 0.01, spec)
        np.testing.assert_allclose(
            params.values, theta0.values - 0.01 * mg.values, atol=1e-15
        )
        assert len(logs) == 2 and logs[1].comm_round == 1

    def test_identical_nodes_make_t0_irrelevant(self, spec):
        base = make_node(4, 6, 5, 6, seed=31)
        nodes = [
            NodeData(i, list(base.train), list(base.test)) for i in range(4)
        ]
        from fedmeta.data import Federation

        fed = Federation(
            sources=nodes[:3],
            targets=nodes[3:],
            weights=np.full(3, 1 / 3),
            num_classes=4,
            feature_dim=6,
            k_train=5,
        )
        cfg1 = FedConfig(alpha=0.01, beta=0.01, total_steps=12, local_steps=1, seed=7)
        cfg4 = FedConfig(alpha=0.01, beta=0.01, total_steps=12, local_steps=4, seed=7)
        p1, _ = run_fedml(fed, cfg1, spec)
        p4, _ = run_fedml(fed, cfg4, spec)
        assert np.linalg.norm(p1.values - p4.values) < 1e-9

    def test_monotone_descent_on_similar_nodes(self, spec):
        from fedmeta.data import gen_synthetic

        fed = gen_synthetic(0.0, 0.0, 12, seed=1)
        cfg = FedConfig(alpha=0.01, beta=0.01, total_steps=60, local_steps=1, seed=1)
        _, logs = run_fedml(fed, cfg, spec)
        losses = [lg.global_loss for lg in logs]
        diffs = np.diff(losses)
        assert (diffs < 0).mean() >= 0.95

    def test_thread_count_does_not_change_bits(self, spec):
        fed = make_federation(4, 6, 6, seed=33, n_targets=1)
        base = dict(alpha=0.01, beta=0.01, total_steps=10, local_steps=5, seed=3)
        p1, _ = run_fedml(fed, FedConfig(**base, n_workers=1), spec)
        p4, _ = run_fedml(fed, FedConfig(**base, n_workers=4), spec)
        assert np.array_equal(p1.values, p4.values)

    def test_t_zero_returns_initial_state(self, spec):
        fed = make_federation(4, 6, 3, seed=34, n_targets=1)
        cfg = FedConfig(total_steps=0, local_steps=1, seed=11)
        params, logs = run_fedml(fed, cfg, spec)
        np.testing.assert_array_equal(params.values, init_params(4, 6, 11).values)
        assert len(logs) == 1 and logs[0].t == 0

    def test_t_not_multiple_of_t0_rejected(self):
        with pytest.raises(ValueError, match="multiple"):
            FedConfig(total_steps=10, local_steps=3)


class TestRunFedavg:
    def test_single_node_is_centralized_descent(self, spec):
        fed = make_federation(4, 6, 2, seed=40, n_targets=1)
        cfg = FedConfig(beta=0.02, total_steps=5, local_steps=1, seed=9)
        params, _ = run_fedavg(fed, cfg, spec)
        th = init_params(4, 6, 9).values
        node = fed.sources[0]
        for _ in range(5):
            g = grad_theta(Params(th, 4, 6), node.train + node.test, spec).values
            th = th - cfg.beta * g
        np.testing.assert_allclose(params.values, th, atol=1e-12)

    def test_t0_one_equals_descent_on_weighted_loss(self, spec):
        fed = make_federation(4, 6, 5, seed=41, n_targets=1)
        cfg = FedConfig(beta=0.02, total_steps=8, local_steps=1, seed=10)
        params, _ = run_fedavg(fed, cfg, spec)
        # centralized oracle on L_w
        th = init_params(4, 6, 10).values
        for _ in range(8):
            g = np.zeros_like(th)
            for w, node in zip(fed.weights, fed.sources):
                g += w * grad_theta(Params(th, 4, 6), node.train + node.test, spec).values
            th = th - cfg.beta * g
        assert np.linalg.norm(params.values - th) < 1e-9

    def test_own_objective_decreases(self, spec):
        fed = make_federation(4, 6, 5, seed=42, n_targets=1)
        cfg = FedConfig(beta=0.05, total_steps=30, local_steps=5, seed=12)
        _, logs = run_fedavg(fed, cfg, spec)
        losses = [lg.global_loss for lg in logs]
        assert losses[-1] < losses[0]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


class TestFastAdaptEvaluate:
    def test_zero_steps_identity(self, spec):
        node = make_node(4, 6, 5, 6, seed=50)
        p = random_params(4, 6, 51)
        out = fast_adapt(p, node, 0.05, 0, spec)
        np.testing.assert_array_equal(out.values, p.values)

    def test_one_step_equals_inner_update(self, spec):
        node = make_node(4, 6, 5, 6, seed=52)
        p = random_params(4, 6, 53)
        a = fast_adapt(p, node, 0.05, 1, spec)
        b = inner_update(p, node, 0.05, spec)
        np.testing.assert_array_equal(a.values, b.values)

    def test_train_loss_decreases_over_steps(self, spec):
        node = make_node(4, 6, 8, 6, seed=54)
        p = random_params(4, 6, 55)
        losses = [
            evaluate(fast_adapt(p, node, 0.05, s, spec), node.train, spec)[0]
            for s in range(6)
        ]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_zero_params_accuracy_is_class0_frequency(self, spec):
        p = Params.zeros(4, 6)
        batch = random_batch(4, 6, 40, seed=56)
        _, acc = evaluate(p, batch, spec)
        freq0 = sum(1 for s in batch if s.y == 0) / len(batch)
        assert acc == pytest.approx(freq0)

    def test_perfect_separation_scores_one(self, spec):
        margin = np.zeros(3 * 4 + 3)
        margin[:4] = 100.0  # class 0 row huge on feature 0
        p = Params(margin, 3, 4)
        batch = [Sample(np.array([1.0, 0, 0, 0]), 0) for _ in range(5)]
        assert evaluate(p, batch, spec)[1] == 1.0

    def test_matches_independent_accuracy_counter(self, spec):
        p = random_params(5, 7, 57)
        batch = random_batch(5, 7, 100, seed=58)
        _, acc = evaluate(p, batch, spec)
        ref = count_correct(p.weights, p.bias, batch)
        assert acc == pytest.approx(ref)

    def test_empty_set_rejected(self, spec):
        with pytest.raises(ValueError, match="empty"):
            evaluate(random_params(3, 4, 59), [], spec)
