import numpy as np
import pytest

from blockgrad.core import BlockPartition, Rng
from blockgrad.models import (
    FeatureBlockSpec,
    SyntheticStream,
    hinge_loss_grad,
    smoothed_hinge_batch,
)
from blockgrad.experiments import (
    ComparatorConfig,
    DiagnosticsConfig,
    LayerwiseConfig,
    MinNormConfig,
    NonconvexConfig,
    RegretConfig,
    StabilityConfig,
    compute_diagnostics,
    iterate_average,
    paper_partitions,
    regret_bound_value,
    run_diagnostics_experiment,
    run_layerwise_minnorm,
    run_minnorm_ls,
    run_nonconvex_experiment,
    run_regret_experiment,
    run_stability_probe,
    write_diagnostics_csv,
    write_nonconvex_csv,
    write_regret_csv,
    write_stability_csv,
)

ZERO_STREAM = (FeatureBlockSpec(width=4, prob=0.0, mean=1.0, std=1.0),)


class TestPaperPartitions:
    def test_layouts_at_d100(self):
        parts = paper_partitions(100)
        assert parts["B1"].B == 1
        assert list(parts["B2"].sizes) == [50, 50]
        assert list(parts["B3"].sizes) == [35, 30, 35]
        assert list(parts["B4"].sizes) == [25, 25, 25, 25]
        assert parts["Bd"].B == 100


class TestIterateAverage:
    def test_constant(self):
        traj = np.tile([1.0, 2.0], (5, 1))
        np.testing.assert_array_equal(iterate_average(traj), [1.0, 2.0])

    def test_arithmetic_mean(self):
        traj = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        np.testing.assert_array_equal(iterate_average(traj), [2.0, 0.0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            iterate_average(np.zeros((0, 3)))

    def test_jensen_on_hinge_stream(self):
        # loss of the averaged iterate <= mean of per-iterate losses
        rng = Rng(2)
        stream = SyntheticStream(SyntheticStream.paper_blocks(), rng)
        X, y = stream.sample(50)
        traj = [Rng(100 + i).normal(100) * 0.01 for i in range(20)]
        avg = iterate_average(traj)
        for t in range(50):
            losses = [hinge_loss_grad(th, X[t], y[t])[0] for th in traj]
            loss_avg, _ = hinge_loss_grad(avg, X[t], y[t])
            assert loss_avg <= np.mean(losses) + 1e-12


class TestRegret:
    def small(self, **kw):
        base = dict(T=100, repetitions=3, seed=7)
        base.update(kw)
        return RegretConfig(**base)

    def test_single_round_regret_nonnegative(self):
        res = run_regret_experiment(self.small(T=1))
        for label in res.labels:
            assert (res.final_per_rep[label] >= -1e-6).all()

    def test_bound_holds_per_run(self):
        res = run_regret_experiment(self.small())
        for label in res.labels:
            assert (res.final_per_rep[label]
                    <= res.bound_per_rep[label] + 1e-6).all()

    def test_zero_gradient_stream(self):
        cfg = self.small(T=20, repetitions=2, stream=ZERO_STREAM,
                         partitions=("B1", "Bd"))
        res = run_regret_experiment(cfg)
        for label in res.labels:
            np.testing.assert_allclose(res.final_per_rep[label], 0.0, atol=1e-12)
            np.testing.assert_allclose(res.bound_per_rep[label], 0.0, atol=1e-12)

    def test_deterministic_csv(self, tmp_path):
        cfg = self.small()
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_regret_csv(run_regret_experiment(cfg), p1)
        write_regret_csv(run_regret_experiment(cfg, threads=2), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_csv_shape(self, tmp_path):
        cfg = self.small(T=10, repetitions=2, partitions=("B1", "B2"))
        path = tmp_path / "r.csv"
        write_regret_csv(run_regret_experiment(cfg), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,mean_regret_B1,std_regret_B1,mean_regret_B2,std_regret_B2"
        assert len(lines) == 11

    def test_comparator_flags_reported(self):
        # a one-iteration budget cannot satisfy the stopping rule
        cfg = self.small(T=20, repetitions=2,
                         comparator=ComparatorConfig(max_iters=1, window=5))
        res = run_regret_experiment(cfg)
        assert res.comparator_converged == [False, False]

    def test_coordinatewise_bound_matches_adagrad_form(self):
        # with one coordinate per block and a shared radius, the bound
        # equals sum_i [D_inf^2/(2 eta) + eta] ||g_{1:T, i}||
        rng = Rng(11)
        d, T, eta = 6, 30, 0.1
        partition = BlockPartition.coordinatewise(d)
        traj = np.cumsum(0.01 * rng.normal((T + 1, d)), axis=0)
        theta_star = rng.normal(d) * 0.1
        grads = rng.normal((T, d))
        norms = np.sqrt((grads * grads).sum(axis=0))
        d_inf = np.abs(traj - theta_star).max()
        flat = np.full((T + 1, d), 0.0)
        flat[0] = theta_star + d_inf  # trajectory with D_b = D_inf in every block
        ours = regret_bound_value(flat, partition, eta, theta_star, norms)
        adagrad_form = ((d_inf ** 2 / (2 * eta) + eta) * norms).sum()
        np.testing.assert_allclose(ours, adagrad_form, rtol=1e-12)


class TestNonconvex:
    def test_pool_estimate_at_zero(self):
        # at theta = 0 every margin is 0: loss exactly 1/2, gradient -y x
        rng = Rng(3)
        stream = SyntheticStream(SyntheticStream.paper_blocks(), rng)
        X, y = stream.sample(500)
        loss, grad = smoothed_hinge_batch(np.zeros(100), X, y)
        assert loss == 0.5
        np.testing.assert_allclose(grad, -(X * y[:, None]).mean(axis=0), rtol=1e-12)

    def test_flat_region_gives_zero(self):
        X = np.array([[2.0, 0.0], [0.0, 2.0]])
        y = np.array([1.0, 1.0])
        theta = np.array([5.0, 5.0])  # margins 10 >= 1
        loss, grad = smoothed_hinge_batch(theta, X, y)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_small_run_shapes_and_determinism(self):
        cfg = NonconvexConfig(T=40, repetitions=2, pool_size=200, stride=10,
                              seed=5, partitions=("B2", "Bd"))
        r1 = run_nonconvex_experiment(cfg)
        r2 = run_nonconvex_experiment(cfg, threads=2)
        assert list(r1.ts) == [10, 20, 30, 40]
        for label in r1.labels:
            np.testing.assert_array_equal(r1.mean[label], r2.mean[label])
            assert (r1.mean[label] >= 0).all()

    def test_csv(self, tmp_path):
        cfg = NonconvexConfig(T=20, repetitions=1, pool_size=100, stride=10,
                              seed=5, partitions=("B1",))
        path = tmp_path / "n.csv"
        write_nonconvex_csv(run_nonconvex_experiment(cfg), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,grad_norm_sq_B1"
        assert len(lines) == 3


class TestMinNorm:
    def test_converges_to_min_norm_solution(self):
        res = run_minnorm_ls(MinNormConfig(iterations=8000, seed=42))
        assert res.rel_distance < 1e-3
        assert res.rowspace_max_resid < 1e-8

    def test_rowspace_invariant_multiblock(self):
        for nb in (2, 4):
            res = run_minnorm_ls(MinNormConfig(iterations=2000, num_blocks=nb, seed=3))
            assert res.rowspace_max_resid < 1e-8
            assert (res.block_residuals < 1e-8).all()

    def test_starts_at_solution_stays_put(self):
        # y = X @ 0: gradients vanish and theta never moves
        rng = Rng(1)
        X = rng.normal((4, 10))
        y = np.zeros(4)
        res = run_minnorm_ls(
            MinNormConfig(n=4, d=10, iterations=50, seed=1), data=(X, y))
        np.testing.assert_array_equal(res.theta, np.zeros(10))

    def test_uneven_blocks_rejected(self):
        with pytest.raises(ValueError, match="divide"):
            run_minnorm_ls(MinNormConfig(d=20, num_blocks=3, iterations=1))


class TestLayerwise:
    def test_reaches_closed_form_target(self):
        res = run_layerwise_minnorm(LayerwiseConfig(iterations=6000, seed=42))
        assert res.rel_distance < 1e-2
        assert res.target_loss <= 1e-10

    def test_single_layer_reduces_to_least_squares(self):
        # L = 1: the model is linear, so the target is the plain min-norm
        # solution column by column and the run converges to it
        res = run_layerwise_minnorm(
            LayerwiseConfig(L=1, d=6, n=3, iterations=6000, seed=11))
        assert res.rel_distance < 1e-3
        assert res.target_loss <= 1e-18


class TestStability:
    def test_identical_datasets_never_diverge(self):
        cfg = StabilityConfig(n=20, steps=100, repetitions=3, identical=True, seed=4)
        res = run_stability_probe(cfg)
        for label in res.labels:
            assert res.delta_mean[label].max() == 0.0
            assert res.ftilde_mean[label].max() == 0.0

    def test_delta_starts_at_zero(self):
        cfg = StabilityConfig(n=20, steps=50, repetitions=2, seed=4)
        res = run_stability_probe(cfg)
        for label in res.labels:
            assert res.delta_mean[label][0] == 0.0

    def test_no_divergence_before_swapped_index_sampled(self):
        # single repetition; at this seed the first sampled index is not the
        # perturbed one, so the second iterates still coincide exactly
        cfg = StabilityConfig(n=50, steps=5, repetitions=1, seed=6,
                              partitions=("B2",))
        res = run_stability_probe(cfg)
        assert res.delta_mean["B2"][1] == 0.0

    def test_csv(self, tmp_path):
        cfg = StabilityConfig(n=10, steps=5, repetitions=1, seed=2,
                              partitions=("B1", "Bd"))
        path = tmp_path / "s.csv"
        write_stability_csv(run_stability_probe(cfg), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,delta_B1,delta_Bd,ftilde_B1,ftilde_Bd"
        assert len(lines) == 7


class TestDiagnostics:
    def test_homogeneous_sigma_gives_unit_ratios(self):
        # per-coordinate second moments exactly equal within each block
        partition = BlockPartition.from_sizes([2, 2])
        grads = [np.array([[1.0, 1.0, 2.0, 2.0], [-1.0, -1.0, -2.0, -2.0]])]
        rep = compute_diagnostics(grads, partition, eps=1.0)
        assert abs(rep.r1 - 1.0) <= 1e-12
        assert abs(rep.r2 - 1.0) <= 1e-12
        assert abs(rep.r3 - 1.0) <= 1e-12
        assert rep.r_min == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(rep.cv, 0.0, atol=1e-12)

    def test_two_block_r2_example(self):
        # sigma values {1,1} and {2,2} with eps = 1:
        # r2 = (1+1+2+2)/(1*2 + 2*2) = 1
        partition = BlockPartition.from_sizes([2, 2])
        grads = [np.array([[1.0, 1.0, 2.0, 2.0]])]
        rep = compute_diagnostics(grads, partition, eps=1.0)
        assert rep.r2 == pytest.approx(1.0, abs=1e-12)

    def test_block_moment_tightness(self):
        rng = np.random.default_rng(15)
        partition = BlockPartition.from_sizes([3, 4, 5])
        grads = [rng.normal(size=(40, 12)) for _ in range(4)]
        rep = compute_diagnostics(grads, partition, eps=1e-3)
        M = np.zeros((12, 3))
        M[np.arange(12), partition.coord_block] = 1.0
        upper = rep.sigma_i_sq @ M / partition.sizes
        assert (rep.sigma_b_sq <= upper + 1e-12).all()

    def test_zero_block_cv_warns_nan(self):
        partition = BlockPartition.from_sizes([2, 2])
        grads = [np.array([[1.0, 2.0, 0.0, 0.0]])]
        with pytest.warns(UserWarning, match="zero-mean"):
            rep = compute_diagnostics(grads, partition, eps=0.1)
        assert np.isnan(rep.cv[1])
        assert not np.isnan(rep.cv[0])

    def test_vbar_ratio_at_least_one(self):
        # the coordinatewise running max dominates the blockwise one
        rng = np.random.default_rng(16)
        partition = BlockPartition.from_sizes([5, 5])
        grads = [rng.normal(size=(30, 10))]
        rep = compute_diagnostics(grads, partition, eps=1e-3)
        assert rep.vbar_fine >= rep.vbar_block
        assert rep.vbar_ratio >= 1.0

    def test_experiment_runner_and_csv(self, tmp_path):
        # eta small enough that the sampled gradients stay active
        cfg = DiagnosticsConfig(epochs=2, steps_per_epoch=20,
                                samples_per_epoch=100, eta=0.001, seed=8)
        rep = run_diagnostics_experiment(cfg)
        assert rep.r_min > 0
        path = tmp_path / "d.csv"
        write_diagnostics_csv(rep, path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("block,d_b,sigma_b_sq,cv,r1")
        assert lines[-1].startswith("summary,")
        assert len(lines) == 2 + rep.partition.B

    def test_eps_required(self):
        with pytest.raises(ValueError, match="eps"):
            compute_diagnostics([np.ones((2, 2))], BlockPartition.single(2), eps=0.0)
