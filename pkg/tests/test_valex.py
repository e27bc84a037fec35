import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdac.errors import InputError
from pdac.valex import (
    BoundParams,
    MixtureSpec,
    RegionPartition,
    TrainConfig,
    ValexConfig,
    acc_fm_metrics,
    bayes_optimal,
    binned_quartiles,
    conditional_mse,
    local_variance,
    local_variance_from_probs,
    make_strategy,
    overall_variance_bound,
    per_trial_mse,
    region_counts,
    region_index,
    region_probabilities,
    region_probability,
    run_valex,
    sample_mixture,
    true_density,
    true_log_density,
    variance_bound,
)
from pdac.valex.mlp import MlpModel, loss_and_grad, lr_at, train_mlp


class _Fixed:
    """Stand-in model returning a precomputed probability table."""

    def __init__(self, fn):
        self.fn = fn

    def predict_proba(self, X):
        return self.fn(np.atleast_2d(X))


class TestMixture:
    def test_default_spec(self):
        spec = MixtureSpec.default()
        assert spec.K == 10 and spec.dim == 2
        np.testing.assert_allclose(np.linalg.norm(spec.means, axis=1), 3.0)
        np.testing.assert_array_equal(spec.covariances[4], 2 * np.eye(2))
        assert spec.priors.sum() == pytest.approx(1.0)

    def test_class_counts_binomial(self):
        _, y = sample_mixture(MixtureSpec.default(), 100_000, np.random.default_rng(0))
        counts = np.bincount(y, minlength=10)
        sigma = math.sqrt(100_000 * 0.1 * 0.9)
        assert np.all(np.abs(counts - 10_000) < 4 * sigma)

    def test_degenerate_component(self, rng):
        spec = MixtureSpec([[1.5, -2.0]], [1e-12 * np.eye(2)], [1.0])
        x, y = sample_mixture(spec, 100, rng)
        np.testing.assert_allclose(x, np.tile([1.5, -2.0], (100, 1)), atol=1e-4)
        assert np.all(y == 0)

    def test_empirical_class_means(self):
        spec = MixtureSpec.default()
        x, y = sample_mixture(spec, 50_000, np.random.default_rng(1))
        for k in range(10):
            np.testing.assert_allclose(x[y == k].mean(axis=0), spec.means[k], atol=0.05)

    def test_invalid_priors(self):
        with pytest.raises(InputError):
            MixtureSpec([[0.0, 0.0]], [np.eye(2)], [0.5])

    def test_joint_density_factorizes(self, rng):
        spec = MixtureSpec.default()
        x = rng.normal(size=(5, 2))
        y = np.arange(5)
        dens = true_density(spec, x, y)
        for xi, yi, d in zip(x, y, dens):
            cond = math.exp(-0.25 * np.sum((xi - spec.means[yi]) ** 2)) / (4 * math.pi)
            assert d == pytest.approx(0.1 * cond, rel=1e-12)
        np.testing.assert_allclose(np.log(dens), true_log_density(spec, x, y))


class TestBayesOptimal:
    def test_origin_uniform(self):
        np.testing.assert_allclose(bayes_optimal(MixtureSpec.default(), [0.0, 0.0])[0], 0.1, atol=1e-12)

    def test_single_class(self):
        spec = MixtureSpec([[2.0, 1.0]], [np.eye(2)], [1.0])
        np.testing.assert_array_equal(bayes_optimal(spec, [2.0, 1.0]), [[1.0]])

    def test_extended_precision_oracle(self, rng):
        mpmath.mp.dps = 40
        spec = MixtureSpec.default()
        for x in rng.normal(scale=4, size=(20, 2)):
            terms = []
            for k in range(10):
                d2 = sum((mpmath.mpf(float(x[i])) - mpmath.mpf(float(spec.means[k, i]))) ** 2 for i in range(2))
                terms.append(mpmath.mpf("0.1") * mpmath.exp(-d2 / 4) / (4 * mpmath.pi))
            tot = mpmath.fsum(terms)
            oracle = np.array([float(t / tot) for t in terms])
            assert np.max(np.abs(bayes_optimal(spec, x)[0] - oracle)) < 1e-12

    @settings(max_examples=50)
    @given(st.floats(-40, 40), st.floats(-40, 40))
    def test_probability_vector(self, a, b):
        f = bayes_optimal(MixtureSpec.default(), [a, b])[0]
        assert np.all(f >= 0)
        assert abs(f.sum() - 1) < 1e-12


class TestPartition:
    def test_default_cell_count(self):
        part = RegionPartition()
        assert part.cells_per_axis == 50 and part.n_regions == 2500

    def test_non_integer_ratio(self):
        with pytest.raises(InputError):
            RegionPartition(side=10, m=0.3)

    def test_corners_and_clamping(self):
        part = RegionPartition()
        assert region_index(part, [-10.0, -10.0]) == 0
        assert region_index(part, [9.99, 9.99]) == 2499
        assert region_index(part, [100.0, -100.0]) == 49 * 50
        assert region_index(part, [-9.9, -9.5]) == 1

    def test_uniform_weights_give_count_ratio(self, rng):
        part = RegionPartition()
        x = rng.normal(scale=3, size=(1000, 2))
        regions = region_index(part, x)
        p = region_probabilities(np.full(1000, 1e-3), regions, part.n_regions)
        np.testing.assert_allclose(p, region_counts(regions, part.n_regions) / 1000, atol=1e-15)

    def test_direct_summation_oracle(self, rng):
        part = RegionPartition()
        x = rng.normal(scale=2, size=(300, 2))
        w = rng.random(300)
        regions = region_index(part, x)
        for i in np.unique(regions)[:30]:
            oracle = sum(w[j] for j in range(300) if regions[j] == i) / sum(w)
            assert region_probability(w, part, x, int(i)) == pytest.approx(oracle, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 200), st.integers(0, 2**31))
    def test_partition_properties(self, n, seed):
        r = np.random.default_rng(seed)
        part = RegionPartition()
        x = r.uniform(-10, 10, size=(n, 2))
        regions = region_index(part, x)
        assert np.all((regions >= 0) & (regions < 2500))
        assert region_counts(regions, 2500).sum() == n
        p = region_probabilities(r.random(n) + 1e-3, regions, 2500)
        assert abs(p[np.unique(regions)].sum() - 1) < 1e-12


class TestMlp:
    def test_schedule_endpoints(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 0.0
        assert lr_at(10, cfg) == pytest.approx(0.1)
        assert lr_at(50, cfg) == pytest.approx(0.0, abs=1e-15)
        assert lr_at(30, cfg) == pytest.approx(0.05)

    def test_config_validation(self):
        with pytest.raises(InputError):
            TrainConfig(epochs=5, warmup_epochs=10)

    def test_finite_difference_gradients(self, rng):
        model = MlpModel.init(2, 10, rng)
        X = rng.normal(scale=2, size=(5, 2))
        y = rng.integers(0, 10, size=5)
        _, grads = loss_and_grad(model, X, y)
        eps = 1e-4
        for name, param in model.params().items():
            flat = param.reshape(-1)
            for idx in rng.choice(flat.size, size=min(8, flat.size), replace=False):
                old = flat[idx]
                flat[idx] = old + eps
                up = loss_and_grad(model, X, y)[0]
                flat[idx] = old - eps
                down = loss_and_grad(model, X, y)[0]
                flat[idx] = old
                fd = (up - down) / (2 * eps)
                g = grads[name].reshape(-1)[idx]
                assert abs(fd - g) <= 1e-3 * max(abs(fd), abs(g), 1e-6)

    def test_memorizes_single_point(self):
        spec = MixtureSpec.default()
        for seed in range(20):
            k = seed % 10
            x = spec.means[k:k + 1]
            model = train_mlp(x, [k], 10, TrainConfig(), np.random.default_rng(seed))
            assert loss_and_grad(model, x, [k])[0] < 1e-2

    def test_deterministic(self, rng):
        X = rng.normal(size=(40, 2))
        y = rng.integers(0, 3, size=40)
        cfg = TrainConfig(epochs=4, warmup_epochs=1, batch_size=16)
        a = train_mlp(X, y, 3, cfg, np.random.default_rng(1))
        b = train_mlp(X, y, 3, cfg, np.random.default_rng(1))
        for name in a.params():
            np.testing.assert_array_equal(a.params()[name], b.params()[name])

    def test_empty_dataset(self, rng):
        with pytest.raises(InputError):
            train_mlp(np.empty((0, 2)), [], 3, TrainConfig(), rng)

    def test_learns_mixture(self):
        spec = MixtureSpec.default(K=3, radius=6.0, variance=0.5)
        r = np.random.default_rng(0)
        X, y = sample_mixture(spec, 600, r)
        model = train_mlp(X, y, 3, TrainConfig(epochs=20, warmup_epochs=2), r)
        Xt, yt = sample_mixture(spec, 600, r)
        assert np.mean(model.predict_proba(Xt).argmax(axis=1) == yt) > 0.97


class TestConditionalMse:
    def test_oracle_model_has_zero_error(self, rng):
        spec = MixtureSpec.default()
        oracle = _Fixed(lambda X: bayes_optimal(spec, X))
        assert conditional_mse([oracle, oracle], rng.normal(size=(50, 2)), spec) == pytest.approx(0.0, abs=1e-30)

    def test_uniform_against_one_hot(self):
        target = np.zeros((1, 10))
        target[0, 3] = 1.0
        assert per_trial_mse(np.full((1, 1, 10), 0.1), target)[0] == pytest.approx(0.9, abs=1e-12)

    def test_manual_recomputation(self, rng):
        spec = MixtureSpec.default(K=3)
        X = rng.normal(size=(3, 2))
        tables = [rng.dirichlet(np.ones(3), size=3) for _ in range(2)]
        models = [_Fixed(lambda Z, t=t: t) for t in tables]
        f = bayes_optimal(spec, X)
        total = 0.0
        for t in tables:
            for i in range(3):
                total += sum((t[i, k] - f[i, k]) ** 2 for k in range(3))
        assert conditional_mse(models, X, spec) == pytest.approx(total / 6, abs=1e-12)

    def test_needs_a_model(self, rng):
        with pytest.raises(InputError):
            conditional_mse([], rng.normal(size=(3, 2)), MixtureSpec.default())


class TestLocalVariance:
    def test_identical_models(self, rng):
        model = MlpModel.init(2, 10, rng)
        v = local_variance([model, model, model], rng.normal(size=(40, 2)), RegionPartition())
        assert all(val == 0.0 for val in v.values())

    def test_two_trials_sample_convention(self):
        p = np.array([0.7, 0.2, 0.1])
        q = np.array([0.1, 0.3, 0.6])
        v = local_variance_from_probs(np.stack([p[None], q[None]]), [17])
        assert v[17] == pytest.approx(np.sum((p - q) ** 2) / 2, abs=1e-15)

    def test_dense_covariance_oracle(self, rng):
        probs = rng.dirichlet(np.ones(4), size=(5, 4))
        regions = [3, 3, 8, 11]
        got = local_variance_from_probs(probs, regions)
        per_point = [np.trace(np.cov(probs[:, i, :].T, ddof=1)) for i in range(4)]
        assert got[3] == pytest.approx((per_point[0] + per_point[1]) / 2, abs=1e-12)
        assert got[8] == pytest.approx(per_point[2], abs=1e-12)
        assert got[11] == pytest.approx(per_point[3], abs=1e-12)
        assert set(got) == {3, 8, 11}

    def test_single_model(self, rng):
        with pytest.raises(InputError):
            local_variance([MlpModel.init(2, 3, rng)], rng.normal(size=(4, 2)), RegionPartition())


def _bound_mp(C0, C1, C2, gamma, N, p, l):
    p, l = mpmath.mpf(p), mpmath.mpf(l)
    b = (1 - p) ** N
    a = (1 - p / l) ** N
    return (1 - b) * (C0 + b * C1) + 2 * l * C2 * (a - b) * (1 - a) + 4 * mpmath.mpf(gamma) ** 2


class TestVarianceBound:
    def test_zero_mass(self):
        assert variance_bound(BoundParams(C0=2, C1=3, C2=5, gamma=0.5, N=100, p=0.0, l=4)) == pytest.approx(1.0)

    def test_full_mass_single_sample(self):
        assert variance_bound(BoundParams(C0=2.5, C1=3, C2=5, gamma=0.5, N=7, p=1.0, l=1)) == pytest.approx(3.5)

    def test_extended_precision_oracle(self, rng):
        mpmath.mp.dps = 50
        for _ in range(200):
            C0, C1, C2, gamma = rng.uniform(0, 3, size=4)
            N = int(rng.integers(1, 5000))
            p = float(10 ** rng.uniform(-6, 0))
            l = int(rng.integers(1, 200))
            got = variance_bound(BoundParams(C0, C1, C2, gamma, N, p, l))
            oracle = _bound_mp(C0, C1, C2, gamma, N, p, l)
            assert abs(got - float(oracle)) <= 1e-12 * abs(float(oracle))

    def test_decay_in_p(self):
        b = [variance_bound(BoundParams(N=1000, p=p, l=10)) for p in (0.01, 0.1, 0.5)]
        assert b[0] >= b[1] >= b[2]

    def test_vectorized_and_empty_regions(self):
        out = variance_bound(BoundParams(N=10, p=np.array([0.0, 0.2, 0.5]), l=np.array([0, 3, 1]), gamma=0.1))
        assert out[0] == pytest.approx(0.04)
        assert out[1] == pytest.approx(variance_bound(BoundParams(N=10, p=0.2, l=3, gamma=0.1)))

    def test_overall_bound(self):
        p = np.array([0.25, 0.75])
        l = np.array([2, 5])
        per = variance_bound(BoundParams(N=20, p=p, l=l, gamma=0.0))
        assert overall_variance_bound(BoundParams(N=20, p=p, l=l, gamma=0.3), p) == pytest.approx(p @ per + 0.36)

    @pytest.mark.parametrize("kw", [{"p": 1.5}, {"p": -0.1}, {"N": 0}, {"l": 0.5}, {"C0": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(InputError):
            variance_bound(BoundParams(**{"p": 0.5, "l": 2, "N": 3, **kw}))


class TestStrategies:
    def test_uniform(self):
        np.testing.assert_array_equal(make_strategy("uniform", n=4).probabilities, [0.25] * 4)

    def test_prop_p(self):
        np.testing.assert_allclose(make_strategy("prop_p", densities=[2, 1, 1]).probabilities, [0.5, 0.25, 0.25])

    def test_prop_inv_p(self):
        np.testing.assert_allclose(make_strategy("prop_inv_p", densities=[2, 1]).probabilities, [1 / 3, 2 / 3])

    def test_prop_inv_p_zero_density_excluded(self):
        np.testing.assert_allclose(make_strategy("prop_inv_p", densities=[0, 2, 1]).probabilities, [0, 1 / 3, 2 / 3])

    def test_model_proxy_needs_registry(self):
        with pytest.raises(InputError):
            make_strategy("model_proxy")

    def test_unknown(self):
        with pytest.raises(InputError):
            make_strategy("greedy", n=3)


class TestAccFm:
    def test_constant(self):
        assert acc_fm_metrics(np.full((4, 4), 0.7)) == pytest.approx((0.7, 0.0))

    def test_two_tasks(self):
        acc, fm = acc_fm_metrics([[0.9, 0.0], [0.5, 0.8]])
        assert acc == pytest.approx(0.65) and fm == pytest.approx(0.4)

    def test_manual_recomputation(self, rng):
        A = rng.random((5, 5))
        T = 5
        acc = sum(A[T - 1, t] for t in range(T)) / T
        fm = 0.0
        for i in range(1, T):  # 1-based task index
            fm += max(A[j - 1, i - 1] - A[T - 1, i - 1] for j in range(i, T))
        assert acc_fm_metrics(A) == (acc, fm / (T - 1))

    def test_single_task(self):
        with pytest.raises(InputError):
            acc_fm_metrics([[0.5]])


class TestRunValex:
    def _config(self, **kw):
        base = dict(n_train=400, n_test=300, trials=1, N_list=(10,), strategies=("uniform",),
                    epochs=3, warmup_epochs=1)
        base.update(kw)
        return ValexConfig(**base)

    def test_minimal_run(self):
        report = run_valex(self._config())
        assert len(report.summary["cells"]) == 1
        assert report.mse("uniform", 10).shape == (1,)
        assert len(report.regions("uniform", 10)) > 0
        assert np.all(np.isnan(report.regions("uniform", 10)[:, 3]))

    def test_regions_have_train_and_test_samples(self):
        cfg = self._config(trials=2)
        report = run_valex(cfg)
        spec = MixtureSpec.default()
        part = RegionPartition()
        r = np.random.default_rng([cfg.seed, 0])
        Xtr, _ = sample_mixture(spec, cfg.n_train, r)
        Xte, _ = sample_mixture(spec, cfg.n_test, r)
        both = set(region_index(part, Xtr)) & set(region_index(part, Xte))
        rows = report.regions("uniform", 10)
        assert set(rows[:, 0].astype(int)) == both
        np.testing.assert_allclose(rows[:, 1], rows[:, 2] / cfg.n_train)

    def test_all_strategies_and_determinism(self):
        cfg = self._config(trials=2, N_list=(5, 20), strategies=("uniform", "prop_p", "prop_inv_p", "model_proxy"))
        a, b = run_valex(cfg), run_valex(cfg)
        assert a.mse_rows == b.mse_rows
        assert len(a.mse_rows) == 2 * 4 * 2
        assert len(a.bin_rows) == 2 * 4 * cfg.n_bins
        assert a.summary["proxy_projection_dim"] == 2

    def test_infeasible_config(self):
        with pytest.raises(InputError):
            run_valex(self._config(N_list=(1000,)))
        with pytest.raises(InputError):
            run_valex(self._config(strategies=("best",)))


class TestBinnedQuartiles:
    def test_left_closed_bins(self):
        p = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
        rows = binned_quartiles(p, np.arange(5.0), 4)
        assert [r[3] for r in rows] == [1, 1, 1, 2]
        assert rows[3][4] == 3.0 and rows[3][-1] == 4.0
