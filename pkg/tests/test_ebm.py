"""Energy scoring, Langevin sampling, contrastive gradients, and training."""

import numpy as np
import pytest

from pude import data, ebm
from pude.ebm import (
    EbmError,
    EmTrainConfig,
    EnergyPair,
    LangevinConfig,
    energy,
    energy_input_grad,
    langevin_sample,
    mle_grad,
    score_em,
    train_pude_em,
)
from pude.neural import ACT_IDENTITY, DenseNet, Layer


class QuadraticEnergy:
    """E(x) = ||x||^2 / 2; stationary Langevin law is the standard normal."""

    def value(self, x):
        return 0.5 * (x**2).sum(axis=1)

    def grad(self, x):
        return x


def _linear_energy(weights):
    w = np.asarray(weights, dtype=np.float64)[None, :]
    return DenseNet([Layer(w, np.zeros(1), ACT_IDENTITY)])


class TestEnergy:
    def test_linear_sum_energy_hand_case(self):
        net = _linear_energy([1.0, 1.0])
        assert energy(net, np.array([1.0, 2.0])) == pytest.approx(3.0)

    def test_batch_equals_per_row(self):
        rng = np.random.default_rng(0)
        net = DenseNet.build([3, 8, 1], rng)
        x = rng.standard_normal((5, 3))
        batch = energy(net, x)
        rows = np.array([energy(net, x[i]) for i in range(5)])
        np.testing.assert_allclose(batch, rows, rtol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        net = DenseNet.build([2, 4, 1], rng)
        x = rng.standard_normal((3, 2))
        assert np.array_equal(energy(net, x), energy(net, x))

    def test_pair_requires_scalar_output(self):
        rng = np.random.default_rng(2)
        bad = DenseNet.build([2, 3, 2], rng)
        ok = DenseNet.build([2, 3, 1], rng)
        with pytest.raises(EbmError):
            EnergyPair(g_p=bad, g_q=ok)


class TestLangevin:
    def test_stationary_at_critical_point_in_small_step_limit(self):
        # Gradient is zero at the init points; with eps -> 0 the noise term
        # (std sqrt(eps)) vanishes too, so the chain stays put.
        init = np.zeros((4, 3))
        cfg = LangevinConfig(step_size=1e-20, steps=50, init="persistent", seed=0)
        out = langevin_sample(QuadraticEnergy(), cfg, 4, init_points=init)
        np.testing.assert_allclose(out, init, atol=1e-8)

    def test_quadratic_energy_moments(self):
        # Stationary law of the discretized chain has variance
        # eps / (1 - (1 - eps/2)^2) ~ 1.005 for eps = 0.02.
        cfg = LangevinConfig(step_size=0.02, steps=800, init="persistent", seed=3)
        init = np.zeros((1000, 2))
        out = langevin_sample(QuadraticEnergy(), cfg, 1000, init_points=init)
        assert np.all(np.abs(out.mean(axis=0)) < 0.15)
        assert np.all((out.var(axis=0) > 0.8) & (out.var(axis=0) < 1.2))

    def test_same_seed_identical_samples(self):
        cfg = LangevinConfig(step_size=0.01, steps=30, init="data", seed=11)
        init = np.ones((8, 2))
        a = langevin_sample(QuadraticEnergy(), cfg, 8, init_points=init)
        b = langevin_sample(QuadraticEnergy(), cfg, 8, init_points=init)
        assert np.array_equal(a, b)

    def test_noise_init_uses_bounds(self):
        cfg = LangevinConfig(step_size=1e-12, steps=1, init="noise", seed=0)
        lo, hi = np.array([-1.0, 0.0]), np.array([1.0, 2.0])
        out = langevin_sample(QuadraticEnergy(), cfg, 200, bounds=(lo, hi))
        assert np.all(out[:, 0] > -1.1) and np.all(out[:, 0] < 1.1)
        assert np.all(out[:, 1] > -0.1) and np.all(out[:, 1] < 2.1)

    def test_eps_noise_reading(self):
        assert LangevinConfig(step_size=0.04, noise="sqrt-eps").noise_std == pytest.approx(0.2)
        assert LangevinConfig(step_size=0.04, noise="eps").noise_std == pytest.approx(0.04)

    def test_nonfinite_state_reports_step(self):
        class Exploding:
            def value(self, x):
                return (x**2).sum(axis=1)

            def grad(self, x):
                return np.full_like(x, 1e308)

        cfg = LangevinConfig(step_size=1.0, steps=5, init="persistent", seed=0)
        with np.errstate(over="ignore"), pytest.raises(ebm.SamplingError, match="step"):
            langevin_sample(Exploding(), cfg, 2, init_points=np.ones((2, 2)))

    def test_config_validation(self):
        with pytest.raises(EbmError):
            LangevinConfig(step_size=0.0)
        with pytest.raises(EbmError):
            LangevinConfig(steps=0)
        with pytest.raises(EbmError):
            LangevinConfig(init="magic")


class TestMleGrad:
    def test_matched_batches_give_exact_zero(self):
        rng = np.random.default_rng(4)
        net = DenseNet.build([3, 6, 1], rng)
        batch = rng.standard_normal((7, 3))
        grads = mle_grad(net, batch, batch)
        assert all(np.all(g == 0.0) for g in grads)

    def test_linear_energy_closed_form(self):
        # E(x) = w . x: dE/dw = x, so the estimator is
        # mean(data) - mean(samples) for the weight row.
        net = _linear_energy([0.3, -0.7])
        rng = np.random.default_rng(5)
        data_batch = rng.standard_normal((10, 2))
        samp_batch = rng.standard_normal((6, 2))
        grads = mle_grad(net, data_batch, samp_batch)
        expected = data_batch.mean(axis=0) - samp_batch.mean(axis=0)
        np.testing.assert_allclose(grads[0][0], expected, rtol=1e-12)
        np.testing.assert_allclose(grads[1], [0.0], atol=1e-15)  # bias cancels

    def test_step_reduces_data_energy_relative_to_samples(self):
        rng = np.random.default_rng(6)
        net = DenseNet.build([2, 8, 1], rng)
        data_batch = rng.standard_normal((20, 2))
        samp_batch = data_batch + 3.0
        grads = mle_grad(net, data_batch, samp_batch)
        gap_before = energy(net, data_batch).mean() - energy(net, samp_batch).mean()
        params = [p - 1e-3 * g for p, g in zip(net.get_params(), grads)]
        net.set_params(params)
        gap_after = energy(net, data_batch).mean() - energy(net, samp_batch).mean()
        assert gap_after < gap_before

    def test_empty_batch_rejected(self):
        net = _linear_energy([1.0])
        with pytest.raises(EbmError):
            mle_grad(net, np.empty((0, 1)), np.ones((2, 1)))


class TestScoreEm:
    def test_identical_nets_score_zero(self):
        rng = np.random.default_rng(7)
        net = DenseNet.build([2, 4, 1], rng)
        pair = EnergyPair(g_p=net, g_q=net.copy())
        x = rng.standard_normal((10, 2))
        np.testing.assert_allclose(score_em(pair, x), 0.0, atol=1e-15)

    def test_constant_output_shift_preserves_ranking(self):
        rng = np.random.default_rng(8)
        pair = EnergyPair(DenseNet.build([2, 4, 1], rng), DenseNet.build([2, 4, 1], rng))
        x = rng.standard_normal((25, 2))
        scores = score_em(pair, x)
        shifted_q = pair.g_q.copy()
        shifted_q.layers[-1].bias = shifted_q.layers[-1].bias + 5.0
        shifted = score_em(EnergyPair(pair.g_p, shifted_q), x)
        np.testing.assert_allclose(shifted, scores + 5.0, rtol=1e-9, atol=1e-9)
        assert np.array_equal(np.argsort(-scores), np.argsort(-shifted))


def _synthetic_task(n=320, lp=24, seed=0):
    spec = data.SynthSpec(
        dim=2, pos_mean=(2, 0), neg_mean=(-2, 0), class_prior=0.5, n=n, seed=seed
    )
    corpus = data.gen_synthetic(spec)
    task = data.make_transductive_task(corpus, lp_count=lp, seed=seed)
    return corpus, task


def _small_config(seed=0, **kw):
    defaults = dict(
        epochs=4,
        batch_size=128,
        hidden=16,
        depth=3,
        langevin=LangevinConfig(step_size=0.05, steps=5, seed=seed),
        seed=seed,
    )
    defaults.update(kw)
    return EmTrainConfig(**defaults)


class TestTraining:
    def test_defaults_match_reference_operating_point(self):
        cfg = EmTrainConfig()
        assert (cfg.alpha, cfg.beta, cfg.gamma0) == (1.0, 1.0, 1.0)
        assert cfg.lr == 1e-3
        assert cfg.hidden == 512
        assert cfg.depth == 4

    def test_gamma_zero_disables_risk(self):
        corpus, task = _synthetic_task()
        _, trace = train_pude_em(task, corpus, _small_config(gamma0=0.0))
        assert all(row["risk_loss"] == 0.0 for row in trace)
        assert all(row["gamma"] == 0.0 for row in trace)

    def test_gamma_schedule_monotone_non_increasing(self):
        corpus, task = _synthetic_task()
        for schedule in ("constant", "linear", "exponential"):
            _, trace = train_pude_em(
                task, corpus, _small_config(gamma_schedule=schedule, epochs=3)
            )
            gammas = [row["gamma"] for row in trace]
            assert all(b <= a for a, b in zip(gammas, gammas[1:]))

    def test_trace_has_all_components(self):
        corpus, task = _synthetic_task()
        _, trace = train_pude_em(task, corpus, _small_config(epochs=2))
        assert len(trace) == 2
        for row in trace:
            for key in ("epoch", "mle_loss_p", "mle_loss_q", "risk_loss", "gamma"):
                assert key in row
                assert np.isfinite(row[key])

    def test_training_reproducible_bitwise(self):
        corpus, task = _synthetic_task(n=200, lp=16)
        pair_a, trace_a = train_pude_em(task, corpus, _small_config(epochs=2, seed=9))
        pair_b, trace_b = train_pude_em(task, corpus, _small_config(epochs=2, seed=9))
        for pa, pb in zip(pair_a.g_p.get_params(), pair_b.g_p.get_params()):
            assert np.array_equal(pa, pb)
        for pa, pb in zip(pair_a.g_q.get_params(), pair_b.g_q.get_params()):
            assert np.array_equal(pa, pb)
        assert trace_a == trace_b

    def test_mean_score_separates_synthetic_classes(self):
        corpus, task = _synthetic_task(n=400, lp=30, seed=1)
        cfg = _small_config(
            epochs=20, batch_size=64, lr=3e-3, hidden=24, energy_reg=1e-2, seed=1
        )
        pair, _ = train_pude_em(task, corpus, cfg)
        truth = corpus.truth_map()
        u = task.u_sorted
        scores = score_em(pair, corpus.vectors_for(u).astype(np.float64))
        pos = [s for d, s in zip(u, scores) if truth[d] == data.TRUTH_POSITIVE]
        neg = [s for d, s in zip(u, scores) if truth[d] == data.TRUTH_NEGATIVE]
        assert np.mean(pos) > np.mean(neg)

    def test_checkpoint_roundtrip(self, tmp_path):
        corpus, task = _synthetic_task(n=150, lp=12)
        pair, _ = train_pude_em(task, corpus, _small_config(epochs=1))
        path = tmp_path / "pair.pun"
        ebm.save_pair(pair, path)
        loaded = ebm.load_pair(path)
        x = corpus.vectors[:7].astype(np.float64)
        np.testing.assert_array_equal(score_em(pair, x), score_em(loaded, x))

    def test_trace_csv_columns(self, tmp_path):
        corpus, task = _synthetic_task(n=150, lp=12)
        _, trace = train_pude_em(task, corpus, _small_config(epochs=2))
        path = tmp_path / "trace.csv"
        ebm.write_trace_csv(trace, path)
        header = path.read_text().splitlines()[0]
        assert header == "epoch,mle_loss_p,mle_loss_q,risk_loss,gamma"
