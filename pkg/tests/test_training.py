import math

import numpy as np
import numpy.testing as npt
import pytest

from mft import data as D
from mft import model as M
from mft import tensor as T
from mft import training as TR
from mft.tensor import Rng, Tensor

from util import tiny_config


def make_samples(n, cfg, seed=0, num_labels=None):
    rng = Rng(seed)
    c = num_labels or cfg.num_aus
    out = []
    for i in range(n):
        out.append(
            D.Sample(
                id=f"x{i:03d}",
                subject=f"subj{i % 4}",
                modalities={m.name: rng.child(f"{i}/{m.name}").normal(m.shape) for m in cfg.modalities},
                labels=Rng(seed).child(f"labels/{i}").bernoulli(0.5, c),
            )
        )
    return out


class TestClassWeights:
    def test_hand_example_exact(self):
        labels = np.array([[1, 0], [1, 0], [1, 1]])
        w = TR.compute_class_weights(labels)
        npt.assert_array_equal(w.p, [3.0, 1.0])

    def test_uniform_columns_all_one(self):
        labels = np.tile([[1, 1, 1], [0, 0, 0]], (4, 1))
        npt.assert_array_equal(TR.compute_class_weights(labels).p, [1.0, 1.0, 1.0])

    def test_single_au(self):
        npt.assert_array_equal(TR.compute_class_weights(np.array([[1], [0], [1]])).p, [1.0])

    def test_zero_column_names_the_au(self):
        labels = np.array([[1, 0, 1], [1, 0, 0]])
        with pytest.raises(T.ContractError, match="AU 2"):
            TR.compute_class_weights(labels)

    def test_all_zero_rejected(self):
        with pytest.raises(T.ContractError):
            TR.compute_class_weights(np.zeros((3, 2)))

    def test_min_weight_exactly_one_and_permutation_consistent(self):
        rng = Rng(3)
        labels = (rng.uniform((40, 6)) < rng.uniform((6,))).astype(float)
        labels[:, 2] = 1.0  # guarantee no empty column dominates
        labels[0, :] = 1.0
        w = TR.compute_class_weights(labels).p
        assert w.min() == 1.0
        perm = Rng(4).permutation(6)
        w_perm = TR.compute_class_weights(labels[:, perm]).p
        npt.assert_array_equal(w_perm, w[perm])

    def test_inverted_weights_favor_rare_aus(self):
        labels = np.array([[1, 0], [1, 0], [1, 1]])
        w = TR.compute_class_weights(labels, invert=True)
        npt.assert_array_equal(w.p, [1.0, 3.0])


class TestWeightedBce:
    def test_reduces_to_unweighted_bce(self):
        rng = Rng(5)
        probs = rng.uniform((4, 3)) * 0.98 + 0.01
        targets = rng.bernoulli(0.5, (4, 3))
        w = TR.ClassWeights(np.ones(3))
        got = TR.weighted_bce(Tensor(probs), targets, w).item()
        expect = -(targets * np.log(probs) + (1 - targets) * np.log(1 - probs)).sum() / 4
        assert abs(got - expect) < 1e-12

    def test_half_probabilities_give_c_ln2(self):
        probs = np.full((3, 5), 0.5)
        targets = Rng(6).bernoulli(0.5, (3, 5))
        got = TR.weighted_bce(Tensor(probs), targets, TR.ClassWeights(np.ones(5))).item()
        assert abs(got - 5 * math.log(2)) < 1e-9

    def test_single_weighted_positive(self):
        got = TR.weighted_bce(Tensor([[0.9]]), np.array([[1.0]]), TR.ClassWeights([2.0])).item()
        assert abs(got - (-2 * math.log(0.9))) < 1e-9

    def test_nonnegative_and_zero_at_exact_match(self):
        targets = Rng(7).bernoulli(0.5, (6, 4))
        w = TR.ClassWeights(np.ones(4) * 1.7)
        probs = np.clip(targets, 1e-15, 1 - 1e-15)
        assert TR.weighted_bce(Tensor(probs), targets, w).item() >= 0.0
        rng = Rng(8)
        loose = rng.uniform((6, 4))
        assert TR.weighted_bce(Tensor(loose), targets, w).item() > 0.0

    def test_saturated_predictions_stay_finite(self):
        probs = np.array([[0.0, 1.0]])
        targets = np.array([[1.0, 0.0]])
        value = TR.weighted_bce(Tensor(probs), targets, TR.ClassWeights([1.0, 1.0])).item()
        assert np.isfinite(value)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            TR.weighted_bce(Tensor(np.ones((2, 3)) * 0.5), np.ones((3, 2)), TR.ClassWeights(np.ones(3)))

    def test_gradient_matches_finite_differences(self):
        rng = Rng(9)
        logits = T.parameter(rng.normal((3, 4)))
        targets = rng.bernoulli(0.5, (3, 4))
        w = TR.ClassWeights(rng.uniform((4,)) + 1.0)

        def loss():
            return TR.weighted_bce(T.sigmoid(logits), targets, w)

        report = T.gradcheck(loss, {"logits": logits})
        assert report["logits"] < 1e-6


class TestCombinedLoss:
    def test_hand_value(self):
        cfg = TR.TrainConfig(lambda1=0.6, lambda2=0.4)
        got = TR.combined_loss(Tensor(1.0), Tensor(0.5), cfg).item()
        assert got == pytest.approx(0.8, abs=1e-15)

    def test_degenerate_lambda_keeps_fusion_only(self):
        cfg = TR.TrainConfig(lambda1=1.0, lambda2=0.0)
        got = TR.combined_loss(Tensor(0.37), Tensor(123.0), cfg).item()
        assert got == pytest.approx(0.37, abs=1e-15)

    def test_default_coefficients(self):
        cfg = TR.TrainConfig()
        assert (cfg.lambda1, cfg.lambda2) == (0.6, 0.4)

    def test_negative_lambda_rejected(self):
        with pytest.raises(T.ContractError):
            TR.TrainConfig(lambda1=-0.1)


class TestLrSchedule:
    def test_step_schedule_values(self):
        cfg = TR.TrainConfig()  # lr0 0.01, decay at epoch 4 by 10x
        values = [TR.lr_at_epoch(e, cfg) for e in range(1, 6)]
        npt.assert_allclose(values, [0.01, 0.01, 0.01, 0.001, 0.0001])

    def test_non_increasing(self):
        cfg = TR.TrainConfig(epochs=10)
        values = [TR.lr_at_epoch(e, cfg) for e in range(1, 12)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_requires_one_based_epoch(self):
        with pytest.raises(T.ContractError):
            TR.lr_at_epoch(0, TR.TrainConfig())


class TestSgdStep:
    def _store(self, value):
        ps = M.ParameterStore()
        t = ps.add("layer/w", np.array([value]))
        return ps, t

    def test_vanilla_gradient_descent(self):
        ps, t = self._store(1.0)
        t.grad = np.array([0.5])
        state = TR.OptimizerState.for_params(ps)
        TR.sgd_step(ps, state, 0.1, TR.TrainConfig(momentum=0.0, weight_decay=0.0))
        npt.assert_allclose(t.data, [0.95])

    def test_zero_grad_is_noop(self):
        ps, t = self._store(1.0)
        t.grad = np.array([0.0])
        state = TR.OptimizerState.for_params(ps)
        TR.sgd_step(ps, state, 0.1, TR.TrainConfig(momentum=0.9, weight_decay=0.0))
        npt.assert_allclose(t.data, [1.0])

    def test_two_momentum_steps_hand_iterated(self):
        # f(x) = x^2 / 2, grad = x, from x=1 with lr 0.1 and momentum 0.9
        ps, t = self._store(1.0)
        state = TR.OptimizerState.for_params(ps)
        cfg = TR.TrainConfig(momentum=0.9, weight_decay=0.0)
        t.grad = t.data.copy()
        TR.sgd_step(ps, state, 0.1, cfg)
        npt.assert_allclose(t.data, [0.9])
        t.grad = t.data.copy()
        TR.sgd_step(ps, state, 0.1, cfg)
        npt.assert_allclose(t.data, [0.72])

    def test_weight_decay_skips_biases_and_layer_norm(self):
        ps = M.ParameterStore()
        w = ps.add("a/w", np.array([1.0]))
        b = ps.add("a/b", np.array([1.0]))
        g = ps.add("a/ln/gamma", np.array([1.0]))
        for t in (w, b, g):
            t.grad = np.array([0.0])
        state = TR.OptimizerState.for_params(ps)
        TR.sgd_step(ps, state, 1.0, TR.TrainConfig(momentum=0.0, weight_decay=0.1))
        assert w.data[0] == pytest.approx(0.9)
        assert b.data[0] == 1.0 and g.data[0] == 1.0

    def test_missing_grad_names_parameter(self):
        ps, _ = self._store(1.0)
        state = TR.OptimizerState.for_params(ps)
        with pytest.raises(T.ContractError, match="layer/w"):
            TR.sgd_step(ps, state, 0.1, TR.TrainConfig())


class TestFit:
    def test_loss_decreases_on_synthetic_data(self, tmp_path):
        spec = D.SynthSpec(num_aus=3, subjects=4, samples_per_subject=10, alpha_dim=6, beta_dim=5)
        mani = D.synth_generate(spec, 31, tmp_path / "ds")
        samples = D.load_all(mani)
        cfg = tiny_config(dropout_rate=0.1)
        tcfg = TR.TrainConfig(lr0=0.05, epochs=5, batch_size=8, decay_start_epoch=10, seed=2)
        _, logs = TR.fit("full", samples, samples, cfg, tcfg)
        assert logs[-1].loss < logs[0].loss

    def test_training_is_bit_deterministic(self):
        cfg = tiny_config()
        samples = make_samples(16, cfg, seed=12)
        tcfg = TR.TrainConfig(lr0=0.05, epochs=2, batch_size=8, decay_start_epoch=10, seed=3)
        p1, l1 = TR.fit("full", samples, samples, cfg, tcfg)
        p2, l2 = TR.fit("full", samples, samples, cfg, tcfg)
        for name, t in p1.items():
            assert t.data.tobytes() == p2[name].data.tobytes(), name
        assert [r.loss for r in l1] == [r.loss for r in l2]

    def test_single_variant_trains_one_pipeline_only(self):
        cfg = tiny_config()
        samples = make_samples(16, cfg, seed=13)
        tcfg = TR.TrainConfig(lr0=0.05, epochs=1, batch_size=8, seed=4)
        params, _ = TR.fit("single:beta", samples, samples, cfg, tcfg)
        assert all(("beta" in n) or n.startswith(("pipe2/", "cls2/")) for n in params.names())

    def test_single_reduces_to_plain_bce_construction(self):
        # with unit class weights the per-batch loss is exactly the mean BCE of the head
        cfg = tiny_config(dropout_rate=0.0)
        samples = make_samples(8, cfg, seed=14)
        for s in samples:  # uniform labels give unit class weights
            s.labels = np.tile([1.0, 0.0, 1.0], 1)[: cfg.num_aus]
            s.labels[1] = 1.0
        tcfg = TR.TrainConfig(lr0=0.01, epochs=1, batch_size=8, seed=5)
        params, logs = TR.fit("single:alpha", samples, samples, cfg, tcfg)
        w = TR.compute_class_weights(D.stack_labels(samples))
        npt.assert_array_equal(w.p, np.ones(cfg.num_aus))
        assert logs[0].loss_fusion is None and logs[0].loss_beta is None

    def test_nan_data_aborts_with_step_diagnostic(self):
        cfg = tiny_config()
        samples = make_samples(8, cfg, seed=15)
        samples[0].modalities["alpha"][0] = np.nan
        tcfg = TR.TrainConfig(lr0=0.05, epochs=1, batch_size=8, seed=6)
        with pytest.raises(TR.NumericalError, match="epoch 1"):
            TR.fit("full", samples, samples, cfg, tcfg)

    def test_late_fusion_trained_per_branch(self):
        cfg = tiny_config()
        samples = make_samples(12, cfg, seed=16)
        tcfg = TR.TrainConfig(lr0=0.05, epochs=1, batch_size=6, seed=7)
        params, logs, ecfg = TR.train_variant("late_fusion", samples, samples, cfg, tcfg)
        assert ecfg.num_stages == 0
        branches = {row.branch for row in logs}
        assert branches == {"alpha", "beta"}
        assert any(n.startswith("cls1/") for n in params.names())
        assert any(n.startswith("cls2/") for n in params.names())

    def test_unknown_variant_rejected(self):
        cfg = tiny_config()
        with pytest.raises(T.ContractError):
            TR.parse_variant("fancy", cfg)


class TestPredict:
    def test_full_prediction_uses_fusion_head(self):
        cfg = tiny_config()
        samples = make_samples(5, cfg, seed=17)
        params = M.init_full_params(cfg, Rng(18))
        probs = TR.predict("full", params, cfg, samples)
        inputs = D.stack_inputs(samples, ["alpha", "beta"])
        lf, _ = M.mft_forward(inputs, params, cfg, M.EVAL)
        npt.assert_array_equal(probs, T.sigmoid(lf).data)

    def test_average_heads_flag(self):
        cfg = tiny_config(average_heads=True)
        samples = make_samples(4, cfg, seed=19)
        params = M.init_full_params(cfg, Rng(20))
        probs = TR.predict("full", params, cfg, samples)
        inputs = D.stack_inputs(samples, ["alpha", "beta"])
        lf, lb = M.mft_forward(inputs, params, cfg, M.EVAL)
        npt.assert_allclose(probs, 0.5 * (T.sigmoid(lf).data + T.sigmoid(lb).data), atol=1e-15)

    def test_chunked_prediction_matches_single_pass(self):
        # blas blocking differs by batch size, so bit equality is not expected
        cfg = tiny_config()
        samples = make_samples(9, cfg, seed=21)
        params = M.init_full_params(cfg, Rng(22))
        a = TR.predict("full", params, cfg, samples, chunk=4)
        b = TR.predict("full", params, cfg, samples, chunk=100)
        npt.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
