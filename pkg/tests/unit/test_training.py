"""
Unit tests for end-to-end training, the optimizer and risk scoring.
"""

import dataclasses

import numpy as np
import pytest

from mgprnn import autodiff as ad
from mgprnn.exceptions import ConfigError, TrainingError
from mgprnn.features import assemble_inputs, static_inputs
from mgprnn.mgp import MgpHyperparams, MgpMode, posterior_moments
from mgprnn.rnn import RnnParams, bce_loss, rnn_forward
from mgprnn.training import (
    AdamState,
    Model,
    ModelVariant,
    adam_step,
    clip_gradients,
    encounter_rng,
    fit,
    loss_and_gradients,
    make_scorer,
    mc_expected_loss,
    risk_score,
    risk_score_trajectory,
)
from tests.conftest import TEST_SEED, make_encounter


def toy_model(hyperparams, variant=ModelVariant.MGP_RNN):
    rnn = RnnParams.init(6, hidden=3, num_layers=1, rng=TEST_SEED)
    return Model(variant, num_vars=2, num_baseline=2, num_meds=2, hyperparams=hyperparams, rnn=rnn)


def frozen_loss(model, enc, xi, k):
    return mc_expected_loss(
        enc, model.hyperparams, model.rnn, 1, k, xi=xi, cg_tol=1e-12, cg_max_iter=500
    )


def exactly_observed_encounter(label=0):
    """Every grid point of both variables observed, so a near-noiseless GP leaves no posterior spread."""
    obs = [(float(t), m, 0.4 * t - 0.6 * m) for t in range(4) for m in range(2)]
    return make_encounter("exact", obs, event_time=3.0, label=label, baseline=(0.2, -0.1), meds=[(1.5, (1, 0))])


def mean_path_probability(model, enc):
    grid = enc.grid_times()
    mean = posterior_moments(enc, grid, model.hyperparams, cg_tol=1e-13, cg_max_iter=500).mean_matrix()
    seq = assemble_inputs(np.asarray(mean)[None], static_inputs(enc, len(grid), model.num_meds))
    return rnn_forward(model.rnn, seq[0])


class TestEncounterRng:
    """Tests for keyed random streams."""

    def test_same_keys_same_stream(self):
        """Test that equal keys give equal draws regardless of other calls."""
        first = encounter_rng(1, "enc7", 3).standard_normal(4)
        encounter_rng(2, "other").standard_normal(10)
        np.testing.assert_array_equal(encounter_rng(1, "enc7", 3).standard_normal(4), first)

    def test_different_keys_differ(self):
        """Test that changing any key changes the stream."""
        base = encounter_rng(1, "enc7").random()
        assert encounter_rng(1, "enc8").random() != base
        assert encounter_rng(2, "enc7").random() != base


class TestAdam:
    """Tests for the ADAM update and gradient clipping."""

    def test_first_step_moves_by_learning_rate(self):
        """Test that the bias-corrected first step moves each entry by about lr * sign(g)."""
        params = {"w": np.array([1.0, -2.0, 0.5])}
        grads = {"w": np.array([0.5, -3.0, 0.0])}
        new, state = adam_step(params, grads, AdamState.zeros(params), lr=0.1)
        np.testing.assert_allclose(new["w"], [0.9, -1.9, 0.5], atol=1e-6)
        assert state.step == 1

    def test_parameters_without_gradient_are_unchanged(self):
        """Test that a parameter absent from the gradients keeps its value."""
        params = {"a": np.ones(2), "b": np.ones(3)}
        new, _ = adam_step(params, {"a": np.ones(2)}, AdamState.zeros(params), lr=0.1)
        np.testing.assert_array_equal(new["b"], params["b"])

    def test_non_finite_gradient_names_parameter(self):
        """Test that a NaN gradient raises TrainingError naming the parameter."""
        params = {"rnn.head.b": np.zeros(())}
        with pytest.raises(TrainingError) as info:
            adam_step(params, {"rnn.head.b": np.array(np.nan)}, AdamState.zeros(params), lr=0.1)
        assert info.value.parameter == "rnn.head.b"

    def test_unknown_gradient_raises(self):
        """Test that a gradient for a missing parameter raises TrainingError."""
        params = {"a": np.zeros(1)}
        with pytest.raises(TrainingError):
            adam_step(params, {"b": np.zeros(1)}, AdamState.zeros(params), lr=0.1)

    def test_clip_rescales_to_max_norm(self):
        """Test that gradients above the cap are rescaled to the cap."""
        clipped, norm = clip_gradients({"a": np.array([3.0, 0.0]), "b": np.array([4.0])}, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(clipped["a"], [0.6, 0.0])
        np.testing.assert_allclose(clipped["b"], [0.8])

    def test_clip_leaves_small_gradients(self):
        """Test that gradients below the cap are unchanged."""
        clipped, norm = clip_gradients({"a": np.array([0.3, 0.4])}, 5.0)
        assert norm == pytest.approx(0.5)
        np.testing.assert_array_equal(clipped["a"], [0.3, 0.4])


class TestEndToEndGradient:
    """Tests that gradients flow from the loss through the RNN, Lanczos and CG to the GP."""

    def test_matches_finite_differences(self, toy_encounter, multitask_hyperparams):
        """Test every MGP parameter and one entry per RNN tensor against central differences."""
        model = toy_model(multitask_hyperparams)
        xi = np.random.default_rng(TEST_SEED).standard_normal((12, 1))
        k = 4

        tape = ad.Tape()
        bound = model.bind(tape)
        loss = mc_expected_loss(
            toy_encounter, bound.hyperparams, bound.rnn, 1, k, xi=xi, cg_tol=1e-12, cg_max_iter=500
        )
        grads = tape.backward(loss).named()
        params = model.params()
        assert set(grads) == set(params)

        eps = 1e-5
        for name, value in params.items():
            indices = list(np.ndindex(value.shape)) if name.startswith("mgp.") else [next(np.ndindex(value.shape))]
            for index in indices:
                plus = {**params, name: value.copy()}
                minus = {**params, name: value.copy()}
                plus[name][index] += eps
                minus[name][index] -= eps
                numeric = (
                    float(frozen_loss(model.with_params(plus), toy_encounter, xi, k))
                    - float(frozen_loss(model.with_params(minus), toy_encounter, xi, k))
                ) / (2 * eps)
                assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-6), (name, index)

    @pytest.mark.slow
    def test_every_entry_matches_finite_differences_on_several_encounters(self, multitask_hyperparams):
        """Test every parameter entry at full Krylov rank on five seeded small encounters."""
        rng = np.random.default_rng(TEST_SEED)
        model = toy_model(multitask_hyperparams)
        params = model.params()
        eps = 1e-5
        for i in range(5):
            event_time = float(rng.uniform(2.0, 3.5))
            obs = [
                (float(rng.uniform(0.0, event_time)), int(rng.integers(2)), float(rng.standard_normal()))
                for _ in range(3)
            ]
            enc = make_encounter(
                f"fd{i}", obs, event_time, label=i % 2, baseline=tuple(rng.standard_normal(2)), meds=[(1.0, (0, 1))]
            )
            k = 2 * enc.num_grid
            xi = rng.standard_normal((k, 1))

            tape = ad.Tape()
            bound = model.bind(tape)
            loss = mc_expected_loss(enc, bound.hyperparams, bound.rnn, 1, k, xi=xi, cg_tol=1e-12, cg_max_iter=500)
            grads = tape.backward(loss).named()
            for name, value in params.items():
                for index in np.ndindex(value.shape):
                    plus = {**params, name: value.copy()}
                    minus = {**params, name: value.copy()}
                    plus[name][index] += eps
                    minus[name][index] -= eps
                    numeric = (
                        float(frozen_loss(model.with_params(plus), enc, xi, k))
                        - float(frozen_loss(model.with_params(minus), enc, xi, k))
                    ) / (2 * eps)
                    assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-6), (enc.id, name, index)

    def test_loss_and_gradients_covers_all_parameters(self, toy_encounter, tiny_train_config):
        """Test that one training step yields a finite gradient for every parameter."""
        model = Model.initialize("mgp-rnn", 2, 2, 2, tiny_train_config)
        loss, grads = loss_and_gradients(model, toy_encounter, tiny_train_config, encounter_rng(1))
        assert np.isfinite(loss) and loss > 0.0
        assert set(grads) == set(model.params())
        assert all(np.all(np.isfinite(g)) for g in grads.values())

    def test_raw_rnn_has_no_gp_gradients(self, toy_encounter, tiny_train_config):
        """Test that the raw-feature baseline trains only RNN weights."""
        model = Model.initialize("raw-rnn", 2, 2, 2, tiny_train_config)
        _, grads = loss_and_gradients(model, toy_encounter, tiny_train_config, encounter_rng(1))
        assert grads and all(name.startswith("rnn.") for name in grads)


class TestMcExpectedLoss:
    """Tests for the Monte Carlo expected cross-entropy."""

    def test_degenerate_posterior_gives_plain_cross_entropy(self):
        """Test that without posterior spread the expected loss is the cross-entropy of the mean path."""
        model = toy_model(MgpHyperparams.initial(2, lengthscale=2.0, noise=1e-10))
        enc = exactly_observed_encounter(label=1)
        loss = mc_expected_loss(enc, model.hyperparams, model.rnn, 10, 8, seed=3, cg_tol=1e-13, cg_max_iter=500)
        expected = float(bce_loss(mean_path_probability(model, enc), 1))
        assert float(loss) == pytest.approx(expected, abs=1e-4)

    def test_matches_per_draw_average(self, toy_encounter, multitask_hyperparams):
        """Test that the estimate equals the average cross-entropy over densely computed draws."""
        model = toy_model(multitask_hyperparams)
        grid = toy_encounter.grid_times()
        post = posterior_moments(toy_encounter, grid, multitask_hyperparams, cg_tol=1e-13, cg_max_iter=500)
        num = 40
        xi = np.random.default_rng(TEST_SEED).standard_normal((post.dim, num))
        loss = mc_expected_loss(
            toy_encounter, multitask_hyperparams, model.rnn, num, post.dim, xi=xi, cg_tol=1e-13, cg_max_iter=500
        )

        cov = post.dense_covariance()
        w, v = np.linalg.eigh(0.5 * (cov + cov.T))
        root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
        draws = (post.mean[:, None] + root @ xi).T.reshape(num, 2, len(grid))
        static = static_inputs(toy_encounter, len(grid), 2)
        per_draw = [
            float(bce_loss(rnn_forward(model.rnn, assemble_inputs(draw[None], static)[0]), toy_encounter.label))
            for draw in draws
        ]
        assert float(loss) == pytest.approx(np.mean(per_draw), abs=1e-5)

    def test_mean_flag_ignores_draws(self, toy_encounter, multitask_hyperparams):
        """Test that use_mean gives the cross-entropy of the mean path whatever the sample count."""
        model = toy_model(multitask_hyperparams)
        expected = float(bce_loss(mean_path_probability(model, toy_encounter), toy_encounter.label))
        for num in (1, 7):
            loss = mc_expected_loss(
                toy_encounter, multitask_hyperparams, model.rnn, num, use_mean=True, cg_tol=1e-13, cg_max_iter=500
            )
            assert float(loss) == pytest.approx(expected, abs=1e-10)


class TestVariants:
    """Tests relating the model variants to each other."""

    def test_shared_gp_equals_identity_multitask(self, toy_encounter):
        """Test that gp-rnn-shared scores like mgp-rnn with an identity task covariance."""
        multitask = toy_model(MgpHyperparams.initial(2, MgpMode.MULTITASK, 2.0, 0.1))
        shared = toy_model(
            MgpHyperparams.initial(2, MgpMode.INDEPENDENT_SHARED, 2.0, 0.1), ModelVariant.GP_RNN_SHARED
        )
        np.testing.assert_allclose(multitask.hyperparams.task_covariance(), np.eye(2), atol=1e-12)
        a = risk_score(toy_encounter, multitask, 3, 8, seed=5, cg_tol=1e-12, cg_max_iter=500)
        b = risk_score(toy_encounter, shared, 3, 8, seed=5, cg_tol=1e-12, cg_max_iter=500)
        assert a == pytest.approx(b, rel=1e-6)

    def test_mean_variant_runs_on_posterior_mean(self, toy_encounter, multitask_hyperparams):
        """Test that mgp-rnn-mean feeds the posterior mean to the RNN."""
        model = toy_model(multitask_hyperparams, ModelVariant.MGP_RNN_MEAN)
        grid = toy_encounter.grid_times()
        mean = posterior_moments(toy_encounter, grid, multitask_hyperparams).mean_matrix()
        seq = assemble_inputs(np.asarray(mean)[None], static_inputs(toy_encounter, len(grid), 2))
        expected = float(rnn_forward(model.rnn, seq[0]))
        assert risk_score(toy_encounter, model, 25, seed=1) == pytest.approx(expected, abs=1e-12)
        assert risk_score(toy_encounter, model, 25, seed=2) == pytest.approx(expected, abs=1e-12)

    def test_mean_variant_matches_sampling_without_posterior_spread(self):
        """Test that mgp-rnn-mean and mgp-rnn agree when the posterior covariance vanishes."""
        hp = MgpHyperparams.initial(2, lengthscale=2.0, noise=1e-10)
        enc = exactly_observed_encounter()
        sampled = risk_score(enc, toy_model(hp), 20, 8, seed=3, cg_tol=1e-13, cg_max_iter=500)
        mean = risk_score(enc, toy_model(hp, ModelVariant.MGP_RNN_MEAN), 20, 8, seed=3, cg_tol=1e-13, cg_max_iter=500)
        assert sampled == pytest.approx(mean, abs=1e-4)

    def test_variant_properties(self):
        """Test which variants use the GP and the RNN."""
        assert ModelVariant("gp-rnn-indep").mgp_mode is MgpMode.INDEPENDENT_PER_VARIABLE
        assert not ModelVariant.RAW_RNN.uses_mgp
        assert not ModelVariant.PLR.uses_rnn


class TestFit:
    """Tests for the training loop."""

    def test_zero_learning_rate_keeps_parameters(self, toy_encounters, tiny_train_config):
        """Test that lr = 0 returns the initial parameters."""
        cfg = dataclasses.replace(tiny_train_config, learning_rate=0.0)
        result = fit(toy_encounters[:4], toy_encounters[4:], cfg, num_vars=2, num_meds=2)
        initial = Model.initialize("mgp-rnn", 2, 1, 2, cfg).params()
        fitted = result.model.params()
        for name, value in initial.items():
            np.testing.assert_array_equal(fitted[name], value)
        assert len(result.log) == 2
        assert result.best_epoch == 1

    def test_training_updates_gp_hyperparameters(self, toy_encounters, tiny_train_config):
        """Test that a positive learning rate moves the GP hyperparameters too."""
        result = fit(toy_encounters[:4], toy_encounters[4:], tiny_train_config, num_vars=2, num_meds=2)
        initial = Model.initialize("mgp-rnn", 2, 1, 2, tiny_train_config).params()
        fitted = result.model.params()
        assert not np.array_equal(fitted["mgp.log_noise"], initial["mgp.log_noise"])
        assert all(np.isfinite(r.train_loss) and np.isfinite(r.valid_loss) for r in result.log)

    def test_fit_is_deterministic_across_threads(self, toy_encounters, tiny_train_config):
        """Test that equal seeds give identical parameters with one or several threads."""
        one = fit(toy_encounters[:4], toy_encounters[4:], tiny_train_config, num_vars=2, num_meds=2)
        many = fit(
            toy_encounters[:4],
            toy_encounters[4:],
            dataclasses.replace(tiny_train_config, threads=3),
            num_vars=2,
            num_meds=2,
        )
        a, b = one.model.params(), many.model.params()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_strong_l2_shrinks_rnn_weights(self, toy_encounters, tiny_train_config):
        """Test that a very large L2 penalty drives the recurrent weights toward zero."""
        cfg = dataclasses.replace(
            tiny_train_config, learning_rate=0.02, minibatch_size=1, max_epochs=3, patience=3, l2_lambda=1e6
        )
        name = "rnn.layer0.w_recurrent"
        initial = np.linalg.norm(Model.initialize("mgp-rnn", 2, 1, 2, cfg).params()[name])
        strong = fit(toy_encounters[:4], toy_encounters[4:], cfg, num_vars=2, num_meds=2)
        free = fit(
            toy_encounters[:4], toy_encounters[4:], dataclasses.replace(cfg, l2_lambda=0.0), num_vars=2, num_meds=2
        )
        shrunk = np.linalg.norm(strong.model.params()[name])
        assert shrunk < 0.5 * initial
        assert shrunk < np.linalg.norm(free.model.params()[name])

    def test_per_variable_length_scales_diverge_from_shared(self, toy_encounters, tiny_train_config):
        """Test that one epoch moves gp-rnn-indep's length scales apart while gp-rnn-shared keeps one."""
        cfg = dataclasses.replace(tiny_train_config, minibatch_size=1, max_epochs=1, learning_rate=0.05)
        indep = fit(
            toy_encounters[:4],
            toy_encounters[4:],
            dataclasses.replace(cfg, model_variant="gp-rnn-indep"),
            num_vars=2,
            num_meds=2,
        )
        shared = fit(
            toy_encounters[:4],
            toy_encounters[4:],
            dataclasses.replace(cfg, model_variant="gp-rnn-shared"),
            num_vars=2,
            num_meds=2,
        )
        per_variable = indep.model.params()["mgp.log_lengthscale"]
        common = shared.model.params()["mgp.log_lengthscale"]
        assert per_variable.shape == (2,)
        assert common.size == 1
        assert abs(per_variable[0] - per_variable[1]) > 1e-6
        assert not np.allclose(per_variable, float(common), atol=1e-6)

    def test_unequal_length_scales_give_different_scores_after_one_epoch(self, toy_encounters, tiny_train_config):
        """Test that gp-rnn-indep started from unequal length scales scores differently from gp-rnn-shared."""
        cfg = dataclasses.replace(tiny_train_config, max_epochs=1)
        indep_cfg = dataclasses.replace(cfg, model_variant="gp-rnn-indep", init_lengthscale=[1.0, 3.0])
        shared_cfg = dataclasses.replace(cfg, model_variant="gp-rnn-shared", init_lengthscale=2.0)
        indep = fit(toy_encounters[:4], toy_encounters[4:], indep_cfg, num_vars=2, num_meds=2)
        shared = fit(toy_encounters[:4], toy_encounters[4:], shared_cfg, num_vars=2, num_meds=2)
        scales = np.exp(indep.model.params()["mgp.log_lengthscale"])
        assert scales[0] != pytest.approx(scales[1], rel=1e-3)
        held_out = toy_encounters[4]
        assert make_scorer(indep.model, indep_cfg)(held_out) != pytest.approx(
            make_scorer(shared.model, shared_cfg)(held_out), abs=1e-6
        )

    def test_training_loss_decreases(self, toy_encounters, tiny_train_config):
        """Test that full-batch training lowers the training loss on a toy cohort."""
        cfg = dataclasses.replace(
            tiny_train_config,
            model_variant="mgp-rnn-mean",
            learning_rate=0.05,
            max_epochs=15,
            patience=15,
            l2_lambda=0.0,
        )
        result = fit(toy_encounters[:4], toy_encounters[4:], cfg, num_vars=2, num_meds=2)
        assert len(result.log) == 15
        assert result.log[-1].train_loss < result.log[0].train_loss

    @pytest.mark.parametrize("variant", ["mgp-rnn-mean", "gp-rnn-shared", "gp-rnn-indep", "raw-rnn"])
    def test_other_variants_train(self, variant, toy_encounters, tiny_train_config):
        """Test that every RNN variant completes an epoch with finite losses."""
        cfg = dataclasses.replace(tiny_train_config, model_variant=variant, max_epochs=1)
        result = fit(toy_encounters[:4], toy_encounters[4:], cfg, num_vars=2, num_meds=2)
        assert result.model.variant.value == variant
        assert len(result.log) == 1
        assert np.isfinite(result.log[0].valid_loss)

    def test_plr_selects_lambda_by_validation(self, toy_encounters, tiny_train_config):
        """Test that the logistic baseline fits one model per lambda and keeps one of them."""
        cfg = dataclasses.replace(tiny_train_config, model_variant="plr")
        result = fit(toy_encounters[:3], toy_encounters[3:], cfg, num_vars=2, num_meds=2)
        assert len(result.log) == len(cfg.plr_lambdas)
        assert result.model.plr.l2_lambda in cfg.plr_lambdas
        best = min(result.log, key=lambda r: r.valid_loss)
        assert result.best_epoch == best.epoch
        assert 0.0 < risk_score(toy_encounters[0], result.model) < 1.0

    def test_empty_cohort_raises(self, toy_encounters, tiny_train_config):
        """Test that an empty validation cohort raises ConfigError."""
        with pytest.raises(ConfigError):
            fit(toy_encounters, [], tiny_train_config)

    def test_overlapping_cohorts_raise(self, toy_encounters, tiny_train_config):
        """Test that sharing encounters between cohorts raises ConfigError."""
        with pytest.raises(ConfigError):
            fit(toy_encounters[:3], toy_encounters[2:], tiny_train_config)


class TestRiskScores:
    """Tests for risk scoring."""

    def test_scorer_is_reproducible(self, toy_encounter, tiny_train_config):
        """Test that a scorer returns the same value on repeated calls."""
        model = Model.initialize("mgp-rnn", 2, 2, 2, tiny_train_config)
        scorer = make_scorer(model, tiny_train_config)
        assert scorer(toy_encounter) == scorer(toy_encounter)

    def test_trajectory_has_one_score_per_hour(self, toy_encounter, tiny_train_config):
        """Test that the trajectory covers hours 0..floor(event_time) with scores in (0, 1)."""
        model = Model.initialize("mgp-rnn", 2, 2, 2, tiny_train_config)
        trajectory = risk_score_trajectory(toy_encounter, model, tiny_train_config)
        assert [hour for hour, _ in trajectory] == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
        assert all(0.0 < score < 1.0 for _, score in trajectory)
