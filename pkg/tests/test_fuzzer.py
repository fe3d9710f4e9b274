import numpy as np
import pytest

from vflkit.fuzzer import (CampaignConfig, CooperationConfig, FuzzSeed,
                           SaliencyCalibration, calibrate_saliency,
                           compute_mask, fuzz_campaign, is_adi,
                           mutate_saliency_aware, participant_saliency_l1,
                           reduce_saliency, run_cooperative_session,
                           saliency_score)
from vflkit.model import LayerSpec, LocalModel
from vflkit.protocol import Coordinator, Participant, VFLSystem
from vflkit.synthesis import JointEvaluator, SynthesisConfig, adi_generate, \
    attack_accuracy, default_bound


def toy_logistic(theta_a=1.0, theta_b=1.0, bias=0.0):
    m_a = LocalModel([LayerSpec("linear", 1, 1, [[theta_a]])])
    m_b = LocalModel([LayerSpec("linear", 1, 1, [[theta_b]])])
    return VFLSystem([Participant("A", [0], m_a),
                      Participant("B1", [1], m_b)],
                     Coordinator("heterolr", bias=np.array([bias])), 2)


def diag_linear_system(weights_a, weights_b):
    """Two-party logistic system with diagonal-style single linear layers."""
    wa = np.atleast_2d(weights_a)
    wb = np.atleast_2d(weights_b)
    m_a = LocalModel([LayerSpec("linear", wa.shape[1], 1, wa)])
    m_b = LocalModel([LayerSpec("linear", wb.shape[1], 1, wb)])
    cols_a = list(range(wa.shape[1]))
    cols_b = list(range(wa.shape[1], wa.shape[1] + wb.shape[1]))
    return VFLSystem([Participant("A", cols_a, m_a),
                      Participant("B1", cols_b, m_b)],
                     Coordinator("heterolr", bias=np.zeros(1)), 2)


class TestMask:
    def test_zero_weights_zero_mask(self):
        system = toy_logistic(theta_a=0.0)
        views = [np.array([[0.4]]), np.array([[1.0]])]
        mask = compute_mask(system, views, "A", 1)
        np.testing.assert_array_equal(mask, [0.0])

    def test_single_feature_self_normalizes(self):
        system = toy_logistic(theta_a=2.0)
        views = [np.array([[0.4]]), np.array([[1.0]])]
        np.testing.assert_array_equal(compute_mask(system, views, "A", 1),
                                      [1.0])

    def test_peaks_follow_weight_magnitudes(self):
        system = diag_linear_system([[0.1, -2.0, 0.5]], [[1.0]])
        views = [np.array([[1.0, 1.0, 1.0]]), np.array([[0.0]])]
        mask = compute_mask(system, views, "A", 1)
        assert mask.argmax() == 1
        np.testing.assert_allclose(mask, [0.05, 1.0, 0.25])

    def test_values_in_unit_interval(self, digits_setup):
        system = digits_setup["system"]
        views = [v[:1] for v in digits_setup["test_views"]]
        mask = compute_mask(system, views, "A", 3)
        assert mask.min() >= 0.0 and mask.max() <= 1.0


class TestSaliencyScore:
    def test_missing_calibration_errors(self, toy_logistic_system):
        views = [np.ones((1, 1)), np.ones((1, 1))]
        with pytest.raises(ValueError, match="calibration"):
            saliency_score(toy_logistic_system, views, "B1", None)

    def test_zero_weight_participant_scores_zero(self):
        system = toy_logistic(theta_b=0.0)
        calib = SaliencyCalibration({"A": 1.0, "B1": 1.0})
        views = [np.ones((3, 1)), np.ones((3, 1))]
        np.testing.assert_array_equal(
            saliency_score(system, views, "B1", calib), [0.0, 0.0, 0.0])

    def test_calibration_row_clamps_to_one(self, credit_setup):
        system = credit_setup["system"]
        train_views = credit_setup["train_views"]
        calib = calibrate_saliency(system, train_views)
        scores = saliency_score(system, train_views, "B1", calib)
        assert scores.max() == 1.0
        assert np.mean(scores >= 1.0) <= 0.02  # 99th-percentile scale

    def test_monotone_in_weight_scale(self):
        # Doubling the benign weights cannot lower the pre-clamp score.
        base = diag_linear_system([[1.0]], [[0.5, 0.25]])
        double = diag_linear_system([[1.0]], [[1.0, 0.5]])
        views = [np.array([[0.3]]), np.array([[1.0, 1.0]])]
        l1_base = participant_saliency_l1(base, views)[0, 1]
        l1_double = participant_saliency_l1(double, views)[0, 1]
        assert l1_double >= l1_base


class TestIsAdi:
    def test_constant_system(self):
        system = toy_logistic(theta_a=0.0, theta_b=0.0, bias=4.0)
        s = [np.random.default_rng(0).standard_normal((10, 1))]
        assert is_adi([0.0], s, 1, system)
        assert not is_adi([0.0], s, 0, system)

    def test_echoing_system_fails_on_diverse_sample(self):
        system = toy_logistic(theta_a=0.0, theta_b=5.0)
        s = [np.array([[-2.0], [2.0]])]
        assert not is_adi([0.0], s, 1, system)

    def test_cross_module_consistency(self):
        system = toy_logistic()
        s_rows = np.linspace(-3, 3, 7)[:, None]
        cfg = SynthesisConfig(strategy="random", threshold=1.0,
                              max_rounds=200, inner_lr=0.5)
        cand = adi_generate(np.array([0.5]), system, 0, cfg, [s_rows])
        assert cand.accuracy == 1.0
        assert is_adi(cand.input, [s_rows], 0, system)

    def test_stable_fraction(self):
        system = toy_logistic()
        s = [np.array([[-1.0], [-2.0], [5.0]])]  # one disagreeing row
        assert not is_adi([-1.0], s, 0, system, stable_fraction=1.0)
        assert is_adi([-1.0], s, 0, system, stable_fraction=0.6)


class TestMutation:
    def make_seed(self, system, x, s_views, calib):
        ev = JointEvaluator(system, s_views)
        label, _ = ev.majority_label(x)
        from vflkit.fuzzer import _benign_mean_score
        score = _benign_mean_score(system, x, s_views, calib)
        return FuzzSeed(x, label, score, 0, x.copy())

    def test_zero_mask_weight_is_noise_plus_clamp(self, credit_setup):
        system = credit_setup["system"]
        s_views = [credit_setup["test_views"][1][:5]]
        bound = default_bound(credit_setup["train_views"][0])
        calib = calibrate_saliency(system, credit_setup["train_views"])
        x = credit_setup["test_views"][0][0]
        seed = self.make_seed(system, x, s_views, calib)
        rng1 = np.random.default_rng(5)
        out = mutate_saliency_aware(seed, s_views, system, 0.0, bound, rng1)
        rng2 = np.random.default_rng(5)
        noise = rng2.standard_normal(x.shape[0]) * (0.1 * np.sqrt(bound))
        np.testing.assert_allclose(
            out, x + np.clip(noise, -bound, bound), atol=1e-12)

    def test_all_agreeing_sample_augments(self):
        # Every pairing already predicts the target: the mask branch only
        # adds, so the mutation moves weakly-positive features upward.
        system = toy_logistic(theta_a=1.0, theta_b=0.2)
        s_views = [np.array([[0.5], [1.0]])]
        calib = SaliencyCalibration({"A": 1.0, "B1": 1.0})
        x = np.array([4.0])
        seed = self.make_seed(system, x, s_views, calib)
        bound = np.array([50.0])
        rng = np.random.default_rng(0)
        out = mutate_saliency_aware(seed, s_views, system, 0.3, bound, rng,
                                    noise_std_factor=0.0)
        # no noise, two agreeing rows, each adds 0.3 * mask * sqrt(bound)
        assert out[0] > x[0]

    def test_result_within_bound_of_origin(self, credit_setup):
        system = credit_setup["system"]
        s_views = [credit_setup["test_views"][1][:5]]
        bound = default_bound(credit_setup["train_views"][0])
        calib = calibrate_saliency(system, credit_setup["train_views"])
        x = credit_setup["test_views"][0][1]
        seed = self.make_seed(system, x, s_views, calib)
        rng = np.random.default_rng(1)
        cursor = seed
        for _ in range(8):
            out = mutate_saliency_aware(cursor, s_views, system, 0.5, bound,
                                        rng)
            assert np.all(np.abs(out - x) <= bound + 1e-12)
            cursor = FuzzSeed(out, seed.target, seed.best_score, 0, x.copy())


class TestReduceSaliency:
    def test_identical_input_not_a_reduction(self, credit_setup):
        system = credit_setup["system"]
        s_views = [credit_setup["test_views"][1][:5]]
        calib = calibrate_saliency(system, credit_setup["train_views"])
        x = credit_setup["test_views"][0][0]
        from vflkit.fuzzer import _benign_mean_score
        score = _benign_mean_score(system, x, s_views, calib)
        seed = FuzzSeed(x, 0, score, 0, x.copy())
        better, new_score = reduce_saliency(seed, x, system, s_views, calib)
        assert not better and new_score == score

    def test_zeroing_benign_pathway_reduces(self):
        # Constructed toy: moving the score deep negative shrinks the benign
        # side's sigmoid gradient.
        system = toy_logistic()
        s_views = [np.array([[0.1], [-0.2]])]
        calib = SaliencyCalibration({"A": 1.0, "B1": 1.0})
        from vflkit.fuzzer import _benign_mean_score
        x0 = np.array([0.0])
        seed = FuzzSeed(x0, 0, _benign_mean_score(system, x0, s_views, calib),
                        0, x0.copy())
        better, _ = reduce_saliency(seed, np.array([-8.0]), system, s_views,
                                    calib)
        assert better


class TestCampaign:
    def _setup(self, credit_setup, n_corpus=6, **overrides):
        system = credit_setup["system"]
        test_views = credit_setup["test_views"]
        bound = default_bound(credit_setup["train_views"][0])
        calib = calibrate_saliency(system, credit_setup["train_views"])
        rng = np.random.default_rng(3)
        idx = rng.choice(test_views[0].shape[0], size=n_corpus, replace=False)
        corpus = test_views[0][idx]
        kwargs = {"max_iter": 12, "energy": 5, "bound": bound, "seed": 4}
        kwargs.update(overrides)
        cfg = CampaignConfig(**kwargs)
        return system, corpus, [test_views[1][:25]], cfg, [test_views[1]], calib

    def test_already_dominating_seed_found_quickly(self, credit_setup):
        system = credit_setup["system"]
        test_views = credit_setup["test_views"]
        ev = JointEvaluator(system, [test_views[1]])
        shares = [ev.majority_label(test_views[0][i])[1] for i in range(300)]
        strong = int(np.argmax(shares))
        assert shares[strong] >= 0.95
        bound = default_bound(credit_setup["train_views"][0])
        calib = calibrate_saliency(system, credit_setup["train_views"])
        cfg = CampaignConfig(max_iter=2, energy=3, bound=bound, seed=0)
        res = fuzz_campaign(test_views[0][strong][None, :], system,
                            [test_views[1][:25]], cfg, [test_views[1]], calib)
        assert len(res.adis) >= 1

    def test_mutation_budget_respected(self, credit_setup):
        args = self._setup(credit_setup)
        res = fuzz_campaign(*args)
        assert res.n_mutations <= args[3].max_iter * args[3].energy

    def test_deterministic_replay(self, credit_setup):
        args = self._setup(credit_setup)
        a = fuzz_campaign(*args)
        b = fuzz_campaign(*args)
        assert len(a.adis) == len(b.adis)
        for ca, cb in zip(a.adis, b.adis):
            assert ca.perturbation.tobytes() == cb.perturbation.tobytes()
        assert a.log == b.log

    def test_emitted_adis_verified_on_full_view(self, credit_setup):
        args = self._setup(credit_setup, n_corpus=10, max_iter=10)
        res = fuzz_campaign(*args)
        system, _, _, _, full_views, _ = args
        for cand in res.adis:
            r = attack_accuracy(cand.input, system, cand.target, full_views)
            assert r >= 0.95
            assert cand.provenance == "fuzz"

    def test_campaign_requires_bound_and_calibration(self, credit_setup):
        system = credit_setup["system"]
        views = [credit_setup["test_views"][1][:5]]
        cfg = CampaignConfig(max_iter=1, energy=1,
                             bound=np.ones(13), seed=0)
        with pytest.raises(ValueError, match="calibration"):
            fuzz_campaign(np.zeros((1, 13)), system, views, cfg,
                          [credit_setup["test_views"][1]], None)
        cfg2 = CampaignConfig(max_iter=1, energy=1, seed=0)
        calib = calibrate_saliency(system, credit_setup["train_views"])
        with pytest.raises(ValueError, match="bound"):
            fuzz_campaign(np.zeros((1, 13)), system, views, cfg2,
                          [credit_setup["test_views"][1]], calib)


class TestCooperativeSession:
    def _run(self, credit_setup, n_outer=1, n_inner=1, n_corpus=2, seed=0):
        system = credit_setup["system"]
        test_views = credit_setup["test_views"]
        bound = default_bound(credit_setup["train_views"][0])
        corpus = test_views[0][:n_corpus]
        cfg = CooperationConfig(n_noise=4, n_inner=n_inner, n_outer=n_outer,
                                bound=bound, seed=seed)
        return run_cooperative_session(system, corpus,
                                       [test_views[1][:12]], cfg)

    def test_single_outer_iteration_step_order(self, credit_setup):
        result = self._run(credit_setup, n_outer=1, n_inner=1, n_corpus=1)
        steps = [m.step for m in result.messages]
        # step 1 appears first; 2..9 in order exactly once
        assert steps[0] == "1"
        core = [s for s in steps if s != "1"]
        assert [s for s in core if s in "23456789"] == \
            ["2", "3", "3", "3", "4", "4", "5", "6", "7", "7", "7", "8", "8",
             "9"]

    def test_benign_payload_kinds_restricted(self, credit_setup):
        result = self._run(credit_setup, n_outer=3, n_inner=2)
        benign_ids = {"B1"}
        kinds = {m.payload_kind for m in result.messages
                 if m.sender in benign_ids}
        assert kinds <= {"local_output", "saliency_score"}

    def test_ratio_log_recomputation(self, credit_setup):
        result = self._run(credit_setup, n_outer=2, n_inner=2)
        for entry in result.ratio_log:
            assert entry["ratio_a"] == pytest.approx(
                entry["score_masked_a"] / max(entry["score_orig_a"], 1e-12))
            assert entry["ratio_b"] == pytest.approx(
                entry["score_masked_b"] / max(entry["score_orig_b"], 1e-12))

    def test_found_candidates_dominate_sample(self, credit_setup):
        system = credit_setup["system"]
        result = self._run(credit_setup, n_outer=12, n_inner=4, n_corpus=6,
                           seed=2)
        for cand in result.found:
            assert cand.accuracy > 0.95
            assert cand.provenance == "cooperative-fuzz"
