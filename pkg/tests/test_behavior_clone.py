import math

import numpy as np
import pytest
import torch

from utils.errors import DomainError, InsufficientDataError, ShapeError
from rl_workflows.schemas import BcConfig, SynthConfig, N_ACTIONS
from rl_workflows.data_core import cohort_lags, fit_standardizer, cohort_observations
from rl_workflows.behavior_clone import (
    PolicyNet, bc_dataset, bc_fit, bc_loss, bc_predict_proba, cross_entropy, fit_behavior, total_variation,
)
from rl_workflows.cohort_synth import generate_cohort
from rl_workflows.policies import FixedPolicy


def threshold_data(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 8))
    return X, np.where(X[:, 0] < 0, 0, 7)


def small_net(seed=0, **kwargs):
    torch.manual_seed(seed)
    return PolicyNet(history_dim=8, hidden=(16, 16), **kwargs)


class TestPrediction:
    def test_distribution(self):
        proba = bc_predict_proba(small_net(), np.random.default_rng(0).normal(size=(5, 8)))
        assert proba.shape == (5, N_ACTIONS)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(proba > 0)

    def test_single_history(self):
        assert bc_predict_proba(small_net(), np.zeros(8)).shape == (N_ACTIONS,)

    def test_wrong_width(self):
        with pytest.raises(ShapeError):
            bc_predict_proba(small_net(), np.zeros((2, 7)))


class TestLosses:
    def test_cross_entropy_uniform(self):
        assert cross_entropy(np.full(N_ACTIONS, 1 / N_ACTIONS), 3) == pytest.approx(math.log(N_ACTIONS))

    def test_cross_entropy_floor(self):
        proba = np.zeros(N_ACTIONS)
        proba[0] = 1.0
        assert cross_entropy(proba, 1) == pytest.approx(-math.log(1e-12))
        assert cross_entropy(proba, 0) == 0.0

    def test_cross_entropy_domain(self):
        with pytest.raises(DomainError):
            cross_entropy(np.full(N_ACTIONS, 1 / N_ACTIONS), 25)
        with pytest.raises(DomainError):
            cross_entropy(np.full(N_ACTIONS, 0.5), 0)

    def test_total_variation(self):
        p = np.eye(N_ACTIONS)[[0, 1]]
        assert total_variation(p, p) == 0.0
        assert total_variation(p, p[::-1]) == pytest.approx(1.0)

    def test_penalty_covers_weights_only(self):
        net = small_net(l2=0.5)
        X, y = threshold_data(10, 0)
        with torch.no_grad():
            for name, p in net.named_parameters():
                p.fill_(0.0 if name.endswith("weight") else 3.0)
            assert float(bc_loss(net, X, y)) == pytest.approx(math.log(N_ACTIONS))


class TestFit:
    def test_learns_realizable_rule(self):
        config = BcConfig(hidden=(32, 32), epochs=20, lr=1e-2, l2=0.0, seed=1)
        model, curve = bc_fit(threshold_data(4000, 0), threshold_data(1000, 1), config)
        assert max(row["val_accuracy"] for row in curve) >= 0.95
        X, y = threshold_data(200, 2)
        assert np.mean(bc_predict_proba(model, X).argmax(axis=1) == y) >= 0.9

    def test_memorizes_small_set(self):
        rng = np.random.default_rng(3)
        X, y = rng.normal(size=(20, 8)), rng.integers(0, N_ACTIONS, size=20)
        config = BcConfig(hidden=(64, 64), epochs=300, lr=1e-2, l2=0.0, seed=0)
        model, curve = bc_fit((X, y), (X[:0], y[:0]), config)
        assert np.all(np.isnan([row["val_loss"] for row in curve]))
        assert np.array_equal(bc_predict_proba(model, X).argmax(axis=1), y)

    def test_deterministic_per_seed(self):
        config = BcConfig(hidden=(16, 16), epochs=3, batch_size=32, seed=5)
        train, val = threshold_data(100, 0), threshold_data(30, 1)
        model_a, curve_a = bc_fit(train, val, config)
        model_b, curve_b = bc_fit(train, val, config)
        assert curve_a == curve_b
        np.testing.assert_array_equal(bc_predict_proba(model_a, val[0]), bc_predict_proba(model_b, val[0]))

    def test_bad_inputs(self):
        X, y = threshold_data(10, 0)
        with pytest.raises(DomainError):
            bc_fit((X, np.full(10, 25)), (X, y), BcConfig(epochs=1))
        with pytest.raises(InsufficientDataError):
            bc_fit((X[:0], y[:0]), (X, y), BcConfig(epochs=1))
        with pytest.raises(ShapeError):
            bc_fit((X, y[:5]), (X, y), BcConfig(epochs=1))


class TestCohort:
    def test_dataset_masks_current_action(self, synth_cohort, synth_standardizer):
        cohort, truth = synth_cohort
        histories, labels = bc_dataset(cohort[:20], synth_standardizer)
        assert len(histories) == len(labels) == sum(t.length for t in cohort[:20])
        d = truth.schema.d_raw
        assert np.all(histories[:, d:d + N_ACTIONS] == 0.0)

    def test_policy_interface(self, synth_cohort, synth_standardizer):
        cohort, _ = synth_cohort
        model, curve = fit_behavior(cohort[:200], cohort[200:], BcConfig(hidden=(16, 16), epochs=2), synth_standardizer)
        assert len(curve) == 2
        obs_lags, act_lags = cohort_lags(cohort[200:210], include_current_action=False)
        proba = model.action_proba(obs_lags, act_lags)
        assert proba.shape == (len(obs_lags), N_ACTIONS)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.slow
    def test_closer_to_clinician_than_uniform(self):
        cohort, truth = generate_cohort(SynthConfig(n_patients=1000, seed=5))
        standardizer = fit_standardizer(cohort_observations(cohort[:800]))
        model, _ = fit_behavior(cohort[:700], cohort[700:800], BcConfig(epochs=20, lr=3e-3), standardizer)
        obs_lags, act_lags = cohort_lags(cohort[800:], include_current_action=False)
        clinician = truth.clinician_policy().action_proba(obs_lags, act_lags)
        learned_gap = total_variation(model.action_proba(obs_lags, act_lags), clinician)
        uniform_gap = total_variation(FixedPolicy.uniform().action_proba(obs_lags, act_lags), clinician)
        assert learned_gap < 0.5 * uniform_gap

    @pytest.mark.slow
    def test_distance_to_clinician_shrinks_with_data(self):
        gaps = []
        for n_patients in (100, 400, 1600):
            per_seed = []
            for seed in range(3):
                cohort, truth = generate_cohort(SynthConfig(n_patients=n_patients + 200, seed=seed))
                train, held_out = cohort[:n_patients], cohort[n_patients:]
                standardizer = fit_standardizer(cohort_observations(train))
                model, _ = fit_behavior(train, held_out[:100], BcConfig(epochs=15, lr=3e-3, seed=seed), standardizer)
                obs_lags, act_lags = cohort_lags(held_out[100:], include_current_action=False)
                clinician = truth.clinician_policy().action_proba(obs_lags, act_lags)
                per_seed.append(total_variation(model.action_proba(obs_lags, act_lags), clinician))
            gaps.append(np.mean(per_seed))
        assert gaps[0] > gaps[1] > gaps[2]


def test_backward_matches_finite_differences():
    net = small_net(4, l2=1e-3)
    rng = np.random.default_rng(4)
    X, y = rng.normal(size=(12, 8)), rng.integers(0, N_ACTIONS, size=12)
    params = dict(net.named_parameters())
    grads = dict(zip(params, torch.autograd.grad(bc_loss(net, X, y), list(params.values()))))

    def loss() -> float:
        with torch.no_grad():
            return float(bc_loss(net, X, y))

    step = 1e-6
    for name, param in params.items():
        flat = param.data.view(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // 3)):
            original = flat[i].item()
            flat[i] = original + step
            up = loss()
            flat[i] = original - step
            down = loss()
            flat[i] = original
            numeric = (up - down) / (2 * step)
            analytic = grads[name].reshape(-1)[i].item()
            assert numeric == pytest.approx(analytic, rel=1e-4, abs=1e-7), name
