import numpy as np
import pytest

from utils.errors import ConfigError
from rl_workflows.schemas import SynthConfig, N_ACTIONS, SOFA_MAX
from rl_workflows.data_core import NO_ACTION, trajectory_lags, states_from_lags
from rl_workflows.cohort_synth import (
    LACTATE_FLOOR, GroundTruth, build_ground_truth, clinician_action_proba, emit_observations, generate_cohort,
    simulate_episodes, true_policy_value,
)
from rl_workflows.reward import discounted_return


def test_generation_is_deterministic():
    config = SynthConfig(n_patients=50, seed=11)
    first, _ = generate_cohort(config)
    second, _ = generate_cohort(config)
    assert first == second
    for a, b in zip(first, second):
        assert np.array_equal(a.iv_doses, b.iv_doses)


def test_cohort_invariants(synth_cohort):
    cohort, truth = synth_cohort
    cfg = truth.config
    assert len({t.patient_id for t in cohort}) == cfg.n_patients
    for traj in cohort:
        assert cfg.min_horizon <= traj.length <= cfg.max_horizon
        sofa = traj.observations[:, truth.schema.sofa_index]
        assert np.all((sofa >= 0) & (sofa <= SOFA_MAX))
        assert np.all(traj.observations[:, truth.schema.lactate_index] >= LACTATE_FLOOR)
        assert traj.schema == truth.schema
        assert np.all((traj.actions >= 0) & (traj.actions < N_ACTIONS))
        assert traj.rewards[-1] == (15.0 if traj.survived else -15.0)


def test_lactate_emission():
    truth = build_ground_truth(SynthConfig(lactate_noise_std=0.5))
    x = np.array([0.0, 1.0, 3.0, 3.0])
    noise = np.array([0.0, 0.0, 1.0, -20.0])
    obs = emit_observations(truth, x, noise, np.zeros((4, 10)))
    lactate = obs[:, truth.schema.lactate_index]
    np.testing.assert_allclose(lactate[:3], np.log1p(np.exp(x[:3])) + 0.5 * noise[:3])
    assert lactate[3] == LACTATE_FLOOR


def test_invalid_config():
    with pytest.raises(ValueError):
        SynthConfig(treatment_effect=[[0.0] * 5] * 4)
    with pytest.raises(ValueError):
        SynthConfig(min_horizon=8, max_horizon=4)
    with pytest.raises(ConfigError):
        generate_cohort({"n_patients": 10})


def test_ground_truth_round_trip(synth_cohort):
    _, truth = synth_cohort
    assert GroundTruth.from_dict(truth.to_dict()) == truth


class TestClinician:
    def states(self, truth, n=200):
        rng = np.random.default_rng(0)
        obs = np.abs(rng.normal(5, 4, size=(n, truth.schema.d_raw)))
        obs[:, truth.schema.sofa_index] = rng.integers(0, SOFA_MAX + 1, size=n)
        return np.repeat(obs[:, None, :], 4, axis=1)

    def test_normalized(self, synth_cohort):
        _, truth = synth_cohort
        proba = clinician_action_proba(truth, states_from_lags(self.states(truth)))
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)

    def test_high_temperature_is_uniform(self):
        truth = build_ground_truth(SynthConfig(clinician_temperature=1e6))
        proba = clinician_action_proba(truth, states_from_lags(self.states(truth)))
        assert np.all(proba.max(axis=1) - proba.min(axis=1) < 1e-3)

    def test_low_temperature_is_greedy(self):
        truth = build_ground_truth(SynthConfig(clinician_temperature=1e-6))
        proba = clinician_action_proba(truth, states_from_lags(self.states(truth)))
        assert np.all(proba.max(axis=1) >= 0.999)

    def test_single_state(self, synth_cohort):
        _, truth = synth_cohort
        state = states_from_lags(self.states(truth, 1))[0]
        assert clinician_action_proba(truth, state).shape == (N_ACTIONS,)

    def test_policy_ignores_action_lags(self, synth_cohort):
        cohort, truth = synth_cohort
        obs_lags, act_lags = trajectory_lags(cohort[0], include_current_action=False)
        policy = truth.clinician_policy()
        blank = np.full_like(act_lags, NO_ACTION)
        np.testing.assert_array_equal(policy.action_proba(obs_lags, act_lags), policy.action_proba(obs_lags, blank))


class TestOracle:
    def test_gamma_zero_is_first_reward(self, synth_cohort):
        _, truth = synth_cohort
        policy = truth.clinician_policy()
        value, _ = true_policy_value(truth, policy, 400, 0.0, seed=3)
        episodes = simulate_episodes(truth, policy, 400, seed=3, with_doses=False)
        assert value == pytest.approx(np.mean([t.rewards[0] for t in episodes]), abs=1e-12)

    def test_common_random_numbers(self, synth_cohort):
        _, truth = synth_cohort
        policy = truth.clinician_policy()
        assert true_policy_value(truth, policy, 200, 0.99, 5) == true_policy_value(truth, policy, 200, 0.99, 5)

    def test_invalid_arguments(self, synth_cohort):
        _, truth = synth_cohort
        with pytest.raises(ConfigError):
            true_policy_value(truth, truth.clinician_policy(), 0, 0.99, 0)
        with pytest.raises(ConfigError):
            true_policy_value(truth, truth.clinician_policy(), 10, 1.5, 0)

    @pytest.mark.slow
    def test_matches_logged_cohort(self):
        cohort, truth = generate_cohort(SynthConfig(n_patients=4000, seed=21))
        returns = np.array([discounted_return(t.rewards, 0.99) for t in cohort])
        value, se = true_policy_value(truth, truth.clinician_policy(), 4000, 0.99, seed=99)
        cohort_se = returns.std(ddof=1) / np.sqrt(len(returns))
        assert abs(value - returns.mean()) <= 3 * np.hypot(se, cohort_se)

    @pytest.mark.slow
    def test_standard_error_scaling(self, synth_cohort):
        _, truth = synth_cohort
        policy = truth.clinician_policy()
        _, se_small = true_policy_value(truth, policy, 2000, 0.99, seed=1)
        _, se_large = true_policy_value(truth, policy, 4000, 0.99, seed=2)
        assert 0.8 / np.sqrt(2) <= se_large / se_small <= 1.2 / np.sqrt(2)


@pytest.mark.slow
def test_low_mortality_survival():
    cohort, _ = generate_cohort(SynthConfig(n_patients=10_000, mortality_slope=0.0, mortality_intercept=-10.0, seed=4))
    assert np.mean([t.survived for t in cohort]) >= 0.999


@pytest.mark.slow
def test_survival_monotone_in_mortality_slope():
    rates = []
    for slope in (0.4, 0.8, 1.6):
        cohort, _ = generate_cohort(SynthConfig(n_patients=10_000, mortality_slope=slope, seed=8))
        rates.append(np.mean([t.survived for t in cohort]))
    assert rates[0] >= rates[1] >= rates[2]


@pytest.mark.slow
def test_no_drift_no_effect_random_walk():
    config = SynthConfig(n_patients=10_000, severity_drift=0.0, treatment_effect=[[0.0] * 5 for _ in range(5)], seed=2)
    cohort, truth = generate_cohort(config)
    s = truth.schema.sofa_index
    diff = np.array([t.observations[-1, s] - t.observations[0, s] for t in cohort])
    se = diff.std(ddof=1) / np.sqrt(len(diff))
    assert abs(diff.mean()) <= 4 * se + 0.05
