import numpy as np
import pandas as pd
import pytest
import torch

from utils.errors import DomainError
from rl_workflows.schemas import BcConfig, BlendSpec, DynamicsConfig, PpoConfig, SynthConfig, N_ACTIONS, N_LAGS
from rl_workflows.data_core import NO_ACTION, cohort_lags, cohort_observations, fit_standardizer
from rl_workflows.behavior_clone import PolicyNet, fit_behavior
from rl_workflows.cohort_synth import generate_cohort, true_policy_value
from rl_workflows.dynamics import RolloutBatch, fit_dynamics
from rl_workflows.policies import FixedPolicy
from rl_workflows.policy_opt import (
    batch_log_proba, blend, collect_model_rollouts, init_from_bc, kl_divergence, ppo_advantages, ppo_surrogate,
    ppo_update, reinforce_objective, reinforce_update, sofa_regime, train_policy, write_diagnostics_csv,
)

D = 2


def bandit_policy():
    """Constant logits: actions 0 and 1 share almost all the mass."""
    torch.manual_seed(0)
    policy = PolicyNet(history_dim=N_LAGS * (D + N_ACTIONS), hidden=(8, 8))
    with torch.no_grad():
        policy.out.weight.zero_()
        policy.out.bias.zero_()
        policy.out.bias[2:] = -20.0
    return policy


def bandit_batch(actions, rewards):
    n = len(actions)
    return RolloutBatch(
        observations=np.ones((n, 2, D)),
        actions=np.asarray(actions)[:, None],
        rewards=np.asarray(rewards, dtype=float)[:, None],
        obs_lags=np.ones((n, 1, N_LAGS, D)),
        act_lags=np.full((n, 1, N_LAGS), NO_ACTION),
    )


def random_batch(n, horizon, seed):
    rng = np.random.default_rng(seed)
    act_lags = rng.integers(-1, N_ACTIONS, size=(n, horizon, N_LAGS))
    act_lags[:, :, 0] = NO_ACTION
    return RolloutBatch(
        observations=rng.normal(size=(n, horizon + 1, D)),
        actions=rng.integers(0, N_ACTIONS, size=(n, horizon)),
        rewards=rng.normal(size=(n, horizon)),
        obs_lags=rng.normal(size=(n, horizon, N_LAGS, D)),
        act_lags=act_lags,
    )


def p_first(policy):
    return policy.action_proba(np.ones((1, N_LAGS, D)), np.full((1, N_LAGS), NO_ACTION))[0, 0]


class TestSurrogate:
    @pytest.mark.parametrize("ratio, advantage, expected", [
        (2.0, 1.0, 1.2),
        (0.5, -1.0, -0.8),
        (2.0, -1.0, -2.0),
        (1.1, 1.0, 1.1),
    ])
    def test_clipping(self, ratio, advantage, expected):
        value = ppo_surrogate(torch.log(torch.tensor([ratio], dtype=torch.float64)),
                              torch.zeros(1, dtype=torch.float64), torch.tensor([advantage], dtype=torch.float64), 0.2)
        assert float(value) == pytest.approx(expected)

    def test_unbounded_epsilon(self):
        value = ppo_surrogate(torch.log(torch.tensor([3.0], dtype=torch.float64)),
                              torch.zeros(1, dtype=torch.float64), torch.tensor([2.0], dtype=torch.float64), float("inf"))
        assert float(value) == pytest.approx(6.0)


class TestUpdates:
    def test_reinforce_moves_toward_rewarded_action(self):
        policy = bandit_policy()
        before = p_first(policy)
        policy, loss = reinforce_update(policy, bandit_batch([0, 1], [1.0, 0.0]), lr=0.5)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert p_first(policy) > before

    def test_reinforce_bandit_converges(self):
        policy = bandit_policy()
        batch = bandit_batch([0, 1], [1.0, 0.0])
        history = [p_first(policy)]
        for _ in range(100):
            policy, _ = reinforce_update(policy, batch, lr=0.1)
            history.append(p_first(policy))
        assert history[1] > history[0] and history[-1] >= history[50]
        assert history[-1] > 0.9

    def test_reinforce_without_advantage_is_a_no_op(self):
        policy = bandit_policy()
        state = {k: v.clone() for k, v in policy.state_dict().items()}
        reinforce_update(policy, bandit_batch([0, 1], [2.0, 2.0]), lr=0.5)
        for name, value in policy.state_dict().items():
            assert torch.equal(value, state[name])

    def test_ppo_moves_toward_rewarded_action(self):
        policy = bandit_policy()
        old = init_from_bc(policy)
        before = p_first(policy)
        policy, _, state = ppo_update(policy, old, bandit_batch([0, 1, 0, 1], [1.0, 0.0, 1.0, 0.0]),
                                      PpoConfig(lr=1e-2, epochs=4, gamma=1.0))
        assert state.step == 4
        assert p_first(policy) > before

    def test_ppo_zero_learning_rate(self):
        policy = bandit_policy()
        before = p_first(policy)
        policy, _, _ = ppo_update(policy, init_from_bc(policy), bandit_batch([0, 1], [1.0, 0.0]), PpoConfig(lr=0.0))
        assert p_first(policy) == before

    def test_reinforce_gradient_matches_finite_differences(self):
        torch.manual_seed(2)
        policy = PolicyNet(history_dim=N_LAGS * (D + N_ACTIONS), hidden=(6, 5))
        batch = random_batch(n=5, horizon=3, seed=2)
        params = dict(policy.named_parameters())
        grads = dict(zip(params, torch.autograd.grad(reinforce_objective(policy, batch), list(params.values()))))

        def objective() -> float:
            with torch.no_grad():
                return float(reinforce_objective(policy, batch))

        step = 1e-6
        for name, param in params.items():
            flat = param.data.view(-1)
            for i in range(0, flat.numel(), max(1, flat.numel() // 3)):
                original = flat[i].item()
                flat[i] = original + step
                up = objective()
                flat[i] = original - step
                down = objective()
                flat[i] = original
                numeric = (up - down) / (2 * step)
                assert numeric == pytest.approx(grads[name].reshape(-1)[i].item(), rel=1e-4, abs=1e-7), name

        before = {name: p.detach().clone() for name, p in params.items()}
        reinforce_update(policy, batch, lr=0.01)
        for name, param in policy.named_parameters():
            torch.testing.assert_close(param.detach(), before[name] + 0.01 * grads[name], rtol=0, atol=1e-12)

    def test_ppo_preserves_advantage_signs(self):
        policy = bandit_policy()
        context = (np.ones((1, N_LAGS, D)), np.full((1, N_LAGS), NO_ACTION))
        before = policy.action_proba(*context)[0]
        batch = bandit_batch([0, 1, 0, 1], [1.0, 0.0, 1.0, 0.0])
        assert ppo_advantages(batch, 1.0)[:, 0].tolist() == [0.5, -0.5, 0.5, -0.5]
        policy, _, _ = ppo_update(policy, init_from_bc(policy), batch, PpoConfig(lr=1e-2, epochs=4, gamma=1.0))
        after = policy.action_proba(*context)[0]
        assert after[0] > before[0]
        assert after[1] < before[1]

    def test_surrogate_keeps_sign_of_advantage(self):
        rng = np.random.default_rng(4)
        ratio = torch.as_tensor(rng.uniform(0.01, 5.0, size=200))
        advantage = torch.as_tensor(rng.normal(size=200))
        value = ppo_surrogate(torch.log(ratio), torch.zeros(200, dtype=torch.float64), advantage, 0.2)
        assert torch.equal(torch.sign(value), torch.sign(advantage))


class TestBlending:
    def test_regimes(self):
        spec = BlendSpec()
        assert sofa_regime(np.array([0, 5, 6, 14, 15, 24]), spec).tolist() == [0, 0, 1, 1, 2, 2]
        with pytest.raises(DomainError):
            sofa_regime(np.array([25.0]), spec)
        with pytest.raises(DomainError):
            sofa_regime(np.array([np.nan]), spec)

    def test_routes_by_current_sofa(self, two_feature_schema):
        policy = blend(FixedPolicy.deterministic(0), FixedPolicy.deterministic(24), BlendSpec(), two_feature_schema)
        sofa = np.array([2.0, 10.0, 20.0])
        obs_lags = np.zeros((3, N_LAGS, D))
        obs_lags[:, 0, 0] = sofa
        obs_lags[:, 1, 0] = 10.0
        chosen = policy.action_proba(obs_lags, np.full((3, N_LAGS), NO_ACTION)).argmax(axis=1)
        assert chosen.tolist() == [0, 24, 0]

    def test_all_clinician_matches_clinician(self, synth_cohort):
        cohort, truth = synth_cohort
        clinician = truth.clinician_policy()
        spec = BlendSpec(low="clinician", medium="clinician", high="clinician")
        policy = blend(clinician, FixedPolicy.uniform(), spec, truth.schema)
        obs_lags = np.repeat(cohort[0].observations[:, None, :], N_LAGS, axis=1)
        act_lags = np.full((len(obs_lags), N_LAGS), NO_ACTION)
        np.testing.assert_array_equal(policy.action_proba(obs_lags, act_lags), clinician.action_proba(obs_lags, act_lags))

    def test_label(self):
        assert BlendSpec().label() == "Clinician / PPO / Clinician"

    def test_kl(self):
        obs_lags, act_lags = np.zeros((4, N_LAGS, D)), np.full((4, N_LAGS), NO_ACTION)
        uniform = FixedPolicy.uniform()
        assert kl_divergence(uniform, uniform, obs_lags, act_lags) == 0.0
        assert kl_divergence(uniform, FixedPolicy.deterministic(0), obs_lags, act_lags) > 0.0


@pytest.fixture(scope="module")
def fitted(synth_cohort, synth_standardizer):
    cohort, truth = synth_cohort
    model, _ = fit_dynamics(cohort[:200], cohort[200:], DynamicsConfig(model="linear"), synth_standardizer)
    bc, _ = fit_behavior(cohort[:200], cohort[200:], BcConfig(hidden=(16, 16), epochs=2), synth_standardizer)
    return cohort, truth, model, bc


class TestTraining:
    def test_rollout_collection(self, fitted):
        cohort, truth, model, bc = fitted
        batch = collect_model_rollouts(bc, model, cohort, n=12, horizon=4, seed=0, schema=truth.schema)
        assert batch.actions.shape == (12, 4)
        assert batch.obs_lags.shape == (12, 4, N_LAGS, truth.schema.d_raw)
        assert np.all(batch.act_lags[:, :, 0] == NO_ACTION)
        assert np.all((batch.start_index >= 0) & (batch.start_index < len(cohort)))
        starts = np.stack([cohort[i].observations[0] for i in batch.start_index])
        np.testing.assert_array_equal(batch.observations[:, 0], starts)

    def test_stored_log_probs_match_policy(self, fitted):
        cohort, truth, model, bc = fitted
        batch = collect_model_rollouts(bc, model, cohort, n=20, horizon=5, seed=1, schema=truth.schema)
        with torch.no_grad():
            recomputed = batch_log_proba(bc, batch).numpy()
        np.testing.assert_allclose(batch.log_probs, recomputed, rtol=0, atol=1e-10)

    def test_init_from_bc_matches_clone(self, fitted):
        cohort, truth, model, bc = fitted
        rng = np.random.default_rng(5)
        d = truth.schema.d_raw
        obs_lags = np.abs(rng.normal(5.0, 3.0, size=(1000, N_LAGS, d)))
        obs_lags[:, :, truth.schema.sofa_index] = rng.integers(0, 25, size=(1000, N_LAGS))
        act_lags = rng.integers(-1, N_ACTIONS, size=(1000, N_LAGS))
        act_lags[:, 0] = NO_ACTION
        policy = init_from_bc(bc)
        assert policy is not bc
        np.testing.assert_array_equal(policy.action_proba(obs_lags, act_lags), bc.action_proba(obs_lags, act_lags))
        assert kl_divergence(bc, policy, obs_lags, act_lags) == 0.0
        with torch.no_grad():
            policy.out.bias.add_(1.0)
        assert not torch.equal(policy.out.bias, bc.out.bias)

    @pytest.mark.parametrize("spec", [
        BlendSpec(low=low, medium=medium, high=high)
        for low in ("clinician", "learned") for medium in ("clinician", "learned") for high in ("clinician", "learned")
    ])
    def test_blending_a_policy_with_itself(self, fitted, spec):
        cohort, truth, _, bc = fitted
        obs_lags, act_lags = cohort_lags(cohort[:30], include_current_action=False)
        blended = blend(bc, bc, spec, truth.schema)
        np.testing.assert_allclose(blended.action_proba(obs_lags, act_lags), bc.action_proba(obs_lags, act_lags),
                                   rtol=0, atol=1e-12)

    def test_zero_iterations_returns_copy(self, fitted):
        cohort, truth, model, bc = fitted
        policy, diagnostics = train_policy(bc, model, cohort, PpoConfig(iterations=0), truth.schema)
        assert diagnostics == [] and policy is not bc
        X = np.zeros((1, bc.history_dim))
        assert torch.equal(policy(torch.as_tensor(X)), bc(torch.as_tensor(X)))

    @pytest.mark.parametrize("algorithm", ["ppo", "pg"])
    def test_diagnostics_are_deterministic(self, fitted, algorithm, tmp_path):
        cohort, truth, model, bc = fitted
        config = PpoConfig(algorithm=algorithm, iterations=2, rollouts_per_iteration=16, horizon=3,
                           lr=1e-3, kl_sample_size=50, seed=3)
        reference = {k: v.clone() for k, v in bc.state_dict().items()}
        _, first = train_policy(bc, model, cohort, config, truth.schema)
        _, second = train_policy(bc, model, cohort, config, truth.schema)
        assert first == second
        assert [row["iteration"] for row in first] == [1, 2]
        assert all(row["kl"] >= -1e-12 for row in first)
        for name, value in bc.state_dict().items():
            assert torch.equal(value, reference[name])
        frame = pd.read_csv(write_diagnostics_csv(first, tmp_path / "diag.csv"))
        assert list(frame.columns) == ["iteration", "mean_return", "kl", "loss"]


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_blended_policy_beats_clinician(seed):
    cohort, truth = generate_cohort(SynthConfig(seed=seed))
    train, val = cohort[:1600], cohort[1600:]
    standardizer = fit_standardizer(cohort_observations(train))
    model, _ = fit_dynamics(train, val, DynamicsConfig(epochs=30, seed=seed), standardizer)
    bc, _ = fit_behavior(train, val, BcConfig(epochs=20, seed=seed), standardizer)
    config = PpoConfig(lr=3e-3, iterations=40, rollouts_per_iteration=256, horizon=10, seed=seed)
    learned, _ = train_policy(bc, model, train, config, truth.schema)
    clinician = truth.clinician_policy()
    blended = blend(clinician, learned, BlendSpec(), truth.schema)
    blended_value, _ = true_policy_value(truth, blended, 10_000, 0.99, seed=100 + seed)
    clinician_value, _ = true_policy_value(truth, clinician, 10_000, 0.99, seed=100 + seed)
    assert blended_value > clinician_value
