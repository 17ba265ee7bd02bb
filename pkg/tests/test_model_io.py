import json

import numpy as np
import pytest
import torch

from utils.artifacts import hash_payload
from utils.errors import DataError, DependencyError, ModelFormatError
from rl_workflows.schemas import BlendSpec
from rl_workflows.data_core import NO_ACTION, Standardizer
from rl_workflows.dynamics import LinearDynamics, MlpDynamics
from rl_workflows.behavior_clone import PolicyNet
from rl_workflows.policies import FixedPolicy
from rl_workflows.policy_opt import blend
from rl_workflows.model_io import VERSION, from_document, load_model, save_model, to_document

D = 3
H = 4 * (D + 25)


def standardizer():
    return Standardizer(np.array([1.0, 2.0, 3.0]), np.array([0.5, 1.0, 2.0]))


def policy_net(seed):
    torch.manual_seed(seed)
    return PolicyNet(H, hidden=(6, 5), l2=1e-3, standardizer=standardizer())


def lags(n=6, seed=0):
    rng = np.random.default_rng(seed)
    obs = np.abs(rng.normal(5.0, 3.0, size=(n, 4, D)))
    return obs, np.full((n, 4), NO_ACTION)


def test_linear_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    model = LinearDynamics(rng.normal(size=(D, H)), rng.normal(size=D), 1e-3, standardizer())
    restored = load_model(save_model(model, tmp_path / "linear.json", {"seed": 4}), "linear_dynamics")
    np.testing.assert_array_equal(restored.weights, model.weights)
    np.testing.assert_array_equal(restored.standardizer.std, model.standardizer.std)
    assert restored.ridge_lambda == model.ridge_lambda


def test_mlp_round_trip(tmp_path):
    torch.manual_seed(1)
    model = MlpDynamics(H, D, hidden=(7, 5), standardizer=standardizer())
    model.predict(np.random.default_rng(1).normal(size=(4, H)))
    restored = load_model(save_model(model, tmp_path / "mlp.json"))
    X = np.random.default_rng(2).normal(size=(5, H))
    np.testing.assert_array_equal(restored.predict(X), model.predict(X))


def test_policy_round_trip(tmp_path):
    model = policy_net(2)
    restored = load_model(save_model(model, tmp_path / "bc.json"), ("policy_net", "blended_policy"))
    assert restored.l2 == model.l2
    np.testing.assert_array_equal(restored.action_proba(*lags()), model.action_proba(*lags()))


def test_blended_round_trip(tmp_path):
    spec = BlendSpec(low="learned", medium="clinician", high="learned")
    model = blend(policy_net(3), policy_net(4), spec)
    restored = load_model(save_model(model, tmp_path / "blend.json"), "blended_policy")
    assert restored.spec == spec
    np.testing.assert_array_equal(restored.action_proba(*lags(20)), model.action_proba(*lags(20)))


def test_blend_of_fixed_policies_is_rejected():
    with pytest.raises(ModelFormatError):
        to_document(blend(FixedPolicy.uniform(), policy_net(0), BlendSpec()))


def test_wrong_kind(tmp_path):
    path = save_model(policy_net(0), tmp_path / "bc.json")
    with pytest.raises(ModelFormatError, match="expected mlp_dynamics"):
        load_model(path, "mlp_dynamics")


class TestCorruption:
    def saved(self, tmp_path):
        path = save_model(policy_net(5), tmp_path / "model.json")
        return path, json.loads(path.read_text())

    def test_edited_parameter(self, tmp_path):
        path, document = self.saved(tmp_path)
        document["parameters"]["out.bias"][0] += 1.0
        path.write_text(json.dumps(document))
        with pytest.raises(ModelFormatError, match="checksum"):
            load_model(path)

    def test_future_version(self, tmp_path):
        path, document = self.saved(tmp_path)
        document["version"] = VERSION + 1
        path.write_text(json.dumps(document))
        with pytest.raises(ModelFormatError, match="version"):
            load_model(path)

    def test_wrong_shape_with_valid_checksum(self, tmp_path):
        _, document = self.saved(tmp_path)
        document["parameters"]["out.bias"] = document["parameters"]["out.bias"][:-1]
        document["checksum"] = hash_payload({k: v for k, v in document.items() if k != "checksum"})
        with pytest.raises(ModelFormatError, match="shape"):
            from_document(document)

    def test_truncated_file(self, tmp_path):
        path, _ = self.saved(tmp_path)
        path.write_text(path.read_text()[:100])
        with pytest.raises(ModelFormatError, match="not valid JSON") as info:
            load_model(path)
        assert info.value.exit_code == DataError.exit_code

    def test_not_a_model(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text('{"hello": 1}')
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DependencyError):
            load_model(tmp_path / "absent.json")
