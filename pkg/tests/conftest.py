import numpy as np
import pytest

from rl_workflows.schemas import FeatureSchema, SynthConfig
from rl_workflows.data_core import Trajectory, default_schema, fit_standardizer, cohort_observations
from rl_workflows.cohort_synth import generate_cohort


TEST_BINS_PAYLOAD = {"iv_quartiles": [10.0, 20.0, 30.0], "vp_quartiles": [0.25, 0.5, 0.75]}


def make_trajectory(observations, actions, rewards=None, survived=True, patient_id="p0", doses=False):
    observations = np.asarray(observations, dtype=float)
    actions = np.asarray(actions, dtype=int)
    rewards = np.zeros(len(actions)) if rewards is None else np.asarray(rewards, dtype=float)
    iv = vp = None
    if doses:
        iv = np.array([0.0 if a // 5 == 0 else 10.0 * (a // 5) for a in actions])
        vp = np.array([0.0 if a % 5 == 0 else 0.25 * (a % 5) for a in actions])
    return Trajectory(patient_id=patient_id, observations=observations, actions=actions, rewards=rewards,
                      survived=survived, iv_doses=iv, vp_doses=vp)


@pytest.fixture
def two_feature_schema():
    return FeatureSchema(names=["sofa", "arterial_lactate"], sofa_index=0, lactate_index=1)


@pytest.fixture(scope="session")
def synth_cohort():
    cohort, truth = generate_cohort(SynthConfig(n_patients=300, seed=7))
    return cohort, truth


@pytest.fixture(scope="session")
def synth_standardizer(synth_cohort):
    cohort, _ = synth_cohort
    return fit_standardizer(cohort_observations(cohort))


@pytest.fixture
def schema():
    return default_schema()
