import numpy as np
import pytest

from enroll.datamodel import (ECStatement, Measurement, PatientRecord, TrialCriteria, Visit,
                              Vocabularies)
from enroll.model import EnrollModel, ModelConfig
from enroll.synthgen import GenConfig, gen_dataset

SMOKE = GenConfig(n_trials=10, n_patients=200, examples_per_trial=30, seed=11)
TINY_MODEL = ModelConfig(embed_dim=6, code_dim=5, token_dim=4, hash_buckets=7)


@pytest.fixture(scope="session")
def smoke():
    """10-trial synthetic corpus shared by the slower tests."""
    return gen_dataset(SMOKE)


@pytest.fixture(scope="session")
def smoke_vocabs(smoke):
    d = smoke.dataset
    return Vocabularies.build(d.trials.values(), d.patients.values())


DEMO = {"birth_year": "1960", "gender": "female", "country": "us", "geo": "north",
        "ethnicity": "eth1", "blood_type": "apos"}


def two_by_two():
    """A 2-statement trial and a 2-visit patient with treatments and measurements."""
    trial = TrialCriteria("T1", "glorbitis", (
        ECStatement("T1-s0", "inclusion", "diagnosis of glorbitis"),
        ECStatement("T1-s1", "exclusion", "hemoglobin below 9 g/dl"),
    ))
    patient = PatientRecord("P1", DEMO, (
        Visit("P1-v0", "2019-01-05", "DX1", ("RX1", "RX2"), (Measurement("hemoglobin", 12.5, "g/dl"),)),
        Visit("P1-v1", "2019-03-02", "DX2", ("RX1",), ()),
    ))
    return trial, patient


@pytest.fixture
def tiny():
    trial, patient = two_by_two()
    vocabs = Vocabularies.build([trial], [patient])
    model = EnrollModel(vocabs, TINY_MODEL)
    params = model.init_params(0)
    return model, params, trial, patient


def rand_params(model, seed, scale=0.7):
    rng = np.random.default_rng(seed)
    return {k: rng.normal(0, scale, v.shape) for k, v in model.init_params(0).items()}


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
